#pragma once

// Plain-loop forward passes used as independent oracles for the encoders.
// Nothing here touches the autograd graph.

#include <cmath>
#include <vector>

#include "comma/encoders.hpp"

namespace comma::testing {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t[i * t.cols() + j];
  return m;
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat plus_bias(Mat a, const std::vector<double>& b) {
  for (auto& r : a)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  return a;
}

inline Mat plus(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat ln(const Mat& x, const std::vector<double>& g, const std::vector<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= n;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j)
      y[i][j] = g[j] * (x[i][j] - mu) / std::sqrt(var + 1e-5) + b[j];
  }
  return y;
}

inline Mat layer_forward(const TransformerLayerParams& p, const Mat& x) {
  const std::size_t d = x[0].size(), heads = p.heads, dh = d / heads;
  Mat h = ln(x, to_vec(p.ln1_gain), to_vec(p.ln1_bias));
  Mat q = plus_bias(mm(h, to_mat(p.wq)), to_vec(p.bq));
  Mat k = plus_bias(mm(h, to_mat(p.wk)), to_vec(p.bk));
  Mat v = plus_bias(mm(h, to_mat(p.wv)), to_vec(p.bv));
  Mat att(x.size(), std::vector<double>(d, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::vector<double> s(x.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < x.size(); ++j) {
        double dotp = 0;
        for (std::size_t c = 0; c < dh; ++c) dotp += q[i][hd * dh + c] * k[j][hd * dh + c];
        s[j] = dotp / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < x.size(); ++j)
        for (std::size_t c = 0; c < dh; ++c) att[i][hd * dh + c] += s[j] / z * v[j][hd * dh + c];
    }
  }
  Mat r = plus(x, plus_bias(mm(att, to_mat(p.wo)), to_vec(p.bo)));
  Mat m = plus_bias(mm(ln(r, to_vec(p.ln2_gain), to_vec(p.ln2_bias)), to_mat(p.w1)), to_vec(p.b1));
  for (auto& row : m)
    for (auto& e : row) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
  return plus(r, plus_bias(mm(m, to_mat(p.w2)), to_vec(p.b2)));
}

inline std::vector<double> head_forward(const ProjectionHead& head, const std::vector<double>& tok) {
  Mat y = mm(ln(Mat{tok}, to_vec(head.gain), to_vec(head.bias)), to_mat(head.proj));
  return y[0];
}

// Vision forward with optional per-layer prompts (same insertion rule).
inline std::vector<double> reference_image(const Backbone& b, const Image& img,
                                           const std::vector<Tensor>& prompts = {}) {
  const auto& vc = b.vision_config;
  const int ps = vc.patch_size, per = vc.image_side / ps;
  Mat x;
  x.push_back(to_vec(b.vision.class_token));
  Mat patches;
  for (int py = 0; py < per; ++py)
    for (int px = 0; px < per; ++px) {
      std::vector<double> p;
      for (int dy = 0; dy < ps; ++dy)
        for (int dx = 0; dx < ps; ++dx)
          for (int c = 0; c < vc.channels; ++c) p.push_back(img.at(py * ps + dy, px * ps + dx, c));
      patches.push_back(p);
    }
  for (auto& r : mm(patches, to_mat(b.vision.patch_proj))) x.push_back(r);
  x = plus(x, to_mat(b.vision.positions));
  std::size_t np = 0;
  for (std::size_t i = 0; i < b.vision.layers.size(); ++i) {
    if (i < prompts.size() && prompts[i].defined()) {
      Mat nx = to_mat(prompts[i]);
      nx.insert(nx.end(), x.begin() + np, x.end());
      x = nx;
      np = prompts[i].rows();
    }
    x = layer_forward(b.vision.layers[i], x);
  }
  return head_forward(b.vision.head, x[np]);
}

inline std::vector<double> reference_text(const Backbone& b, const std::vector<int>& ids,
                                          const std::vector<Tensor>& prompts = {}) {
  Mat table = to_mat(b.text.token_table), pos = to_mat(b.text.positions);
  Mat x;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto r = table[ids[i]];
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += pos[i][j];
    x.push_back(r);
  }
  std::size_t np = 0;
  for (std::size_t i = 0; i < b.text.layers.size(); ++i) {
    if (i < prompts.size() && prompts[i].defined()) {
      Mat nx = to_mat(prompts[i]);
      nx.insert(nx.end(), x.begin() + np, x.end());
      x = nx;
      np = prompts[i].rows();
    }
    x = layer_forward(b.text.layers[i], x);
  }
  return head_forward(b.text.head, x.back());
}

}  // namespace comma::testing
