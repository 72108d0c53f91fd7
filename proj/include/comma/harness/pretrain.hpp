#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "comma/encoders.hpp"
#include "comma/harness/dataset.hpp"

namespace comma {

/// Recipe for the stand-in "pretrained" dual encoder: random frozen towers
/// whose projection heads are fitted contrastively on every class of the
/// synthetic world, captioned with the shared template.
struct PretrainSpec {
  std::uint64_t backbone_seed = 0;
  std::uint64_t world_seed = 0;
  int template_length = 7;
  int images_per_class = 16;
  double pixel_noise = 0.5;
  int steps = 2000;
  double lr = 0.5;
  double momentum = 0.9;

  auto key() const {
    return std::make_tuple(backbone_seed, world_seed, template_length, images_per_class, pixel_noise,
                           steps, lr, momentum);
  }
};

namespace detail {

inline Tensor stack_rows(const std::vector<Tensor>& rows) {
  std::vector<Tensor> mats;
  mats.reserve(rows.size());
  for (const auto& r : rows) mats.push_back(reshape(r, {1, r.numel()}));
  return concat_rows(mats);
}

/// Fits both projection matrices by gradient descent with momentum on the
/// symmetric contrastive loss over precomputed (layer-normed) features.
inline void fit_projection_heads(Backbone& b, const Tensor& image_feats,
                                 const std::vector<std::size_t>& image_labels, const Tensor& text_feats,
                                 const PretrainSpec& spec) {
  Tensor wv = b.vision.head.proj.clone(true);
  Tensor wt = b.text.head.proj.clone(true);
  std::vector<Tensor> params{wv, wt};
  std::vector<std::vector<double>> velocity{std::vector<double>(wv.numel()),
                                            std::vector<double>(wt.numel())};
  const double inv_tau = 1.0 / b.temperature;
  // Text-to-image direction uses the first image of each class as its positive.
  const auto nclass = text_feats.shape()[0];
  std::vector<std::size_t> first_of(nclass, 0);
  for (std::size_t i = image_labels.size(); i-- > 0;) first_of[image_labels[i]] = i;
  std::vector<std::size_t> text_labels(nclass);
  for (std::size_t c = 0; c < nclass; ++c) text_labels[c] = first_of[c];
  std::vector<std::size_t> class_ids(nclass);
  for (std::size_t c = 0; c < nclass; ++c) class_ids[c] = c;
  for (int step = 0; step < spec.steps; ++step) {
    auto x = normalize_rows(matmul(image_feats, wv));
    auto z = normalize_rows(matmul(text_feats, wt));
    auto logits = scale(matmul(x, transpose(z)), inv_tau);
    auto loss = add(cross_entropy_rows(logits, image_labels),
                    cross_entropy_rows(transpose(logits), text_labels));
    backward(loss, params);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto values = params[p].mutable_data();
      auto g = params[p].grad();
      for (std::size_t i = 0; i < values.size(); ++i) {
        velocity[p][i] = spec.momentum * velocity[p][i] - spec.lr * g[i];
        values[i] += velocity[p][i];
      }
      params[p].zero_grad();
    }
  }
  b.vision.head.proj = wv.detach();
  b.text.head.proj = wt.detach();
}

}  // namespace detail

inline Backbone pretrain_backbone(const VisionEncoderConfig& vc, const TextEncoderConfig& tc,
                                  const PretrainSpec& spec) {
  Backbone b = Backbone::random(vc, tc, spec.backbone_seed);
  const int world_classes = tc.vocab_size - kFirstClassToken;
  if (world_classes < 2) throw ConfigError("vocabulary leaves fewer than 2 world classes");
  const auto tmpl = template_tokens(spec.template_length);
  const auto npix = static_cast<std::size_t>(vc.image_side) * vc.image_side * vc.channels;

  std::vector<Tensor> image_rows, text_rows;
  std::vector<std::size_t> labels;
  {
    NoGradGuard no_grad;
    auto pre_head = [](const Tensor& tokens, std::size_t r, const ProjectionHead& h) {
      auto t = row(tokens, r);
      return reshape(layer_norm(reshape(t, {1, t.numel()}), h.gain, h.bias), {t.numel()});
    };
    Rng rng(mix_seed(spec.world_seed, 0x9e7));
    for (int c = 0; c < world_classes; ++c) {
      const int token = kFirstClassToken + c;
      auto proto = world_prototype(spec.world_seed, token, vc.image_side, vc.channels);
      for (int k = 0; k < spec.images_per_class; ++k) {
        Image img = proto;
        auto noise = normal_values(rng, npix, spec.pixel_noise);
        for (std::size_t i = 0; i < npix; ++i) img.pixels[i] += noise[i];
        EncoderTrace trace;
        encode_image(b, img, {}, &trace);
        image_rows.push_back(pre_head(trace.final_tokens, 0, b.vision.head));
        labels.push_back(static_cast<std::size_t>(c));
      }
      EncoderTrace trace;
      auto ids = caption_tokens(tmpl, token, tc.seq_len);
      encode_text(b, ids, {}, &trace);
      text_rows.push_back(
          pre_head(trace.final_tokens, trace.final_tokens.shape()[0] - 1, b.text.head));
    }
  }
  detail::fit_projection_heads(b, detail::stack_rows(image_rows), labels, detail::stack_rows(text_rows),
                               spec);
  return b;
}

/// Process-wide cache: pretraining is deterministic, so every run with the
/// same recipe shares one frozen backbone.
inline Backbone cached_pretrained_backbone(const VisionEncoderConfig& vc, const TextEncoderConfig& tc,
                                           const PretrainSpec& spec) {
  using Key = std::tuple<int, int, int, int, int, int, int, int, int, int, int, int, int,
                         decltype(spec.key())>;
  static std::mutex mu;
  static std::map<Key, Backbone> cache;
  Key key{vc.image_side, vc.channels, vc.patch_size, vc.width, vc.layers, vc.heads, vc.joint_width,
          tc.vocab_size, tc.seq_len, tc.width, tc.layers, tc.heads, tc.joint_width, spec.key()};
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, pretrain_backbone(vc, tc, spec)).first;
  return it->second;
}

}  // namespace comma
