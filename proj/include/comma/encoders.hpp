#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "comma/hash.hpp"
#include "comma/numerics/ops.hpp"
#include "comma/rng.hpp"

namespace comma {

struct VisionEncoderConfig {
  int image_side = 8;
  int channels = 3;
  int patch_size = 2;
  int width = 32;  // d_v
  int layers = 6;  // K
  int heads = 2;
  int joint_width = 16;

  int patches_per_side() const { return image_side / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int tokens() const { return 1 + num_patches(); }

  void validate() const {
    if (image_side <= 0 || channels <= 0 || patch_size <= 0 || width <= 0 || layers <= 0 ||
        heads <= 0 || joint_width <= 0) {
      throw ConfigError("vision config: all extents must be positive");
    }
    if (image_side % patch_size != 0) {
      throw DimensionError("vision config: image side " + std::to_string(image_side) +
                           " not divisible by patch size " + std::to_string(patch_size));
    }
    if (width % heads != 0) throw ConfigError("vision config: width not divisible by heads");
  }
};

struct TextEncoderConfig {
  int vocab_size = 64;
  int seq_len = 8;  // N
  int width = 24;   // d_l
  int layers = 6;   // K
  int heads = 2;
  int joint_width = 16;

  void validate() const {
    if (vocab_size <= 0 || seq_len < 1 || width <= 0 || layers <= 0 || heads <= 0 ||
        joint_width <= 0) {
      throw ConfigError("text config: all extents must be positive");
    }
    if (width % heads != 0) throw ConfigError("text config: width not divisible by heads");
  }
};

/// H×W×C image, row-major with channels innermost.
struct Image {
  int side = 0;
  int channels = 0;
  std::vector<double> pixels;

  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * side + x) * channels + c]; }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * side + x) * channels + c];
  }
};

/// Splits an image into non-overlapping square patches in row-major patch
/// order; each row holds one patch flattened as (dy, dx, channel).
inline Tensor patchify(const Image& image, int patch_size) {
  if (patch_size <= 0 || image.side % patch_size != 0) {
    throw DimensionError("patchify: side " + std::to_string(image.side) +
                         " not divisible by patch " + std::to_string(patch_size));
  }
  if (image.pixels.size() !=
      static_cast<std::size_t>(image.side) * image.side * image.channels) {
    throw DimensionError("patchify: pixel buffer does not match image extents");
  }
  const int per_side = image.side / patch_size;
  const std::size_t dim = static_cast<std::size_t>(patch_size) * patch_size * image.channels;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(per_side) * per_side * dim);
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px)
      for (int dy = 0; dy < patch_size; ++dy)
        for (int dx = 0; dx < patch_size; ++dx)
          for (int c = 0; c < image.channels; ++c)
            out.push_back(image.at(py * patch_size + dy, px * patch_size + dx, c));
  return Tensor::matrix(static_cast<std::size_t>(per_side) * per_side, dim, std::move(out));
}

/// Inverse of patchify.
inline Image unpatchify(const Tensor& patches, int side, int channels, int patch_size) {
  Image image{side, channels, std::vector<double>(static_cast<std::size_t>(side) * side * channels)};
  const int per_side = side / patch_size;
  std::size_t k = 0;
  for (int py = 0; py < per_side; ++py)
    for (int px = 0; px < per_side; ++px)
      for (int dy = 0; dy < patch_size; ++dy)
        for (int dx = 0; dx < patch_size; ++dx)
          for (int c = 0; c < channels; ++c)
            image.at(py * patch_size + dy, px * patch_size + dx, c) = patches[k++];
  return image;
}

/// Pre-norm transformer block parameters: attention then GELU MLP, both residual.
struct TransformerLayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
  int heads = 1;

  int width() const { return static_cast<int>(wq.shape()[0]); }

  std::vector<Tensor> parameters() const {
    return {ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo,
            ln2_gain, ln2_bias, w1, b1, w2, b2};
  }

  static TransformerLayerParams random(int width, int heads, Rng& rng) {
    const auto d = static_cast<std::size_t>(width);
    const double s = 1.0 / std::sqrt(static_cast<double>(width));
    auto mat = [&](std::size_t r, std::size_t c, double sd) {
      return Tensor::matrix(r, c, normal_values(rng, r * c, sd));
    };
    TransformerLayerParams p;
    p.heads = heads;
    p.ln1_gain = Tensor::filled({d}, 1.0);
    p.ln1_bias = Tensor::zeros({d});
    p.wq = mat(d, d, s);
    p.bq = Tensor::zeros({d});
    p.wk = mat(d, d, s);
    p.bk = Tensor::zeros({d});
    p.wv = mat(d, d, s);
    p.bv = Tensor::zeros({d});
    p.wo = mat(d, d, s);
    p.bo = Tensor::zeros({d});
    p.ln2_gain = Tensor::filled({d}, 1.0);
    p.ln2_bias = Tensor::zeros({d});
    p.w1 = mat(d, 4 * d, s);
    p.b1 = Tensor::zeros({4 * d});
    p.w2 = mat(4 * d, d, 0.5 * s);
    p.b2 = Tensor::zeros({d});
    return p;
  }
};

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}

/// Multi-head scaled dot-product self-attention over the rows of x (no mask).
inline Tensor attention_block(const TransformerLayerParams& p, const Tensor& x) {
  const auto d = static_cast<std::size_t>(p.width());
  const auto dh = d / static_cast<std::size_t>(p.heads);
  auto q = linear(x, p.wq, p.bq);
  auto k = linear(x, p.wk, p.bk);
  auto v = linear(x, p.wv, p.bv);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  heads.reserve(p.heads);
  for (std::size_t h = 0; h < static_cast<std::size_t>(p.heads); ++h) {
    auto qh = slice_cols(q, h * dh, dh);
    auto kh = slice_cols(k, h * dh, dh);
    auto vh = slice_cols(v, h * dh, dh);
    auto weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    heads.push_back(matmul(weights, vh));
  }
  auto merged = p.heads == 1 ? heads.front() : concat_cols(heads);
  return linear(merged, p.wo, p.bo);
}

inline Tensor transformer_layer(const TransformerLayerParams& p, const Tensor& tokens) {
  if (tokens.rank() != 2 || tokens.shape()[1] != static_cast<std::size_t>(p.width())) {
    throw DimensionError("transformer_layer: tokens " + shape_str(tokens.shape()) +
                         " for layer width " + std::to_string(p.width()));
  }
  auto h = add(tokens, attention_block(p, layer_norm(tokens, p.ln1_gain, p.ln1_bias)));
  auto mlp = linear(gelu(linear(layer_norm(h, p.ln2_gain, p.ln2_bias), p.w1, p.b1)), p.w2, p.b2);
  return add(h, mlp);
}

/// Replaces the first `current_prompt_rows` rows (the previous layer's prompt
/// outputs, if any) with fresh prompt rows.
inline Tensor insert_prompts(const Tensor& tokens, const Tensor& prompt_rows,
                             std::size_t current_prompt_rows) {
  if (prompt_rows.rank() != 2 || prompt_rows.shape()[1] != tokens.shape()[1]) {
    throw DimensionError("insert_prompts: prompt rows " + shape_str(prompt_rows.shape()) +
                         " for tokens " + shape_str(tokens.shape()));
  }
  const std::size_t keep = tokens.shape()[0] - current_prompt_rows;
  return concat_rows({prompt_rows, slice_rows(tokens, current_prompt_rows, keep)});
}

/// Per-layer prompt rows for each branch. An undefined tensor (or a layer
/// index past the end) means no fresh prompts enter that layer.
struct PromptSchedule {
  std::vector<Tensor> vision;
  std::vector<Tensor> text;

  static const Tensor* at(const std::vector<Tensor>& layers, std::size_t i) {
    return i < layers.size() && layers[i].defined() ? &layers[i] : nullptr;
  }
};

/// Token matrices entering each layer (after prompt insertion) and the number
/// of leading prompt rows in each.
struct EncoderTrace {
  std::vector<Tensor> layer_inputs;
  std::vector<std::size_t> prompt_rows;
  Tensor final_tokens;
};

struct ProjectionHead {
  Tensor gain, bias;  // final layer norm
  Tensor proj;        // width × joint_width

  Tensor apply(const Tensor& token) const {
    auto row_mat = reshape(token, {1, token.numel()});
    auto normed = layer_norm(row_mat, gain, bias);
    return reshape(matmul(normed, proj), {proj.shape()[1]});
  }
};

struct VisionTower {
  Tensor patch_proj;   // patch_dim × d_v
  Tensor class_token;  // d_v
  Tensor positions;    // (1 + num_patches) × d_v
  std::vector<TransformerLayerParams> layers;
  ProjectionHead head;
};

struct TextTower {
  Tensor token_table;  // vocab × d_l
  Tensor positions;    // N × d_l
  std::vector<TransformerLayerParams> layers;
  ProjectionHead head;
};

/// Frozen dual-encoder backbone.
struct Backbone {
  VisionEncoderConfig vision_config;
  TextEncoderConfig text_config;
  VisionTower vision;
  TextTower text;
  double temperature = 0.07;

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out{vision.patch_proj, vision.class_token, vision.positions};
    for (const auto& l : vision.layers) {
      auto ps = l.parameters();
      out.insert(out.end(), ps.begin(), ps.end());
    }
    out.insert(out.end(), {vision.head.gain, vision.head.bias, vision.head.proj});
    out.insert(out.end(), {text.token_table, text.positions});
    for (const auto& l : text.layers) {
      auto ps = l.parameters();
      out.insert(out.end(), ps.begin(), ps.end());
    }
    out.insert(out.end(), {text.head.gain, text.head.bias, text.head.proj});
    return out;
  }

  /// Bit-level checksum over every parameter value and the temperature.
  std::uint64_t checksum() const {
    Fnv1a h;
    for (const auto& p : parameters()) h.update(p.data());
    h.update(&temperature, sizeof temperature);
    return h.digest();
  }

  static Backbone random(const VisionEncoderConfig& vc, const TextEncoderConfig& tc,
                         std::uint64_t seed) {
    vc.validate();
    tc.validate();
    if (vc.layers != tc.layers) throw ConfigError("vision and text towers must share depth K");
    if (vc.joint_width != tc.joint_width) throw ConfigError("towers must share joint width");
    Rng rng(seed);
    Backbone b;
    b.vision_config = vc;
    b.text_config = tc;
    const auto dv = static_cast<std::size_t>(vc.width), dl = static_cast<std::size_t>(tc.width);
    const auto dj = static_cast<std::size_t>(vc.joint_width);
    const auto pd = static_cast<std::size_t>(vc.patch_dim());
    b.vision.patch_proj = Tensor::matrix(pd, dv, normal_values(rng, pd * dv, 1.0 / std::sqrt(double(pd))));
    b.vision.class_token = Tensor::vector(normal_values(rng, dv, 1.0));
    b.vision.positions = Tensor::matrix(vc.tokens(), dv, normal_values(rng, vc.tokens() * dv, 0.5));
    for (int i = 0; i < vc.layers; ++i) {
      b.vision.layers.push_back(TransformerLayerParams::random(vc.width, vc.heads, rng));
    }
    b.vision.head = {Tensor::filled({dv}, 1.0), Tensor::zeros({dv}),
                     Tensor::matrix(dv, dj, normal_values(rng, dv * dj, 1.0 / std::sqrt(double(dv))))};
    const auto vocab = static_cast<std::size_t>(tc.vocab_size);
    const auto n = static_cast<std::size_t>(tc.seq_len);
    b.text.token_table = Tensor::matrix(vocab, dl, normal_values(rng, vocab * dl, 1.0));
    b.text.positions = Tensor::matrix(n, dl, normal_values(rng, n * dl, 0.1));
    for (int i = 0; i < tc.layers; ++i) {
      b.text.layers.push_back(TransformerLayerParams::random(tc.width, tc.heads, rng));
    }
    b.text.head = {Tensor::filled({dl}, 1.0), Tensor::zeros({dl}),
                   Tensor::matrix(dl, dj, normal_values(rng, dl * dj, 1.0 / std::sqrt(double(dl))))};
    return b;
  }
};

namespace detail {

inline Tensor run_tower(const std::vector<TransformerLayerParams>& layers, Tensor x,
                        const std::vector<Tensor>& prompts, std::size_t& prompt_rows,
                        EncoderTrace* trace) {
  prompt_rows = 0;
  if (prompts.size() > layers.size()) {
    throw ConfigError("prompt schedule deeper than the encoder");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (const Tensor* p = PromptSchedule::at(prompts, i)) {
      x = insert_prompts(x, *p, prompt_rows);
      prompt_rows = p->shape()[0];
    }
    if (trace) {
      trace->layer_inputs.push_back(x);
      trace->prompt_rows.push_back(prompt_rows);
    }
    x = transformer_layer(layers[i], x);
  }
  if (trace) trace->final_tokens = x;
  return x;
}

}  // namespace detail

/// Image embedding in the joint space: the projection head applied to the
/// class-token output of the last layer.
inline Tensor encode_image(const Backbone& b, const Image& image,
                           const std::vector<Tensor>& vision_prompts = {},
                           EncoderTrace* trace = nullptr) {
  const auto& vc = b.vision_config;
  if (image.side != vc.image_side || image.channels != vc.channels) {
    throw DimensionError("encode_image: image " + std::to_string(image.side) + "x" +
                         std::to_string(image.side) + "x" + std::to_string(image.channels) +
                         " does not match encoder config");
  }
  auto patches = matmul(patchify(image, vc.patch_size), b.vision.patch_proj);
  auto tokens = add(concat_rows({b.vision.class_token, patches}), b.vision.positions);
  std::size_t prompt_rows = 0;
  auto out = detail::run_tower(b.vision.layers, tokens, vision_prompts, prompt_rows, trace);
  return b.vision.head.apply(row(out, prompt_rows));
}

/// Text embedding in the joint space from the last token of the final layer.
inline Tensor encode_text(const Backbone& b, std::span<const int> token_ids,
                          const std::vector<Tensor>& text_prompts = {},
                          EncoderTrace* trace = nullptr) {
  const auto& tc = b.text_config;
  if (token_ids.size() != static_cast<std::size_t>(tc.seq_len)) {
    throw DimensionError("encode_text: expected " + std::to_string(tc.seq_len) + " tokens, got " +
                         std::to_string(token_ids.size()));
  }
  auto tokens = add(embedding(b.text.token_table, token_ids), b.text.positions);
  std::size_t prompt_rows = 0;
  auto out = detail::run_tower(b.text.layers, tokens, text_prompts, prompt_rows, trace);
  return b.text.head.apply(row(out, out.shape()[0] - 1));
}

}  // namespace comma
