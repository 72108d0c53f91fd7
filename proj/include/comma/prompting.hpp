#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "comma/encoders.hpp"

namespace comma {

enum class PromptStrategy {
  None,             // frozen model with the hand-written template
  CoopText,         // learnable text prompts at the input layer only
  DeepIndependent,  // separate learnable prompts in both branches up to depth J
  MapleUni,         // vision prompts are a per-layer affine map of text prompts
  Comma,            // vision prompts attend over the previous layer's text prompts
};

inline std::string_view to_string(PromptStrategy s) {
  switch (s) {
    case PromptStrategy::None: return "none";
    case PromptStrategy::CoopText: return "coop_text";
    case PromptStrategy::DeepIndependent: return "deep_independent";
    case PromptStrategy::MapleUni: return "maple_uni";
    case PromptStrategy::Comma: return "comma";
  }
  return "?";
}

inline PromptStrategy parse_strategy(std::string_view name) {
  for (auto s : {PromptStrategy::None, PromptStrategy::CoopText, PromptStrategy::DeepIndependent,
                 PromptStrategy::MapleUni, PromptStrategy::Comma}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown prompt strategy '" + std::string(name) + "'");
}

/// Denominator of the correlated-attention logits: sqrt(d_v) by default, or
/// sqrt(M_p) for the prompt-length reading.
enum class AttentionScale { VisionWidth, PromptLength };

inline std::string_view to_string(AttentionScale s) {
  return s == AttentionScale::VisionWidth ? "d_v" : "m_p";
}

inline AttentionScale parse_attention_scale(std::string_view name) {
  if (name == "d_v") return AttentionScale::VisionWidth;
  if (name == "m_p") return AttentionScale::PromptLength;
  throw ConfigError("unknown attention scale '" + std::string(name) + "' (expected d_v or m_p)");
}

/// Strategy plus distillation settings.
struct StrategyConfig {
  PromptStrategy strategy = PromptStrategy::Comma;
  bool kd_enabled = true;
  double lambda = 1.0;
  int kd_layers = 2;  // S

  // S = 0 is accepted and means an empty distillation term.
  void validate(int depth_k) const {
    if (kd_enabled && (kd_layers < 0 || kd_layers > depth_k)) {
      throw ConfigError("kd layers S=" + std::to_string(kd_layers) + " outside [0, " +
                        std::to_string(depth_k) + "]");
    }
    if (kd_enabled && !(lambda >= 0.0)) throw ConfigError("kd weight lambda must be >= 0");
  }
};

inline constexpr double kPromptInitStd = 0.02;

/// Learnable prompt parameters. Which members are populated depends on the
/// strategy; under Comma the vision prompts past layer 0 are generated, never
/// stored.
struct PromptSet {
  PromptStrategy strategy = PromptStrategy::None;
  int depth = 0;   // J
  int length = 0;  // M_p
  AttentionScale attention_scale = AttentionScale::VisionWidth;

  std::vector<Tensor> text;    // J matrices M_p×d_l (one under CoopText)
  std::vector<Tensor> vision;  // DeepIndependent: J matrices M_p×d_v; Comma: the layer-0 seed
  Tensor key_proj, value_proj;             // Comma: d_l×d_v
  std::vector<Tensor> map_weight, map_bias;  // MapleUni: per layer d_l×d_v and d_v

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out(text);
    out.insert(out.end(), vision.begin(), vision.end());
    if (key_proj.defined()) out.push_back(key_proj);
    if (value_proj.defined()) out.push_back(value_proj);
    out.insert(out.end(), map_weight.begin(), map_weight.end());
    out.insert(out.end(), map_bias.begin(), map_bias.end());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.numel();
    return n;
  }

  /// Independent copy with the same values and requires_grad flags.
  PromptSet clone() const {
    PromptSet c = *this;
    auto copy_all = [](std::vector<Tensor>& ts) {
      for (auto& t : ts) t = t.clone(t.requires_grad());
    };
    copy_all(c.text);
    copy_all(c.vision);
    copy_all(c.map_weight);
    copy_all(c.map_bias);
    if (c.key_proj.defined()) c.key_proj = c.key_proj.clone(true);
    if (c.value_proj.defined()) c.value_proj = c.value_proj.clone(true);
    return c;
  }

  /// Structural consistency between the strategy and the populated members.
  void validate() const {
    auto fail = [&](const std::string& why) {
      throw ConfigError("prompt set for strategy " + std::string(to_string(strategy)) + ": " + why);
    };
    const auto j = static_cast<std::size_t>(depth);
    switch (strategy) {
      case PromptStrategy::None:
        if (!parameters().empty()) fail("expected no parameters");
        return;
      case PromptStrategy::CoopText:
        if (text.size() != 1 || !vision.empty() || key_proj.defined() || !map_weight.empty())
          fail("expected exactly one text prompt matrix");
        break;
      case PromptStrategy::DeepIndependent:
        if (text.size() != j || vision.size() != j) fail("expected J text and J vision prompts");
        break;
      case PromptStrategy::MapleUni:
        if (text.size() != j || map_weight.size() != j || map_bias.size() != j || !vision.empty())
          fail("expected J text prompts and J layer maps");
        break;
      case PromptStrategy::Comma:
        if (text.size() != j || vision.size() != 1 || !key_proj.defined() || !value_proj.defined())
          fail("expected J text prompts, one vision seed and key/value projections");
        break;
    }
    for (const auto& t : text) {
      if (t.rank() != 2 || t.shape()[0] != static_cast<std::size_t>(length))
        fail("text prompt rows must equal M_p");
    }
  }
};

/// Layer-0 text prompts copy the embeddings of the first M_p template tokens;
/// deeper layers are drawn from N(0, 0.02^2).
inline std::vector<Tensor> init_text_prompts(std::span<const int> template_ids,
                                             const Tensor& word_table, int depth, int length,
                                             std::uint64_t seed) {
  if (length < 1) throw ConfigError("prompt length M_p must be >= 1");
  if (template_ids.size() < static_cast<std::size_t>(length)) {
    throw ConfigError("template has " + std::to_string(template_ids.size()) +
                      " tokens, fewer than prompt length " + std::to_string(length));
  }
  const auto width = word_table.shape()[1];
  const auto m = static_cast<std::size_t>(length);
  std::vector<Tensor> out;
  if (depth < 1) return out;
  {
    NoGradGuard no_grad;
    auto first = embedding(word_table, template_ids.subspan(0, m));
    out.push_back(first.clone(true));
  }
  Rng rng(mix_seed(seed, 0x7e47));
  for (int i = 1; i < depth; ++i) {
    out.push_back(Tensor::matrix(m, width, normal_values(rng, m * width, kPromptInitStd), true));
  }
  return out;
}

/// Builds a freshly initialized prompt set for `strategy` on `backbone`.
inline PromptSet make_prompt_set(PromptStrategy strategy, int depth, int length,
                                 std::span<const int> template_ids, const Backbone& backbone,
                                 std::uint64_t seed,
                                 AttentionScale scale_mode = AttentionScale::VisionWidth) {
  const int k = backbone.text_config.layers;
  PromptSet ps;
  ps.strategy = strategy;
  ps.attention_scale = scale_mode;
  if (strategy == PromptStrategy::None) return ps;
  if (strategy == PromptStrategy::CoopText) depth = 1;
  if (depth < 1 || depth > k) {
    throw ConfigError("prompt depth J=" + std::to_string(depth) + " outside [1, " +
                      std::to_string(k) + "]");
  }
  if (length < 1) throw ConfigError("prompt length M_p must be >= 1");
  ps.depth = depth;
  ps.length = length;
  ps.text = init_text_prompts(template_ids, backbone.text.token_table, depth, length, seed);

  const auto m = static_cast<std::size_t>(length);
  const auto dv = static_cast<std::size_t>(backbone.vision_config.width);
  const auto dl = static_cast<std::size_t>(backbone.text_config.width);
  Rng rng(mix_seed(seed, 0x515));
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(dl));
  switch (strategy) {
    case PromptStrategy::DeepIndependent:
      for (int i = 0; i < depth; ++i) {
        ps.vision.push_back(Tensor::matrix(m, dv, normal_values(rng, m * dv, kPromptInitStd), true));
      }
      break;
    case PromptStrategy::MapleUni:
      for (int i = 0; i < depth; ++i) {
        ps.map_weight.push_back(Tensor::matrix(dl, dv, normal_values(rng, dl * dv, proj_std), true));
        ps.map_bias.push_back(Tensor::zeros({dv}, true));
      }
      break;
    case PromptStrategy::Comma:
      ps.vision.push_back(Tensor::matrix(m, dv, normal_values(rng, m * dv, kPromptInitStd), true));
      ps.key_proj = Tensor::matrix(dl, dv, normal_values(rng, dl * dv, proj_std), true);
      ps.value_proj = Tensor::matrix(dl, dv, normal_values(rng, dl * dv, proj_std), true);
      break;
    default:
      break;
  }
  return ps;
}

/// Next-layer vision prompts: the previous vision prompts query the previous
/// text prompts (projected into the vision width), attention taken along the
/// token axis.
///   A  = softmax_rows(Pv_prev · (Pl_prev W_k)^T / sqrt(scale))
///   Pv = A · (Pl_prev W_v)
inline Tensor correlated_prompts(const Tensor& vision_prev, const Tensor& text_prev,
                                 const Tensor& key_proj, const Tensor& value_proj,
                                 AttentionScale scale_mode = AttentionScale::VisionWidth) {
  if (vision_prev.rank() != 2 || text_prev.rank() != 2 ||
      vision_prev.shape()[0] != text_prev.shape()[0]) {
    throw DimensionError("correlated_prompts: vision prompts " + shape_str(vision_prev.shape()) +
                         " vs text prompts " + shape_str(text_prev.shape()));
  }
  if (key_proj.shape() != value_proj.shape() || key_proj.shape()[0] != text_prev.shape()[1] ||
      key_proj.shape()[1] != vision_prev.shape()[1]) {
    throw DimensionError("correlated_prompts: projection " + shape_str(key_proj.shape()) +
                         " does not map text width to vision width");
  }
  const double denom = scale_mode == AttentionScale::VisionWidth
                           ? static_cast<double>(vision_prev.shape()[1])
                           : static_cast<double>(vision_prev.shape()[0]);
  auto keys = matmul(text_prev, key_proj);
  auto values = matmul(text_prev, value_proj);
  auto weights = softmax(scale(matmul(vision_prev, transpose(keys)), 1.0 / std::sqrt(denom)), 1);
  return matmul(weights, values);
}

/// Row-wise affine map from text prompts to vision prompts.
inline Tensor maple_prompts(const Tensor& text_prompts, const Tensor& weight, const Tensor& bias) {
  if (text_prompts.rank() != 2 || weight.rank() != 2 ||
      text_prompts.shape()[1] != weight.shape()[0] || bias.numel() != weight.shape()[1]) {
    throw DimensionError("maple_prompts: prompts " + shape_str(text_prompts.shape()) + " with map " +
                         shape_str(weight.shape()));
  }
  return linear(text_prompts, weight, bias);
}

/// Per-layer prompt rows for both encoders.
inline PromptSchedule build_prompt_schedule(const PromptSet& ps) {
  ps.validate();
  PromptSchedule s;
  switch (ps.strategy) {
    case PromptStrategy::None:
      break;
    case PromptStrategy::CoopText:
      s.text = ps.text;
      break;
    case PromptStrategy::DeepIndependent:
      s.text = ps.text;
      s.vision = ps.vision;
      break;
    case PromptStrategy::MapleUni:
      s.text = ps.text;
      for (int i = 0; i < ps.depth; ++i) {
        s.vision.push_back(maple_prompts(ps.text[i], ps.map_weight[i], ps.map_bias[i]));
      }
      break;
    case PromptStrategy::Comma:
      s.text = ps.text;
      s.vision.push_back(ps.vision.front());
      for (int i = 1; i < ps.depth; ++i) {
        s.vision.push_back(correlated_prompts(s.vision[i - 1], ps.text[i - 1], ps.key_proj,
                                              ps.value_proj, ps.attention_scale));
      }
      break;
  }
  return s;
}

}  // namespace comma
