#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "comma/encoders.hpp"
#include "comma/harness/config.hpp"
#include "comma/harness/dataset.hpp"
#include "comma/harness/protocol.hpp"
#include "comma/objectives.hpp"
#include "comma/prompting.hpp"

namespace comma {

/// Frozen backbone plus the learnable prompts of one strategy.
struct Model {
  Backbone backbone;
  PromptSet prompts;
  std::vector<int> template_ids;
  ReferencePromptBank reference;

  int layers() const { return backbone.text_config.layers; }

  PromptSchedule schedule() const { return build_prompt_schedule(prompts); }

  /// Class text embeddings for the given captions. With `traces`, the text
  /// passes are recorded for the distillation term.
  std::vector<Tensor> text_embeddings(const std::vector<std::vector<int>>& captions,
                                      const PromptSchedule& sched,
                                      std::vector<EncoderTrace>* traces = nullptr) const {
    std::vector<Tensor> out;
    out.reserve(captions.size());
    if (traces) traces->assign(captions.size(), {});
    for (std::size_t c = 0; c < captions.size(); ++c) {
      out.push_back(encode_text(backbone, captions[c], sched.text, traces ? &(*traces)[c] : nullptr));
    }
    return out;
  }

  Tensor image_embedding(const Image& img, const PromptSchedule& sched) const {
    return encode_image(backbone, img, sched.vision);
  }
};

inline Model build_model(const RunConfig& cfg, std::uint64_t seed) {
  Model m;
  m.backbone = cached_pretrained_backbone(cfg.vision, cfg.text, cfg.pretrain());
  m.backbone.temperature = cfg.temperature;
  m.template_ids = template_tokens(cfg.data.template_length);
  m.prompts = make_prompt_set(cfg.strategy, cfg.effective_depth(), cfg.length, m.template_ids,
                              m.backbone, mix_seed(seed, 0x9705), cfg.attention_scale);
  m.reference = capture_reference_prompts(m.backbone, m.template_ids);
  return m;
}

/// Mean cosine similarity, at text layer `s`, between the pooled prompt rows
/// and the reference pool. Averaged over captions, since beyond the prompt
/// depth the prompt rows depend on the caption.
inline Tensor layer_kd(const std::vector<EncoderTrace>& traces, const ReferencePromptBank& bank,
                       std::size_t s) {
  std::vector<Tensor> sims;
  sims.reserve(traces.size());
  for (const auto& t : traces) sims.push_back(kd_loss(prompt_rows_at(t, s), bank.at(s)));
  return mean(concat_flat(sims));
}

/// Top-1 accuracy, in percent, of classifying `examples` among `classes`.
inline double accuracy(const Model& m, const std::vector<Example>& examples, const std::vector<int>& classes,
                       const std::vector<std::vector<int>>& captions) {
  if (examples.empty()) throw DataError("evaluation split is empty");
  if (classes.empty()) throw DataError("evaluation class set is empty");
  NoGradGuard no_grad;
  auto sched = m.schedule();
  std::vector<std::vector<int>> class_captions;
  for (int c : classes) class_captions.push_back(captions.at(static_cast<std::size_t>(c)));
  auto z = m.text_embeddings(class_captions, sched);
  std::size_t correct = 0;
  for (const auto& ex : examples) {
    auto pos = std::find(classes.begin(), classes.end(), ex.label);
    if (pos == classes.end()) {
      throw DataError("example of class " + std::to_string(ex.label) + " outside the evaluated class set");
    }
    auto logits = class_logits(m.image_embedding(ex.image, sched), z, m.backbone.temperature);
    auto d = logits.data();
    const auto best = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
    if (best == static_cast<std::size_t>(pos - classes.begin())) ++correct;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(examples.size());
}

struct EvalResult {
  double base = 0.0;
  double novel = 0.0;
  double hm = 0.0;
};

/// Base classes are scored among base classes and novel classes among novel
/// classes; novel captions reuse the learned prompts with their own class
/// tokens, with no parameter touched.
inline EvalResult evaluate(const Model& m, const Dataset& ds, const SplitPlan& split) {
  EvalResult r;
  r.base = accuracy(m, filter_classes(ds.test, split.base), split.base, ds.captions);
  r.novel = accuracy(m, filter_classes(ds.test, split.novel), split.novel, ds.captions);
  r.hm = harmonic_mean(r.base, r.novel);
  return r;
}

/// Accuracy over every class of a dataset.
inline double evaluate_all(const Model& m, const Dataset& ds) {
  std::vector<int> classes(static_cast<std::size_t>(ds.spec.num_classes));
  for (int c = 0; c < ds.spec.num_classes; ++c) classes[c] = c;
  return accuracy(m, ds.test, classes, ds.captions);
}

inline void require_compatible(const Model& m, const DatasetSpec& spec) {
  const auto& vc = m.backbone.vision_config;
  const auto& tc = m.backbone.text_config;
  if (spec.vocab_size != tc.vocab_size || spec.seq_len != tc.seq_len) {
    throw ConfigError("dataset vocabulary/sequence length does not match the model");
  }
  if (spec.image_side != vc.image_side || spec.channels != vc.channels) {
    throw ConfigError("dataset image shape does not match the model");
  }
  if (template_tokens(spec.template_length) != m.template_ids) {
    throw ConfigError("dataset template differs from the model's template");
  }
}

/// Evaluates a trained model, unchanged, on each target dataset (all of its
/// classes). Throws if any backbone or prompt value moved.
inline std::vector<double> cross_dataset_eval(const Model& m, const std::vector<DatasetSpec>& targets) {
  const auto before = m.backbone.checksum();
  Fnv1a ph;
  for (const auto& p : m.prompts.parameters()) ph.update(p.data());
  const auto prompts_before = ph.digest();
  std::vector<double> out;
  for (const auto& spec : targets) {
    require_compatible(m, spec);
    out.push_back(evaluate_all(m, gen_synth_dataset(spec)));
  }
  Fnv1a after;
  for (const auto& p : m.prompts.parameters()) after.update(p.data());
  if (m.backbone.checksum() != before || after.digest() != prompts_before) {
    throw ContractError("cross-dataset evaluation modified model parameters");
  }
  return out;
}

enum class ShiftKind { PixelNoise, Contrast, TokenDropout };

inline std::string_view to_string(ShiftKind k) {
  switch (k) {
    case ShiftKind::PixelNoise: return "pixel_noise";
    case ShiftKind::Contrast: return "contrast";
    case ShiftKind::TokenDropout: return "token_dropout";
  }
  return "?";
}

inline ShiftKind parse_shift_kind(std::string_view name) {
  if (name == "pixel_noise") return ShiftKind::PixelNoise;
  if (name == "contrast") return ShiftKind::Contrast;
  if (name == "token_dropout") return ShiftKind::TokenDropout;
  throw ConfigError("unknown shift kind '" + std::string(name) + "'");
}

/// A magnitude of 0 is the identity for every kind:
///   pixel_noise    adds N(0, m^2) to every pixel
///   contrast       scales pixels by (1 - m), m in [0, 1)
///   token_dropout  replaces each template word of the class captions by
///                  padding with probability m; class tokens are kept
struct Shift {
  ShiftKind kind = ShiftKind::PixelNoise;
  double magnitude = 0.0;
  std::uint64_t seed = 0;
};

inline Dataset apply_shift(const Dataset& source, const Shift& shift) {
  if (!(shift.magnitude >= 0.0)) throw ConfigError("shift magnitude must be >= 0");
  Dataset out = source;
  Rng rng(mix_seed(shift.seed, 0x5417 + static_cast<std::uint64_t>(shift.kind)));
  switch (shift.kind) {
    case ShiftKind::PixelNoise:
      for (auto& ex : out.test) {
        auto noise = normal_values(rng, ex.image.pixels.size(), 1.0);
        for (std::size_t i = 0; i < noise.size(); ++i) ex.image.pixels[i] += shift.magnitude * noise[i];
      }
      break;
    case ShiftKind::Contrast:
      if (shift.magnitude >= 1.0) throw ConfigError("contrast shift magnitude must be < 1");
      for (auto& ex : out.test) {
        for (auto& p : ex.image.pixels) p *= 1.0 - shift.magnitude;
      }
      break;
    case ShiftKind::TokenDropout: {
      if (shift.magnitude > 1.0) throw ConfigError("token dropout probability must be <= 1");
      std::uniform_real_distribution<double> u(0.0, 1.0);
      const auto tlen = static_cast<std::size_t>(source.spec.template_length);
      for (auto& cap : out.captions) {
        for (std::size_t i = 0; i < tlen; ++i) {
          if (u(rng) < shift.magnitude) cap[i] = kPadToken;
        }
      }
      for (auto& ex : out.test) ex.tokens = out.captions.at(static_cast<std::size_t>(ex.label));
      break;
    }
  }
  return out;
}

inline double domain_shift_eval(const Model& m, const Dataset& source, const Shift& shift) {
  return evaluate_all(m, apply_shift(source, shift));
}

}  // namespace comma
