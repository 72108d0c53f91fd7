#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <unordered_set>
#include <vector>

#include "comma/encoders.hpp"
#include "comma/prompting.hpp"

namespace comma {

inline constexpr int kPadToken = 0;

/// Temperature-scaled cosine logits sim(x, z_j) / tau, one per class row of Z.
inline Tensor class_logits(const Tensor& image_embedding, const std::vector<Tensor>& class_embeddings,
                           double temperature) {
  if (class_embeddings.empty()) throw DataError("class_logits: no classes");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  std::vector<Tensor> sims;
  sims.reserve(class_embeddings.size());
  for (const auto& z : class_embeddings) sims.push_back(cosine_sim(image_embedding, z));
  return scale(concat_flat(sims), 1.0 / temperature);
}

/// p_j = exp(sim(x, z_j)/tau) / sum_i exp(sim(x, z_i)/tau).
inline Tensor class_scores(const Tensor& image_embedding, const std::vector<Tensor>& class_embeddings,
                           double temperature) {
  return softmax(class_logits(image_embedding, class_embeddings, temperature));
}

/// Pooled hidden states of the frozen text encoder on the hand-written
/// template, one vector per layer (taken at the layer's input).
struct ReferencePromptBank {
  std::vector<Tensor> layers;  // K vectors of width d_l
  std::vector<int> template_ids;
  std::uint64_t backbone_checksum = 0;

  const Tensor& at(std::size_t layer) const { return layers.at(layer); }
};

inline ReferencePromptBank capture_reference_prompts(const Backbone& backbone,
                                                     std::span<const int> template_ids) {
  const auto n = static_cast<std::size_t>(backbone.text_config.seq_len);
  if (template_ids.empty()) throw ConfigError("reference capture needs a non-empty template");
  if (template_ids.size() > n) {
    throw ConfigError("template of " + std::to_string(template_ids.size()) +
                      " tokens exceeds sequence length " + std::to_string(n));
  }
  std::vector<int> ids(template_ids.begin(), template_ids.end());
  ids.resize(n, kPadToken);
  NoGradGuard no_grad;
  EncoderTrace trace;
  encode_text(backbone, ids, {}, &trace);
  ReferencePromptBank bank;
  bank.template_ids.assign(template_ids.begin(), template_ids.end());
  bank.backbone_checksum = backbone.checksum();
  for (const auto& x : trace.layer_inputs) {
    bank.layers.push_back(mean_rows(slice_rows(x, 0, template_ids.size())));
  }
  return bank;
}

/// Cosine similarity between the mean-pooled prompt rows and the reference
/// vector for the same layer.
inline Tensor kd_loss(const Tensor& prompt_rows, const Tensor& reference) {
  if (prompt_rows.rank() != 2 || prompt_rows.shape()[1] != reference.numel()) {
    throw DimensionError("kd_loss: prompt rows " + shape_str(prompt_rows.shape()) +
                         " vs reference " + shape_str(reference.shape()));
  }
  auto pooled = mean_rows(prompt_rows);
  return cosine_sim(pooled, reference);
}

/// Prompt rows entering layer `s` of a traced text pass.
inline Tensor prompt_rows_at(const EncoderTrace& trace, std::size_t layer) {
  if (layer >= trace.layer_inputs.size() || trace.prompt_rows[layer] == 0) {
    throw ContractError("no prompt rows enter text layer " + std::to_string(layer));
  }
  return slice_rows(trace.layer_inputs[layer], 0, trace.prompt_rows[layer]);
}

struct LossBreakdown {
  Tensor total;  // differentiable
  double ce = 0.0;
  std::vector<double> kd_per_layer;
  double lambda = 0.0;
  int kd_layers = 0;

  double kd_penalty() const {
    double s = 0.0;
    for (double k : kd_per_layer) s += 1.0 - k;
    return s;
  }
};

/// total = ce + lambda * sum_s (1 - kd_s) over exactly S distillation terms.
inline LossBreakdown total_loss(const Tensor& ce, const std::vector<Tensor>& kd, double lambda,
                                int kd_layers) {
  if (kd.size() != static_cast<std::size_t>(kd_layers)) {
    throw ContractError("total_loss: expected " + std::to_string(kd_layers) + " kd terms, got " +
                        std::to_string(kd.size()));
  }
  LossBreakdown out;
  out.ce = ce.item();
  out.lambda = lambda;
  out.kd_layers = kd_layers;
  Tensor total = ce;
  for (const auto& k : kd) {
    out.kd_per_layer.push_back(k.item());
    total = add(total, scale(add_scalar(scale(k, -1.0), 1.0), lambda));
  }
  out.total = total;
  return out;
}

/// theta <- theta - lr * grad for every learnable; refuses to touch anything
/// that belongs to the frozen backbone.
inline void sgd_step(std::vector<Tensor>& learnables, double lr, const Backbone& frozen) {
  std::unordered_set<const detail::Node*> frozen_nodes;
  for (const auto& p : frozen.parameters()) frozen_nodes.insert(&p.node());
  for (auto& p : learnables) {
    if (frozen_nodes.count(&p.node())) {
      throw ContractError("sgd_step: a backbone parameter was passed as learnable");
    }
    if (!p.has_grad()) throw ContractError("sgd_step: learnable parameter has no gradient");
  }
  for (auto& p : learnables) {
    auto values = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * g[i];
  }
}

}  // namespace comma
