#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "comma/harness/config.hpp"
#include "comma/harness/dataset.hpp"
#include "comma/harness/model.hpp"
#include "comma/harness/protocol.hpp"
#include "comma/harness/record.hpp"
#include "comma/objectives.hpp"

namespace comma {

struct TrainedRun {
  Model model;
  Dataset dataset;
  SplitPlan split;
  RunRecord record;
};

/// Per-layer distance between the pooled text prompt rows and the reference
/// pool, averaged over the given captions.
inline std::vector<double> prompt_distances(const Model& m, const std::vector<std::vector<int>>& captions) {
  if (m.prompts.strategy == PromptStrategy::None) return {};
  NoGradGuard no_grad;
  std::vector<EncoderTrace> traces;
  m.text_embeddings(captions, m.schedule(), &traces);
  std::vector<double> out;
  for (std::size_t s = 0; s < static_cast<std::size_t>(m.layers()); ++s) {
    out.push_back(1.0 - layer_kd(traces, m.reference, s).item());
  }
  return out;
}

/// Called after every optimiser step with (epoch, step, loss breakdown).
using StepObserver = std::function<void(int, int, const LossBreakdown&)>;

/// Few-shot prompt learning on the base classes followed by base/novel
/// evaluation. Only prompt parameters are updated; a non-finite loss ends
/// training and is recorded in the status field.
inline TrainedRun train_model(const RunConfig& cfg, std::uint64_t seed, const StepObserver& observer = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  TrainedRun run;
  auto& rec = run.record;
  rec.config = cfg;
  rec.seed = seed;
  run.dataset = gen_synth_dataset(cfg.data);
  run.model = build_model(cfg, seed);
  auto& m = run.model;
  rec.backbone_checksum = m.backbone.checksum();
  run.split = split_base_novel(cfg.data.num_classes);
  const auto& base = run.split.base;
  auto train = sample_few_shot(run.dataset, base, cfg.shots, mix_seed(seed, 0x5407));
  std::vector<std::vector<int>> base_captions;
  for (int c : base) base_captions.push_back(run.dataset.caption(c));
  std::vector<std::size_t> label_index(static_cast<std::size_t>(cfg.data.num_classes), 0);
  for (std::size_t i = 0; i < base.size(); ++i) label_index[static_cast<std::size_t>(base[i])] = i;

  auto learnables = m.prompts.parameters();
  const int s_layers = cfg.effective_kd_layers();
  const int k_layers = m.layers();
  const double tau = m.backbone.temperature;

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<std::size_t> order(train.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      seeded_shuffle(order, mix_seed(seed, 0xe90c + static_cast<std::uint64_t>(epoch)));
      double ce_acc = 0.0, kd_acc = 0.0, total_acc = 0.0;
      int steps = 0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
        const auto stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
        auto sched = m.schedule();
        std::vector<EncoderTrace> traces;
        auto z = m.text_embeddings(base_captions, sched, s_layers > 0 ? &traces : nullptr);
        std::vector<Tensor> ces;
        for (std::size_t i = start; i < stop; ++i) {
          const auto& ex = train[order[i]];
          auto logits = class_logits(m.image_embedding(ex.image, sched), z, tau);
          ces.push_back(cross_entropy(logits, label_index[static_cast<std::size_t>(ex.label)]));
        }
        auto ce = mean(concat_flat(ces));
        std::vector<Tensor> kd;
        for (int s = k_layers - s_layers; s < k_layers; ++s) {
          kd.push_back(layer_kd(traces, m.reference, static_cast<std::size_t>(s)));
        }
        auto loss = total_loss(ce, kd, cfg.lambda, s_layers);
        if (!learnables.empty()) {
          backward(loss.total, learnables);
          sgd_step(learnables, cfg.lr, m.backbone);
          for (auto& p : learnables) p.zero_grad();
        }
        ce_acc += loss.ce;
        kd_acc += loss.kd_penalty();
        total_acc += loss.total.item();
        if (observer) observer(epoch, steps, loss);
        ++steps;
      }
      rec.epoch_ce.push_back(ce_acc / steps);
      rec.epoch_kd.push_back(kd_acc / steps);
      rec.epoch_total.push_back(total_acc / steps);
    }
  } catch (const NumericError& e) {
    std::string why = e.what();
    for (auto& ch : why) {
      if (ch == '\n' || ch == '\r') ch = ' ';
    }
    rec.status = "diverged: " + why;
  }

  if (m.backbone.checksum() != rec.backbone_checksum) {
    throw ContractError("backbone parameters changed during training");
  }
  if (rec.ok()) {
    auto eval = evaluate(m, run.dataset, run.split);
    rec.base = eval.base;
    rec.novel = eval.novel;
    rec.hm = eval.hm;
    rec.prompt_distance = prompt_distances(m, run.dataset.captions);
  }
  rec.checkpoint = checkpoint_prompts(m.prompts);
  rec.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

inline RunRecord train_run(const RunConfig& cfg, std::uint64_t seed) { return train_model(cfg, seed).record; }

/// Rebuilds a trained model from a record (backbone from the same recipe).
inline Model model_from_record(const RunRecord& r) {
  Model m = build_model(r.config, r.seed);
  if (m.backbone.checksum() != r.backbone_checksum) {
    throw ProvenanceError("record backbone checksum " + hex64(r.backbone_checksum) +
                          " does not match the rebuilt backbone " + hex64(m.backbone.checksum()));
  }
  m.prompts = restore_prompts(r);
  return m;
}

}  // namespace comma
