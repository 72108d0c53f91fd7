#pragma once

#include <map>
#include <string>
#include <vector>

#include "comma/harness/model.hpp"
#include "comma/harness/record.hpp"
#include "comma/objectives.hpp"
#include "comma/workbench/stats.hpp"

namespace comma {

struct AnalysisRow {
  int layer = 0;
  double distance = 0.0;   // 1 - cosine(pooled learned prompt, reference pool)
  double delta_acc = 0.0;  // baseline novel accuracy minus this run's novel accuracy
};

/// One row per prompted text layer of the record's checkpoint.
inline std::vector<AnalysisRow> distance_profile(const RunRecord& record, const ReferencePromptBank& bank,
                                                 double baseline_novel = 0.0) {
  if (record.backbone_checksum != bank.backbone_checksum) {
    throw ProvenanceError("record backbone " + hex64(record.backbone_checksum) +
                          " differs from the reference bank's backbone " + hex64(bank.backbone_checksum));
  }
  auto prompts = restore_prompts(record);
  if (prompts.text.empty()) throw ContractError("record has no text prompts to analyze");
  std::vector<AnalysisRow> rows;
  NoGradGuard no_grad;
  for (std::size_t s = 0; s < prompts.text.size(); ++s) {
    const double sim = cosine_sim(mean_rows(prompts.text[s]), bank.at(s)).item();
    rows.push_back({static_cast<int>(s), 1.0 - sim, baseline_novel - record.novel});
  }
  return rows;
}

/// Novel accuracy of the frozen model with the hand-written template, on
/// the record's own benchmark.
inline double baseline_novel_accuracy(const RunConfig& cfg) {
  auto none = cfg;
  none.strategy = PromptStrategy::None;
  auto m = build_model(none, 0);
  auto ds = gen_synth_dataset(none.data);
  return evaluate(m, ds, split_base_novel(none.data.num_classes)).novel;
}

struct LayerSeries {
  int layer = 0;
  std::vector<double> distance;
  std::vector<double> delta_acc;
};

struct DistanceAnalysis {
  std::vector<std::vector<AnalysisRow>> per_record;
  std::vector<LayerSeries> layers;  // one series per analyzed layer
};

/// Distance-vs-degradation analysis over many runs. Baselines and reference
/// banks are computed once per distinct configuration.
inline DistanceAnalysis analyze_records(const std::vector<RunRecord>& records) {
  DistanceAnalysis out;
  std::map<std::string, std::pair<double, ReferencePromptBank>> cache;
  std::map<int, LayerSeries> by_layer;
  for (const auto& r : records) {
    auto none = r.config;
    none.strategy = PromptStrategy::None;
    const auto key = format_config(none);
    auto it = cache.find(key);
    if (it == cache.end()) {
      auto m = build_model(none, 0);
      it = cache.emplace(key, std::make_pair(baseline_novel_accuracy(none), m.reference)).first;
    }
    auto rows = distance_profile(r, it->second.second, it->second.first);
    for (const auto& row : rows) {
      auto& series = by_layer[row.layer];
      series.layer = row.layer;
      series.distance.push_back(row.distance);
      series.delta_acc.push_back(row.delta_acc);
    }
    out.per_record.push_back(std::move(rows));
  }
  for (auto& [layer, series] : by_layer) out.layers.push_back(std::move(series));
  return out;
}

}  // namespace comma
