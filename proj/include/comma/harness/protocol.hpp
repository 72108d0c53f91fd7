#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "comma/errors.hpp"
#include "comma/harness/dataset.hpp"
#include "comma/rng.hpp"

namespace comma {

struct SplitPlan {
  std::vector<int> base;
  std::vector<int> novel;
};

/// The first ceil(C/2) class ids in ascending order are base, the rest novel.
inline SplitPlan split_base_novel(std::vector<int> class_ids) {
  if (class_ids.size() < 2) throw ConfigError("base/novel split needs at least 2 classes");
  std::sort(class_ids.begin(), class_ids.end());
  if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end()) {
    throw ConfigError("base/novel split: duplicate class id");
  }
  const auto nbase = (class_ids.size() + 1) / 2;
  SplitPlan plan;
  plan.base.assign(class_ids.begin(), class_ids.begin() + static_cast<std::ptrdiff_t>(nbase));
  plan.novel.assign(class_ids.begin() + static_cast<std::ptrdiff_t>(nbase), class_ids.end());
  return plan;
}

inline SplitPlan split_base_novel(int num_classes) {
  if (num_classes < 2) throw ConfigError("base/novel split needs at least 2 classes");
  std::vector<int> ids(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) ids[i] = i;
  return split_base_novel(std::move(ids));
}

/// 2BN/(B+N), zero when both are zero.
inline double harmonic_mean(double base, double novel) {
  const double s = base + novel;
  return s == 0.0 ? 0.0 : 2.0 * base * novel / s;
}

/// Fisher-Yates driven by our own generator, so results do not depend on the
/// standard library's shuffle implementation.
template <class T>
void seeded_shuffle(std::vector<T>& items, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

/// Exactly k examples of every listed class, drawn without replacement.
inline std::vector<Example> sample_few_shot(const std::vector<Example>& pool,
                                            const std::vector<int>& classes, int k,
                                            std::uint64_t seed) {
  if (k < 1) throw ConfigError("few-shot k must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);
  std::vector<Example> out;
  for (int c : classes) {
    auto& idx = by_class[c];
    if (idx.size() < static_cast<std::size_t>(k)) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                      " examples, fewer than k=" + std::to_string(k));
    }
    seeded_shuffle(idx, mix_seed(seed, 0xf5000 + static_cast<std::uint64_t>(c)));
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    for (auto i : idx) out.push_back(pool[i]);
  }
  return out;
}

inline std::vector<Example> sample_few_shot(const Dataset& ds, const std::vector<int>& classes, int k,
                                            std::uint64_t seed) {
  return sample_few_shot(ds.train, classes, k, seed);
}

inline std::vector<Example> filter_classes(const std::vector<Example>& pool,
                                           const std::vector<int>& classes) {
  std::vector<Example> out;
  for (const auto& ex : pool) {
    if (std::find(classes.begin(), classes.end(), ex.label) != classes.end()) out.push_back(ex);
  }
  return out;
}

}  // namespace comma
