#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "comma/harness/train.hpp"
#include "comma/workbench/report.hpp"
#include "comma/workbench/stats.hpp"

namespace comma {

/// Canonical config key for a sweep axis name.
inline std::string sweep_axis_key(const std::string& name) {
  if (name == "S" || name == "M_p" || name == "J" || name == "strategy" || name == "lambda") return name;
  if (name == "λ") return "lambda";
  throw UsageError("cannot sweep '" + name + "' (choose S, lambda, J, M_p or strategy)");
}

struct SweepSpec {
  std::string param;
  std::vector<std::string> values;
  RunConfig base;
  int seeds_per_cell = 1;
  std::uint64_t first_seed = 0;
  int jobs = 1;

  void validate() const {
    sweep_axis_key(param);
    if (values.empty()) throw UsageError("sweep needs at least one value");
    if (seeds_per_cell < 1) throw UsageError("seeds per cell must be >= 1");
    if (jobs < 1) throw UsageError("jobs must be >= 1");
  }
};

struct SweepCell {
  std::string value;  // canonical form, as stored in the records
  std::size_t n_ok = 0;
  std::size_t n_failed = 0;
  double base_mean = 0, base_std = 0, novel_mean = 0, novel_std = 0, hm_mean = 0, hm_std = 0;
  bool best = false;
  std::string error;
};

struct SweepSummary {
  std::string param;
  std::vector<SweepCell> cells;
  std::vector<std::filesystem::path> records;

  const SweepCell* best() const {
    for (const auto& c : cells) {
      if (c.best) return &c;
    }
    return nullptr;
  }
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw UsageError("empty entry in list '" + s + "'");
    out.push_back(item);
  }
  return out;
}

/// Single pass over completed records; every statistic is a function of the
/// records alone. `errors` carries failures that produced no record.
inline SweepSummary summarize_sweep(const std::string& param, const std::vector<std::string>& canonical_values,
                                    const std::vector<RunRecord>& records,
                                    const std::map<std::string, std::string>& errors = {}) {
  const auto key = sweep_axis_key(param);
  SweepSummary s;
  s.param = key;
  std::map<std::string, std::vector<const RunRecord*>> by_value;
  for (const auto& r : records) by_value[get_config_value(r.config, key)].push_back(&r);
  for (const auto& v : canonical_values) {
    SweepCell cell;
    cell.value = v;
    std::vector<double> b, n, h;
    for (const auto* r : by_value[v]) {
      if (!r->ok()) {
        ++cell.n_failed;
        if (cell.error.empty()) cell.error = r->status;
        continue;
      }
      b.push_back(r->base);
      n.push_back(r->novel);
      h.push_back(r->hm);
    }
    if (auto it = errors.find(v); it != errors.end()) {
      ++cell.n_failed;
      if (cell.error.empty()) cell.error = it->second;
    }
    cell.n_ok = h.size();
    if (!h.empty()) {
      cell.base_mean = mean_of(b);
      cell.base_std = stddev_of(b);
      cell.novel_mean = mean_of(n);
      cell.novel_std = stddev_of(n);
      cell.hm_mean = mean_of(h);
      cell.hm_std = stddev_of(h);
    }
    s.cells.push_back(cell);
  }
  SweepCell* best = nullptr;
  for (auto& c : s.cells) {
    if (c.n_ok > 0 && (!best || c.hm_mean > best->hm_mean)) best = &c;
  }
  if (best) best->best = true;
  return s;
}

inline constexpr const char* kSummaryHeader =
    "param,value,n_ok,n_failed,base_mean,base_std,novel_mean,novel_std,hm_mean,hm_std,best,error";

inline std::string summary_csv(const SweepSummary& s) {
  std::ostringstream os;
  os << kSummaryHeader << '\n';
  for (const auto& c : s.cells) {
    std::string err = c.error;
    for (auto& ch : err) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    os << s.param << ',' << c.value << ',' << c.n_ok << ',' << c.n_failed << ',' << format_double(c.base_mean) << ','
       << format_double(c.base_std) << ',' << format_double(c.novel_mean) << ',' << format_double(c.novel_std) << ','
       << format_double(c.hm_mean) << ',' << format_double(c.hm_std) << ',' << (c.best ? 1 : 0) << ',' << err << '\n';
  }
  return os.str();
}

/// Plot data: the HM curve over the swept values, in sweep order.
inline std::string sweep_plot_series(const SweepSummary& s) {
  std::ostringstream os;
  os << s.param << ",hm_mean,hm_std\n";
  for (const auto& c : s.cells) {
    if (c.n_ok == 0) continue;
    os << c.value << ',' << format_double(c.hm_mean) << ',' << format_double(c.hm_std) << '\n';
  }
  return os.str();
}

/// Runs every (value, seed) cell as an independent training run, persists
/// each record under `out/records`, then writes `summary.csv` and the HM
/// curve. A failing cell is reported in the summary; the others still run.
inline SweepSummary run_sweep(const SweepSpec& spec, const std::filesystem::path& out,
                              std::ostream* log = nullptr) {
  spec.validate();
  const auto key = sweep_axis_key(spec.param);
  struct Job {
    std::string value;
    std::uint64_t seed;
  };
  std::vector<std::string> canonical;
  std::map<std::string, std::string> errors;
  std::vector<Job> jobs;
  for (const auto& v : spec.values) {
    RunConfig cfg = spec.base;
    std::string canon = v;
    try {
      set_config_value(cfg, key, v);
      canon = get_config_value(cfg, key);
    } catch (const Error& e) {
      errors[canon] = e.what();
    }
    canonical.push_back(canon);
    if (errors.count(canon)) continue;
    for (int i = 0; i < spec.seeds_per_cell; ++i) {
      jobs.push_back({canon, spec.first_seed + static_cast<std::uint64_t>(i)});
    }
  }

  const auto record_dir = out / "records";
  std::filesystem::create_directories(record_dir);
  std::mutex mu;
  std::vector<std::filesystem::path> paths;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& job = jobs[i];
      RunConfig cfg = spec.base;
      try {
        set_config_value(cfg, key, job.value);
        auto rec = train_run(cfg, job.seed);
        auto path = save_record(rec, record_dir);
        std::lock_guard<std::mutex> lock(mu);
        paths.push_back(path);
        if (log) {
          *log << key << '=' << job.value << " seed=" << job.seed << " hm=" << format_double(rec.hm) << ' '
               << rec.status << '\n';
        }
      } catch (const Error& e) {
        std::lock_guard<std::mutex> lock(mu);
        errors.emplace(job.value, e.what());
        if (log) *log << key << '=' << job.value << " seed=" << job.seed << " failed: " << e.what() << '\n';
      }
    }
  };
  const int nthreads = std::min<int>(spec.jobs, static_cast<int>(std::max<std::size_t>(jobs.size(), 1)));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Summarize from the persisted files only.
  std::sort(paths.begin(), paths.end());
  std::vector<RunRecord> records;
  for (const auto& p : paths) records.push_back(load_record(p));
  auto summary = summarize_sweep(key, canonical, records, errors);
  summary.records = paths;
  write_text_file(out / "summary.csv", summary_csv(summary));
  write_text_file(out / ("plot_hm_vs_" + key + ".csv"), sweep_plot_series(summary));
  return summary;
}

}  // namespace comma
