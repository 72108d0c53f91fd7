#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "comma/harness/record.hpp"
#include "comma/workbench/analysis.hpp"
#include "comma/workbench/stats.hpp"

namespace comma {

struct ResultRow {
  std::string strategy;
  int depth = 0;
  int length = 0;
  double lambda = 0.0;
  int kd_layers = 0;
  std::uint64_t seed = 0;
  double base = 0.0, novel = 0.0, hm = 0.0;

  auto key() const { return std::tie(strategy, depth, length, lambda, kd_layers, seed, base, novel, hm); }
  bool operator<(const ResultRow& o) const { return key() < o.key(); }
  bool operator==(const ResultRow& o) const { return key() == o.key(); }
};

inline constexpr const char* kResultsHeader = "strategy,J,M_p,lambda,S,seed,base,novel,hm";

inline ResultRow result_row(const RunRecord& r) {
  return {std::string(to_string(r.config.strategy)),
          r.config.effective_depth(),
          r.config.length,
          r.config.lambda,
          r.config.effective_kd_layers(),
          r.seed,
          r.base,
          r.novel,
          r.hm};
}

/// Rows sorted on every column, so input order never changes the output.
inline std::string results_csv(const std::vector<RunRecord>& records) {
  std::vector<ResultRow> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(result_row(r));
  std::sort(rows.begin(), rows.end());
  std::ostringstream os;
  os << kResultsHeader << '\n';
  for (const auto& r : rows) {
    os << r.strategy << ',' << r.depth << ',' << r.length << ',' << format_double(r.lambda) << ','
       << r.kd_layers << ',' << r.seed << ',' << format_double(r.base) << ',' << format_double(r.novel) << ','
       << format_double(r.hm) << '\n';
  }
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::vector<ResultRow> parse_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kResultsHeader) throw ParseError("results CSV: bad header");
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    const std::string where = "results CSV line " + std::to_string(lineno);
    if (cells.size() != 9) throw ParseError(where + ": expected 9 fields");
    ResultRow r;
    r.strategy = cells[0];
    r.depth = static_cast<int>(parse_int(cells[1], where));
    r.length = static_cast<int>(parse_int(cells[2], where));
    r.lambda = parse_double(cells[3], where);
    r.kd_layers = static_cast<int>(parse_int(cells[4], where));
    r.seed = parse_u64(cells[5], where);
    r.base = parse_double(cells[6], where);
    r.novel = parse_double(cells[7], where);
    r.hm = parse_double(cells[8], where);
    rows.push_back(r);
  }
  return rows;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

/// Sweepable axes, by the names used on the command line.
inline double axis_value(const RunRecord& r, const std::string& axis) {
  if (axis == "S") return r.config.effective_kd_layers();
  if (axis == "lambda") return r.config.lambda;
  if (axis == "J") return r.config.effective_depth();
  if (axis == "M_p") return r.config.length;
  throw UsageError("no numeric axis named '" + axis + "' (use S, lambda, J or M_p)");
}

/// x/y series: mean HM over seeds against one numeric axis.
inline std::string hm_series(const std::vector<RunRecord>& records, const std::string& axis) {
  std::map<double, std::vector<double>> cells;
  for (const auto& r : records) {
    if (r.ok()) cells[axis_value(r, axis)].push_back(r.hm);
  }
  std::ostringstream os;
  os << axis << ",hm_mean,hm_std,n\n";
  for (const auto& [x, hms] : cells) {
    os << format_double(x) << ',' << format_double(mean_of(hms)) << ',' << format_double(stddev_of(hms)) << ','
       << hms.size() << '\n';
  }
  return os.str();
}

/// Per-layer distance/degradation series plus their correlations.
inline std::vector<std::pair<std::string, std::string>> distance_series_files(const DistanceAnalysis& a) {
  std::vector<std::pair<std::string, std::string>> files;
  std::ostringstream corr;
  corr << "layer,n,pearson,spearman\n";
  for (const auto& s : a.layers) {
    std::ostringstream os;
    os << "distance,delta_acc\n";
    for (std::size_t i = 0; i < s.distance.size(); ++i) {
      os << format_double(s.distance[i]) << ',' << format_double(s.delta_acc[i]) << '\n';
    }
    files.emplace_back("distance_layer" + std::to_string(s.layer) + ".csv", os.str());
    corr << s.layer << ',' << s.distance.size() << ',';
    try {
      auto c = correlation(s.distance, s.delta_acc);
      corr << format_double(c.pearson) << ',' << format_double(c.spearman) << '\n';
    } catch (const StatisticsError&) {
      corr << "nan,nan\n";
    }
  }
  files.emplace_back("distance_correlation.csv", corr.str());
  return files;
}

/// Writes results.csv and one series file per requested figure. Figures are
/// numeric axes (S, lambda, J, M_p) or "distance".
inline std::vector<std::filesystem::path> emit_report(const std::vector<RunRecord>& records,
                                                      const std::filesystem::path& dir,
                                                      const std::vector<std::string>& figures = {}) {
  if (records.empty()) throw UsageError("report needs at least one run record");
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text_file(dir / name, text);
    written.push_back(dir / name);
  };
  emit("results.csv", results_csv(records));
  for (const auto& fig : figures) {
    if (fig == "distance") {
      std::vector<RunRecord> prompted;
      for (const auto& r : records) {
        if (r.ok() && r.config.strategy != PromptStrategy::None) prompted.push_back(r);
      }
      for (auto& [name, text] : distance_series_files(analyze_records(prompted))) emit(name, text);
    } else {
      emit("hm_vs_" + fig + ".csv", hm_series(records, fig));
    }
  }
  return written;
}

}  // namespace comma
