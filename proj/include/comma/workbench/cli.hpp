#pragma once

#include <glob.h>

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "comma/harness/train.hpp"
#include "comma/workbench/analysis.hpp"
#include "comma/workbench/report.hpp"
#include "comma/workbench/sweep.hpp"

namespace comma {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Paths matching a shell glob, sorted; a plain path matches itself.
inline std::vector<std::filesystem::path> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::filesystem::path> out;
  const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  if (rc != 0 && rc != GLOB_NOMATCH) throw Error("glob failed for '" + pattern + "'");
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<RunRecord> load_records(const std::string& pattern) {
  auto paths = expand_glob(pattern);
  if (paths.empty()) throw UsageError("no records match '" + pattern + "'");
  std::vector<RunRecord> records;
  for (const auto& p : paths) records.push_back(load_record(p));
  return records;
}

inline RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.sync_shapes();
    return c;
  }
  return load_config(path);
}

/// Entry point of the command-line tool. Exit codes: 0 success, 1 runtime
/// failure, 2 usage error.
inline int cli_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr) {
  CLI::App app{"Multi-modal prompt learning workbench", "comma_bench"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  std::string config_path, out_dir, records_glob, param, values, figures, shift;
  std::uint64_t seed = 0;
  int seeds_per_cell = 1, jobs = 1;

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as line-delimited text");
  gen->add_option("--config", config_path, "Config file");
  auto* gen_seed = gen->add_option("--seed", seed, "Dataset seed (overrides data_seed)");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run one training run and write its record");
  train->add_option("--config", config_path, "Config file");
  train->add_option("--seed", seed, "Run seed");
  train->add_option("--out", out_dir, "Record directory")->default_val("runs");

  auto* eval = app.add_subcommand("eval", "Re-evaluate saved runs");
  eval->add_option("--records", records_glob, "Record files (glob)")->required();
  eval->add_option("--config", config_path, "Evaluate on this config's dataset instead (cross-dataset)");
  eval->add_option("--shift", shift, "Domain shift KIND:MAGNITUDE (pixel_noise, contrast, token_dropout)");
  eval->add_option("--seed", seed, "Seed for the shifted copy");

  auto* sweep = app.add_subcommand("sweep", "Sweep one hyperparameter over several seeds");
  sweep->add_option("--config", config_path, "Base config file");
  sweep->add_option("--param", param, "S, lambda, J, M_p or strategy")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--seeds-per-cell", seeds_per_cell, "Seeds per value")->default_val(1);
  sweep->add_option("--seed", seed, "First seed");
  sweep->add_option("--out", out_dir, "Output directory")->required();
  sweep->add_option("--jobs", jobs, "Concurrent runs")->default_val(1);

  auto* analyze = app.add_subcommand("analyze", "Prompt distance vs novel-accuracy degradation");
  analyze->add_option("--records", records_glob, "Record files (glob)")->required();
  analyze->add_option("--out", out_dir, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Results table and plot series from records");
  report->add_option("--records", records_glob, "Record files (glob)")->required();
  report->add_option("--out", out_dir, "Output directory")->required();
  report->add_option("--figures", figures, "Comma-separated: S, lambda, J, M_p, distance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*gen) {
      auto cfg = config_or_default(config_path);
      if (gen_seed->count() > 0) cfg.data.seed = seed;
      auto ds = gen_synth_dataset(cfg.data);
      std::filesystem::create_directories(out_dir);
      std::ofstream tr(std::filesystem::path(out_dir) / "train.txt");
      write_examples(tr, ds.train);
      std::ofstream te(std::filesystem::path(out_dir) / "test.txt");
      write_examples(te, ds.test);
      if (!tr || !te) throw Error("failed writing dataset files under '" + out_dir + "'");
      out << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test examples to " << out_dir
          << '\n';
      return kExitOk;
    }
    if (*train) {
      auto cfg = config_or_default(config_path);
      auto rec = train_run(cfg, seed);
      auto path = save_record(rec, out_dir);
      out << path.string() << '\n';
      out << "base " << rec.base << "  novel " << rec.novel << "  hm " << rec.hm << '\n';
      if (!rec.ok()) {
        err << "error: run failed: " << rec.status << '\n';
        return kExitFailure;
      }
      return kExitOk;
    }
    if (*eval) {
      auto records = load_records(records_glob);
      std::optional<Shift> sh;
      if (!shift.empty()) {
        auto colon = shift.find(':');
        if (colon == std::string::npos) throw UsageError("--shift expects KIND:MAGNITUDE");
        sh = Shift{parse_shift_kind(shift.substr(0, colon)), parse_double(shift.substr(colon + 1), "--shift"),
                   seed};
      }
      std::optional<RunConfig> target;
      if (!config_path.empty()) target = load_config(config_path);
      out << "record,strategy,seed,base,novel,hm";
      if (target) out << ",target_acc";
      if (sh) out << ",shifted_acc";
      out << '\n';
      auto paths = expand_glob(records_glob);
      for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        auto m = model_from_record(r);
        auto ds = gen_synth_dataset(r.config.data);
        auto ev = evaluate(m, ds, split_base_novel(r.config.data.num_classes));
        out << paths[i].filename().string() << ',' << to_string(r.config.strategy) << ',' << r.seed << ','
            << format_double(ev.base) << ',' << format_double(ev.novel) << ',' << format_double(ev.hm);
        if (target) out << ',' << format_double(cross_dataset_eval(m, {target->data}).front());
        if (sh) out << ',' << format_double(domain_shift_eval(m, ds, *sh));
        out << '\n';
      }
      return kExitOk;
    }
    if (*sweep) {
      SweepSpec spec;
      spec.param = param;
      spec.values = split_list(values);
      spec.base = config_or_default(config_path);
      spec.seeds_per_cell = seeds_per_cell;
      spec.first_seed = seed;
      spec.jobs = jobs;
      auto summary = run_sweep(spec, out_dir, &err);
      out << summary_csv(summary);
      bool any_failed = false;
      for (const auto& c : summary.cells) any_failed |= c.n_failed > 0;
      return any_failed ? kExitFailure : kExitOk;
    }
    if (*analyze) {
      std::vector<RunRecord> prompted;
      std::vector<std::string> names;
      auto paths = expand_glob(records_glob);
      auto records = load_records(records_glob);
      for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].ok() && records[i].config.strategy != PromptStrategy::None) {
          prompted.push_back(records[i]);
          names.push_back(paths[i].filename().string());
        }
      }
      if (prompted.empty()) throw UsageError("no successful prompted runs to analyze");
      auto a = analyze_records(prompted);
      std::ostringstream table;
      table << "record,layer,distance,delta_acc\n";
      for (std::size_t i = 0; i < a.per_record.size(); ++i) {
        for (const auto& row : a.per_record[i]) {
          table << names[i] << ',' << row.layer << ',' << format_double(row.distance) << ','
                << format_double(row.delta_acc) << '\n';
        }
      }
      write_text_file(std::filesystem::path(out_dir) / "analysis.csv", table.str());
      for (auto& [name, text] : distance_series_files(a)) {
        write_text_file(std::filesystem::path(out_dir) / name, text);
      }
      out << "analyzed " << prompted.size() << " runs over " << a.layers.size() << " layers into " << out_dir
          << '\n';
      return kExitOk;
    }
    if (*report) {
      auto records = load_records(records_glob);
      std::vector<std::string> figs;
      if (!figures.empty()) figs = split_list(figures);
      for (const auto& p : emit_report(records, out_dir, figs)) out << p.string() << '\n';
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace comma
