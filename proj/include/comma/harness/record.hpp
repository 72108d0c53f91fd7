#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "comma/errors.hpp"
#include "comma/harness/config.hpp"
#include "comma/harness/protocol.hpp"
#include "comma/hash.hpp"
#include "comma/prompting.hpp"

namespace comma {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedTensor&) const = default;
};

/// Full provenance of one training/evaluation run.
struct RunRecord {
  RunConfig config;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or a description of the failure
  std::vector<double> epoch_ce, epoch_kd, epoch_total;
  double base = 0.0, novel = 0.0, hm = 0.0;
  std::vector<double> prompt_distance;  // per text layer: 1 - pooled cosine to the reference
  std::uint64_t backbone_checksum = 0;
  double wall_clock_seconds = 0.0;  // excluded from the content hash
  std::vector<NamedTensor> checkpoint;

  bool ok() const { return status == "ok"; }

  /// Mean prompt/reference similarity over the last `s` layers.
  double final_kd_similarity(int s) const {
    if (s < 1 || static_cast<std::size_t>(s) > prompt_distance.size()) {
      throw ContractError("record has " + std::to_string(prompt_distance.size()) +
                          " layer distances, cannot average the last " + std::to_string(s));
    }
    double acc = 0.0;
    for (std::size_t i = prompt_distance.size() - static_cast<std::size_t>(s); i < prompt_distance.size(); ++i) {
      acc += 1.0 - prompt_distance[i];
    }
    return acc / s;
  }
};

inline std::vector<NamedTensor> checkpoint_prompts(const PromptSet& ps) {
  std::vector<NamedTensor> out;
  auto add = [&](const std::string& name, const Tensor& t) {
    auto d = t.data();
    out.push_back({name, t.shape(), std::vector<double>(d.begin(), d.end())});
  };
  for (std::size_t i = 0; i < ps.text.size(); ++i) add("text." + std::to_string(i), ps.text[i]);
  for (std::size_t i = 0; i < ps.vision.size(); ++i) add("vision." + std::to_string(i), ps.vision[i]);
  if (ps.key_proj.defined()) add("key_proj", ps.key_proj);
  if (ps.value_proj.defined()) add("value_proj", ps.value_proj);
  for (std::size_t i = 0; i < ps.map_weight.size(); ++i) add("map_weight." + std::to_string(i), ps.map_weight[i]);
  for (std::size_t i = 0; i < ps.map_bias.size(); ++i) add("map_bias." + std::to_string(i), ps.map_bias[i]);
  return out;
}

/// Rebuilds the learnable prompt set stored in a record.
inline PromptSet restore_prompts(const RunRecord& r) {
  PromptSet ps;
  ps.strategy = r.config.strategy;
  ps.attention_scale = r.config.attention_scale;
  if (ps.strategy != PromptStrategy::None) {
    ps.depth = r.config.effective_depth();
    ps.length = r.config.length;
  }
  std::map<std::string, Tensor> byname;
  for (const auto& t : r.checkpoint) byname[t.name] = Tensor::from(t.shape, t.values, true);
  auto take_list = [&](const std::string& prefix, std::vector<Tensor>& dst) {
    for (std::size_t i = 0;; ++i) {
      auto it = byname.find(prefix + "." + std::to_string(i));
      if (it == byname.end()) break;
      dst.push_back(it->second);
      byname.erase(it);
    }
  };
  take_list("text", ps.text);
  take_list("vision", ps.vision);
  take_list("map_weight", ps.map_weight);
  take_list("map_bias", ps.map_bias);
  if (auto it = byname.find("key_proj"); it != byname.end()) {
    ps.key_proj = it->second;
    byname.erase(it);
  }
  if (auto it = byname.find("value_proj"); it != byname.end()) {
    ps.value_proj = it->second;
    byname.erase(it);
  }
  if (!byname.empty()) throw ParseError("checkpoint has unexpected tensor '" + byname.begin()->first + "'");
  ps.validate();
  return ps;
}

namespace detail {

inline std::string join_reals(const std::vector<double>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ' ';
    out += format_double(xs[i]);
  }
  return out;
}

inline constexpr const char* kRecordHeader = "comma-run-record 1";

}  // namespace detail

/// Line-oriented `key = value` text. Reals use 17 significant digits, which
/// round-trips every double exactly.
inline std::string serialize_record(const RunRecord& r, bool include_wall_clock = true) {
  std::ostringstream os;
  os << detail::kRecordHeader << '\n';
  for (const auto& [k, v] : config_to_pairs(r.config)) os << "config." << k << " = " << v << '\n';
  os << "seed = " << r.seed << '\n';
  os << "status = " << r.status << '\n';
  os << "epoch_ce = " << detail::join_reals(r.epoch_ce) << '\n';
  os << "epoch_kd = " << detail::join_reals(r.epoch_kd) << '\n';
  os << "epoch_total = " << detail::join_reals(r.epoch_total) << '\n';
  os << "base = " << format_double(r.base) << '\n';
  os << "novel = " << format_double(r.novel) << '\n';
  os << "hm = " << format_double(r.hm) << '\n';
  os << "prompt_distance = " << detail::join_reals(r.prompt_distance) << '\n';
  os << "backbone_checksum = " << hex64(r.backbone_checksum) << '\n';
  if (include_wall_clock) os << "wall_clock_seconds = " << format_double(r.wall_clock_seconds) << '\n';
  for (const auto& t : r.checkpoint) {
    os << "tensor." << t.name << " = " << t.shape.size();
    for (auto d : t.shape) os << ' ' << d;
    for (double v : t.values) os << ' ' << format_double(v);
    os << '\n';
  }
  os << "end\n";
  return os.str();
}

/// Hash of everything except wall-clock time: identical for identical
/// (config, seed).
inline std::uint64_t record_content_hash(const RunRecord& r) {
  Fnv1a h;
  h.update(serialize_record(r, false));
  return h.digest();
}

inline std::string record_filename(const RunRecord& r) {
  return hex64(record_content_hash(r)).substr(0, 16) + ".rec";
}

inline RunRecord parse_record(std::istream& is) {
  RunRecord r;
  r.config.sync_shapes();
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) -> void {
    throw ParseError("record line " + std::to_string(lineno) + ": " + why);
  };
  if (!std::getline(is, line)) {
    lineno = 1;
    fail("empty file");
  }
  lineno = 1;
  if (line != detail::kRecordHeader) fail("expected header '" + std::string(detail::kRecordHeader) + "'");
  std::set<std::string> seen;
  bool ended = false;
  auto reals = [&](const std::string& v) {
    std::vector<double> out;
    std::istringstream ss(v);
    std::string w;
    while (ss >> w) out.push_back(parse_double(w, "value"));
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (ended) fail("content after 'end'");
    if (line == "end") {
      ended = true;
      continue;
    }
    auto eq = line.find(" = ");
    std::string key, value;
    if (eq == std::string::npos) {
      // Empty lists serialize as "key = " which getline keeps intact; a bare
      // "key =" can only come from a truncated or hand-edited file.
      fail("expected 'key = value'");
    }
    key = line.substr(0, eq);
    value = line.substr(eq + 3);
    if (!seen.insert(key).second) fail("duplicate key '" + key + "'");
    try {
      if (key.rfind("config.", 0) == 0) {
        set_config_value(r.config, key.substr(7), value);
      } else if (key == "seed") {
        r.seed = parse_u64(value, key);
      } else if (key == "status") {
        r.status = value;
      } else if (key == "epoch_ce") {
        r.epoch_ce = reals(value);
      } else if (key == "epoch_kd") {
        r.epoch_kd = reals(value);
      } else if (key == "epoch_total") {
        r.epoch_total = reals(value);
      } else if (key == "base") {
        r.base = parse_double(value, key);
      } else if (key == "novel") {
        r.novel = parse_double(value, key);
      } else if (key == "hm") {
        r.hm = parse_double(value, key);
      } else if (key == "prompt_distance") {
        r.prompt_distance = reals(value);
      } else if (key == "backbone_checksum") {
        if (value.size() != 16) fail("checksum must be 16 hex digits");
        std::size_t used = 0;
        r.backbone_checksum = std::stoull(value, &used, 16);
        if (used != value.size()) fail("bad checksum");
      } else if (key == "wall_clock_seconds") {
        r.wall_clock_seconds = parse_double(value, key);
      } else if (key.rfind("tensor.", 0) == 0) {
        std::istringstream ss(value);
        std::size_t rank = 0;
        if (!(ss >> rank) || rank < 1 || rank > 2) fail("bad tensor rank");
        NamedTensor t;
        t.name = key.substr(7);
        for (std::size_t i = 0; i < rank; ++i) {
          std::size_t d = 0;
          if (!(ss >> d) || d == 0) fail("bad tensor extent");
          t.shape.push_back(d);
        }
        std::string w;
        while (ss >> w) t.values.push_back(parse_double(w, "tensor value"));
        if (t.values.size() != shape_numel(t.shape)) {
          fail("tensor '" + t.name + "' has " + std::to_string(t.values.size()) + " values, expected " +
               std::to_string(shape_numel(t.shape)));
        }
        r.checkpoint.push_back(std::move(t));
      } else {
        fail("unknown key '" + key + "'");
      }
    } catch (const ParseError& e) {
      if (std::string(e.what()).rfind("record line", 0) == 0) throw;
      fail(e.what());
    } catch (const ConfigError& e) {
      fail(e.what());
    } catch (const std::logic_error& e) {
      fail("bad value for '" + key + "'");
    }
  }
  if (!ended) {
    ++lineno;
    fail("truncated record: missing 'end'");
  }
  for (const char* required : {"seed", "status", "epoch_ce", "epoch_kd", "epoch_total", "base", "novel", "hm",
                               "prompt_distance", "backbone_checksum"}) {
    if (!seen.count(required)) fail(std::string("missing key '") + required + "'");
  }
  if (std::fabs(r.hm - harmonic_mean(r.base, r.novel)) > 1e-9) fail("hm inconsistent with base/novel");
  return r;
}

inline RunRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open record '" + path.string() + "'");
  try {
    return parse_record(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

/// Writes the record under its content-hash name inside `dir`. Records are
/// append-only: an existing file is left alone when identical and is an
/// error otherwise.
inline std::filesystem::path save_record(const RunRecord& r, const std::filesystem::path& dir) {
  if (std::fabs(r.hm - harmonic_mean(r.base, r.novel)) > 1e-9) {
    throw ContractError("record hm inconsistent with base/novel");
  }
  std::filesystem::create_directories(dir);
  const auto path = dir / record_filename(r);
  const auto text = serialize_record(r);
  if (std::filesystem::exists(path)) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream existing;
    existing << in.rdbuf();
    if (existing.str() == text) return path;
    // Same content hash, different wall clock: keep the first write.
    auto old = load_record(path);
    if (record_content_hash(old) == record_content_hash(r)) return path;
    throw ContractError("refusing to overwrite record '" + path.string() + "'");
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("failed writing record '" + path.string() + "'");
  return path;
}

}  // namespace comma
