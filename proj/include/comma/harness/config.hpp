#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "comma/encoders.hpp"
#include "comma/errors.hpp"
#include "comma/harness/dataset.hpp"
#include "comma/harness/pretrain.hpp"
#include "comma/prompting.hpp"

namespace comma {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(what + ": '" + s + "' is not a number");
  }
  return v;
}

inline long long parse_int(const std::string& s, const std::string& what) {
  long long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(what + ": '" + s + "' is not an integer");
  }
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(what + ": '" + s + "' is not an unsigned integer");
  }
  return v;
}

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

/// Everything that determines a run besides its seed.
struct RunConfig {
  // backbone
  VisionEncoderConfig vision;
  TextEncoderConfig text;
  std::uint64_t backbone_seed = 1;
  double temperature = 0.07;
  int pretrain_steps = 2000;
  // data
  DatasetSpec data;
  // method
  PromptStrategy strategy = PromptStrategy::Comma;
  int depth = 9;   // J, clamped to K
  int length = 2;  // M_p
  AttentionScale attention_scale = AttentionScale::VisionWidth;
  bool kd_enabled = true;
  double lambda = 1.0;
  int kd_layers = 2;  // S
  // optimisation
  int epochs = 5;
  int batch = 4;
  double lr = 0.0035;
  int shots = 16;

  // The default benchmark: a dataset whose images carry a shared style shift
  // and a per-class offset away from the pretraining world.
  RunConfig() {
    data.world_seed = 7;
    data.seed = 11;
    data.domain_offset = 0.5;
    data.style_strength = 1.0;
    data.test_per_class = 100;
  }

  int layers() const { return text.layers; }
  int effective_depth() const {
    return strategy == PromptStrategy::CoopText ? 1 : std::min(depth, layers());
  }
  /// S actually used: zero for strategies without text prompts or with kd off.
  int effective_kd_layers() const {
    return (kd_enabled && strategy != PromptStrategy::None) ? kd_layers : 0;
  }

  PretrainSpec pretrain() const {
    PretrainSpec p;
    p.backbone_seed = backbone_seed;
    p.world_seed = data.world_seed;
    p.template_length = data.template_length;
    p.steps = pretrain_steps;
    return p;
  }

  void sync_shapes() {
    vision.layers = text.layers;
    vision.joint_width = text.joint_width;
    data.image_side = vision.image_side;
    data.channels = vision.channels;
    data.seq_len = text.seq_len;
    data.vocab_size = text.vocab_size;
  }

  void validate() const {
    vision.validate();
    text.validate();
    data.validate();
    if (vision.layers != text.layers || vision.joint_width != text.joint_width) {
      throw ConfigError("vision and text towers must share depth and joint width");
    }
    if (data.image_side != vision.image_side || data.channels != vision.channels ||
        data.seq_len != text.seq_len || data.vocab_size != text.vocab_size) {
      throw ConfigError("dataset shape does not match the encoders");
    }
    if (strategy != PromptStrategy::None) {
      if (depth < 1) throw ConfigError("prompt depth J must be >= 1");
      if (length < 1) throw ConfigError("prompt length M_p must be >= 1");
      if (length > data.template_length) {
        throw ConfigError("prompt length M_p exceeds the template length used for initialisation");
      }
    }
    StrategyConfig{strategy, kd_enabled, lambda, kd_layers}.validate(layers());
    if (epochs < 1 || batch < 1 || shots < 1) throw ConfigError("epochs, batch and shots must be >= 1");
    if (shots > data.train_per_class) throw ConfigError("shots exceed training examples per class");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (pretrain_steps < 0) throw ConfigError("pretrain_steps must be >= 0");
  }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
ConfigField int_field(const char* key, T RunConfig::*outer, int T::*member) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*outer.*member); },
          [=](RunConfig& c, const std::string& v) { c.*outer.*member = static_cast<int>(parse_int(v, key)); }};
}

inline ConfigField int_field(const char* key, int RunConfig::*member) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*member); },
          [=](RunConfig& c, const std::string& v) { c.*member = static_cast<int>(parse_int(v, key)); }};
}

inline ConfigField real_field(const char* key, double RunConfig::*member) {
  return {key, [=](const RunConfig& c) { return format_double(c.*member); },
          [=](RunConfig& c, const std::string& v) { c.*member = parse_double(v, key); }};
}

inline ConfigField data_real(const char* key, double DatasetSpec::*member) {
  return {key, [=](const RunConfig& c) { return format_double(c.data.*member); },
          [=](RunConfig& c, const std::string& v) { c.data.*member = parse_double(v, key); }};
}

inline ConfigField data_seed(const char* key, std::uint64_t DatasetSpec::*member) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.data.*member); },
          [=](RunConfig& c, const std::string& v) { c.data.*member = parse_u64(v, key); }};
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ParseError(key + ": '" + v + "' is not a boolean");
}

/// The complete, ordered key set. Shape keys shared by both towers (layers,
/// heads, joint width) are stored once.
inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    f.push_back({"strategy", [](const RunConfig& c) { return std::string(to_string(c.strategy)); },
                 [](RunConfig& c, const std::string& v) { c.strategy = parse_strategy(v); }});
    f.push_back(int_field("J", &RunConfig::depth));
    f.push_back(int_field("M_p", &RunConfig::length));
    f.push_back({"attention_scale",
                 [](const RunConfig& c) { return std::string(to_string(c.attention_scale)); },
                 [](RunConfig& c, const std::string& v) { c.attention_scale = parse_attention_scale(v); }});
    f.push_back({"kd", [](const RunConfig& c) { return std::string(c.kd_enabled ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.kd_enabled = parse_bool(v, "kd"); }});
    f.push_back(real_field("lambda", &RunConfig::lambda));
    f.push_back(int_field("S", &RunConfig::kd_layers));
    f.push_back(int_field("epochs", &RunConfig::epochs));
    f.push_back(int_field("batch", &RunConfig::batch));
    f.push_back(real_field("lr", &RunConfig::lr));
    f.push_back(int_field("shots", &RunConfig::shots));
    f.push_back(real_field("temperature", &RunConfig::temperature));
    f.push_back({"backbone_seed", [](const RunConfig& c) { return std::to_string(c.backbone_seed); },
                 [](RunConfig& c, const std::string& v) { c.backbone_seed = parse_u64(v, "backbone_seed"); }});
    f.push_back(int_field("pretrain_steps", &RunConfig::pretrain_steps));
    f.push_back(int_field("image_side", &RunConfig::vision, &VisionEncoderConfig::image_side));
    f.push_back(int_field("channels", &RunConfig::vision, &VisionEncoderConfig::channels));
    f.push_back(int_field("patch_size", &RunConfig::vision, &VisionEncoderConfig::patch_size));
    f.push_back(int_field("vision_width", &RunConfig::vision, &VisionEncoderConfig::width));
    f.push_back(int_field("text_width", &RunConfig::text, &TextEncoderConfig::width));
    f.push_back(int_field("vision_heads", &RunConfig::vision, &VisionEncoderConfig::heads));
    f.push_back(int_field("text_heads", &RunConfig::text, &TextEncoderConfig::heads));
    f.push_back(int_field("layers", &RunConfig::text, &TextEncoderConfig::layers));
    f.push_back(int_field("joint_width", &RunConfig::text, &TextEncoderConfig::joint_width));
    f.push_back(int_field("vocab_size", &RunConfig::text, &TextEncoderConfig::vocab_size));
    f.push_back(int_field("seq_len", &RunConfig::text, &TextEncoderConfig::seq_len));
    f.push_back(int_field("num_classes", &RunConfig::data, &DatasetSpec::num_classes));
    f.push_back(int_field("train_per_class", &RunConfig::data, &DatasetSpec::train_per_class));
    f.push_back(int_field("test_per_class", &RunConfig::data, &DatasetSpec::test_per_class));
    f.push_back(int_field("class_offset", &RunConfig::data, &DatasetSpec::class_offset));
    f.push_back(int_field("template_length", &RunConfig::data, &DatasetSpec::template_length));
    f.push_back(data_real("prototype_scale", &DatasetSpec::prototype_scale));
    f.push_back(data_real("domain_offset", &DatasetSpec::domain_offset));
    f.push_back(data_real("style_strength", &DatasetSpec::style_strength));
    f.push_back(data_real("pixel_noise", &DatasetSpec::pixel_noise));
    f.push_back(data_seed("data_seed", &DatasetSpec::seed));
    f.push_back(data_seed("world_seed", &DatasetSpec::world_seed));
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> config_to_pairs(const RunConfig& c) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : detail::config_fields()) out.emplace_back(f.key, f.get(c));
  return out;
}

inline bool is_config_key(const std::string& key) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) return true;
  }
  return false;
}

/// Applies one key; unknown keys are errors.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) {
      f.set(c, value);
      c.sync_shapes();
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& f : detail::config_fields()) {
    if (key == f.key) return f.get(c);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

/// `key = value` lines, `#` comments, blank lines ignored. Keys not given
/// keep their defaults.
inline RunConfig parse_config(std::istream& is, const std::string& origin = "config") {
  RunConfig c;
  c.sync_shapes();
  std::string line;
  int lineno = 0;
  std::map<std::string, int> seen;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ParseError(where + ": expected 'key = value'");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (seen.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    seen[key] = lineno;
    try {
      set_config_value(c, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(where + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in, path);
}

inline std::string format_config(const RunConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_to_pairs(c)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace comma
