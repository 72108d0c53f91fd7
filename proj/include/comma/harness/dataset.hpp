#pragma once

#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "comma/encoders.hpp"
#include "comma/objectives.hpp"
#include "comma/rng.hpp"

namespace comma {

// Vocabulary layout of the synthetic world:
//   0                      padding
//   1 .. kFirstClassToken-1   template words ("a photo of a ...")
//   kFirstClassToken ..    one token per world class
inline constexpr int kFirstClassToken = 16;

/// Token ids of the hand-written template of the given length.
inline std::vector<int> template_tokens(int length) {
  if (length < 1 || length >= kFirstClassToken) {
    throw ConfigError("template length must be in [1, " + std::to_string(kFirstClassToken - 1) + "]");
  }
  std::vector<int> ids(static_cast<std::size_t>(length));
  for (int i = 0; i < length; ++i) ids[i] = 1 + i;
  return ids;
}

/// Template, then the class token at the category slot, then padding to N.
inline std::vector<int> caption_tokens(std::span<const int> template_ids, int class_token, int seq_len) {
  if (template_ids.size() + 1 > static_cast<std::size_t>(seq_len)) {
    throw ConfigError("template of " + std::to_string(template_ids.size()) +
                      " tokens plus the class token exceeds sequence length " +
                      std::to_string(seq_len));
  }
  std::vector<int> ids(template_ids.begin(), template_ids.end());
  ids.push_back(class_token);
  ids.resize(static_cast<std::size_t>(seq_len), kPadToken);
  return ids;
}

/// Canonical image of a world class. Every dataset drawn from the same world
/// shares these, which is what makes zero-shot transfer possible at all.
inline Image world_prototype(std::uint64_t world_seed, int class_token, int side, int channels) {
  Rng rng(mix_seed(world_seed, 0x10000 + static_cast<std::uint64_t>(class_token)));
  return Image{side, channels,
               normal_values(rng, static_cast<std::size_t>(side) * side * channels, 1.0)};
}

struct DatasetSpec {
  int num_classes = 10;
  int train_per_class = 16;
  int test_per_class = 40;
  int class_offset = 0;          // first world class used; class c gets token kFirstClassToken + offset + c
  double prototype_scale = 1.0;  // weight of the shared world prototype
  double domain_offset = 0.0;    // per-class dataset-specific deviation (std)
  double style_strength = 0.0;   // one pattern added to every image of the dataset
  double pixel_noise = 0.5;      // per-example noise (std)
  int template_length = 7;
  std::uint64_t seed = 0;
  std::uint64_t world_seed = 0;
  int image_side = 8;
  int channels = 3;
  int seq_len = 8;
  int vocab_size = 64;

  int class_token(int c) const { return kFirstClassToken + class_offset + c; }

  void validate(bool training_split = true) const {
    if (num_classes < 2) throw ConfigError("dataset needs at least 2 classes");
    if (training_split && train_per_class < 16) {
      throw ConfigError("training split needs >= 16 examples per class for few-shot sampling");
    }
    if (train_per_class < 0 || test_per_class < 1) throw ConfigError("per-class counts invalid");
    if (class_offset < 0 || class_token(num_classes - 1) >= vocab_size) {
      throw ConfigError("class tokens exceed the vocabulary of " + std::to_string(vocab_size));
    }
    if (pixel_noise < 0 || domain_offset < 0 || style_strength < 0) {
      throw ConfigError("noise magnitudes must be non-negative");
    }
    template_tokens(template_length);
    if (template_length + 1 > seq_len) throw ConfigError("template does not fit the sequence length");
  }
};

struct Example {
  Image image;
  std::vector<int> tokens;
  int label = 0;  // class id in [0, C)
  int id = 0;     // index within its split
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Example> train;
  std::vector<Example> test;
  std::vector<std::vector<int>> captions;  // class description per class id

  std::vector<int> template_ids() const { return template_tokens(spec.template_length); }
  const std::vector<int>& caption(int c) const { return captions.at(static_cast<std::size_t>(c)); }
};

/// Deterministic synthetic dataset: per class a prototype (world prototype +
/// dataset deviation + dataset style), examples add pixel noise; captions put
/// the class token at the category slot of the shared template.
inline Dataset gen_synth_dataset(const DatasetSpec& spec) {
  spec.validate(spec.train_per_class > 0);
  Dataset ds;
  ds.spec = spec;
  const std::size_t npix = static_cast<std::size_t>(spec.image_side) * spec.image_side * spec.channels;
  Rng style_rng(mix_seed(spec.seed, 0x57));
  auto style = normal_values(style_rng, npix, 1.0);
  const auto tmpl = ds.template_ids();
  for (int c = 0; c < spec.num_classes; ++c) {
    auto proto = world_prototype(spec.world_seed, spec.class_token(c), spec.image_side, spec.channels);
    Rng class_rng(mix_seed(spec.seed, 0x1000 + static_cast<std::uint64_t>(c)));
    auto deviation = normal_values(class_rng, npix, 1.0);
    std::vector<double> center(npix);
    for (std::size_t i = 0; i < npix; ++i) {
      center[i] = spec.prototype_scale * proto.pixels[i] + spec.domain_offset * deviation[i] +
                  spec.style_strength * style[i];
    }
    auto tokens = caption_tokens(tmpl, spec.class_token(c), spec.seq_len);
    ds.captions.push_back(tokens);
    auto make = [&](std::vector<Example>& split, int count) {
      for (int k = 0; k < count; ++k) {
        auto noise = normal_values(class_rng, npix, 1.0);
        Example ex{Image{spec.image_side, spec.channels, center}, tokens, c, 0};
        for (std::size_t i = 0; i < npix; ++i) ex.image.pixels[i] += spec.pixel_noise * noise[i];
        split.push_back(std::move(ex));
      }
    };
    make(ds.train, spec.train_per_class);
    make(ds.test, spec.test_per_class);
  }
  for (std::size_t i = 0; i < ds.train.size(); ++i) ds.train[i].id = static_cast<int>(i);
  for (std::size_t i = 0; i < ds.test.size(); ++i) ds.test[i].id = static_cast<int>(i);
  return ds;
}

/// One example per line: `class_id;tok tok ...;px px ...` in base-10 text,
/// reals at round-trip precision.
inline void write_examples(std::ostream& os, const std::vector<Example>& examples) {
  char buf[32];
  for (const auto& ex : examples) {
    os << ex.label << ';';
    for (std::size_t i = 0; i < ex.tokens.size(); ++i) os << (i ? " " : "") << ex.tokens[i];
    os << ';';
    for (std::size_t i = 0; i < ex.image.pixels.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", ex.image.pixels[i]);
      os << (i ? " " : "") << buf;
    }
    os << '\n';
  }
}

inline std::vector<Example> read_examples(std::istream& is, int side, int channels) {
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      throw ParseError("dataset line " + std::to_string(lineno) + ": " + why);
    };
    auto a = line.find(';');
    auto b = a == std::string::npos ? a : line.find(';', a + 1);
    if (b == std::string::npos) fail("expected three ';'-separated fields");
    Example ex;
    try {
      std::size_t used = 0;
      ex.label = std::stoi(line.substr(0, a), &used);
      if (used != a) fail("bad class id");
    } catch (const std::logic_error&) {
      fail("bad class id");
    }
    std::istringstream toks(line.substr(a + 1, b - a - 1));
    for (int t; toks >> t;) ex.tokens.push_back(t);
    if (!toks.eof()) fail("bad token list");
    std::istringstream px(line.substr(b + 1));
    std::string word;
    while (px >> word) {
      char* end = nullptr;
      double v = std::strtod(word.c_str(), &end);
      if (*end != '\0') fail("bad pixel value '" + word + "'");
      ex.image.pixels.push_back(v);
    }
    if (ex.image.pixels.size() != static_cast<std::size_t>(side) * side * channels) {
      fail("expected " + std::to_string(side * side * channels) + " pixel values");
    }
    ex.image.side = side;
    ex.image.channels = channels;
    ex.id = static_cast<int>(out.size());
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace comma
