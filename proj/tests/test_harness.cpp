#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "comma/harness/train.hpp"
#include "gradient_cases.hpp"
#include "record_fuzz.hpp"

using namespace comma;

namespace {

// Small, quick configuration shared by the training tests.
RunConfig fast_config() {
  RunConfig c;
  c.pretrain_steps = 200;
  c.data.num_classes = 4;
  c.data.test_per_class = 10;
  c.epochs = 2;
  c.shots = 4;
  c.sync_shapes();
  return c;
}

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("comma_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string dump(const Dataset& ds) {
  std::ostringstream os;
  write_examples(os, ds.train);
  write_examples(os, ds.test);
  return os.str();
}

}  // namespace

TEST(Dataset, ExampleCountIsClassesTimesPerClass) {
  DatasetSpec spec;
  spec.num_classes = 6;
  spec.train_per_class = 16;
  spec.test_per_class = 5;
  auto ds = gen_synth_dataset(spec);
  EXPECT_EQ(ds.train.size(), 6u * 16u);
  EXPECT_EQ(ds.test.size(), 6u * 5u);
}

TEST(Dataset, ClassTokenSharedWithinClassAndUniqueAcross) {
  DatasetSpec spec;
  spec.num_classes = 5;
  auto ds = gen_synth_dataset(spec);
  const auto slot = static_cast<std::size_t>(spec.template_length);
  std::map<int, int> token_of;
  for (const auto& ex : ds.train) {
    const int tok = ex.tokens[slot];
    auto [it, inserted] = token_of.emplace(ex.label, tok);
    EXPECT_EQ(it->second, tok);
    for (auto t : ex.tokens) EXPECT_LT(t, spec.vocab_size);
    EXPECT_LT(ex.label, spec.num_classes);
  }
  std::set<int> distinct;
  for (auto& [c, t] : token_of) distinct.insert(t);
  EXPECT_EQ(distinct.size(), token_of.size());
}

TEST(Dataset, SameSeedIsBitIdentical) {
  DatasetSpec spec;
  spec.seed = 99;
  spec.domain_offset = 0.3;
  spec.style_strength = 0.7;
  EXPECT_EQ(dump(gen_synth_dataset(spec)), dump(gen_synth_dataset(spec)));
  auto other = spec;
  other.seed = 100;
  EXPECT_NE(dump(gen_synth_dataset(spec)), dump(gen_synth_dataset(other)));
}

TEST(Dataset, InvalidSpecsRejected) {
  DatasetSpec spec;
  spec.num_classes = 1;
  EXPECT_THROW(gen_synth_dataset(spec), ConfigError);
  spec.num_classes = 4;
  spec.train_per_class = 8;
  EXPECT_THROW(gen_synth_dataset(spec), ConfigError);
  spec.train_per_class = 16;
  spec.class_offset = 46;
  EXPECT_THROW(gen_synth_dataset(spec), ConfigError);
}

TEST(Dataset, FileRoundTripIsExact) {
  DatasetSpec spec;
  spec.num_classes = 3;
  auto ds = gen_synth_dataset(spec);
  std::stringstream ss;
  write_examples(ss, ds.test);
  auto back = read_examples(ss, spec.image_side, spec.channels);
  ASSERT_EQ(back.size(), ds.test.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].label, ds.test[i].label);
    EXPECT_EQ(back[i].tokens, ds.test[i].tokens);
    EXPECT_EQ(back[i].image.pixels, ds.test[i].image.pixels);
  }
}

TEST(Dataset, MalformedFileReportsLine) {
  std::stringstream ss("0;1 2;0.5 0.5\n1;1 2;oops\n");
  try {
    read_examples(ss, 1, 2);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Protocol, SplitFourClasses) {
  auto p = split_base_novel(4);
  EXPECT_EQ(p.base, (std::vector<int>{0, 1}));
  EXPECT_EQ(p.novel, (std::vector<int>{2, 3}));
}

TEST(Protocol, SplitOddCountPutsExtraInBase) {
  auto p = split_base_novel(5);
  EXPECT_EQ(p.base, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(p.novel, (std::vector<int>{3, 4}));
}

TEST(Protocol, SplitCoversAndIsDisjointForAnyCount) {
  for (int c = 2; c <= 40; ++c) {
    auto p = split_base_novel(c);
    std::set<int> all(p.base.begin(), p.base.end());
    for (int n : p.novel) EXPECT_TRUE(all.insert(n).second) << "overlap at C=" << c;
    EXPECT_EQ(all.size(), static_cast<std::size_t>(c));
    EXPECT_EQ(*all.begin(), 0);
    EXPECT_EQ(*all.rbegin(), c - 1);
  }
  EXPECT_THROW(split_base_novel(1), ConfigError);
}

TEST(Protocol, FewShotExactCountNoDuplicatesSeeded) {
  DatasetSpec spec;
  spec.num_classes = 6;
  spec.train_per_class = 20;
  auto ds = gen_synth_dataset(spec);
  auto a = sample_few_shot(ds, {0, 1, 2}, 16, 5);
  EXPECT_EQ(a.size(), 48u);
  std::map<int, std::set<int>> ids;
  for (const auto& ex : a) EXPECT_TRUE(ids[ex.label].insert(ex.id).second);
  for (int c : {0, 1, 2}) EXPECT_EQ(ids[c].size(), 16u);
  auto b = sample_few_shot(ds, {0, 1, 2}, 16, 5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].id, b[i].id);
  auto c = sample_few_shot(ds, {0, 1, 2}, 16, 6);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a[i].id != c[i].id;
  EXPECT_TRUE(differs);
}

TEST(Protocol, FewShotInsufficientNamesClass) {
  DatasetSpec spec;
  spec.num_classes = 3;
  auto ds = gen_synth_dataset(spec);
  try {
    sample_few_shot(ds, {0, 2}, 17, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos) << e.what();
  }
}

TEST(Protocol, HarmonicMeanMatchesPublishedAverages) {
  EXPECT_NEAR(harmonic_mean(69.34, 74.22), 71.70, 0.01);
  EXPECT_NEAR(harmonic_mean(82.63, 67.99), 74.60, 0.01);
  EXPECT_NEAR(harmonic_mean(80.73, 73.60), 77.00, 0.01);
  EXPECT_NEAR(harmonic_mean(82.28, 75.14), 78.55, 0.01);
}

TEST(Protocol, HarmonicMeanEdgeCases) {
  for (double x : {0.5, 12.0, 87.25, 100.0}) EXPECT_DOUBLE_EQ(harmonic_mean(x, x), x);
  EXPECT_EQ(harmonic_mean(0.0, 0.0), 0.0);
  EXPECT_EQ(harmonic_mean(50.0, 0.0), 0.0);
}

TEST(Config, RoundTripsThroughText) {
  auto c = fast_config();
  c.strategy = PromptStrategy::MapleUni;
  c.lambda = 0.25;
  c.attention_scale = AttentionScale::PromptLength;
  std::istringstream in(format_config(c));
  auto back = parse_config(in);
  EXPECT_EQ(format_config(back), format_config(c));
}

TEST(Config, UnknownKeyIsAnError) {
  std::istringstream in("strategy = comma\nlearning_rate = 0.1\n");
  try {
    parse_config(in, "x.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
  }
}

TEST(Config, ValidationCatchesBadValues) {
  std::istringstream bad_s("S = 9\n");
  EXPECT_THROW(parse_config(bad_s), ConfigError);
  std::istringstream bad_num("lr = fast\n");
  EXPECT_THROW(parse_config(bad_num), ParseError);
  std::istringstream bad_strategy("strategy = cocoop\n");
  EXPECT_THROW(parse_config(bad_strategy), ConfigError);
}

TEST(Config, DepthClampsToLayerCount) {
  RunConfig c;
  EXPECT_EQ(c.depth, 9);
  EXPECT_EQ(c.effective_depth(), c.layers());
  c.strategy = PromptStrategy::CoopText;
  EXPECT_EQ(c.effective_depth(), 1);
}

TEST(Pretrain, ZeroShotBeatsChanceOnTheWorld) {
  RunConfig cfg;
  cfg.strategy = PromptStrategy::None;
  auto m = build_model(cfg, 0);
  DatasetSpec d = cfg.data;
  d.num_classes = 10;
  d.domain_offset = 0.0;
  d.style_strength = 0.0;
  d.pixel_noise = 0.0;
  d.test_per_class = 2;
  EXPECT_GT(evaluate_all(m, gen_synth_dataset(d)), 80.0);
}

TEST(Train, CeDecreasesOnNoiselessSeparableToy) {
  auto cfg = fast_config();
  // Four classes give two base classes, the smallest set with a nontrivial
  // softmax over base classes.
  cfg.data.pixel_noise = 0.0;
  cfg.data.domain_offset = 0.0;
  cfg.epochs = 4;
  cfg.kd_enabled = false;
  auto rec = train_run(cfg, 3);
  ASSERT_TRUE(rec.ok()) << rec.status;
  ASSERT_EQ(rec.epoch_ce.size(), 4u);
  EXPECT_LT(rec.epoch_ce.back(), rec.epoch_ce.front());
}

TEST(Train, BackboneFrozenPromptsMove) {
  auto cfg = fast_config();
  auto start = build_model(cfg, 4);
  auto run = train_model(cfg, 4);
  EXPECT_EQ(run.model.backbone.checksum(), start.backbone.checksum());
  EXPECT_EQ(run.record.backbone_checksum, start.backbone.checksum());
  auto before = start.prompts.parameters();
  auto after = run.model.prompts.parameters();
  ASSERT_EQ(before.size(), after.size());
  bool moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) {
    auto a = before[i].data();
    auto b = after[i].data();
    for (std::size_t j = 0; j < a.size(); ++j) moved |= a[j] != b[j];
  }
  EXPECT_TRUE(moved);
}

TEST(Train, SameConfigAndSeedGiveSameHash) {
  auto cfg = fast_config();
  auto a = train_run(cfg, 8);
  auto b = train_run(cfg, 8);
  EXPECT_EQ(record_content_hash(a), record_content_hash(b));
  auto c = train_run(cfg, 9);
  EXPECT_NE(record_content_hash(a), record_content_hash(c));
}

TEST(Train, RecordFieldsAreConsistent) {
  auto cfg = fast_config();
  auto r = train_run(cfg, 2);
  EXPECT_NEAR(r.hm, harmonic_mean(r.base, r.novel), 1e-9);
  EXPECT_EQ(r.prompt_distance.size(), static_cast<std::size_t>(cfg.layers()));
  for (double d : r.prompt_distance) {
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
  }
  ASSERT_EQ(r.epoch_total.size(), r.epoch_ce.size());
  for (std::size_t e = 0; e < r.epoch_ce.size(); ++e) {
    EXPECT_NEAR(r.epoch_total[e], r.epoch_ce[e] + cfg.lambda * r.epoch_kd[e], 1e-9);
  }
}

TEST(Train, NoneStrategyHasNoLearnablesAndNoDistances) {
  auto cfg = fast_config();
  cfg.strategy = PromptStrategy::None;
  auto r = train_run(cfg, 1);
  EXPECT_TRUE(r.checkpoint.empty());
  EXPECT_TRUE(r.prompt_distance.empty());
  // Nothing learns, so every epoch sees the same mean loss up to summation order.
  EXPECT_NEAR(r.epoch_ce.front(), r.epoch_ce.back(), 1e-12);
}

TEST(Train, DivergenceIsCapturedInRecord) {
  auto cfg = fast_config();
  cfg.lr = 1e306;
  auto r = train_run(cfg, 1);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.status.rfind("diverged", 0), 0u) << r.status;
  EXPECT_EQ(r.hm, 0.0);
}

TEST(Evaluate, EmptySplitIsDataError) {
  auto cfg = fast_config();
  auto m = build_model(cfg, 0);
  auto ds = gen_synth_dataset(cfg.data);
  EXPECT_THROW(accuracy(m, {}, {0, 1}, ds.captions), DataError);
}

TEST(Evaluate, NovelEvaluationLeavesParametersUntouched) {
  auto cfg = fast_config();
  auto run = train_model(cfg, 6);
  auto sum_before = run.model.backbone.checksum();
  auto r1 = evaluate(run.model, run.dataset, run.split);
  auto r2 = evaluate(run.model, run.dataset, run.split);
  EXPECT_EQ(run.model.backbone.checksum(), sum_before);
  EXPECT_EQ(r1.novel, r2.novel);
  EXPECT_EQ(r1.novel, run.record.novel);
}

TEST(CrossDataset, ChecksumUnchangedAndSourceReproduced) {
  auto cfg = fast_config();
  auto run = train_model(cfg, 2);
  auto sum = run.model.backbone.checksum();
  auto other = cfg.data;
  other.class_offset = 10;
  other.seed = 77;
  auto accs = cross_dataset_eval(run.model, {cfg.data, other});
  EXPECT_EQ(run.model.backbone.checksum(), sum);
  ASSERT_EQ(accs.size(), 2u);
  EXPECT_DOUBLE_EQ(accs[0], evaluate_all(run.model, run.dataset));
}

TEST(CrossDataset, VocabularyMismatchIsConfigError) {
  auto cfg = fast_config();
  auto m = build_model(cfg, 0);
  auto other = cfg.data;
  other.vocab_size = 80;
  EXPECT_THROW(cross_dataset_eval(m, {other}), ConfigError);
  other = cfg.data;
  other.template_length = 5;
  EXPECT_THROW(cross_dataset_eval(m, {other}), ConfigError);
}

TEST(CrossDataset, RegeneratedSameSpecWithinSamplingNoise) {
  // Only per-example noise differs between same-spec datasets here, so the
  // accuracy should stay within a few binomial standard errors.
  auto cfg = fast_config();
  cfg.data.domain_offset = 0.0;
  cfg.data.style_strength = 0.0;
  cfg.data.pixel_noise = 1.0;
  cfg.data.test_per_class = 50;
  auto run = train_model(cfg, 1);
  const double src = evaluate_all(run.model, run.dataset);
  const double n = static_cast<double>(run.dataset.test.size());
  std::vector<DatasetSpec> specs;
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto d = cfg.data;
    d.seed = 1000 + s;
    specs.push_back(d);
  }
  auto accs = cross_dataset_eval(run.model, specs);
  double mean_acc = 0.0;
  for (double a : accs) mean_acc += a / 5.0;
  const double p = std::clamp(src / 100.0, 0.05, 0.95);
  const double se = 100.0 * std::sqrt(p * (1.0 - p) / n);
  EXPECT_NEAR(mean_acc, src, 4.0 * se / std::sqrt(5.0) + 4.0 * se) << "source " << src;
}

TEST(DomainShift, ZeroMagnitudeIsIdentity) {
  auto cfg = fast_config();
  auto run = train_model(cfg, 0);
  const double base = evaluate_all(run.model, run.dataset);
  for (auto kind : {ShiftKind::PixelNoise, ShiftKind::Contrast, ShiftKind::TokenDropout}) {
    EXPECT_DOUBLE_EQ(domain_shift_eval(run.model, run.dataset, {kind, 0.0, 3}), base) << to_string(kind);
  }
}

TEST(DomainShift, ShiftedCopiesAreDeterministic) {
  DatasetSpec spec;
  spec.num_classes = 3;
  auto ds = gen_synth_dataset(spec);
  for (auto kind : {ShiftKind::PixelNoise, ShiftKind::Contrast, ShiftKind::TokenDropout}) {
    Shift s{kind, 0.4, 12};
    auto a = apply_shift(ds, s);
    auto b = apply_shift(ds, s);
    EXPECT_EQ(dump(a), dump(b));
    EXPECT_EQ(a.captions, b.captions);
    const bool changed = dump(a) != dump(ds) || a.captions != ds.captions;
    EXPECT_TRUE(changed) << to_string(kind);
  }
}

TEST(DomainShift, UnknownKindIsConfigError) {
  EXPECT_THROW(parse_shift_kind("blur"), ConfigError);
  EXPECT_EQ(parse_shift_kind("contrast"), ShiftKind::Contrast);
}

TEST(DomainShift, AccuracyNonincreasingInPixelNoiseOnAverage) {
  auto cfg = fast_config();
  cfg.data.test_per_class = 40;
  cfg.data.domain_offset = 0.0;
  cfg.data.style_strength = 0.0;
  const std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0};
  std::vector<double> mean_acc(sigmas.size(), 0.0);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto run = train_model(cfg, seed);
    for (std::size_t i = 0; i < sigmas.size(); ++i) {
      mean_acc[i] += domain_shift_eval(run.model, run.dataset, {ShiftKind::PixelNoise, sigmas[i], seed}) / 5.0;
    }
  }
  for (std::size_t i = 1; i < sigmas.size(); ++i) {
    EXPECT_LE(mean_acc[i], mean_acc[i - 1]) << "sigma " << sigmas[i];
  }
}

using comma::testing::random_record;

TEST(Record, FuzzedRecordsRoundTripExactly) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 100; ++i) {
    auto r = random_record(rng);
    auto text = serialize_record(r);
    std::istringstream in(text);
    auto back = parse_record(in);
    EXPECT_EQ(serialize_record(back), text);
    EXPECT_EQ(back.epoch_ce, r.epoch_ce);
    EXPECT_EQ(back.base, r.base);
    EXPECT_EQ(back.checkpoint, r.checkpoint);
    EXPECT_EQ(back.wall_clock_seconds, r.wall_clock_seconds);
    EXPECT_EQ(record_content_hash(back), record_content_hash(r));
  }
}

TEST(Record, SaveLoadSaveIsByteIdentical) {
  auto dir = fresh_dir("record_rt");
  auto cfg = fast_config();
  auto r = train_run(cfg, 1);
  auto p1 = save_record(r, dir / "a");
  auto loaded = load_record(p1);
  auto p2 = save_record(loaded, dir / "b");
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  EXPECT_EQ(s1.str(), s2.str());
  EXPECT_EQ(p1.filename(), p2.filename());
  // The restored prompts evaluate exactly like the trained ones.
  auto m = model_from_record(loaded);
  auto ds = gen_synth_dataset(cfg.data);
  auto ev = evaluate(m, ds, split_base_novel(cfg.data.num_classes));
  EXPECT_EQ(ev.base, r.base);
  EXPECT_EQ(ev.novel, r.novel);
}

TEST(Record, TruncatedFileReportsFailingLine) {
  std::mt19937_64 rng(5);
  auto text = serialize_record(random_record(rng));
  // Cut in the middle of the last tensor line.
  auto cut = text.substr(0, text.size() - 40);
  const auto lines = static_cast<int>(std::count(cut.begin(), cut.end(), '\n')) + 1;
  std::istringstream in(cut);
  try {
    parse_record(in);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line " + std::to_string(lines)), std::string::npos) << e.what();
  }
  // Cut on a line boundary: the missing terminator is reported.
  auto whole_lines = text.substr(0, text.rfind("end\n"));
  std::istringstream in2(whole_lines);
  try {
    parse_record(in2);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("missing 'end'"), std::string::npos) << e.what();
  }
}

TEST(Record, RejectsUnknownKeysAndInconsistentHm) {
  std::mt19937_64 rng(6);
  auto r = random_record(rng);
  auto text = serialize_record(r);
  auto bad = text;
  bad.insert(bad.find("seed = "), "colour = blue\n");
  std::istringstream in(bad);
  EXPECT_THROW(parse_record(in), ParseError);
  r.hm += 1.0;
  std::istringstream in2(serialize_record(r));
  EXPECT_THROW(parse_record(in2), ParseError);
  auto dir = fresh_dir("record_hm");
  EXPECT_THROW(save_record(r, dir), ContractError);
}

TEST(Record, AppendOnlyRefusesConflictingOverwrite) {
  auto dir = fresh_dir("record_append");
  std::mt19937_64 rng(7);
  auto r = random_record(rng);
  auto path = save_record(r, dir);
  auto again = r;
  again.wall_clock_seconds += 1.0;  // same content hash
  EXPECT_EQ(save_record(again, dir), path);
  {
    std::ofstream out(path, std::ios::binary);
    out << "comma-run-record 1\nend\n";
  }
  EXPECT_THROW(save_record(r, dir), Error);
}

TEST(TotalLoss, ToyCommaGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed : {1, 2}) EXPECT_LT(comma::testing::toy_comma_gradient_error(seed), 1e-5) << seed;
}

TEST(TotalLoss, ToyGradientsHoldForEveryPromptedStrategy) {
  for (auto st : {PromptStrategy::CoopText, PromptStrategy::DeepIndependent, PromptStrategy::MapleUni}) {
    auto toy = comma::testing::make_toy_comma(3, st);
    const double err = finite_diff_check([&] { return toy.loss(); }, toy.model.prompts.parameters());
    EXPECT_LT(err, 1e-5) << to_string(st);
  }
}
