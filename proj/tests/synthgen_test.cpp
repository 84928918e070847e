#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <unistd.h>

#include "neuneu/datapipe/io.hpp"
#include "neuneu/forecaster/train.hpp"
#include "neuneu/synthgen.hpp"

using namespace neuneu;
using namespace neuneu::synth;
namespace fs = std::filesystem;

namespace {

struct Moments {
  double mean = 0;
  double var = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size());
  return m;
}

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("neuneu_synth_" + std::to_string(::getpid()) + "_" + std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

}  // namespace

TEST(GenTrajectory, SaturatingClosedForm) {
  FamilySpec s;
  s.noise_std = 0.0;
  s.chance = 0.25;
  s.ceiling = 0.85;
  s.rate = 0.9;
  s.midpoint = 4.5;
  s.checkpoints = 12;
  auto t = gen_trajectory(s, 7);
  ASSERT_EQ(t.length(), 12u);
  const double expected = 0.25 + 0.6 / (1.0 + std::exp(-0.9 * (12 - 4.5)));
  EXPECT_NEAR(t.accuracies.back(), expected, 1e-6);
}

TEST(GenTrajectory, InverseDecreases) {
  FamilySpec s;
  s.family = Family::Inverse;
  s.noise_std = 0.0;
  auto t = gen_trajectory(s, 1);
  EXPECT_LT(t.accuracies.back(), t.accuracies.front());
  for (std::size_t i = 1; i < t.length(); ++i) EXPECT_LE(t.accuracies[i], t.accuracies[i - 1]);
}

TEST(GenTrajectory, PlateauReachesCeilingBeforeHalfway) {
  CorpusOptions opt;
  opt.noise_std = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    FamilySpec s = draw_family_spec(Family::Plateau, 0.7, seed, opt);
    const double half = s.mean_curve(static_cast<double>(s.checkpoints) / 2.0);
    EXPECT_GE(half - s.chance, 0.98 * (s.ceiling - s.chance));
  }
}

TEST(GenTrajectory, UShapedDipsBelowSaturating) {
  FamilySpec s;
  s.family = Family::UShaped;
  s.dip_depth = 0.1;
  s.dip_location = 5.0;
  FamilySpec plain = s;
  plain.family = Family::Saturating;
  EXPECT_NEAR(plain.mean_curve(5.0) - s.mean_curve(5.0), 0.1, 1e-12);
}

TEST(GenTrajectory, DeterministicClampedAndValidated) {
  FamilySpec s;
  s.noise_std = 0.5;
  auto a = gen_trajectory(s, 3);
  auto b = gen_trajectory(s, 3);
  EXPECT_EQ(a.accuracies, b.accuracies);
  for (double y : a.accuracies) {
    EXPECT_GE(y, 0.0);
    EXPECT_LE(y, 1.0);
  }
  s.checkpoints = 3;
  EXPECT_THROW(gen_trajectory(s, 3), InvalidArgument);
  s.checkpoints = 10;
  s.noise_std = -1;
  EXPECT_THROW(gen_trajectory(s, 3), InvalidArgument);
  EXPECT_THROW(family_from_string("linear"), InvalidArgument);
}

TEST(GenTokenProbs, CapabilityExtremesDifferInMean) {
  auto lo = moments(gen_token_probs(0.0, 100000, 1).probs);
  auto hi = moments(gen_token_probs(1.0, 100000, 2).probs);
  EXPECT_GE(hi.mean - lo.mean, 0.2);
}

TEST(GenTokenProbs, MatchedMeanPairDiffersInVariance) {
  TokenModel tm;
  auto a = moments(gen_token_probs(tm.band_lo, 100000, 11).probs);
  auto b = moments(gen_token_probs(tm.band_hi, 100000, 12).probs);
  EXPECT_LE(std::abs(a.mean - b.mean), 0.01);
  EXPECT_GE(std::abs(a.var - b.var), 0.02);
}

TEST(GenTokenProbs, RangeLengthAndDeterminism) {
  for (double c : {0.0, 0.2, 0.5, 0.8, 1.0}) {
    auto p = gen_token_probs(c, 5000, 9);
    ASSERT_EQ(p.size(), 5000u);
    for (double v : p.probs) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(p.probs, gen_token_probs(c, 5000, 9).probs);
  }
  EXPECT_EQ(gen_token_probs(0.5, 1, 0).size(), 1u);
  EXPECT_THROW(gen_token_probs(0.5, 0, 0), InvalidArgument);
}

TEST(GenRuns, MatchedMeanRunsExistAndSplitIsDisjoint) {
  CorpusOptions opt;
  opt.runs = 40;
  opt.seed = 5;
  auto runs = gen_runs(opt);
  std::size_t matched = 0, held = 0;
  std::set<std::string> ids;
  for (const auto& r : runs) {
    matched += r.info.matched_mean;
    held += r.info.heldout;
    ids.insert(r.info.run_id);
    EXPECT_NO_THROW(r.trajectory.validate());
    if (r.info.matched_mean) EXPECT_EQ(opt.token_model.mean_prob(r.info.spec.capability_at(0)), opt.token_model.mean_band);
  }
  EXPECT_GE(matched, 2u);
  EXPECT_EQ(held, 8u);
  EXPECT_EQ(ids.size(), runs.size());
}

TEST(GenRuns, HeldoutOnlyFamiliesNeverInTrain) {
  CorpusOptions opt;
  opt.runs = 30;
  opt.heldout_only = {Family::Inverse};
  for (const auto& r : gen_runs(opt)) {
    if (r.info.family == Family::Inverse) EXPECT_TRUE(r.info.heldout);
  }
}

TEST(GenCorpus, FileCountsAndDatapipeValidation) {
  TempDir dir;
  CorpusOptions opt;
  opt.runs = 10;
  opt.tokens = 256;
  opt.seed = 1;
  auto idx = gen_corpus(opt, dir.path());
  EXPECT_EQ(idx.trajectory_files, 10u);
  std::size_t json_files = 0, nnsl_files = 0, total_T = 0;
  std::set<std::string> train_ids, held_ids;
  for (const auto& e : fs::recursive_directory_iterator(dir.path())) {
    if (e.path().extension() == ".nnsl") ++nnsl_files;
    if (e.path().extension() == ".json" && e.path().filename() != "corpus.json") {
      ++json_files;
      auto t = read_trajectory(e.path());
      total_T += t.length();
      FileLossSource src(t);
      for (std::size_t c = 0; c < t.length(); ++c) EXPECT_EQ(src.probs(c).size(), 256u);
      (e.path().parent_path().filename() == "train" ? train_ids : held_ids).insert(t.run_id);
    }
  }
  EXPECT_EQ(json_files, 10u);
  EXPECT_EQ(nnsl_files, total_T);
  EXPECT_EQ(idx.prob_files, total_T);
  for (const auto& id : held_ids) EXPECT_EQ(train_ids.count(id), 0u);
  EXPECT_FALSE(held_ids.empty());
}

TEST(GenCorpus, RegenerationIsByteIdentical) {
  TempDir a, b;
  CorpusOptions opt;
  opt.runs = 6;
  opt.tokens = 128;
  opt.seed = 3;
  gen_corpus(opt, a.path());
  gen_corpus(opt, b.path());
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a.path());
    ASSERT_TRUE(fs::exists(b.path() / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b.path() / rel)) << rel;
    ++compared;
  }
  EXPECT_GT(compared, 6u);
}

TEST(SynthLossSource, MatchesStoredFiles) {
  TempDir dir;
  CorpusOptions opt;
  opt.runs = 3;
  opt.tokens = 200;
  opt.seed = 8;
  gen_corpus(opt, dir.path());
  for (const auto& r : gen_runs(opt)) {
    const fs::path p = dir.path() / (r.info.heldout ? "heldout" : "train") / (r.info.run_id + ".json");
    FileLossSource file(read_trajectory(p));
    SynthLossSource mem(r.info, opt.tokens, opt.token_model);
    for (std::size_t c = 0; c < r.trajectory.length(); ++c) EXPECT_EQ(file.probs(c), mem.probs(c));
  }
}

TEST(SmokeTrain, PinballLossHalvesOnSyntheticExamples) {
  CorpusOptions opt;
  opt.runs = 40;
  opt.tokens = 64;
  opt.seed = 2;
  auto runs = gen_runs(opt);
  std::vector<TrainingExample> examples;
  for (const auto& r : runs) {
    auto ex = make_training_examples(impute_unit_gaps(std::vector<double>(r.trajectory.accuracies.begin(),
                                                                          r.trajectory.accuracies.begin() + 4)),
                                     r.trajectory, Variant::NoLoss, nullptr);
    for (auto& e : ex) {
      if (examples.size() < 200) examples.push_back(std::move(e));
    }
  }
  ASSERT_EQ(examples.size(), 200u);
  ModelConfig c = ModelConfig::desk(Variant::NoLoss);
  c.hidden_dim = 16;
  c.layers = 1;
  c.ffn_dim = 32;
  c.train.batch_size = 20;
  c.train.epochs = 30;
  c.train.lr = 3e-3;
  Forecaster m(c, 4);
  VectorExampleSet data(std::move(examples));
  const double before = mean_loss(m, data);
  auto res = train(m, data, 4);
  ASSERT_FALSE(res.aborted);
  EXPECT_LE(mean_loss(m, data), 0.5 * before);
}
