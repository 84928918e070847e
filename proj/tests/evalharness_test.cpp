#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "neuneu/evalharness.hpp"

using namespace neuneu;

namespace {

// Independent pairwise oracle: scans every ordered index pair once.
double brute_force_ranking(const std::vector<RankItem>& items) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = 0; j < items.size(); ++j) {
      if (j <= i) continue;
      if (items[i].task != items[j].task || items[i].config == items[j].config) continue;
      if (std::abs(items[i].truth - items[j].truth) < 1e-12) continue;
      const bool pred_i_better = items[i].pred > items[j].pred;
      const bool pred_tie = items[i].pred == items[j].pred;
      const bool true_i_better = items[i].truth > items[j].truth;
      total += pred_tie ? 0.5 : (pred_i_better == true_i_better ? 1.0 : 0.0);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

EvalRun make_run(const std::string& run, const std::string& task, std::vector<double> acc) {
  Trajectory t;
  t.run_id = run;
  t.task_id = task;
  t.compute_unit_flops = 1e15;
  t.accuracies = std::move(acc);
  return {t, nullptr};
}

std::vector<double> ramp(std::size_t n, double lo, double hi) {
  std::vector<double> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1));
  return v;
}

}  // namespace

TEST(Mae, Examples) {
  std::vector<double> a{0.3, 0.7}, b{0.4, 0.6}, c{0.5, 0.5};
  EXPECT_DOUBLE_EQ(mae(a, a), 0.0);
  EXPECT_NEAR(mae(b, c), 0.1, 1e-15);
  std::vector<double> empty;
  EXPECT_THROW(mae(empty, empty), InvalidArgument);
  EXPECT_THROW(mae(a, std::vector<double>{0.1}), InvalidArgument);
}

TEST(Coverage, Examples) {
  std::vector<std::pair<double, double>> full{{0, 1}, {0, 1}, {0, 1}};
  EXPECT_DOUBLE_EQ(calibration_coverage(full, std::vector<double>{0.0, 0.5, 1.0}), 1.0);
  std::vector<std::pair<double, double>> iv{{0.4, 0.6}, {0.4, 0.6}};
  EXPECT_DOUBLE_EQ(calibration_coverage(iv, std::vector<double>{0.5, 0.7}), 0.5);
  EXPECT_DOUBLE_EQ(calibration_coverage(iv, std::vector<double>{0.4, 0.6}), 1.0);
  std::vector<std::pair<double, double>> none;
  EXPECT_THROW(calibration_coverage(none, std::vector<double>{}), InvalidArgument);
  std::vector<std::pair<double, double>> bad{{0.6, 0.4}};
  EXPECT_THROW(calibration_coverage(bad, std::vector<double>{0.5}), InvalidArgument);
}

TEST(Coverage, MatchesCounter) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<std::pair<double, double>> iv;
  std::vector<double> t;
  std::size_t count = 0;
  for (int i = 0; i < 5000; ++i) {
    double a = u(rng), b = u(rng);
    if (a > b) std::swap(a, b);
    iv.emplace_back(a, b);
    t.push_back(u(rng));
    if (!(t.back() < a) && !(t.back() > b)) ++count;
  }
  EXPECT_EQ(calibration_coverage(iv, t), static_cast<double>(count) / 5000.0);
}

TEST(Ranking, PerfectAndAntiPredictors) {
  std::vector<RankItem> items;
  for (int m = 0; m < 5; ++m)
    for (const char* task : {"a", "b"}) items.push_back({"m" + std::to_string(m), task, 0.1 * m, 0.1 * m + 0.01});
  EXPECT_DOUBLE_EQ(ranking_accuracy(items).accuracy, 1.0);
  for (auto& it : items) it.pred = -it.pred;
  EXPECT_DOUBLE_EQ(ranking_accuracy(items).accuracy, 0.0);
  EXPECT_EQ(ranking_accuracy(items).pairs.size(), 20u);
}

TEST(Ranking, TiesAndEmpty) {
  std::vector<RankItem> items{{"x", "t", 0.5, 0.2}, {"y", "t", 0.5, 0.3}, {"z", "t", 0.1, 0.3}};
  auto r = ranking_accuracy(items);
  // (x,y): predicted tie -> 0.5; (x,z): wrong order -> 0; (y,z): true tie skipped.
  ASSERT_EQ(r.pairs.size(), 2u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.25);
  std::vector<RankItem> lonely{{"x", "t", 0.5, 0.2}, {"y", "u", 0.5, 0.3}};
  EXPECT_THROW(ranking_accuracy(lonely), InvalidArgument);
}

TEST(Ranking, MatchesBruteForceOracle) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> pick_task(0, 3), pick_cfg(0, 5), coarse(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<RankItem> items;
    for (int i = 0; i < 30; ++i) {
      // Coarse values create predicted and true ties.
      items.push_back({"c" + std::to_string(pick_cfg(rng)), "t" + std::to_string(pick_task(rng)),
                       trial % 2 ? coarse(rng) * 0.25 : u(rng), trial % 3 ? coarse(rng) * 0.25 : u(rng)});
    }
    EXPECT_DOUBLE_EQ(ranking_accuracy(items).accuracy, brute_force_ranking(items));
  }
}

TEST(Ranking, CustomPairingRule) {
  std::vector<RankItem> items{{"s1-a", "t", 0.1, 0.1}, {"s1-b", "t", 0.9, 0.2}, {"s2-a", "t", 0.3, 0.9}};
  auto same_size_only = [](const RankItem& a, const RankItem& b) { return a.config.substr(0, 2) == b.config.substr(0, 2); };
  auto r = ranking_accuracy(items, same_size_only);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
}

TEST(Bootstrap, ConstantValues) {
  std::vector<double> v(20, 0.42);
  auto [lo, hi] = bootstrap_ci(v, 1000, 0.95, 1);
  EXPECT_DOUBLE_EQ(lo, 0.42);
  EXPECT_DOUBLE_EQ(hi, 0.42);
}

TEST(Bootstrap, BracketsMeanAndIsDeterministic) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(25);
    for (auto& x : v) x = u(rng);
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    auto a = bootstrap_ci(v, 2000, 0.95, trial);
    auto b = bootstrap_ci(v, 2000, 0.95, trial);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.first, m);
    EXPECT_GE(a.second, m);
  }
  std::vector<double> v{1.0};
  EXPECT_THROW(bootstrap_ci(v, 100, 1.0, 0), InvalidArgument);
}

TEST(EvaluateRuns, OracleStubHasZeroError) {
  std::vector<EvalRun> runs{make_run("r1", "t", ramp(10, 0.2, 0.8)), make_run("r2", "t", ramp(10, 0.3, 0.5))};
  auto recs = evaluate_runs(runs, 0.2, oracle_predictor());
  ASSERT_EQ(recs.size(), 16u);
  auto rep = make_report("oracle", 0.2, recs, runs);
  EXPECT_DOUBLE_EQ(rep.overall_mae(), 0.0);
  EXPECT_DOUBLE_EQ(rep.coverage(), 1.0);
  ASSERT_TRUE(rep.ranking.has_value());
  EXPECT_DOUBLE_EQ(rep.ranking->accuracy, 1.0);
}

TEST(EvaluateRuns, EightHorizonsPerRunAtTwentyPercent) {
  std::vector<EvalRun> runs{make_run("r1", "t", ramp(10, 0.2, 0.8))};
  auto recs = evaluate_runs(runs, 0.2, oracle_predictor());
  ASSERT_EQ(recs.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(recs[i].horizon, i + 1);
    EXPECT_EQ(recs[i].target, i + 2);
  }
}

TEST(EvalReport, AggregatesRecomputeFromCsv) {
  std::vector<EvalRun> runs{make_run("r1", "a", ramp(10, 0.2, 0.8)), make_run("r2", "b", ramp(12, 0.7, 0.3))};
  TargetPredictor noisy = [](const EvalQuery& q) {
    const double y = q.trajectory.accuracies[q.target] + 0.01 * static_cast<double>(q.target % 3);
    return PointInterval{y, y - 0.015, y + 0.005};
  };
  auto rep = make_report("noisy", 0.2, evaluate_runs(runs, 0.2, noisy), runs);
  std::istringstream csv(rep.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "run,task,horizon,pred,lo,hi,truth,abs_err");
  double sum = 0;
  std::size_t n = 0, covered = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 8u);
    sum += std::stod(f[7]);
    const double lo = std::stod(f[4]), hi = std::stod(f[5]), truth = std::stod(f[6]);
    covered += (lo <= truth && truth <= hi) ? 1 : 0;
    ++n;
  }
  ASSERT_EQ(n, rep.records.size());
  EXPECT_NEAR(rep.overall_mae(), sum / n, 1e-12);
  EXPECT_DOUBLE_EQ(rep.coverage(), static_cast<double>(covered) / n);
  auto j = rep.to_json();
  EXPECT_NEAR(j.at("mae").get<double>(), sum / n, 1e-12);
  EXPECT_EQ(j.at("records").size(), n);
  EXPECT_TRUE(j.at("mae_per_task").contains("a"));
  EXPECT_TRUE(j.at("mae_per_horizon").contains("1"));
}

TEST(ContextSweep, TargetCountsShrink) {
  std::vector<EvalRun> runs{make_run("r1", "t", ramp(20, 0.2, 0.8)), make_run("r2", "t", ramp(15, 0.1, 0.4))};
  std::vector<double> fr{0.1, 0.2, 0.5, 0.8};
  auto s = context_sweep(runs, fr, oracle_predictor());
  ASSERT_EQ(s.size(), 4u);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LE(s[i].targets, s[i - 1].targets);
  std::vector<double> one{0.2};
  auto single = context_sweep(runs, one, oracle_predictor());
  EXPECT_EQ(single[0].targets, evaluate_runs(runs, 0.2, oracle_predictor()).size());
  std::vector<double> bad{0.5, 0.2};
  EXPECT_THROW(context_sweep(runs, bad, oracle_predictor()), InvalidArgument);
}

TEST(Predictors, MissingOracleInputs) {
  std::vector<EvalRun> runs{make_run("r1", "t", ramp(10, 0.2, 0.8))};
  auto logistic = logistic_predictor({{"t", LogisticParams{0.5, -2, 3, 0.2}}});
  EXPECT_THROW(evaluate_runs(runs, 0.2, logistic), MissingOracle);
  ModelConfig c = ModelConfig::desk(Variant::HistDiff);
  c.hidden_dim = 16;
  c.layers = 1;
  Forecaster m(c, 1);
  EXPECT_THROW(evaluate_runs(runs, 0.2, forecaster_predictor(m)), MissingOracle);
}

TEST(Predictors, LogisticUsesOracleMeanLoss) {
  std::vector<std::vector<float>> probs;
  for (int c = 0; c < 10; ++c) probs.push_back(std::vector<float>(100, 0.3f + 0.04f * c));
  auto src = std::make_shared<CachedLossSource>(std::make_shared<MemoryLossSource>(probs));
  EvalRun run = make_run("r1", "t", ramp(10, 0.2, 0.8));
  run.source = src;
  LogisticParams p{0.6, -2.0, 1.0, 0.2};
  auto recs = evaluate_runs({run}, 0.2, logistic_predictor({{"t", p}}));
  ASSERT_EQ(recs.size(), 8u);
  for (const auto& r : recs) {
    const double l = -std::log(static_cast<double>(0.3f + 0.04f * r.target));
    EXPECT_NEAR(r.pred, std::clamp(logistic_predict(p, l), 0.0, 1.0), 1e-9);
    EXPECT_EQ(r.lo, r.pred);
  }
}

TEST(Predictors, ForecasterEvaluationLeavesWeightsUntouched) {
  ModelConfig c = ModelConfig::desk(Variant::NoLoss);
  c.hidden_dim = 16;
  c.layers = 1;
  Forecaster m(c, 3);
  std::vector<std::vector<double>> before;
  for (const auto& e : m.params().entries()) before.push_back(e.tensor.values());
  std::vector<EvalRun> runs{make_run("r1", "t", ramp(10, 0.2, 0.8))};
  auto recs = evaluate_runs(runs, 0.2, forecaster_predictor(m));
  EXPECT_EQ(recs.size(), 8u);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(m.params().entries()[i].tensor.values(), before[i]);
}
