#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neuneu/datapipe/examples.hpp"
#include "neuneu/forecaster/model.hpp"
#include "neuneu/logfit.hpp"

namespace neuneu {

// ---- metrics ----

inline double mae(std::span<const double> preds, std::span<const double> truths) {
  if (preds.empty()) throw InvalidArgument("mae: empty input");
  if (preds.size() != truths.size()) throw InvalidArgument("mae: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - truths[i]);
  return s / static_cast<double>(preds.size());
}

// Fraction of truths inside the closed interval [lo, hi].
inline double calibration_coverage(std::span<const std::pair<double, double>> intervals,
                                   std::span<const double> truths) {
  if (intervals.empty()) throw InvalidArgument("calibration_coverage: empty input");
  if (intervals.size() != truths.size()) throw InvalidArgument("calibration_coverage: length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto [lo, hi] = intervals[i];
    if (lo > hi) throw InvalidArgument("calibration_coverage: lo > hi at record " + std::to_string(i));
    if (lo <= truths[i] && truths[i] <= hi) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(truths.size());
}

struct RankItem {
  std::string config;
  std::string task;
  double pred = 0.0;
  double truth = 0.0;
};

struct RankPair {
  std::size_t i = 0;
  std::size_t j = 0;
  double score = 0.0;
};

struct RankingResult {
  double accuracy = 0.0;
  std::vector<RankPair> pairs;

  std::vector<double> scores() const {
    std::vector<double> s;
    for (const auto& p : pairs) s.push_back(p.score);
    return s;
  }
};

// Decides whether two items form a comparable pair; applied to items of the
// same task only.
using PairingRule = std::function<bool(const RankItem&, const RankItem&)>;

inline bool distinct_configs(const RankItem& a, const RankItem& b) { return a.config != b.config; }

inline constexpr double kTieTolerance = 1e-12;

// All unordered pairs within each task admitted by `rule`. A pair scores 1
// when the predicted order matches the true order, 0.5 on a predicted tie,
// and is skipped on a true tie.
inline RankingResult ranking_accuracy(const std::vector<RankItem>& items, const PairingRule& rule = distinct_configs) {
  std::map<std::string, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < items.size(); ++i) by_task[items[i].task].push_back(i);
  RankingResult r;
  double total = 0.0;
  for (const auto& [task, idx] : by_task) {
    for (std::size_t x = 0; x < idx.size(); ++x) {
      for (std::size_t y = x + 1; y < idx.size(); ++y) {
        const auto& a = items[idx[x]];
        const auto& b = items[idx[y]];
        if (!rule(a, b)) continue;
        const double dt = a.truth - b.truth;
        if (std::abs(dt) < kTieTolerance) continue;
        const double dp = a.pred - b.pred;
        const double score = dp == 0.0 ? 0.5 : ((dp > 0.0) == (dt > 0.0) ? 1.0 : 0.0);
        r.pairs.push_back({idx[x], idx[y], score});
        total += score;
      }
    }
  }
  if (r.pairs.empty()) throw InvalidArgument("ranking_accuracy: no valid pairs");
  r.accuracy = total / static_cast<double>(r.pairs.size());
  return r;
}

// Percentile bootstrap interval for the mean.
inline std::pair<double, double> bootstrap_ci(std::span<const double> values, std::size_t resamples = 10000,
                                              double level = 0.95, std::uint64_t seed = 0) {
  if (values.empty()) throw InvalidArgument("bootstrap_ci: empty input");
  if (!(level > 0.0 && level < 1.0)) throw InvalidArgument("bootstrap_ci: level must be in (0,1)");
  if (resamples == 0) throw InvalidArgument("bootstrap_ci: resamples must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  auto at = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < resamples ? means[i] * (1.0 - frac) + means[i + 1] * frac : means[i];
  };
  const double alpha = (1.0 - level) / 2.0;
  return {at(alpha), at(1.0 - alpha)};
}

// ---- evaluation over heldout runs ----

struct EvalRecord {
  std::string run;
  std::string task;
  std::size_t horizon = 0;  // target gap j - s_k
  std::size_t target = 0;   // 0-based target checkpoint
  double pred = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  double truth = 0.0;

  double abs_err() const { return std::abs(pred - truth); }
};

struct EvalQuery {
  const Trajectory& trajectory;
  const CachedLossSource* source;  // may be null when no losses are available
  const ContextSequence& context;  // unit gaps; last gap not yet set to the target
  std::size_t target;
};

using TargetPredictor = std::function<PointInterval(const EvalQuery&)>;

struct EvalRun {
  Trajectory trajectory;
  std::shared_ptr<CachedLossSource> source;
};

// Observes the first fraction of every run and predicts every remaining
// checkpoint.
inline std::vector<EvalRecord> evaluate_runs(const std::vector<EvalRun>& runs, double frac,
                                             const TargetPredictor& predictor) {
  std::vector<EvalRecord> out;
  for (const auto& run : runs) {
    const auto split = take_first_fraction(run.trajectory.accuracies, frac);
    const std::size_t sk = split.context.last_checkpoint();
    for (const auto& t : split.targets) {
      EvalQuery q{run.trajectory, run.source.get(), split.context, t.checkpoint};
      const PointInterval p = predictor(q);
      out.push_back({run.trajectory.run_id, run.trajectory.task_id, t.checkpoint - sk, t.checkpoint, p.median, p.lo,
                     p.hi, t.accuracy});
    }
  }
  return out;
}

inline TargetPredictor forecaster_predictor(const Forecaster& model) {
  return [&model](const EvalQuery& q) {
    const std::size_t sk = q.context.last_checkpoint();
    const ContextSequence ctx =
        truncate_oldest(q.context, model.config().max_context()).with_target_gap(q.target - sk);
    Representation rep;
    if (model.config().variant != Variant::NoLoss) {
      if (!q.source) {
        if (uses_future_losses(model.config().variant)) {
          throw MissingOracle("run '" + q.trajectory.run_id + "': variant " + to_string(model.config().variant) +
                              " needs future token probabilities");
        }
        throw DataError("run '" + q.trajectory.run_id + "' has no token probabilities");
      }
      rep = make_representation(model.config().variant, sk, q.target, *q.source);
    }
    return model.forecast(ctx, rep);
  };
}

// Logistic baseline fed the true future mean loss; the interval collapses to
// the point prediction.
inline TargetPredictor logistic_predictor(std::map<std::string, LogisticParams> by_task) {
  return [fits = std::move(by_task)](const EvalQuery& q) {
    auto it = fits.find(q.trajectory.task_id);
    if (it == fits.end()) throw DataError("no logistic fit for task '" + q.trajectory.task_id + "'");
    if (!q.source) {
      throw MissingOracle("run '" + q.trajectory.run_id + "': logistic evaluation needs oracle future mean losses");
    }
    const std::vector<double> l{q.source->mean_loss(q.target)};
    const double y = evaluate_logistic(it->second, l)[0];
    return PointInterval{y, y, y};
  };
}

// Harness sanity stub: predicts the truth.
inline TargetPredictor oracle_predictor() {
  return [](const EvalQuery& q) {
    const double y = q.trajectory.accuracies.at(q.target);
    return PointInterval{y, y, y};
  };
}

struct SweepPoint {
  double fraction = 0.0;
  double mae = 0.0;
  std::size_t targets = 0;
};

inline std::vector<SweepPoint> context_sweep(const std::vector<EvalRun>& runs, std::span<const double> fractions,
                                             const TargetPredictor& predictor) {
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] > 0.0 && fractions[i] < 1.0)) throw InvalidArgument("context_sweep: fractions must be in (0,1)");
    if (i > 0 && !(fractions[i] > fractions[i - 1])) {
      throw InvalidArgument("context_sweep: fractions must be strictly increasing");
    }
  }
  std::vector<SweepPoint> out;
  for (double f : fractions) {
    auto recs = evaluate_runs(runs, f, predictor);
    std::vector<double> p, t;
    for (const auto& r : recs) {
      p.push_back(r.pred);
      t.push_back(r.truth);
    }
    out.push_back({f, mae(p, t), recs.size()});
  }
  return out;
}

// Final-checkpoint predictions as ranking items keyed by (run, task).
inline std::vector<RankItem> final_rank_items(const std::vector<EvalRecord>& records,
                                              const std::map<std::string, std::size_t>& final_checkpoint_by_run_task) {
  std::vector<RankItem> items;
  for (const auto& r : records) {
    auto it = final_checkpoint_by_run_task.find(r.run + "\n" + r.task);
    if (it != final_checkpoint_by_run_task.end() && it->second == r.target)
      items.push_back({r.run, r.task, r.pred, r.truth});
  }
  return items;
}

inline std::vector<RankItem> final_rank_items(const std::vector<EvalRecord>& records, const std::vector<EvalRun>& runs) {
  std::map<std::string, std::size_t> last;
  for (const auto& r : runs) last[r.trajectory.run_id + "\n" + r.trajectory.task_id] = r.trajectory.length() - 1;
  return final_rank_items(records, last);
}

// ---- report ----

struct RankingSummary {
  double accuracy = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t pairs = 0;
};

struct EvalReport {
  std::string method;
  double context_fraction = 0.0;
  std::vector<EvalRecord> records;
  std::optional<RankingSummary> ranking;

  double overall_mae() const {
    std::vector<double> p, t;
    for (const auto& r : records) {
      p.push_back(r.pred);
      t.push_back(r.truth);
    }
    return mae(p, t);
  }

  template <typename Key>
  std::map<Key, double> mae_by(const std::function<Key(const EvalRecord&)>& key) const {
    std::map<Key, std::pair<double, std::size_t>> acc;
    for (const auto& r : records) {
      auto& a = acc[key(r)];
      a.first += r.abs_err();
      ++a.second;
    }
    std::map<Key, double> out;
    for (const auto& [k, a] : acc) out[k] = a.first / static_cast<double>(a.second);
    return out;
  }

  double coverage() const {
    std::vector<std::pair<double, double>> iv;
    std::vector<double> t;
    for (const auto& r : records) {
      iv.emplace_back(r.lo, r.hi);
      t.push_back(r.truth);
    }
    return calibration_coverage(iv, t);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = method;
    j["context_fraction"] = context_fraction;
    j["n_records"] = records.size();
    j["mae"] = overall_mae();
    j["coverage"] = coverage();
    nlohmann::json per_task = nlohmann::json::object();
    for (const auto& [k, v] : mae_by<std::string>([](const EvalRecord& r) { return r.task; })) per_task[k] = v;
    j["mae_per_task"] = per_task;
    nlohmann::json per_h = nlohmann::json::object();
    for (const auto& [k, v] : mae_by<std::size_t>([](const EvalRecord& r) { return r.horizon; }))
      per_h[std::to_string(k)] = v;
    j["mae_per_horizon"] = per_h;
    if (ranking) {
      j["ranking"] = {{"accuracy", ranking->accuracy},
                      {"ci_lo", ranking->ci_lo},
                      {"ci_hi", ranking->ci_hi},
                      {"pairs", ranking->pairs}};
    } else {
      j["ranking"] = nullptr;
    }
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
      recs.push_back({{"run", r.run},
                      {"task", r.task},
                      {"horizon", r.horizon},
                      {"target", r.target},
                      {"pred", r.pred},
                      {"lo", r.lo},
                      {"hi", r.hi},
                      {"truth", r.truth}});
    }
    j["records"] = std::move(recs);
    return j;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out.precision(17);
    out << "run,task,horizon,pred,lo,hi,truth,abs_err\n";
    for (const auto& r : records) {
      out << r.run << ',' << r.task << ',' << r.horizon << ',' << r.pred << ',' << r.lo << ',' << r.hi << ','
          << r.truth << ',' << r.abs_err() << '\n';
    }
    return out.str();
  }
};

// Builds a report and, when the runs admit pairs, ranking accuracy on the
// final checkpoint with a bootstrap interval over pair scores.
inline EvalReport make_report(std::string method, double frac, std::vector<EvalRecord> records,
                              const std::vector<EvalRun>& runs, const PairingRule& rule = distinct_configs,
                              std::uint64_t seed = 0, std::size_t resamples = 10000) {
  EvalReport rep;
  rep.method = std::move(method);
  rep.context_fraction = frac;
  rep.records = std::move(records);
  const auto items = final_rank_items(rep.records, runs);
  try {
    const auto r = ranking_accuracy(items, rule);
    const auto scores = r.scores();
    const auto [lo, hi] = bootstrap_ci(scores, resamples, 0.95, seed);
    rep.ranking = RankingSummary{r.accuracy, lo, hi, r.pairs.size()};
  } catch (const InvalidArgument&) {
    rep.ranking.reset();
  }
  return rep;
}

}  // namespace neuneu
