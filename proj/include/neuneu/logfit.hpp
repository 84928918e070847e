#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "neuneu/error.hpp"

// Logistic map from mean validation loss to accuracy,
//   f(l) = a / (1 + exp(-k (l - L0))) + b,
// fitted per task by multi-start Levenberg-Marquardt.

namespace neuneu {

struct LogisticParams {
  double a = 0.0;
  double k = 0.0;
  double L0 = 0.0;
  double b = 0.0;

  std::array<double, 4> as_array() const { return {a, k, L0, b}; }
  static LogisticParams from_array(const std::array<double, 4>& v) { return {v[0], v[1], v[2], v[3]}; }
};

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double logistic_predict(const LogisticParams& p, double mean_loss) {
  return p.a * stable_sigmoid(p.k * (mean_loss - p.L0)) + p.b;
}

// d f / d(a, k, L0, b)
inline std::array<double, 4> logistic_jacobian(const LogisticParams& p, double mean_loss) {
  const double u = mean_loss - p.L0;
  const double s = stable_sigmoid(p.k * u);
  const double ds = s * (1.0 - s);
  return {s, p.a * ds * u, -p.a * ds * p.k, 1.0};
}

struct LogisticFit {
  std::string task_id;
  LogisticParams params;
  double sse = 0.0;
  std::size_t n_points = 0;
};

inline nlohmann::json to_json_value(const LogisticFit& f) {
  return {{"task_id", f.task_id}, {"a", f.params.a},   {"k", f.params.k},          {"L0", f.params.L0},
          {"b", f.params.b},      {"sse", f.sse},      {"n_points", f.n_points}};
}

inline LogisticFit logistic_fit_from_json(const nlohmann::json& j) {
  LogisticFit f;
  f.task_id = j.at("task_id").get<std::string>();
  f.params = {j.at("a").get<double>(), j.at("k").get<double>(), j.at("L0").get<double>(), j.at("b").get<double>()};
  f.sse = j.at("sse").get<double>();
  f.n_points = j.at("n_points").get<std::size_t>();
  return f;
}

struct LogisticFitOptions {
  std::size_t max_iterations = 200;
  double gradient_tolerance = 1e-8;
  std::optional<double> chance_level;
  // Accepted solutions must predict within this band over the data range.
  double sanity_lo = -0.05;
  double sanity_hi = 1.05;
};

struct LmResult {
  LogisticParams params;
  double sse = std::numeric_limits<double>::infinity();
  double gradient_norm = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool finite = false;
};

namespace detail {

inline double sse_of(const LogisticParams& p, std::span<const std::pair<double, double>> pts) {
  double s = 0.0;
  for (const auto& [l, y] : pts) {
    const double r = logistic_predict(p, l) - y;
    s += r * r;
  }
  return s;
}

}  // namespace detail

// Damped Gauss-Newton from one start. Steps are accepted only when they
// lower the SSE, so the SSE sequence is nonincreasing.
inline LmResult levenberg_marquardt(std::span<const std::pair<double, double>> pts, LogisticParams start,
                                    const LogisticFitOptions& opt, std::vector<double>* sse_trace = nullptr) {
  using Mat4 = Eigen::Matrix4d;
  using Vec4 = Eigen::Vector4d;
  LmResult res;
  LogisticParams p = start;
  double sse = detail::sse_of(p, pts);
  if (!std::isfinite(sse)) return res;
  if (sse_trace) sse_trace->push_back(sse);
  double lambda = 1e-3;
  std::size_t it = 0;
  double gnorm = std::numeric_limits<double>::infinity();
  for (; it < opt.max_iterations; ++it) {
    Mat4 jtj = Mat4::Zero();
    Vec4 jtr = Vec4::Zero();
    for (const auto& [l, y] : pts) {
      const auto j = logistic_jacobian(p, l);
      const Vec4 jv(j[0], j[1], j[2], j[3]);
      const double r = logistic_predict(p, l) - y;
      jtj.noalias() += jv * jv.transpose();
      jtr += jv * r;
    }
    gnorm = (2.0 * jtr).norm();
    if (!std::isfinite(gnorm)) break;
    if (gnorm <= opt.gradient_tolerance) break;
    bool improved = false;
    while (lambda < 1e16) {
      Mat4 a = jtj;
      for (int i = 0; i < 4; ++i) a(i, i) += lambda * std::max(jtj(i, i), 1e-12);
      const Vec4 delta = a.ldlt().solve(-jtr);
      if (!delta.allFinite()) {
        lambda *= 10.0;
        continue;
      }
      auto v = p.as_array();
      for (int i = 0; i < 4; ++i) v[i] += delta[i];
      const LogisticParams cand = LogisticParams::from_array(v);
      const double cand_sse = detail::sse_of(cand, pts);
      if (std::isfinite(cand_sse) && cand_sse <= sse) {
        const bool progress = cand_sse < sse || delta.norm() > 0.0;
        p = cand;
        sse = cand_sse;
        lambda = std::max(lambda / 10.0, 1e-12);
        improved = progress;
        break;
      }
      lambda *= 10.0;
    }
    if (sse_trace) sse_trace->push_back(sse);
    if (!improved) break;
  }
  res.params = p;
  res.sse = sse;
  res.gradient_norm = gnorm;
  res.iterations = it;
  res.finite = std::isfinite(sse) && std::isfinite(p.a) && std::isfinite(p.k) && std::isfinite(p.L0) &&
               std::isfinite(p.b);
  return res;
}

// Lowest-SSE solution over a fixed start grid. Points are sorted first, so
// the result does not depend on input order.
inline LogisticFit fit_logistic(std::vector<std::pair<double, double>> pts, const LogisticFitOptions& opt = {},
                                std::string task_id = {}) {
  if (pts.size() < 5) throw InvalidArgument("fit_logistic: need at least 5 points, got " + std::to_string(pts.size()));
  for (const auto& [l, y] : pts)
    if (!std::isfinite(l) || !std::isfinite(y)) throw InvalidArgument("fit_logistic: non-finite input");
  std::sort(pts.begin(), pts.end());

  std::vector<double> losses;
  for (const auto& pr : pts) losses.push_back(pr.first);
  std::sort(losses.begin(), losses.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(losses.size() - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < losses.size() ? losses[i] * (1.0 - frac) + losses[i + 1] * frac : losses[i];
  };

  std::vector<double> offsets{0.0};
  if (opt.chance_level && *opt.chance_level != 0.0) offsets.push_back(*opt.chance_level);

  LogisticFit best;
  best.sse = std::numeric_limits<double>::infinity();
  double best_any = std::numeric_limits<double>::infinity();
  bool found = false;
  for (double a : {0.25, 0.5, 0.75, 1.0})
    for (double k : {-8.0, -2.0, -0.5, 0.5, 2.0, 8.0})
      for (double q : {0.25, 0.5, 0.75})
        for (double b : offsets) {
          const LmResult r = levenberg_marquardt(pts, {a, k, quantile(q), b}, opt);
          if (!r.finite) continue;
          best_any = std::min(best_any, r.sse);
          const bool sane = std::all_of(pts.begin(), pts.end(), [&](const auto& pr) {
            const double f = logistic_predict(r.params, pr.first);
            return f >= opt.sanity_lo && f <= opt.sanity_hi;
          });
          if (!sane) continue;
          if (r.sse < best.sse) {
            best.params = r.params;
            best.sse = r.sse;
            found = true;
          }
        }
  if (!found) throw FitError("fit_logistic: every start diverged or left the sanity band", best_any);
  best.task_id = std::move(task_id);
  best.n_points = pts.size();
  return best;
}

// Predictions from oracle future mean losses, clamped to [0,1].
inline std::vector<double> evaluate_logistic(const LogisticParams& p, std::span<const double> future_mean_losses) {
  std::vector<double> out;
  out.reserve(future_mean_losses.size());
  for (double l : future_mean_losses) out.push_back(std::clamp(logistic_predict(p, l), 0.0, 1.0));
  return out;
}

inline std::vector<double> evaluate_logistic(const LogisticParams& p, std::span<const double> future_mean_losses,
                                             std::size_t heldout_checkpoints) {
  if (future_mean_losses.size() != heldout_checkpoints) {
    throw InvalidArgument("evaluate_logistic: " + std::to_string(future_mean_losses.size()) + " mean losses for " +
                          std::to_string(heldout_checkpoints) + " heldout checkpoints");
  }
  return evaluate_logistic(p, future_mean_losses);
}

}  // namespace neuneu
