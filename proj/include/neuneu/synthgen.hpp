#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuneu/datapipe/examples.hpp"
#include "neuneu/datapipe/io.hpp"
#include "neuneu/datapipe/types.hpp"
#include "neuneu/error.hpp"
#include "neuneu/seed.hpp"

// Synthetic runs: accuracy curves from four shape families and token
// probabilities whose distribution shape tracks a latent capability.

namespace neuneu::synth {

enum class Family { Saturating, Plateau, Inverse, UShaped };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::Saturating: return "saturating";
    case Family::Plateau: return "plateau";
    case Family::Inverse: return "inverse";
    case Family::UShaped: return "u_shaped";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  for (auto f : {Family::Saturating, Family::Plateau, Family::Inverse, Family::UShaped}) {
    if (to_string(f) == s) return f;
  }
  throw InvalidArgument("unknown family '" + s + "' (expected saturating|plateau|inverse|u_shaped)");
}

inline const std::vector<Family>& all_families() {
  static const std::vector<Family> fs{Family::Saturating, Family::Plateau, Family::Inverse, Family::UShaped};
  return fs;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ---- accuracy curves ----

struct FamilySpec {
  Family family = Family::Saturating;
  double chance = 0.25;
  double ceiling = 0.8;
  double rate = 1.0;
  double midpoint = 5.0;  // in checkpoint time, 1-based
  double dip_depth = 0.0;
  double dip_location = 5.0;
  double dip_width = 1.0;
  double noise_std = 0.01;
  std::size_t checkpoints = 10;
  // Capability at each checkpoint drives the token-probability model.
  double capability_start = 0.0;
  double capability_end = 1.0;

  void validate() const {
    if (checkpoints < 4) throw InvalidArgument("family spec needs at least 4 checkpoints");
    if (!(noise_std >= 0.0)) throw InvalidArgument("noise_std must be >= 0");
    if (!(dip_width > 0.0)) throw InvalidArgument("dip_width must be > 0");
  }

  // Noise-free accuracy at 1-based checkpoint time t.
  double mean_curve(double t) const {
    const double rise = (ceiling - chance) * sigmoid(rate * (t - midpoint));
    switch (family) {
      case Family::Saturating:
      case Family::Plateau:
        return chance + rise;
      case Family::Inverse:
        return ceiling - rise;
      case Family::UShaped: {
        const double z = (t - dip_location) / dip_width;
        return chance + rise - dip_depth * std::exp(-0.5 * z * z);
      }
    }
    throw InvalidArgument("invalid family");
  }

  double capability_at(std::size_t i) const {
    const double x = static_cast<double>(i) / static_cast<double>(checkpoints - 1);
    return std::clamp(capability_start + (capability_end - capability_start) * x, 0.0, 1.0);
  }
};

// Accuracies at t = 1..T plus iid Gaussian noise, clamped to [0,1].
inline Trajectory gen_trajectory(const FamilySpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Trajectory t;
  t.task_id = to_string(spec.family);
  for (std::size_t i = 0; i < spec.checkpoints; ++i) {
    double y = spec.mean_curve(static_cast<double>(i + 1));
    if (spec.noise_std > 0.0) y += spec.noise_std * noise(rng);
    t.accuracies.push_back(std::clamp(y, 0.0, 1.0));
  }
  return t;
}

// ---- token-probability model ----
//
// Tokens come in contiguous segments drawn from one of two Beta components.
// The share of segments from the high component is w = c, the component
// separation is 0.2 + 0.6 c, and the component means are placed so the
// mixture mean equals mean_prob(c). mean_prob is flat on [0.35, 0.65], so
// capabilities in that band share a mean and differ in variance and skew.

struct TokenModel {
  double band_lo = 0.35;
  double band_hi = 0.65;
  double mean_lo = 0.25;
  double mean_band = 0.5;
  double mean_hi = 0.75;
  double separation_base = 0.2;
  double separation_slope = 0.6;
  double concentration = 20.0;
  std::size_t segment = 64;

  double mean_prob(double c) const {
    auto smooth = [](double x) { return x * x * (3.0 - 2.0 * x); };
    c = std::clamp(c, 0.0, 1.0);
    if (c < band_lo) return mean_lo + (mean_band - mean_lo) * smooth(c / band_lo);
    if (c <= band_hi) return mean_band;
    return mean_band + (mean_hi - mean_band) * smooth((c - band_hi) / (1.0 - band_hi));
  }

  double separation(double c) const { return separation_base + separation_slope * std::clamp(c, 0.0, 1.0); }
};

namespace detail {

inline double sample_beta(double mean, double concentration, std::mt19937_64& rng) {
  mean = std::clamp(mean, 0.02, 0.98);
  std::gamma_distribution<double> ga(mean * concentration, 1.0);
  std::gamma_distribution<double> gb((1.0 - mean) * concentration, 1.0);
  const double a = ga(rng);
  const double b = gb(rng);
  return a + b > 0.0 ? a / (a + b) : mean;
}

}  // namespace detail

inline TokenProbVector gen_token_probs(double latent_capability, std::size_t n, std::uint64_t seed,
                                       const TokenModel& model = {}) {
  if (n < 1) throw InvalidArgument("gen_token_probs: N must be >= 1");
  const double c = std::clamp(latent_capability, 0.0, 1.0);
  const double w = c;
  const double delta = model.separation(c);
  const double mu_lo = model.mean_prob(c) - w * delta;
  const double mu_hi = mu_lo + delta;

  std::mt19937_64 rng(seed);
  const std::size_t nseg = (n + model.segment - 1) / model.segment;
  const auto n_high = static_cast<std::size_t>(std::llround(w * static_cast<double>(nseg)));
  std::vector<char> high(nseg, 0);
  std::fill(high.begin(), high.begin() + static_cast<std::ptrdiff_t>(std::min(n_high, nseg)), 1);
  std::shuffle(high.begin(), high.end(), rng);

  TokenProbVector out;
  out.probs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = high[i / model.segment] ? mu_hi : mu_lo;
    out.probs[i] = std::clamp(detail::sample_beta(mu, model.concentration, rng), 0.0, 1.0);
  }
  return out;
}

// ---- corpus ----

struct CorpusOptions {
  std::size_t runs = 100;
  std::vector<Family> families = all_families();
  std::size_t tokens = 4096;
  std::uint64_t seed = 0;
  std::size_t checkpoints = 10;
  double noise_std = 0.01;
  double heldout_fraction = 0.2;
  // Families that appear only in the heldout split.
  std::vector<Family> heldout_only;
  // Every k-th block of |families| runs draws its skill inside the flat-mean
  // band, so its mean token probability carries no skill information.
  std::size_t matched_mean_period = 4;
  TokenModel token_model;

  void validate() const {
    if (runs < 1) throw InvalidArgument("corpus needs at least one run");
    if (families.empty()) throw InvalidArgument("corpus needs at least one family");
    if (tokens < 1) throw InvalidArgument("tokens must be >= 1");
    if (checkpoints < 4) throw InvalidArgument("checkpoints must be >= 4");
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw InvalidArgument("heldout_fraction must be in [0,1)");
    if (matched_mean_period < 1) throw InvalidArgument("matched_mean_period must be >= 1");
  }
};

struct RunInfo {
  std::string run_id;
  Family family = Family::Saturating;
  bool matched_mean = false;
  double skill = 0.0;
  bool heldout = false;
  std::uint64_t seed = 0;
  FamilySpec spec;
};

struct SynthRun {
  RunInfo info;
  Trajectory trajectory;
};

inline std::uint64_t token_seed(std::uint64_t run_seed, std::size_t checkpoint) {
  return derive_seed(run_seed, {2, checkpoint});
}

// Per-run latent draws. `skill` sets the ceiling and is the run's constant
// token-model capability; the chance offset is visible only in the
// accuracies.
inline FamilySpec draw_family_spec(Family family, double skill, std::uint64_t seed,
                                   const CorpusOptions& opt) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  const double T = static_cast<double>(opt.checkpoints);
  FamilySpec s;
  s.family = family;
  s.checkpoints = opt.checkpoints;
  s.noise_std = opt.noise_std;
  s.chance = 0.25 + in(-0.06, 0.06);
  s.ceiling = s.chance + 0.15 + 0.45 * skill;
  s.rate = in(0.6, 1.4);
  s.midpoint = in(0.35, 0.65) * T;
  s.dip_width = 0.12 * T;
  s.dip_location = in(0.3, 0.6) * T;
  switch (family) {
    case Family::Saturating:
      break;
    case Family::Plateau:
      s.rate = in(2.0, 3.0);
      s.midpoint = in(0.1, 0.2) * T;
      break;
    case Family::Inverse:
      s.midpoint = in(0.3, 0.6) * T;
      break;
    case Family::UShaped:
      s.dip_depth = in(0.05, 0.15);
      break;
  }
  s.capability_start = s.capability_end = skill;
  return s;
}

inline std::string run_id_for(std::size_t i, Family f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "run%05zu", i);
  return std::string(buf) + "-" + to_string(f);
}

// Run metadata and accuracies; token probabilities are produced on demand.
inline std::vector<SynthRun> gen_runs(const CorpusOptions& opt) {
  opt.validate();
  const std::size_t nf = opt.families.size();
  std::vector<SynthRun> runs;
  runs.reserve(opt.runs);
  for (std::size_t i = 0; i < opt.runs; ++i) {
    SynthRun r;
    r.info.family = opt.families[i % nf];
    r.info.run_id = run_id_for(i, r.info.family);
    r.info.seed = derive_seed(opt.seed, {i});
    r.info.matched_mean = (i / nf) % opt.matched_mean_period == 0;
    std::mt19937_64 rng(derive_seed(r.info.seed, {0}));
    const auto& tm = opt.token_model;
    r.info.skill = r.info.matched_mean ? std::uniform_real_distribution<double>(tm.band_lo, tm.band_hi)(rng)
                                       : std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    r.info.spec = draw_family_spec(r.info.family, r.info.skill, derive_seed(r.info.seed, {3}), opt);
    r.trajectory = gen_trajectory(r.info.spec, derive_seed(r.info.seed, {1}));
    r.trajectory.run_id = r.info.run_id;
    r.trajectory.compute_unit_flops = 1e15 * (1.0 + r.info.skill);
    runs.push_back(std::move(r));
  }

  // Heldout: all runs of heldout-only families, plus a seeded sample of the
  // rest.
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const bool forced = std::find(opt.heldout_only.begin(), opt.heldout_only.end(), runs[i].info.family) !=
                        opt.heldout_only.end();
    if (forced) {
      runs[i].info.heldout = true;
    } else {
      pool.push_back(i);
    }
  }
  std::mt19937_64 split_rng(derive_seed(opt.seed, {0x5917}));
  std::shuffle(pool.begin(), pool.end(), split_rng);
  const auto n_held = static_cast<std::size_t>(std::llround(opt.heldout_fraction * static_cast<double>(pool.size())));
  for (std::size_t k = 0; k < n_held; ++k) runs[pool[k]].info.heldout = true;
  return runs;
}

// Token probabilities regenerated from the run seed; matches the stored f32
// files exactly.
class SynthLossSource : public LossSource {
 public:
  SynthLossSource(RunInfo info, std::size_t tokens, TokenModel model)
      : info_(std::move(info)), tokens_(tokens), model_(model) {}

  std::size_t checkpoints() const override { return info_.spec.checkpoints; }

  std::vector<float> probs(std::size_t checkpoint) const override {
    if (checkpoint >= checkpoints()) throw DataError("no checkpoint " + std::to_string(checkpoint));
    const auto p = gen_token_probs(info_.spec.capability_at(checkpoint), tokens_, token_seed(info_.seed, checkpoint), model_);
    return std::vector<float>(p.probs.begin(), p.probs.end());
  }

 private:
  RunInfo info_;
  std::size_t tokens_;
  TokenModel model_;
};

inline nlohmann::json run_info_to_json(const RunInfo& r) {
  return {{"run_id", r.run_id},
          {"family", to_string(r.family)},
          {"matched_mean", r.matched_mean},
          {"skill", r.skill},
          {"split", r.heldout ? "heldout" : "train"},
          {"seed", r.seed}};
}

struct CorpusIndex {
  nlohmann::json json;
  std::size_t trajectory_files = 0;
  std::size_t prob_files = 0;
};

// Layout: DIR/{train,heldout}/<run>.json with probabilities under
// DIR/{train,heldout}/<run>/ckpt_XXX.nnsl, and DIR/corpus.json.
inline CorpusIndex gen_corpus(const CorpusOptions& opt, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto runs = gen_runs(opt);
  CorpusIndex idx;
  nlohmann::json list = nlohmann::json::array();
  for (const auto& r : runs) {
    const fs::path split_dir = dir / (r.info.heldout ? "heldout" : "train");
    Trajectory t = r.trajectory;
    std::vector<std::string> files;
    for (std::size_t c = 0; c < t.length(); ++c) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%03zu.nnsl", c);
      const std::string rel = r.info.run_id + "/" + name;
      const auto p =
          gen_token_probs(r.info.spec.capability_at(c), opt.tokens, token_seed(r.info.seed, c), opt.token_model);
      write_token_probs(split_dir / rel, p.probs);
      files.push_back(rel);
      ++idx.prob_files;
    }
    t.token_prob_files = files;
    write_trajectory(t, split_dir / (r.info.run_id + ".json"));
    ++idx.trajectory_files;
    list.push_back(run_info_to_json(r.info));
  }
  nlohmann::json fams = nlohmann::json::array();
  for (auto f : opt.families) fams.push_back(to_string(f));
  idx.json = {{"seed", opt.seed},
              {"runs", list},
              {"families", fams},
              {"tokens", opt.tokens},
              {"checkpoints", opt.checkpoints},
              {"noise_std", opt.noise_std}};
  write_file_atomic(dir / "corpus.json", idx.json.dump(2) + "\n");
  return idx;
}

}  // namespace neuneu::synth
