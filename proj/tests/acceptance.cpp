// Acceptance suite: one PASS/FAIL line per criterion; nonzero exit if any
// criterion fails. Optional arguments select criteria by number.

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "neuneu/datapipe/examples.hpp"
#include "neuneu/encoders.hpp"
#include "neuneu/evalharness.hpp"
#include "neuneu/forecaster/model.hpp"
#include "neuneu/logfit.hpp"
#include "neuneu/ndgrad/attention.hpp"
#include "support/desk_benchmark.hpp"
#include "support/grad_check.hpp"

using namespace neuneu;
using namespace neuneu::nd;
namespace fs = std::filesystem;
using neuneu::testing::check_gradients;
using neuneu::testing::random_tensor;
using neuneu::testing::weighted_sum;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "FAILED ") + what;
  }
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

// ---- 1: gradients ----

void randomize(ParameterStore& ps, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& e : ps.entries())
    for (auto& x : e.tensor.mutable_data()) x = u(rng);
}

std::vector<Tensor> with_params(std::vector<Tensor> inputs, ParameterStore& ps) {
  for (auto& e : ps.entries()) inputs.push_back(e.tensor);
  return inputs;
}

ModelConfig small_model(Variant v) {
  ModelConfig c = ModelConfig::desk(v);
  c.hidden_dim = 16;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_seq_len = 32;
  c.encoder.input_len = 64;
  c.encoder.channels = {2, 4};
  c.encoder.kernel = 8;
  c.encoder.stride = 4;
  c.encoder.padding = 4;
  c.encoder.bins = 16;
  c.init_std = 0.3;
  return c;
}

Representation random_rep(Variant v, std::size_t bins, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  switch (v) {
    case Variant::NeuNeu: {
      TokenProbVector p;
      for (int i = 0; i < 50; ++i) p.probs.push_back(u(rng));
      return p;
    }
    case Variant::Average:
      return AverageSequence{{u(rng), u(rng), u(rng)}};
    case Variant::HistDiff:
    case Variant::DiffProbe: {
      HistogramDelta h;
      for (std::size_t i = 0; i < bins; ++i) h.delta.push_back(0.2 * (u(rng) - 0.5));
      return h;
    }
    case Variant::NoLoss:
      break;
  }
  return std::monostate{};
}

Verdict gradient_oracle() {
  Verdict v;
  constexpr double kKernelTol = 1e-4;
  constexpr double kEndToEndTol = 1e-3;
  const auto t0 = std::chrono::steady_clock::now();
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };

  for (int seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    {
      Tensor x = random_tensor({2, 30}, rng), k = random_tensor({3, 2, 6}, rng), b = random_tensor({3}, rng);
      Tensor r = random_tensor({3, conv1d_output_length(30, 6, 4, 3)}, rng);
      note("conv1d", check_gradients([&] { return weighted_sum(conv1d(x, k, b, 4, 3), r); }, {x, k, b}).max_rel_err);
    }
    {
      Tensor x = random_tensor({20}, rng, -3, 3), r = random_tensor({20}, rng);
      note("gelu", check_gradients([&] { return weighted_sum(gelu(x), r); }, {x}).max_rel_err);
    }
    {
      Tensor x = random_tensor({8, 7}, rng), g = random_tensor({8}, rng, 0.5, 1.5), s = random_tensor({8}, rng);
      Tensor r = random_tensor({8, 7}, rng);
      note("group_norm",
           check_gradients([&] { return weighted_sum(group_norm(x, 4, 1e-5, g, s), r); }, {x, g, s}).max_rel_err);
    }
    {
      Tensor x = random_tensor({3, 10}, rng), g = random_tensor({10}, rng, 0.5, 1.5), s = random_tensor({10}, rng);
      Tensor r = random_tensor({3, 10}, rng);
      note("layer_norm",
           check_gradients([&] { return weighted_sum(layer_norm(x, 1e-5, g, s), r); }, {x, g, s}).max_rel_err);
    }
    {
      Tensor x = random_tensor({2, 4, 6}, rng), r = random_tensor({2, 4, 6}, rng);
      const std::vector<std::size_t> pos{0, 1, 5, 9};
      note("rope", check_gradients([&] { return weighted_sum(rope_apply(x, pos), r); }, {x}).max_rel_err);
    }
    {
      ParameterStore ps;
      auto w = AttentionBlockWeights::create(ps, "blk.", 8, 12, 0.3, rng);
      std::uniform_real_distribution<double> u(-0.2, 0.2);
      for (auto& e : ps.entries())
        for (auto& x : e.tensor.mutable_data()) x += u(rng);
      Tensor x = random_tensor({4, 8}, rng), r = random_tensor({4, 8}, rng);
      AttentionOptions opt{.heads = 2};
      note("attention_block",
           check_gradients([&] { return weighted_sum(attention_block(x, w, opt), r); }, with_params({x}, ps))
               .max_rel_err);
    }
    {
      Forecaster m(small_model(Variant::NoLoss), seed);
      Tensor y = random_tensor({3, 1}, rng, 0, 1), g = random_tensor({3, 1}, rng, 1, 20);
      Tensor r = random_tensor({3, 16}, rng);
      std::vector<Tensor> in{y, g};
      for (auto& e : m.params().entries())
        if (e.name.rfind("ctx.", 0) == 0) in.push_back(e.tensor);
      note("context_embedding",
           check_gradients([&] { return weighted_sum(m.embed_context(y, g), r); }, in).max_rel_err);
    }
    {
      const EncoderConfig ec = small_model(Variant::NeuNeu).encoder;
      ParameterStore ps;
      auto w = CnnEncoderWeights::create(ps, ec, 6, 0.3, rng);
      randomize(ps, rng, -0.5, 0.5);
      Tensor x = random_tensor({1, ec.input_len}, rng, 0, 1), r = random_tensor({6}, rng);
      note("cnn_encoder",
           check_gradients([&] { return weighted_sum(cnn_encode(x, w, ec), r); }, with_params({x}, ps)).max_rel_err);
    }
    {
      ParameterStore ps;
      auto w = AverageEncoderWeights::create(ps, 7, 0.3, rng);
      Tensor x = random_tensor({5, 1}, rng, 0, 1), r = random_tensor({7}, rng);
      note("average_encoder",
           check_gradients([&] { return weighted_sum(average_encode(x, w), r); }, with_params({x}, ps)).max_rel_err);
    }
    {
      ParameterStore ps;
      auto w = HistDiffEncoderWeights::create(ps, 16, 8, 0.3, rng);
      randomize(ps, rng, -0.5, 0.5);
      Tensor d = random_tensor({16}, rng, -0.2, 0.2), r = random_tensor({8}, rng);
      note("histdiff_encoder",
           check_gradients([&] { return weighted_sum(histdiff_encode(d, w), r); }, with_params({d}, ps)).max_rel_err);
    }
    for (Variant var : {Variant::NeuNeu, Variant::Average, Variant::HistDiff, Variant::NoLoss, Variant::DiffProbe}) {
      Forecaster m(small_model(var), 100 + seed);
      std::vector<Tensor> in;
      for (auto& e : m.params().entries()) in.push_back(e.tensor);
      ContextSequence ctx;
      ctx.pairs = {{0.3, 1, 0}, {0.42, 2, 1}, {0.5, 3, 3}};
      const TrainingExample ex{ctx, random_rep(var, 16, rng), std::uniform_real_distribution<double>(0, 1)(rng), 0};
      note("end_to_end", check_gradients([&] { return m.loss(ex); }, in, 1e-6, 32).max_rel_err);
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& [name, err] : worst) {
    const double tol = name == "end_to_end" ? kEndToEndTol : kKernelTol;
    v.require(err <= tol, name + " " + fmt(err, 2));
  }
  v.require(secs < 120.0, "runtime " + fmt(secs, 3) + " s");
  v.detail = "10 seeds, max rel err: " + v.detail;
  return v;
}

// ---- 2: conv shapes ----

std::vector<std::size_t> closed_form_lengths(std::size_t n, std::size_t layers) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers; ++i) {
    n = (n + 2 * 32 - 64) / 16 + 1;
    out.push_back(n);
  }
  return out;
}

// Runs the conv stack on zeros and reads the realized lengths.
std::vector<std::size_t> forward_lengths(const EncoderConfig& ec) {
  NoGradScope no_grad;
  Tensor x({1, ec.input_len}, std::vector<double>(ec.input_len, 0.0));
  std::vector<std::size_t> out;
  std::size_t cin = 1;
  for (std::size_t cout : ec.channels) {
    Tensor k({cout, cin, ec.kernel}, std::vector<double>(cout * cin * ec.kernel, 0.0));
    Tensor b({cout}, std::vector<double>(cout, 0.0));
    x = conv1d(x, k, b, ec.stride, ec.padding);
    out.push_back(x.dim(1));
    cin = cout;
  }
  return out;
}

Verdict shape_oracle() {
  Verdict v;
  const EncoderConfig full = ModelConfig::full_scale().encoder;
  const EncoderConfig desk = ModelConfig::desk().encoder;
  const std::vector<std::size_t> full_expected{16001, 1001, 63, 4};
  const std::vector<std::size_t> desk_expected{257, 17, 2, 1};
  v.require(full.conv_lengths() == closed_form_lengths(256000, 4) && forward_lengths(full) == full_expected,
            "256000->16001->1001->63->4");
  v.require(full.flatten_dim() == 256, "flatten " + std::to_string(full.flatten_dim()));
  v.require(desk.conv_lengths() == closed_form_lengths(4096, 4) && forward_lengths(desk) == desk_expected,
            "4096->257->17->2->1");
  v.require(desk.flatten_dim() == 64, "flatten " + std::to_string(desk.flatten_dim()));
  return v;
}

// ---- 3: pinball ----

// Check-function form: rho_tau(u) = u * (tau - 1[u < 0]) with u = a - q.
double pinball_direct(const std::vector<double>& q, double a, const std::vector<double>& taus) {
  double s = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double u = a - q[i];
    s += u * (taus[i] - (u < 0 ? 1.0 : 0.0));
  }
  return s;
}

Verdict pinball_oracle() {
  Verdict v;
  const std::vector<double> taus{0.1, 0.25, 0.5, 0.75, 0.9};
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-0.5, 1.5);
  double worst = 0;
  for (int i = 0; i < 10000; ++i) {
    std::vector<double> q(5);
    for (auto& x : q) x = u(rng);
    const double a = u(rng);
    const double impl = pinball_loss(Tensor::vector(q), a, taus).item();
    worst = std::max({worst, std::abs(impl - pinball_direct(q, a, taus)),
                      std::abs(pinball_value(q, a, taus) - pinball_direct(q, a, taus))});
  }
  v.require(worst <= 1e-12, "10^4 draws max diff " + fmt(worst, 2));
  const std::vector<double> ex{0.4, 0.45, 0.5, 0.55, 0.6};
  const double worked = pinball_loss(Tensor::vector(ex), 0.5, taus).item();
  v.require(std::abs(worked - 0.045) <= 1e-12, "worked example " + fmt(worked, 6));
  return v;
}

// ---- 4: logistic ----

Verdict logistic_recovery() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  const LogisticParams truth{0.6, -3.0, 3.0, 0.2};
  auto curve = [&](double l) { return truth.a / (1.0 + std::exp(-truth.k * (l - truth.L0))) + truth.b; };
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 50; ++i) {
    const double l = 1.5 + 3.0 * i / 49.0;
    pts.emplace_back(l, curve(l));
  }
  auto fit = fit_logistic(pts);
  double max_err = 0;
  for (const auto& [l, y] : pts) max_err = std::max(max_err, std::abs(logistic_predict(fit.params, l) - y));
  v.require(max_err <= 1e-6, "noiseless max err " + fmt(max_err, 2));

  std::mt19937_64 rng(9);
  std::normal_distribution<double> noise(0.0, 0.01);
  auto noisy = pts;
  for (auto& p : noisy) p.second += noise(rng);
  auto nfit = fit_logistic(noisy);
  double mae_sum = 0;
  for (const auto& [l, y] : pts) mae_sum += std::abs(logistic_predict(nfit.params, l) - y);
  v.require(mae_sum / 50 <= 0.015, "noisy MAE " + fmt(mae_sum / 50, 3));

  double jac = 0;
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 200; ++trial) {
    LogisticParams p{0.5 + 0.4 * u(rng), 4.0 * u(rng), 3.0 + u(rng), 0.2 * u(rng)};
    const double l = 3.0 + 1.5 * u(rng);
    const auto j = logistic_jacobian(p, l);
    for (int i = 0; i < 4; ++i) {
      auto vp = p.as_array(), vm = p.as_array();
      vp[i] += 1e-6;
      vm[i] -= 1e-6;
      auto f = [&](const std::array<double, 4>& a) { return a[0] / (1.0 + std::exp(-a[1] * (l - a[2]))) + a[3]; };
      const double num = (f(vp) - f(vm)) / 2e-6;
      jac = std::max(jac, std::abs(j[i] - num) / std::max({std::abs(j[i]), std::abs(num), 1e-8}));
    }
  }
  v.require(jac <= 1e-6, "jacobian rel err " + fmt(jac, 2));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  v.require(secs < 10.0, "runtime " + fmt(secs, 2) + " s");
  return v;
}

// ---- 5: augmentation ----

class RecordingSource : public LossSource {
 public:
  explicit RecordingSource(std::size_t n) : n_(n) {}
  std::size_t checkpoints() const override { return n_; }
  std::vector<float> probs(std::size_t c) const override {
    std::lock_guard lock(mu_);
    touched_.insert(c);
    return std::vector<float>(32, 0.25f + 0.02f * static_cast<float>(c % 10));
  }
  std::set<std::size_t> touched() const {
    std::lock_guard lock(mu_);
    return touched_;
  }

 private:
  std::size_t n_;
  mutable std::mutex mu_;
  mutable std::set<std::size_t> touched_;
};

Verdict augmentation_invariants() {
  Verdict v;
  bool gaps = true, first = true, identity = true, leak = true;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 gen(seed);
    const std::size_t T = 4 + seed % 13;
    std::vector<double> acc(T);
    for (auto& a : acc) a = std::uniform_real_distribution<double>(0, 1)(gen);
    Trajectory traj{"r" + std::to_string(seed), "t", 1.0, acc, std::nullopt};
    const ContextSequence full = impute_unit_gaps(acc);
    std::mt19937_64 rng(seed);
    const ContextSequence kept = drop_with_absorption(full, 0.4, rng);
    gaps &= kept.gap_sum() == full.gap_sum();
    // The first gap may grow by absorption; the observation itself stays.
    first &= kept.pairs.front().checkpoint == 0 && kept.pairs.front().accuracy == full.pairs.front().accuracy;
    std::mt19937_64 rng0(seed);
    identity &= drop_with_absorption(full, 0.0, rng0) == full;

    for (std::size_t k = 0; k < kept.size(); ++k) {
      if (kept.pairs[k].checkpoint + 1 >= T) break;
      ContextSequence prefix;
      prefix.pairs.assign(kept.pairs.begin(), kept.pairs.begin() + static_cast<std::ptrdiff_t>(k + 1));
      const std::size_t sk = prefix.last_checkpoint();
      for (auto var : {Variant::NeuNeu, Variant::Average, Variant::NoLoss}) {
        auto rec = std::make_shared<RecordingSource>(T);
        CachedLossSource src(rec);
        make_training_examples(prefix, traj, var, &src);
        for (auto c : rec->touched()) leak &= c <= sk;
      }
    }
  }
  v.require(gaps, "gap sums conserved");
  v.require(first, "first element retained");
  v.require(identity, "p_drop=0 identity");
  v.require(leak, "no future reads (neuneu/average/noloss)");
  v.detail = "1000 seeds: " + v.detail;
  return v;
}

// ---- 6: histograms ----

Verdict histogram_invariants() {
  Verdict v;
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 1);
  double sum_err = 0, diff_err = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(1 + trial % 300), b(1 + (trial * 7) % 300);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng) * u(rng);
    if (trial % 5 == 0) a[0] = 0.0;
    if (trial % 7 == 0) b[0] = 1.0;
    const auto ha = histogram(a, 64), hb = histogram(b, 64);
    double sa = 0, sd = 0;
    for (double x : ha) sa += x;
    for (double x : hist_diff(ha, hb).delta) sd += x;
    sum_err = std::max(sum_err, std::abs(sa - 1.0));
    diff_err = std::max(diff_err, std::abs(sd));
  }
  v.require(sum_err <= 1e-12, "|sum h - 1| " + fmt(sum_err, 2));
  v.require(diff_err <= 1e-12, "|sum dh| " + fmt(diff_err, 2));
  const std::vector<double> zero{0.0};
  v.require(histogram_bin(0.0, 64) == 0 && histogram(zero, 64)[0] == 1.0, "p=0 in first bin");
  return v;
}

// ---- 7-9: desk benchmark ----

struct BenchmarkVerdicts {
  Verdict end_to_end, calibration, ranking;
  std::string soft;
};

double brute_force_ranking(const std::vector<RankItem>& items) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    for (std::size_t j = i + 1; j < items.size(); ++j) {
      if (items[i].task != items[j].task || items[i].config == items[j].config) continue;
      if (std::abs(items[i].truth - items[j].truth) < 1e-12) continue;
      const double dp = items[i].pred - items[j].pred;
      const double dt = items[i].truth - items[j].truth;
      total += dp == 0 ? 0.5 : ((dp > 0) == (dt > 0) ? 1.0 : 0.0);
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

BenchmarkVerdicts desk_benchmark() {
  BenchmarkVerdicts out;
  testing::DeskBenchmarkOptions opt;
  opt.corpus.runs = 2000;
  opt.corpus.tokens = 4096;
  opt.corpus.seed = 7;
  opt.train_seed = 1;
  opt.epochs = 3;
  opt.sweep_fractions = {0.1, 0.5};
  opt.log = [](const std::string& s) { std::cerr << "  [bench] " << s << std::endl; };
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = testing::run_desk_benchmark(opt);
  const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;

  const auto& nn = r.reports.at("neuneu");
  const auto& lg = r.reports.at("logistic");
  auto inverse = [](const synth::RunInfo& i) { return i.family == synth::Family::Inverse; };
  auto matched = [](const synth::RunInfo& i) { return i.matched_mean; };
  const double nn_all = nn.overall_mae(), lg_all = lg.overall_mae();
  const double nn_inv = r.mae_where("neuneu", inverse), lg_inv = r.mae_where("logistic", inverse);
  const double nn_mm = r.mae_where("neuneu", matched), avg_mm = r.mae_where("average", matched);
  auto& e = out.end_to_end;
  e.require(nn_all < lg_all, "(a) MAE neuneu " + fmt(nn_all) + " < logistic " + fmt(lg_all));
  e.require(nn_inv <= 0.8 * lg_inv, "(b) inverse neuneu " + fmt(nn_inv) + " <= 0.8 x logistic " + fmt(lg_inv));
  e.require(nn_mm < avg_mm, "(c) matched-mean neuneu " + fmt(nn_mm) + " < average " + fmt(avg_mm));
  e.require(minutes <= 45.0, "runtime " + fmt(minutes, 3) + " min");
  e.detail += "; noloss " + fmt(r.reports.at("noloss").overall_mae()) + ", " + std::to_string(r.train_examples) +
              " train examples, " + std::to_string(r.heldout_runs.size()) + " heldout runs";

  // Coverage recomputed by a direct count over the records.
  std::size_t inside = 0;
  for (const auto& rec : nn.records)
    if (!(rec.truth < rec.lo) && !(rec.truth > rec.hi)) ++inside;
  const double brute = static_cast<double>(inside) / static_cast<double>(nn.records.size());
  const double cov = nn.coverage();
  out.calibration.require(cov >= 0.60 && cov <= 0.95, "coverage " + fmt(cov, 3) + " in [0.60, 0.95]");
  out.calibration.require(cov == brute, "matches direct count " + fmt(brute, 6));

  // Harness vs brute force on random data, then the benchmark comparison.
  bool exact = true;
  std::mt19937_64 rng(19);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> task(0, 3), cfg(0, 7), coarse(0, 4);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<RankItem> items;
    for (int i = 0; i < 40; ++i)
      items.push_back({"c" + std::to_string(cfg(rng)), "t" + std::to_string(task(rng)),
                       trial % 2 ? coarse(rng) * 0.25 : u(rng), trial % 3 ? coarse(rng) * 0.25 : u(rng)});
    exact &= ranking_accuracy(items).accuracy == brute_force_ranking(items);
  }
  out.ranking.require(exact, "harness equals brute-force oracle on 500 random sets");
  const double nn_rank = nn.ranking ? nn.ranking->accuracy : 0.0;
  const double lg_rank = lg.ranking ? lg.ranking->accuracy : 0.0;
  out.ranking.require(nn.ranking && lg.ranking && nn_rank >= lg_rank,
                      "neuneu " + fmt(nn_rank, 3) + " >= logistic " + fmt(lg_rank, 3));

  // Trend check only; reported but not gating.
  const auto& sweep = r.sweep_mae.at("neuneu");
  out.soft = std::string(sweep.at(0.5) <= sweep.at(0.1) ? "ok" : "not met") + ": neuneu MAE at 50% context " +
             fmt(sweep.at(0.5)) + " <= at 10% context " + fmt(sweep.at(0.1));
  return out;
}

// ---- 10: CLI determinism ----

int sh(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict cli_determinism() {
  Verdict v;
  const fs::path root = fs::temp_directory_path() / ("neuneu_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::vector<std::string> artifacts{
      "c/run_manifest.json", "m.jsonl",  "m.jsonl.run.json", "model.nnck", "model.nnck.loss.csv",
      "model.nnck.run.json", "r.json",   "r.csv",            "r.json.run.json"};
  const std::string config =
      R"({"hidden_dim": 16, "layers": 1, "heads": 2, "ffn_dim": 32, "encoder": {"input_len": 256},)"
      R"( "train": {"epochs": 2, "batch_size": 32}})";
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run;
    fs::create_directories(d);
    std::ofstream(d / "cfg.json") << config;
    const std::string cd = "cd '" + d.string() + "' && '" NEUNEU_CLI "' ";
    const std::string quiet = " > /dev/null 2>&1";
    int rc = sh(cd + "synth --out c --runs 16 --tokens 256 --seed 5" + quiet);
    rc |= sh(cd + "build-data --trajs c/train --variant neuneu --masks 2 --seed 5 --out m.jsonl" + quiet);
    rc |= sh(cd + "train --manifest m.jsonl --config cfg.json --seed 5 --out model.nnck" + quiet);
    rc |= sh(cd + "evaluate --ckpt model.nnck --trajs c/heldout --frac 0.2 --seed 5 --report r.json --csv r.csv" +
             quiet);
    v.require(rc == 0, std::string("pipeline ") + run + " exit codes");
  }
  std::size_t same = 0;
  for (const auto& a : artifacts) {
    const fs::path pa = root / "a" / a, pb = root / "b" / a;
    const bool ok = fs::exists(pa) && fs::exists(pb) && read_file_bytes(pa) == read_file_bytes(pb);
    if (!ok) v.require(false, a + " differs");
    same += ok;
  }
  v.require(same == artifacts.size(), std::to_string(same) + "/" + std::to_string(artifacts.size()) +
                                          " manifests, traces and reports byte-identical");
  fs::remove_all(root);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  auto want = [&](int c) { return selected.empty() || selected.count(c) > 0; };
  bool all_pass = true;
  auto report = [&](int n, const std::string& name, const Verdict& v) {
    all_pass &= v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << "  " << n << ". " << name << ": " << v.detail << std::endl;
  };
  auto guarded = [&](int n, const std::string& name, const std::function<Verdict()>& f) {
    if (!want(n)) return;
    try {
      report(n, name, f());
    } catch (const std::exception& e) {
      report(n, name, Verdict{false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, "gradient oracle", gradient_oracle);
  guarded(2, "shape oracle", shape_oracle);
  guarded(3, "pinball oracle", pinball_oracle);
  guarded(4, "logistic recovery", logistic_recovery);
  guarded(5, "augmentation invariants", augmentation_invariants);
  guarded(6, "histogram invariants", histogram_invariants);
  if (want(7) || want(8) || want(9)) {
    try {
      const auto b = desk_benchmark();
      if (want(7)) report(7, "desk benchmark", b.end_to_end);
      if (want(8)) report(8, "calibration", b.calibration);
      if (want(9)) report(9, "ranking", b.ranking);
      if (!b.soft.empty()) std::cout << "INFO  " << b.soft << std::endl;
    } catch (const std::exception& e) {
      for (int n : {7, 8, 9})
        if (want(n)) report(n, "desk benchmark", Verdict{false, std::string("exception: ") + e.what()});
    }
  }
  guarded(10, "determinism", cli_determinism);
  return all_pass ? 0 : 1;
}
