#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "neuneu/datapipe/types.hpp"
#include "neuneu/encoders.hpp"
#include "neuneu/forecaster/config.hpp"
#include "neuneu/ndgrad/attention.hpp"
#include "neuneu/ndgrad/ops.hpp"
#include "neuneu/ndgrad/params.hpp"

namespace neuneu {

struct QuantilePrediction {
  std::vector<double> raw;

  // Monotone rearrangement of the head outputs.
  std::vector<double> sorted() const {
    auto s = raw;
    std::sort(s.begin(), s.end());
    return s;
  }
};

struct PointInterval {
  double median = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

inline PointInterval point_and_interval(const QuantilePrediction& pred, std::span<const double> quantiles) {
  if (pred.raw.size() != quantiles.size()) throw InvalidArgument("point_and_interval: quantile count mismatch");
  const auto s = pred.sorted();
  auto at = [&](double level) {
    for (std::size_t i = 0; i < quantiles.size(); ++i)
      if (std::abs(quantiles[i] - level) < 1e-12) return std::clamp(s[i], 0.0, 1.0);
    throw InvalidArgument("quantile level " + std::to_string(level) + " not predicted");
  };
  return {at(0.5), at(0.1), at(0.9)};
}

// Sum over levels of the pinball loss of already-rearranged predictions.
inline double pinball_value(std::span<const double> q, double target, std::span<const double> quantiles) {
  double loss = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double tau = quantiles[i];
    loss += target >= q[i] ? tau * (target - q[i]) : (1.0 - tau) * (q[i] - target);
  }
  return loss;
}

// The forecaster network for one variant. Parameters live in a store with
// stable names; copies would alias them, so the type is move-only.
class Forecaster {
 public:
  Forecaster(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config_.hidden_dim;
    const double s = config_.init_std;
    if (config_.variant == Variant::DiffProbe) {
      params_.add("probe.w1", nd::truncated_normal({d, config_.encoder.bins}, s, rng), true);
      params_.add("probe.b1", nd::Tensor::zeros({d}), false);
      params_.add("probe.w2", nd::truncated_normal({d, d}, s, rng), true);
      params_.add("probe.b2", nd::Tensor::zeros({d}), false);
      params_.add("probe.w3", nd::truncated_normal({1, d}, s, rng), true);
      params_.add("probe.b3", nd::Tensor::zeros({1}), false);
      bind();
      return;
    }
    switch (config_.encoder.kind) {
      case EncoderKind::Cnn: CnnEncoderWeights::create(params_, config_.encoder, d, s, rng); break;
      case EncoderKind::Average: AverageEncoderWeights::create(params_, d, s, rng); break;
      case EncoderKind::HistDiff: HistDiffEncoderWeights::create(params_, config_.encoder.bins, d, s, rng); break;
      case EncoderKind::None: break;
    }
    params_.add("ctx.y.w", nd::truncated_normal({d / 2, 1}, s, rng), true);
    params_.add("ctx.y.b", nd::Tensor::zeros({d / 2}), false);
    params_.add("ctx.g.w", nd::truncated_normal({d / 2, 1}, s, rng), true);
    params_.add("ctx.g.b", nd::Tensor::zeros({d / 2}), false);
    params_.add("cls", nd::truncated_normal({1, d}, s, rng), false);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      nd::AttentionBlockWeights::create(params_, layer_prefix(l), d, config_.ffn_dim, s, rng);
    }
    params_.add("final_ln.gain", nd::Tensor::full({d}, 1.0), false);
    params_.add("final_ln.shift", nd::Tensor::zeros({d}), false);
    params_.add("head.w", nd::truncated_normal({config_.quantiles.size(), d}, s, rng), true);
    params_.add("head.b", nd::Tensor::vector(config_.quantiles), false);
    bind();
  }

  Forecaster(Forecaster&&) = default;
  Forecaster& operator=(Forecaster&&) = default;
  Forecaster(const Forecaster&) = delete;
  Forecaster& operator=(const Forecaster&) = delete;

  const ModelConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  nd::ParameterStore& params() { return params_; }
  const nd::ParameterStore& params() const { return params_; }
  bool is_probe() const { return config_.variant == Variant::DiffProbe; }

  // Context tokens [t x d]: first half from the accuracy, second half from
  // log(1 + gap). `y` and `g` are [t x 1].
  nd::Tensor embed_context(const nd::Tensor& y, const nd::Tensor& g) const {
    return nd::concat_cols({nd::linear(y, wy_, by_), nd::linear(nd::log1p(g), wg_, bg_)});
  }

  nd::Tensor embed_context(const ContextSequence& ctx) const {
    ctx.validate();
    const std::size_t t = ctx.size();
    std::vector<double> y(t), g(t);
    for (std::size_t i = 0; i < t; ++i) {
      y[i] = ctx.pairs[i].accuracy;
      g[i] = static_cast<double>(ctx.pairs[i].gap);
    }
    return embed_context(nd::Tensor({t, 1}, std::move(y)), nd::Tensor({t, 1}, std::move(g)));
  }

  // Encoder embedding [d], or an undefined tensor for the no-loss variant.
  nd::Tensor encode(const Representation& rep) const {
    switch (config_.encoder.kind) {
      case EncoderKind::None:
        return {};
      case EncoderKind::Cnn:
        if (const auto* p = std::get_if<TokenProbVector>(&rep)) return cnn_encode(p->probs, *cnn_, config_.encoder);
        break;
      case EncoderKind::Average:
        if (const auto* a = std::get_if<AverageSequence>(&rep)) return average_encode(a->values, *avg_);
        break;
      case EncoderKind::HistDiff:
        if (const auto* h = std::get_if<HistogramDelta>(&rep)) return histdiff_encode(h->delta, *hist_);
        break;
    }
    throw InvalidArgument("representation does not match variant '" + to_string(config_.variant) + "'");
  }

  // Raw head outputs [Q] from context tokens [t x d] and an optional
  // encoder embedding. Input order is [CLS; e; c_1..c_t].
  nd::Tensor forward_tokens(const nd::Tensor& context_tokens, const nd::Tensor& embedding) const {
    require_transformer();
    const std::size_t d = config_.hidden_dim;
    std::vector<nd::Tensor> rows{cls_};
    if (embedding.defined()) rows.push_back(nd::reshape(embedding, {1, d}));
    rows.push_back(context_tokens);
    const std::size_t len = rows.size() - 1 + context_tokens.dim(0);
    if (len > config_.max_seq_len) {
      throw InvalidArgument("sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                            std::to_string(config_.max_seq_len));
    }
    nd::Tensor x = nd::concat_rows(rows);
    const nd::AttentionOptions opt{config_.heads, true, config_.ln_eps};
    for (const auto& block : blocks_) x = nd::attention_block(x, block, opt);
    nd::Tensor cls_out = nd::layer_norm(nd::slice_rows(x, 0, 1), config_.ln_eps, ln_gain_, ln_shift_);
    return nd::linear(nd::reshape(cls_out, {d}), head_w_, head_b_);
  }

  // Raw outputs: [Q] quantiles, or [1] unclamped point for the probe.
  nd::Tensor forward(const ContextSequence& ctx, const Representation& rep) const {
    if (is_probe()) {
      const auto* h = std::get_if<HistogramDelta>(&rep);
      if (!h) throw InvalidArgument("diffprobe needs a histogram difference");
      ctx.validate();
      return probe_forward(nd::Tensor::vector(h->delta), ctx.pairs.back().accuracy);
    }
    return forward_tokens(embed_context(ctx), encode(rep));
  }

  // y_anchor + MLP(delta_h), before clamping.
  nd::Tensor probe_forward(const nd::Tensor& delta, double y_anchor) const {
    require_probe();
    if (delta.size() != config_.encoder.bins) {
      throw InvalidArgument("diffprobe: expected " + std::to_string(config_.encoder.bins) + " bins, got " +
                            std::to_string(delta.size()));
    }
    nd::Tensor h = nd::gelu(nd::linear(nd::reshape(delta, {delta.size()}), pw1_, pb1_));
    h = nd::gelu(nd::linear(h, pw2_, pb2_));
    return nd::add_scalar(nd::linear(h, pw3_, pb3_), y_anchor);
  }

  double diffprobe_forward(std::span<const double> delta, double y_anchor) const {
    nd::NoGradScope ng;
    return std::clamp(probe_forward(nd::Tensor::vector({delta.begin(), delta.end()}), y_anchor).item(), 0.0, 1.0);
  }

  // Training objective for one example: pinball loss on raw quantiles, or
  // absolute error for the probe.
  nd::Tensor loss(const TrainingExample& ex) const {
    nd::Tensor raw = forward(ex.context, ex.representation);
    if (is_probe()) {
      static constexpr double kMedian[] = {0.5};
      return nd::scale(nd::pinball_loss(raw, ex.target_accuracy, kMedian), 2.0);
    }
    return nd::pinball_loss(raw, ex.target_accuracy, config_.quantiles);
  }

  QuantilePrediction predict(const ContextSequence& ctx, const Representation& rep) const {
    nd::NoGradScope ng;
    const auto out = forward(ctx, rep).values();
    if (is_probe()) return {std::vector<double>(config_.quantiles.size(), std::clamp(out[0], 0.0, 1.0))};
    return {out};
  }

  PointInterval forecast(const ContextSequence& ctx, const Representation& rep) const {
    return point_and_interval(predict(ctx, rep), config_.quantiles);
  }

  // Direct multi-horizon prediction: one independent forward per target gap.
  std::vector<QuantilePrediction> forecast_horizons(const ContextSequence& ctx, std::span<const std::size_t> gaps,
                                                    const Representation& rep) const {
    std::vector<QuantilePrediction> out;
    out.reserve(gaps.size());
    for (auto g : gaps) {
      if (g < 1) throw InvalidArgument("forecast_horizons: target gaps must be >= 1");
      out.push_back(predict(ctx.with_target_gap(g), rep));
    }
    return out;
  }

 private:
  static std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

  void require_transformer() const {
    if (is_probe()) throw InvalidArgument("diffprobe has no transformer");
  }
  void require_probe() const {
    if (!is_probe()) throw InvalidArgument("model is not a diffprobe");
  }

  void bind() {
    if (is_probe()) {
      pw1_ = params_.get("probe.w1");
      pb1_ = params_.get("probe.b1");
      pw2_ = params_.get("probe.w2");
      pb2_ = params_.get("probe.b2");
      pw3_ = params_.get("probe.w3");
      pb3_ = params_.get("probe.b3");
      return;
    }
    switch (config_.encoder.kind) {
      case EncoderKind::Cnn: cnn_ = CnnEncoderWeights::bind(params_, config_.encoder); break;
      case EncoderKind::Average: avg_ = AverageEncoderWeights::bind(params_); break;
      case EncoderKind::HistDiff: hist_ = HistDiffEncoderWeights::bind(params_); break;
      case EncoderKind::None: break;
    }
    wy_ = params_.get("ctx.y.w");
    by_ = params_.get("ctx.y.b");
    wg_ = params_.get("ctx.g.w");
    bg_ = params_.get("ctx.g.b");
    cls_ = params_.get("cls");
    for (std::size_t l = 0; l < config_.layers; ++l)
      blocks_.push_back(nd::AttentionBlockWeights::bind(params_, layer_prefix(l)));
    ln_gain_ = params_.get("final_ln.gain");
    ln_shift_ = params_.get("final_ln.shift");
    head_w_ = params_.get("head.w");
    head_b_ = params_.get("head.b");
  }

  ModelConfig config_;
  std::uint64_t seed_;
  nd::ParameterStore params_;

  std::optional<CnnEncoderWeights> cnn_;
  std::optional<AverageEncoderWeights> avg_;
  std::optional<HistDiffEncoderWeights> hist_;
  nd::Tensor wy_, by_, wg_, bg_, cls_;
  std::vector<nd::AttentionBlockWeights> blocks_;
  nd::Tensor ln_gain_, ln_shift_, head_w_, head_b_;
  nd::Tensor pw1_, pb1_, pw2_, pb2_, pw3_, pb3_;
};

}  // namespace neuneu
