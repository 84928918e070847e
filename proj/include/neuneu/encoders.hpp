#pragma once

#include <algorithm>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuneu/ndgrad/ops.hpp"
#include "neuneu/ndgrad/params.hpp"

// Validation-loss encoders. Each maps its input to one d-dimensional
// embedding that becomes the second token of the transformer input.

namespace neuneu {

enum class EncoderKind { Cnn, Average, HistDiff, None };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::Cnn: return "cnn";
    case EncoderKind::Average: return "average";
    case EncoderKind::HistDiff: return "histdiff";
    case EncoderKind::None: return "none";
  }
  return "?";
}

inline EncoderKind encoder_kind_from_string(const std::string& s) {
  for (auto k : {EncoderKind::Cnn, EncoderKind::Average, EncoderKind::HistDiff, EncoderKind::None})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown encoder kind '" + s + "'");
}

struct EncoderConfig {
  EncoderKind kind = EncoderKind::Cnn;
  std::size_t input_len = 4096;
  std::size_t bins = 64;
  std::vector<std::size_t> channels{8, 16, 32, 64};
  std::size_t kernel = 64;
  std::size_t stride = 16;
  std::size_t padding = 32;
  std::size_t max_groups = 8;

  std::vector<std::size_t> conv_lengths() const {
    std::vector<std::size_t> out;
    std::size_t len = input_len;
    for (std::size_t i = 0; i < channels.size(); ++i) out.push_back(len = nd::conv1d_output_length(len, kernel, stride, padding));
    return out;
  }

  std::size_t flatten_dim() const { return channels.back() * conv_lengths().back(); }

  std::size_t groups_for(std::size_t c) const { return std::min(max_groups, c); }

  void validate() const {
    if (kind == EncoderKind::Cnn) {
      if (input_len == 0) throw InvalidArgument("encoder.input_len must be positive");
      if (channels.empty()) throw InvalidArgument("encoder.channels must be nonempty");
      for (auto c : channels)
        if (c == 0 || c % groups_for(c) != 0) throw InvalidArgument("encoder.channels incompatible with GroupNorm");
      (void)conv_lengths();
    }
    if (kind == EncoderKind::HistDiff && bins < 2) throw InvalidArgument("encoder.bins must be >= 2");
  }
};

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)}, {"input_len", c.input_len}, {"bins", c.bins},
                     {"channels", c.channels}, {"kernel", c.kernel},     {"stride", c.stride},
                     {"padding", c.padding},   {"max_groups", c.max_groups}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c = EncoderConfig{};
  if (j.contains("kind")) c.kind = encoder_kind_from_string(j.at("kind").get<std::string>());
  if (j.contains("input_len")) c.input_len = j.at("input_len").get<std::size_t>();
  if (j.contains("bins")) c.bins = j.at("bins").get<std::size_t>();
  if (j.contains("channels")) c.channels = j.at("channels").get<std::vector<std::size_t>>();
  if (j.contains("kernel")) c.kernel = j.at("kernel").get<std::size_t>();
  if (j.contains("stride")) c.stride = j.at("stride").get<std::size_t>();
  if (j.contains("padding")) c.padding = j.at("padding").get<std::size_t>();
  if (j.contains("max_groups")) c.max_groups = j.at("max_groups").get<std::size_t>();
}

// ---- CNN encoder ----

struct CnnEncoderWeights {
  std::vector<nd::Tensor> kernels, biases, gains, shifts;
  nd::Tensor proj_w, proj_b;

  static CnnEncoderWeights create(nd::ParameterStore& ps, const EncoderConfig& cfg, std::size_t d, double init_std,
                                  std::mt19937_64& rng) {
    CnnEncoderWeights w;
    std::size_t cin = 1;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      const auto cout = cfg.channels[i];
      const std::string p = "enc.conv" + std::to_string(i) + ".";
      w.kernels.push_back(ps.add(p + "w", nd::truncated_normal({cout, cin, cfg.kernel}, init_std, rng), true));
      w.biases.push_back(ps.add(p + "b", nd::Tensor::zeros({cout}), false));
      w.gains.push_back(ps.add(p + "gn.gain", nd::Tensor::full({cout}, 1.0), false));
      w.shifts.push_back(ps.add(p + "gn.shift", nd::Tensor::zeros({cout}), false));
      cin = cout;
    }
    w.proj_w = ps.add("enc.proj.w", nd::truncated_normal({d, cfg.flatten_dim()}, init_std, rng), true);
    w.proj_b = ps.add("enc.proj.b", nd::Tensor::zeros({d}), false);
    return w;
  }

  static CnnEncoderWeights bind(nd::ParameterStore& ps, const EncoderConfig& cfg) {
    CnnEncoderWeights w;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      const std::string p = "enc.conv" + std::to_string(i) + ".";
      w.kernels.push_back(ps.get(p + "w"));
      w.biases.push_back(ps.get(p + "b"));
      w.gains.push_back(ps.get(p + "gn.gain"));
      w.shifts.push_back(ps.get(p + "gn.shift"));
    }
    w.proj_w = ps.get("enc.proj.w");
    w.proj_b = ps.get("enc.proj.b");
    return w;
  }
};

struct CnnInput {
  nd::Tensor tensor;  // [1 x input_len]
  std::size_t padded = 0;
  std::size_t truncated = 0;
};

// Fits a probability vector to the configured length: zero-pads at the end
// or drops the tail.
inline CnnInput prepare_cnn_input(std::span<const double> probs, const EncoderConfig& cfg) {
  if (probs.empty()) throw InvalidArgument("cnn_encode: empty probability vector");
  CnnInput in;
  std::vector<double> x(cfg.input_len, 0.0);
  const std::size_t n = std::min(probs.size(), cfg.input_len);
  std::copy_n(probs.begin(), n, x.begin());
  in.padded = cfg.input_len - n;
  in.truncated = probs.size() - n;
  in.tensor = nd::Tensor({1, cfg.input_len}, std::move(x));
  return in;
}

// Conv1D -> GroupNorm -> GELU per layer, flatten, affine projection to d.
inline nd::Tensor cnn_encode(const nd::Tensor& x0, const CnnEncoderWeights& w, const EncoderConfig& cfg,
                             double eps = 1e-5) {
  nd::Tensor x = x0;
  for (std::size_t i = 0; i < w.kernels.size(); ++i) {
    x = nd::conv1d(x, w.kernels[i], w.biases[i], cfg.stride, cfg.padding);
    x = nd::group_norm(x, cfg.groups_for(cfg.channels[i]), eps, w.gains[i], w.shifts[i]);
    x = nd::gelu(x);
  }
  return nd::linear(nd::reshape(x, {x.size()}), w.proj_w, w.proj_b);
}

inline nd::Tensor cnn_encode(std::span<const double> probs, const CnnEncoderWeights& w, const EncoderConfig& cfg) {
  return cnn_encode(prepare_cnn_input(probs, cfg).tensor, w, cfg);
}

// ---- Average encoder ----

struct AverageEncoderWeights {
  nd::Tensor w, b;  // [d x 1], [d]

  static AverageEncoderWeights create(nd::ParameterStore& ps, std::size_t d, double init_std, std::mt19937_64& rng) {
    return {ps.add("enc.avg.w", nd::truncated_normal({d, 1}, init_std, rng), true),
            ps.add("enc.avg.b", nd::Tensor::zeros({d}), false)};
  }
  static AverageEncoderWeights bind(nd::ParameterStore& ps) { return {ps.get("enc.avg.w"), ps.get("enc.avg.b")}; }
};

// Mean over the sequence of Linear(v_i); values is [n x 1] or [n].
inline nd::Tensor average_encode(const nd::Tensor& values, const AverageEncoderWeights& w) {
  if (values.size() == 0) throw InvalidArgument("average_encode: empty input");
  return nd::mean_rows(nd::linear(nd::reshape(values, {values.size(), 1}), w.w, w.b));
}

inline nd::Tensor average_encode(std::span<const double> values, const AverageEncoderWeights& w) {
  if (values.empty()) throw InvalidArgument("average_encode: empty input");
  return average_encode(nd::Tensor({values.size(), 1}, std::vector<double>(values.begin(), values.end())), w);
}

// ---- Histogram-difference encoder ----

struct HistDiffEncoderWeights {
  nd::Tensor w1, b1, w2, b2, ln_gain, ln_shift;

  static HistDiffEncoderWeights create(nd::ParameterStore& ps, std::size_t bins, std::size_t d, double init_std,
                                       std::mt19937_64& rng) {
    HistDiffEncoderWeights w;
    w.w1 = ps.add("enc.hist.w1", nd::truncated_normal({d, bins}, init_std, rng), true);
    w.b1 = ps.add("enc.hist.b1", nd::Tensor::zeros({d}), false);
    w.w2 = ps.add("enc.hist.w2", nd::truncated_normal({d, d}, init_std, rng), true);
    w.b2 = ps.add("enc.hist.b2", nd::Tensor::zeros({d}), false);
    w.ln_gain = ps.add("enc.hist.ln.gain", nd::Tensor::full({d}, 1.0), false);
    w.ln_shift = ps.add("enc.hist.ln.shift", nd::Tensor::zeros({d}), false);
    return w;
  }
  static HistDiffEncoderWeights bind(nd::ParameterStore& ps) {
    return {ps.get("enc.hist.w1"), ps.get("enc.hist.b1"),      ps.get("enc.hist.w2"),
            ps.get("enc.hist.b2"), ps.get("enc.hist.ln.gain"), ps.get("enc.hist.ln.shift")};
  }
};

// LayerNorm(Linear(GELU(Linear(delta_h))))
inline nd::Tensor histdiff_encode(const nd::Tensor& delta, const HistDiffEncoderWeights& w, double eps = 1e-5) {
  if (delta.size() != w.w1.dim(1)) {
    throw InvalidArgument("histdiff_encode: expected " + std::to_string(w.w1.dim(1)) + " bins, got " +
                          std::to_string(delta.size()));
  }
  nd::Tensor h = nd::gelu(nd::linear(nd::reshape(delta, {delta.size()}), w.w1, w.b1));
  return nd::layer_norm(nd::linear(h, w.w2, w.b2), eps, w.ln_gain, w.ln_shift);
}

inline nd::Tensor histdiff_encode(std::span<const double> delta, const HistDiffEncoderWeights& w) {
  return histdiff_encode(nd::Tensor::vector(std::vector<double>(delta.begin(), delta.end())), w);
}

}  // namespace neuneu
