#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuneu/datapipe/types.hpp"
#include "neuneu/encoders.hpp"

namespace neuneu {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t epochs = 3;
  double lr = 6e-4;
  double weight_decay = 0.033;
  double warmup_ratio = 0.1;
  double max_grad_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (batch_size == 0) throw InvalidArgument("train.batch_size must be positive");
    if (epochs == 0) throw InvalidArgument("train.epochs must be positive");
    if (!(lr > 0.0)) throw InvalidArgument("train.lr must be positive");
    if (weight_decay < 0.0) throw InvalidArgument("train.weight_decay must be >= 0");
    if (warmup_ratio < 0.0 || warmup_ratio > 1.0) throw InvalidArgument("train.warmup_ratio must be in [0,1]");
    if (!(max_grad_norm > 0.0)) throw InvalidArgument("train.max_grad_norm must be positive");
  }
};

struct ModelConfig {
  Variant variant = Variant::NeuNeu;
  std::size_t hidden_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 512;
  EncoderConfig encoder;
  std::vector<double> quantiles{0.1, 0.25, 0.5, 0.75, 0.9};
  double init_std = 0.02;
  double ln_eps = 1e-5;
  TrainConfig train;

  // Single-core scale used by tests and the acceptance suite.
  static ModelConfig desk(Variant v = Variant::NeuNeu) {
    ModelConfig c;
    c.set_variant(v);
    return c;
  }

  // Full-scale architecture.
  static ModelConfig full_scale(Variant v = Variant::NeuNeu) {
    ModelConfig c;
    c.hidden_dim = 512;
    c.layers = 6;
    c.heads = 8;
    c.ffn_dim = 2048;
    c.encoder.input_len = 256000;
    c.set_variant(v);
    return c;
  }

  void set_variant(Variant v) {
    variant = v;
    switch (v) {
      case Variant::NeuNeu: encoder.kind = EncoderKind::Cnn; break;
      case Variant::Average: encoder.kind = EncoderKind::Average; break;
      case Variant::HistDiff:
      case Variant::DiffProbe: encoder.kind = EncoderKind::HistDiff; break;
      case Variant::NoLoss: encoder.kind = EncoderKind::None; break;
    }
  }

  bool has_encoder_token() const { return variant != Variant::NoLoss; }

  // Context tokens that fit next to CLS and the optional encoder token.
  std::size_t max_context() const { return max_seq_len - 1 - (has_encoder_token() ? 1 : 0); }

  std::size_t quantile_index(double level) const {
    for (std::size_t i = 0; i < quantiles.size(); ++i)
      if (std::abs(quantiles[i] - level) < 1e-12) return i;
    throw InvalidArgument("quantile level " + std::to_string(level) + " not in configured set");
  }

  void validate() const {
    if (hidden_dim == 0 || hidden_dim % 2 != 0) throw InvalidArgument("hidden_dim must be positive and even");
    if (heads == 0 || hidden_dim % heads != 0) throw InvalidArgument("hidden_dim must be divisible by heads");
    if ((hidden_dim / heads) % 2 != 0) throw InvalidArgument("head dimension must be even for rotary embedding");
    if (layers == 0) throw InvalidArgument("layers must be positive");
    if (ffn_dim == 0) throw InvalidArgument("ffn_dim must be positive");
    if (max_seq_len < 3) throw InvalidArgument("max_seq_len must be at least 3");
    if (quantiles.empty()) throw InvalidArgument("quantiles must be nonempty");
    for (std::size_t i = 0; i < quantiles.size(); ++i) {
      if (!(quantiles[i] > 0.0 && quantiles[i] < 1.0)) throw InvalidArgument("quantiles must lie in (0,1)");
      if (i > 0 && !(quantiles[i] > quantiles[i - 1])) throw InvalidArgument("quantiles must be strictly increasing");
    }
    for (double q : {0.1, 0.5, 0.9}) (void)quantile_index(q);
    if (!(init_std > 0.0)) throw InvalidArgument("init_std must be positive");
    ModelConfig expected = *this;
    expected.set_variant(variant);
    if (expected.encoder.kind != encoder.kind) {
      throw InvalidArgument("encoder.kind '" + to_string(encoder.kind) + "' does not match variant '" +
                            to_string(variant) + "'");
    }
    encoder.validate();
    train.validate();
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size}, {"epochs", c.epochs},
                     {"lr", c.lr},                 {"weight_decay", c.weight_decay},
                     {"warmup_ratio", c.warmup_ratio}, {"max_grad_norm", c.max_grad_norm},
                     {"beta1", c.beta1},           {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps}};
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)}, {"hidden_dim", c.hidden_dim}, {"layers", c.layers},
                     {"heads", c.heads},     {"ffn_dim", c.ffn_dim},   {"max_seq_len", c.max_seq_len},
                     {"encoder", c.encoder}, {"quantiles", c.quantiles}, {"init_std", c.init_std},
                     {"ln_eps", c.ln_eps},   {"train", c.train}};
}

namespace detail {

// Assigns j[key] to out if present; rejects unknown keys and reports the
// offending field on type errors.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object()) throw InvalidArgument("config" + (prefix_.empty() ? "" : " field '" + prefix_ + "'") +
                                               " must be a JSON object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw InvalidArgument("config field '" + name(key) + "' has the wrong type");
    }
  }

  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw InvalidArgument("unknown config field '" + name(it.key()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

}  // namespace detail

// Fields absent from `j` keep the desk defaults for the given variant.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  detail::FieldReader r(j, "");
  ModelConfig c;
  std::string variant = to_string(c.variant);
  r.read("variant", variant);
  try {
    c.set_variant(variant_from_string(variant));
  } catch (const std::exception&) {
    throw InvalidArgument("config field 'variant' has unknown value '" + variant + "'");
  }
  r.read("hidden_dim", c.hidden_dim);
  r.read("layers", c.layers);
  r.read("heads", c.heads);
  r.read("ffn_dim", c.ffn_dim);
  r.read("max_seq_len", c.max_seq_len);
  r.read("quantiles", c.quantiles);
  r.read("init_std", c.init_std);
  r.read("ln_eps", c.ln_eps);
  if (const auto* e = r.sub("encoder")) {
    detail::FieldReader er(*e, "encoder");
    std::string kind = to_string(c.encoder.kind);
    er.read("kind", kind);
    try {
      c.encoder.kind = encoder_kind_from_string(kind);
    } catch (const std::exception&) {
      throw InvalidArgument("config field 'encoder.kind' has unknown value '" + kind + "'");
    }
    er.read("input_len", c.encoder.input_len);
    er.read("bins", c.encoder.bins);
    er.read("channels", c.encoder.channels);
    er.read("kernel", c.encoder.kernel);
    er.read("stride", c.encoder.stride);
    er.read("padding", c.encoder.padding);
    er.read("max_groups", c.encoder.max_groups);
    er.finish();
  }
  if (const auto* t = r.sub("train")) {
    detail::FieldReader tr(*t, "train");
    tr.read("batch_size", c.train.batch_size);
    tr.read("epochs", c.train.epochs);
    tr.read("lr", c.train.lr);
    tr.read("weight_decay", c.train.weight_decay);
    tr.read("warmup_ratio", c.train.warmup_ratio);
    tr.read("max_grad_norm", c.train.max_grad_norm);
    tr.read("beta1", c.train.beta1);
    tr.read("beta2", c.train.beta2);
    tr.read("adam_eps", c.train.adam_eps);
    tr.finish();
  }
  r.finish();
  c.validate();
  return c;
}

}  // namespace neuneu
