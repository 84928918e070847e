#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "neuneu/datapipe/io.hpp"
#include "neuneu/datapipe/representations.hpp"
#include "neuneu/datapipe/sequence.hpp"
#include "neuneu/seed.hpp"

namespace neuneu {

inline constexpr std::size_t kDefaultHistogramBins = 64;

// Per-checkpoint token probabilities of one trajectory.
class LossSource {
 public:
  virtual ~LossSource() = default;
  virtual std::size_t checkpoints() const = 0;
  // Throws DataError naming the checkpoint if its data is unavailable.
  virtual std::vector<float> probs(std::size_t checkpoint) const = 0;
};

class FileLossSource : public LossSource {
 public:
  explicit FileLossSource(Trajectory traj) : traj_(std::move(traj)) {}

  std::size_t checkpoints() const override { return traj_.length(); }

  std::vector<float> probs(std::size_t checkpoint) const override {
    if (!traj_.token_prob_files || checkpoint >= traj_.token_prob_files->size()) {
      throw DataError("run '" + traj_.run_id + "': no token-probability file for checkpoint " +
                      std::to_string(checkpoint));
    }
    const auto& path = (*traj_.token_prob_files)[checkpoint];
    if (!std::filesystem::exists(path)) {
      throw DataError("run '" + traj_.run_id + "': missing token-probability file for checkpoint " +
                      std::to_string(checkpoint) + " (" + path + ")");
    }
    return read_token_probs_f32(path);
  }

 private:
  Trajectory traj_;
};

class MemoryLossSource : public LossSource {
 public:
  explicit MemoryLossSource(std::vector<std::vector<float>> per_checkpoint) : data_(std::move(per_checkpoint)) {}

  std::size_t checkpoints() const override { return data_.size(); }
  std::vector<float> probs(std::size_t checkpoint) const override {
    if (checkpoint >= data_.size() || data_[checkpoint].empty()) {
      throw DataError("no token probabilities for checkpoint " + std::to_string(checkpoint));
    }
    return data_[checkpoint];
  }

 private:
  std::vector<std::vector<float>> data_;
};

// Memoizes probabilities, averages, and histograms per checkpoint. Thread
// safe; the underlying source is consulted at most once per checkpoint.
class CachedLossSource : public LossSource {
 public:
  explicit CachedLossSource(std::shared_ptr<const LossSource> inner, std::size_t bins = kDefaultHistogramBins)
      : inner_(std::move(inner)), bins_(bins) {}

  std::size_t checkpoints() const override { return inner_->checkpoints(); }

  std::vector<float> probs(std::size_t checkpoint) const override { return *probs_ref(checkpoint); }

  std::shared_ptr<const std::vector<float>> probs_ref(std::size_t checkpoint) const {
    std::lock_guard lock(mu_);
    auto it = probs_.find(checkpoint);
    if (it != probs_.end()) return it->second;
    auto p = std::make_shared<const std::vector<float>>(inner_->probs(checkpoint));
    probs_[checkpoint] = p;
    return p;
  }

  double average(std::size_t checkpoint) const {
    {
      std::lock_guard lock(mu_);
      auto it = averages_.find(checkpoint);
      if (it != averages_.end()) return it->second;
    }
    auto p = probs_ref(checkpoint);
    std::vector<double> d(p->begin(), p->end());
    const double a = average_prob(d);
    std::lock_guard lock(mu_);
    averages_[checkpoint] = a;
    return a;
  }

  double mean_loss(std::size_t checkpoint) const {
    auto p = probs_ref(checkpoint);
    std::vector<double> d(p->begin(), p->end());
    return mean_token_loss(d);
  }

  const std::vector<double>& hist(std::size_t checkpoint) const {
    {
      std::lock_guard lock(mu_);
      auto it = hists_.find(checkpoint);
      if (it != hists_.end()) return it->second;
    }
    auto p = probs_ref(checkpoint);
    std::vector<double> d(p->begin(), p->end());
    auto h = histogram(d, bins_);
    std::lock_guard lock(mu_);
    return hists_.emplace(checkpoint, std::move(h)).first->second;
  }

  // Drops cached raw probabilities (averages and histograms are kept).
  void release_probs() {
    std::lock_guard lock(mu_);
    probs_.clear();
  }

  std::size_t bins() const { return bins_; }

 private:
  std::shared_ptr<const LossSource> inner_;
  std::size_t bins_;
  mutable std::mutex mu_;
  mutable std::map<std::size_t, std::shared_ptr<const std::vector<float>>> probs_;
  mutable std::map<std::size_t, double> averages_;
  mutable std::map<std::size_t, std::vector<double>> hists_;
};

// A training example by reference: which trajectory, which observed
// checkpoints with which gaps, and which checkpoint is the target.
struct ExampleDescriptor {
  std::size_t trajectory = 0;
  std::vector<std::pair<std::size_t, std::size_t>> context;  // (checkpoint, gap)
  std::size_t target = 0;

  std::size_t last_checkpoint() const { return context.back().first; }
  std::size_t target_gap() const { return target - last_checkpoint(); }
};

// One descriptor per future checkpoint j > s_k, with the final gap replaced
// by j - s_k. `seq` must end at a checkpoint before the last one.
inline std::vector<ExampleDescriptor> describe_examples(std::size_t traj_index, const ContextSequence& seq,
                                                        std::size_t length) {
  seq.validate();
  const std::size_t sk = seq.last_checkpoint();
  if (sk + 1 >= length) throw InvalidArgument("context must end before the final checkpoint");
  std::vector<ExampleDescriptor> out;
  for (std::size_t j = sk + 1; j < length; ++j) {
    ExampleDescriptor d;
    d.trajectory = traj_index;
    for (const auto& p : seq.pairs) d.context.emplace_back(p.checkpoint, p.gap);
    d.context.back().second = j - sk;
    d.target = j;
    out.push_back(std::move(d));
  }
  return out;
}

// Builds the representation for `variant`. Reads probabilities only at
// checkpoints <= s_k, except the difference-of-histograms variants, which
// also read the target checkpoint.
inline Representation make_representation(Variant variant, std::size_t sk, std::size_t target,
                                          const CachedLossSource& source) {
  switch (variant) {
    case Variant::NoLoss:
      return std::monostate{};
    case Variant::NeuNeu: {
      auto p = source.probs_ref(sk);
      return TokenProbVector{std::vector<double>(p->begin(), p->end())};
    }
    case Variant::Average: {
      AverageSequence a;
      for (std::size_t c = 0; c <= sk; ++c) a.values.push_back(source.average(c));
      return a;
    }
    case Variant::HistDiff:
    case Variant::DiffProbe:
      return hist_diff(source.hist(sk), source.hist(target));
  }
  return std::monostate{};
}

inline TrainingExample materialize(const ExampleDescriptor& d, const Trajectory& traj, Variant variant,
                                   const CachedLossSource* source) {
  TrainingExample ex;
  for (const auto& [c, g] : d.context) {
    if (c >= traj.length()) throw DataError("descriptor checkpoint " + std::to_string(c) + " out of range");
    ex.context.pairs.push_back({traj.accuracies[c], g, c});
  }
  if (d.target >= traj.length() || d.target <= d.last_checkpoint()) {
    throw DataError("descriptor target " + std::to_string(d.target) + " invalid for run '" + traj.run_id + "'");
  }
  ex.target_accuracy = traj.accuracies[d.target];
  ex.target_checkpoint = d.target;
  if (variant != Variant::NoLoss) {
    if (!source) throw DataError("variant " + to_string(variant) + " needs token probabilities");
    ex.representation = make_representation(variant, d.last_checkpoint(), d.target, *source);
  }
  return ex;
}

inline std::vector<TrainingExample> make_training_examples(const ContextSequence& seq, const Trajectory& traj,
                                                           Variant variant, const CachedLossSource* source) {
  std::vector<TrainingExample> out;
  for (const auto& d : describe_examples(0, seq, traj.length())) out.push_back(materialize(d, traj, variant, source));
  return out;
}

struct AugmentOptions {
  double p_drop = 0.4;
  std::size_t masks = 8;
  std::uint64_t seed = 0;
  std::size_t max_context = 510;  // 512 positions minus CLS and encoder token
};

// For every trajectory and mask: impute unit gaps, drop with absorption, and
// emit examples for every retained prefix that ends before the final
// checkpoint.
inline std::vector<ExampleDescriptor> build_descriptors(const std::vector<Trajectory>& trajs,
                                                        const AugmentOptions& opt) {
  std::vector<ExampleDescriptor> out;
  for (std::size_t t = 0; t < trajs.size(); ++t) {
    const auto& traj = trajs[t];
    const ContextSequence full = impute_unit_gaps(traj.accuracies);
    for (std::size_t m = 0; m < opt.masks; ++m) {
      std::mt19937_64 rng(derive_seed(opt.seed, {t, m}));
      const ContextSequence kept = drop_with_absorption(full, opt.p_drop, rng);
      for (std::size_t k = 0; k < kept.size(); ++k) {
        if (kept.pairs[k].checkpoint + 1 >= traj.length()) break;
        ContextSequence prefix;
        prefix.pairs.assign(kept.pairs.begin(), kept.pairs.begin() + static_cast<std::ptrdiff_t>(k + 1));
        prefix = truncate_oldest(prefix, opt.max_context);
        auto ds = describe_examples(t, prefix, traj.length());
        out.insert(out.end(), std::make_move_iterator(ds.begin()), std::make_move_iterator(ds.end()));
      }
    }
  }
  return out;
}

// ---- manifest (JSON lines) ----

struct Manifest {
  Variant variant = Variant::NeuNeu;
  std::vector<std::string> trajectory_paths;
  std::vector<ExampleDescriptor> examples;
};

inline std::string encode_manifest(const Manifest& m) {
  std::string out;
  for (const auto& d : m.examples) {
    nlohmann::json j;
    j["traj"] = m.trajectory_paths.at(d.trajectory);
    j["variant"] = to_string(m.variant);
    nlohmann::json ctx = nlohmann::json::array();
    for (const auto& [c, g] : d.context) ctx.push_back({c, g});
    j["ctx"] = std::move(ctx);
    j["target"] = d.target;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  write_file_atomic(path, encode_manifest(m));
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::istringstream in(read_file_bytes(path));
  Manifest m;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::uint64_t offset = 0;
  bool first = true;
  while (std::getline(in, line)) {
    const std::uint64_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const Variant v = variant_from_string(j.at("variant").get<std::string>());
      if (first) {
        m.variant = v;
        first = false;
      } else if (v != m.variant) {
        throw DataError("mixed variants in manifest");
      }
      const auto traj = j.at("traj").get<std::string>();
      auto [it, inserted] = index.emplace(traj, m.trajectory_paths.size());
      if (inserted) m.trajectory_paths.push_back(traj);
      ExampleDescriptor d;
      d.trajectory = it->second;
      for (const auto& p : j.at("ctx")) d.context.emplace_back(p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>());
      d.target = j.at("target").get<std::size_t>();
      if (d.context.empty()) throw DataError("empty context");
      m.examples.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": bad manifest line: " + e.what(), line_start);
    } catch (const InvalidArgument& e) {
      throw FormatError(path.string() + ": " + e.what(), line_start);
    } catch (const DataError& e) {
      throw FormatError(path.string() + ": " + e.what(), line_start);
    }
  }
  if (m.examples.empty()) throw DataError(path.string() + ": manifest has no examples");
  // Relative trajectory paths are relative to the manifest's directory.
  for (auto& t : m.trajectory_paths) {
    std::filesystem::path p(t);
    if (p.is_relative()) t = (path.parent_path() / p).lexically_normal().string();
  }
  return m;
}

}  // namespace neuneu
