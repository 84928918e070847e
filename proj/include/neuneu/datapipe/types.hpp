#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "neuneu/error.hpp"

namespace neuneu {

// One training run evaluated on one task: accuracies at consecutive
// checkpoints, plus optional per-checkpoint token-probability files.
struct Trajectory {
  std::string run_id;
  std::string task_id;
  double compute_unit_flops = 1.0;
  std::vector<double> accuracies;
  std::optional<std::vector<std::string>> token_prob_files;

  std::size_t length() const { return accuracies.size(); }

  void validate() const {
    if (accuracies.size() < 2) {
      throw DataError("trajectory '" + run_id + "' needs at least 2 checkpoints, has " +
                      std::to_string(accuracies.size()));
    }
    for (std::size_t i = 0; i < accuracies.size(); ++i) {
      const double y = accuracies[i];
      if (!std::isfinite(y) || y < 0.0 || y > 1.0) {
        throw DataError("trajectory '" + run_id + "': accuracy " + std::to_string(y) + " at checkpoint " +
                        std::to_string(i) + " outside [0,1]");
      }
    }
    if (token_prob_files && token_prob_files->size() != accuracies.size()) {
      throw DataError("trajectory '" + run_id + "': " + std::to_string(token_prob_files->size()) +
                      " token-probability files for " + std::to_string(accuracies.size()) + " checkpoints");
    }
  }
};

// An observed (accuracy, gap) element. `checkpoint` is the 0-based index of
// the observation in its trajectory; the model never sees it.
struct ContextPair {
  double accuracy;
  std::size_t gap;
  std::size_t checkpoint;

  bool operator==(const ContextPair&) const = default;
};

// Alternating accuracies and compute gaps; the last element's gap is the
// distance to the prediction target.
struct ContextSequence {
  std::vector<ContextPair> pairs;

  std::size_t size() const { return pairs.size(); }
  std::size_t target_gap() const { return pairs.back().gap; }
  std::size_t last_checkpoint() const { return pairs.back().checkpoint; }

  std::size_t gap_sum() const {
    std::size_t s = 0;
    for (const auto& p : pairs) s += p.gap;
    return s;
  }

  ContextSequence with_target_gap(std::size_t gap) const {
    ContextSequence out = *this;
    out.pairs.back().gap = gap;
    return out;
  }

  void validate() const {
    if (pairs.empty()) throw InvalidArgument("context sequence is empty");
    for (const auto& p : pairs) {
      if (p.gap < 1) throw InvalidArgument("context gaps must be >= 1");
      if (!(p.accuracy >= 0.0 && p.accuracy <= 1.0)) throw InvalidArgument("context accuracy outside [0,1]");
    }
  }

  bool operator==(const ContextSequence&) const = default;
};

struct TokenProbVector {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
};

struct HistogramDelta {
  std::vector<double> delta;

  std::size_t bin_count() const { return delta.size(); }
};

// Per-checkpoint average probabilities p̄_1..p̄_s for the Average ablation.
struct AverageSequence {
  std::vector<double> values;
};

using Representation = std::variant<std::monostate, TokenProbVector, AverageSequence, HistogramDelta>;

enum class Variant { NeuNeu, Average, HistDiff, NoLoss, DiffProbe };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::NeuNeu: return "neuneu";
    case Variant::Average: return "average";
    case Variant::HistDiff: return "histdiff";
    case Variant::NoLoss: return "noloss";
    case Variant::DiffProbe: return "diffprobe";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  for (auto v : {Variant::NeuNeu, Variant::Average, Variant::HistDiff, Variant::NoLoss, Variant::DiffProbe}) {
    if (to_string(v) == s) return v;
  }
  throw InvalidArgument("unknown variant '" + s + "' (expected neuneu|average|histdiff|noloss|diffprobe)");
}

// Whether the variant consumes the future checkpoint's distribution.
inline bool uses_future_losses(Variant v) { return v == Variant::HistDiff || v == Variant::DiffProbe; }

struct TrainingExample {
  ContextSequence context;
  Representation representation;
  double target_accuracy = 0.0;
  std::size_t target_checkpoint = 0;
};

}  // namespace neuneu
