#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "neuneu/datapipe/types.hpp"

namespace neuneu {

// [(y_1,1), ..., (y_T,1)]
inline ContextSequence impute_unit_gaps(std::span<const double> accuracies) {
  if (accuracies.size() < 2) throw InvalidArgument("impute_unit_gaps: need at least 2 accuracies");
  ContextSequence seq;
  seq.pairs.reserve(accuracies.size());
  for (std::size_t i = 0; i < accuracies.size(); ++i) seq.pairs.push_back({accuracies[i], 1, i});
  return seq;
}

// Drops every element after the first independently with probability p_drop.
// A dropped element's gap is added to the nearest retained predecessor, so
// the total gap is conserved. One uniform draw per candidate element.
inline ContextSequence drop_with_absorption(const ContextSequence& seq, double p_drop, std::mt19937_64& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw InvalidArgument("drop_with_absorption: p_drop must be in [0,1)");
  if (seq.pairs.empty()) return seq;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  ContextSequence out;
  out.pairs.reserve(seq.size());
  out.pairs.push_back(seq.pairs.front());
  for (std::size_t i = 1; i < seq.size(); ++i) {
    if (unif(rng) < p_drop) {
      out.pairs.back().gap += seq.pairs[i].gap;
    } else {
      out.pairs.push_back(seq.pairs[i]);
    }
  }
  return out;
}

// Keeps at most `max_pairs` of the most recent elements. Gaps describe the
// distance to the next element, so the surviving gaps stay valid unchanged.
inline ContextSequence truncate_oldest(const ContextSequence& seq, std::size_t max_pairs) {
  if (max_pairs == 0) throw InvalidArgument("truncate_oldest: max_pairs must be positive");
  if (seq.size() <= max_pairs) return seq;
  ContextSequence out;
  out.pairs.assign(seq.pairs.end() - static_cast<std::ptrdiff_t>(max_pairs), seq.pairs.end());
  return out;
}

struct HeldoutTarget {
  std::size_t checkpoint;
  double accuracy;
};

struct ContextSplit {
  ContextSequence context;
  std::vector<HeldoutTarget> targets;
};

// Context of the first max(2, floor(frac * T)) checkpoints with unit gaps;
// the remaining checkpoints become targets.
inline ContextSplit take_first_fraction(std::span<const double> accuracies, double frac) {
  if (!(frac > 0.0 && frac < 1.0)) throw InvalidArgument("take_first_fraction: frac must be in (0,1)");
  const std::size_t t = accuracies.size();
  if (t < 3) throw InvalidArgument("take_first_fraction: need at least 3 checkpoints, got " + std::to_string(t));
  // Small epsilon keeps e.g. 0.2 * 10 from flooring to 1 under rounding.
  const auto floored = static_cast<std::size_t>(std::floor(frac * static_cast<double>(t) + 1e-9));
  const std::size_t n_ctx = std::min(std::max<std::size_t>(2, floored), t - 1);
  ContextSplit split;
  split.context = impute_unit_gaps(accuracies.subspan(0, n_ctx));
  for (std::size_t j = n_ctx; j < t; ++j) split.targets.push_back({j, accuracies[j]});
  return split;
}

}  // namespace neuneu
