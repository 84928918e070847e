#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include "neuneu/datapipe/types.hpp"

namespace neuneu {

// p_i = exp(-loss_i).
inline TokenProbVector losses_to_probs(std::span<const double> losses) {
  TokenProbVector out;
  out.probs.reserve(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) {
    const double l = losses[i];
    if (!std::isfinite(l) || l < 0.0) {
      throw InvalidArgument("token loss " + std::to_string(l) + " at index " + std::to_string(i) +
                            " must be finite and non-negative");
    }
    out.probs.push_back(std::exp(-l));
  }
  return out;
}

// Half-open [begin, end) index range of one whitespace word.
struct WordSpan {
  std::size_t begin;
  std::size_t end;
};

// Multiplies subword probabilities within each word. Spans must partition the
// input in order with no gaps or overlaps.
inline TokenProbVector aggregate_whitespace(std::span<const double> subword_probs, std::span<const WordSpan> spans) {
  TokenProbVector out;
  out.probs.reserve(spans.size());
  std::size_t expected_begin = 0;
  for (const auto& s : spans) {
    if (s.begin != expected_begin) {
      throw InvalidArgument(s.begin < expected_begin ? "word spans overlap at index " + std::to_string(s.begin)
                                                     : "word spans leave a gap before index " + std::to_string(s.begin));
    }
    if (s.end <= s.begin) throw InvalidArgument("empty word span at index " + std::to_string(s.begin));
    if (s.end > subword_probs.size()) throw InvalidArgument("word span runs past the end of the input");
    double p = 1.0;
    for (std::size_t i = s.begin; i < s.end; ++i) p *= subword_probs[i];
    out.probs.push_back(p);
    expected_begin = s.end;
  }
  if (expected_begin != subword_probs.size()) {
    throw InvalidArgument("word spans do not cover the input (stop at " + std::to_string(expected_begin) + " of " +
                          std::to_string(subword_probs.size()) + ")");
  }
  return out;
}

inline double average_prob(std::span<const double> probs) {
  if (probs.empty()) throw InvalidArgument("average_prob: empty probability vector");
  double s = 0.0;
  for (double p : probs) s += p;
  return s / static_cast<double>(probs.size());
}

// Mean token loss -log p with probabilities floored at `min_prob` so exact
// zeros (possible after single-precision storage) stay finite.
inline double mean_token_loss(std::span<const double> probs, double min_prob = 1e-12) {
  if (probs.empty()) throw InvalidArgument("mean_token_loss: empty probability vector");
  double s = 0.0;
  for (double p : probs) s -= std::log(std::max(p, min_prob));
  return s / static_cast<double>(probs.size());
}

// 0-based bin index: bin b (1-based) covers ((b-1)/B, b/B]; zero joins bin 1.
inline std::size_t histogram_bin(double p, std::size_t bins) {
  if (p <= 0.0) return 0;
  const double scaled = std::ceil(p * static_cast<double>(bins));
  const auto idx = static_cast<std::size_t>(std::max(scaled, 1.0)) - 1;
  return std::min(idx, bins - 1);
}

inline std::vector<double> histogram(std::span<const double> probs, std::size_t bins) {
  if (bins < 2) throw InvalidArgument("histogram: need at least 2 bins");
  if (probs.empty()) throw InvalidArgument("histogram: empty probability vector");
  std::vector<std::size_t> counts(bins, 0);
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("histogram: probability outside [0,1]");
    ++counts[histogram_bin(p, bins)];
  }
  std::vector<double> h(bins);
  const double n = static_cast<double>(probs.size());
  for (std::size_t b = 0; b < bins; ++b) h[b] = static_cast<double>(counts[b]) / n;
  return h;
}

inline HistogramDelta hist_diff(std::span<const double> h_now, std::span<const double> h_future) {
  if (h_now.size() != h_future.size()) {
    throw InvalidArgument("hist_diff: bin counts differ (" + std::to_string(h_now.size()) + " vs " +
                          std::to_string(h_future.size()) + ")");
  }
  HistogramDelta d;
  d.delta.resize(h_now.size());
  for (std::size_t b = 0; b < h_now.size(); ++b) d.delta[b] = h_future[b] - h_now[b];
  return d;
}

}  // namespace neuneu
