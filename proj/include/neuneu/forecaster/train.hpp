#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "neuneu/datapipe/examples.hpp"
#include "neuneu/forecaster/model.hpp"
#include "neuneu/ndgrad/optim.hpp"
#include "neuneu/seed.hpp"

namespace neuneu {

// Random-access example provider for the training loop.
class ExampleSet {
 public:
  virtual ~ExampleSet() = default;
  virtual std::size_t size() const = 0;
  virtual TrainingExample get(std::size_t i) const = 0;
};

class VectorExampleSet : public ExampleSet {
 public:
  explicit VectorExampleSet(std::vector<TrainingExample> examples) : examples_(std::move(examples)) {}
  std::size_t size() const override { return examples_.size(); }
  TrainingExample get(std::size_t i) const override { return examples_.at(i); }

 private:
  std::vector<TrainingExample> examples_;
};

// Materializes descriptors lazily against per-trajectory cached sources.
class DescriptorExampleSet : public ExampleSet {
 public:
  DescriptorExampleSet(std::vector<Trajectory> trajectories, std::vector<ExampleDescriptor> descriptors,
                       Variant variant, std::vector<std::shared_ptr<CachedLossSource>> sources)
      : trajs_(std::move(trajectories)),
        descs_(std::move(descriptors)),
        variant_(variant),
        sources_(std::move(sources)) {
    if (variant_ != Variant::NoLoss && sources_.size() != trajs_.size()) {
      throw InvalidArgument("DescriptorExampleSet: one loss source per trajectory required");
    }
  }

  std::size_t size() const override { return descs_.size(); }

  TrainingExample get(std::size_t i) const override {
    const auto& d = descs_.at(i);
    const CachedLossSource* src = variant_ == Variant::NoLoss ? nullptr : sources_.at(d.trajectory).get();
    return materialize(d, trajs_.at(d.trajectory), variant_, src);
  }

  const std::vector<ExampleDescriptor>& descriptors() const { return descs_; }

 private:
  std::vector<Trajectory> trajs_;
  std::vector<ExampleDescriptor> descs_;
  Variant variant_;
  std::vector<std::shared_ptr<CachedLossSource>> sources_;
};

struct TracePoint {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<TracePoint> trace;
  bool aborted = false;
  std::string diagnostic;
};

inline std::size_t steps_per_epoch(std::size_t examples, std::size_t batch) { return (examples + batch - 1) / batch; }

inline std::string loss_trace_csv(const std::vector<TracePoint>& trace) {
  std::ostringstream out;
  out.precision(17);
  out << "step,lr,loss\n";
  for (const auto& p : trace) out << p.step << ',' << p.lr << ',' << p.loss << '\n';
  return out.str();
}

// Mean training loss over a set, without gradients.
inline double mean_loss(const Forecaster& model, const ExampleSet& data) {
  nd::NoGradScope ng;
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) total += model.loss(data.get(i)).item();
  return total / static_cast<double>(data.size());
}

// Mini-batch training: seeded shuffle per epoch, mean loss over the batch,
// global-norm clipping, scheduled lr, AdamW. A non-finite loss or gradient
// restores the parameters that produced the last finite loss and stops.
inline TrainResult train(Forecaster& model, const ExampleSet& data, std::uint64_t seed,
                         const std::function<void(const TracePoint&)>& on_step = {}) {
  const TrainConfig& tc = model.config().train;
  tc.validate();
  if (data.size() == 0) throw InvalidArgument("train: no examples");
  auto& params = model.params();
  nd::AdamW opt({tc.lr, tc.weight_decay, tc.beta1, tc.beta2, tc.adam_eps});
  const std::size_t per_epoch = steps_per_epoch(data.size(), tc.batch_size);
  const std::size_t total = per_epoch * tc.epochs;

  TrainResult result;
  std::vector<std::vector<double>> last_good;
  auto snapshot = [&] {
    last_good.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) last_good[p].assign(params.entries()[p].tensor.data().begin(),
                                                                           params.entries()[p].tensor.data().end());
  };
  auto restore = [&] {
    for (std::size_t p = 0; p < last_good.size(); ++p)
      std::copy(last_good[p].begin(), last_good[p].end(), params.entries()[p].tensor.mutable_data().begin());
  };
  snapshot();

  std::vector<std::size_t> order(data.size());
  nd::Tape tape;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(derive_seed(seed, {0x5487ULL, epoch}));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * tc.batch_size;
      const std::size_t end = std::min(begin + tc.batch_size, data.size());
      const double inv = 1.0 / static_cast<double>(end - begin);
      params.zero_grad();
      double batch_loss = 0.0;
      {
        nd::TapeScope scope(tape);
        for (std::size_t i = begin; i < end; ++i) {
          nd::Tensor l = nd::scale(model.loss(data.get(order[i])), inv);
          batch_loss += l.item();
          tape.backward(l);
        }
      }
      ++step;
      const double lr = nd::lr_at_step(step, total, tc.warmup_ratio, tc.lr);
      const TracePoint point{step, lr, batch_loss};
      if (!std::isfinite(batch_loss)) {
        restore();
        result.aborted = true;
        result.diagnostic = "non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) +
                            "); parameters restored to the last finite-loss state";
        return result;
      }
      snapshot();
      try {
        nd::clip_grad_norm(params, tc.max_grad_norm);
        opt.step(params, lr);
      } catch (const NumericError& e) {
        restore();
        result.aborted = true;
        result.diagnostic = std::string(e.what()) + " at step " + std::to_string(step) +
                            "; parameters restored to the last finite-loss state";
        return result;
      }
      result.trace.push_back(point);
      if (on_step) on_step(point);
    }
  }
  return result;
}

}  // namespace neuneu
