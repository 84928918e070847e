#pragma once

#include <cmath>
#include <deque>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "neuneu/ndgrad/tensor.hpp"

namespace neuneu::nd {

// Named trainable tensors in registration order. Names are stable and are
// the keys used by checkpoints and gradient lookup.
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool decay;
  };

  Tensor& add(const std::string& name, Tensor t, bool decay) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    t.set_requires_grad(true);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t), decay});
    return entries_.back().tensor;
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return entries_[it->second].tensor;
  }
  Tensor& get(const std::string& name) {
    return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).get(name));
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::unordered_map<std::string, std::vector<double>> gradients() const {
    std::unordered_map<std::string, std::vector<double>> out;
    for (const auto& e : entries_) {
      auto g = e.tensor.grad();
      out[e.name].assign(g.begin(), g.end());
    }
    return out;
  }

 private:
  std::deque<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Normal(0, std) truncated to +-2 std by rejection.
inline Tensor truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) {
    double z;
    do {
      z = dist(rng);
    } while (std::abs(z) > 2.0);
    v = z * stddev;
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace neuneu::nd
