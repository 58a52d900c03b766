#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "twoway/tensor.hpp"

namespace twoway {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Named parameter store shared by both users of a system. Buffers (trainable =
// false) hold running statistics and are skipped by the optimizer but saved in
// checkpoints.
template <class T>
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m;
    Tensor<T> v;
    bool trainable = true;
  };

  int add(const std::string& name, Tensor<T> init, bool trainable = true) {
    if (by_name_.count(name)) throw std::invalid_argument("ParameterSet: duplicate name " + name);
    Entry e;
    e.name = name;
    e.grad = Tensor<T>(init.shape);
    e.m = Tensor<T>(init.shape);
    e.v = Tensor<T>(init.shape);
    e.value = std::move(init);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    int idx = static_cast<int>(entries_.size()) - 1;
    by_name_.emplace(name, idx);
    return idx;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  int index(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("ParameterSet: unknown name " + name);
    return it->second;
  }
  int size() const { return static_cast<int>(entries_.size()); }

  Entry& entry(int idx) { return entries_.at(static_cast<std::size_t>(idx)); }
  const Entry& entry(int idx) const { return entries_.at(static_cast<std::size_t>(idx)); }
  Tensor<T>& value(const std::string& name) { return entry(index(name)).value; }
  const Tensor<T>& value(const std::string& name) const { return entry(index(name)).value; }
  Tensor<T>& grad(const std::string& name) { return entry(index(name)).grad; }

  void zero_grads() {
    for (auto& e : entries_) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  std::size_t trainable_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.value.count();
    return n;
  }

  double grad_norm() const {
    double s = 0;
    for (const auto& e : entries_) {
      if (!e.trainable) continue;
      for (T g : e.grad.data) s += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(s);
  }

  // Global-norm clip over all trainable gradients. Returns the pre-clip norm.
  double clip_gradients(double max_norm) {
    double norm = grad_norm();
    if (max_norm > 0 && norm > max_norm) {
      T scale = static_cast<T>(max_norm / norm);
      for (auto& e : entries_) {
        if (!e.trainable) continue;
        for (T& g : e.grad.data) g *= scale;
      }
    }
    return norm;
  }

  // One Adam update with bias correction. Non-finite gradients abort with the
  // offending parameter named.
  void adam_step(const AdamConfig& cfg, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(steps_));
    for (auto& e : entries_) {
      if (!e.trainable) continue;
      if (!e.grad.all_finite())
        throw std::runtime_error("adam_step: non-finite gradient in " + e.name);
      for (std::size_t i = 0; i < e.value.count(); ++i) {
        double g = static_cast<double>(e.grad.data[i]);
        double m = cfg.beta1 * static_cast<double>(e.m.data[i]) + (1.0 - cfg.beta1) * g;
        double v = cfg.beta2 * static_cast<double>(e.v.data[i]) + (1.0 - cfg.beta2) * g * g;
        e.m.data[i] = static_cast<T>(m);
        e.v.data[i] = static_cast<T>(v);
        double mh = m / bc1;
        double vh = v / bc2;
        e.value.data[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg.eps));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
  std::uint64_t steps_ = 0;
};

}  // namespace twoway
