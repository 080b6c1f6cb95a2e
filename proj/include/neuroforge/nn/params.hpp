#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "neuroforge/errors.hpp"
#include "neuroforge/rng.hpp"

namespace neuroforge::nn {

using ParamId = std::size_t;

template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;

  std::size_t count() const { return value.size(); }
};

/// Named flat parameter arrays, each with one gradient slot.
template <typename T>
class ParameterStore {
 public:
  ParamId add(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
    const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                          [](std::size_t a, int b) { return a * b; });
    params_.push_back({name, std::move(shape), std::vector<T>(n, T{}), std::vector<T>(n, T{})});
    index_[name] = params_.size() - 1;
    return params_.size() - 1;
  }

  Parameter<T>& operator[](ParamId id) { return params_[id]; }
  const Parameter<T>& operator[](ParamId id) const { return params_[id]; }

  ParamId id(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("no parameter named '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.count();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T{});
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, ParamId> index_;
};

template <typename T>
void fill_uniform(std::vector<T>& v, double bound, Rng& rng) {
  for (auto& e : v) e = static_cast<T>(rng.uniform(-bound, bound));
}

/// Rescales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(ParameterStore<T>& store, double max_norm) {
  double sq = 0.0;
  for (const auto& p : store)
    for (auto g : p.grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& p : store)
      for (auto& g : p.grad) g = static_cast<T>(g * k);
  }
  return norm;
}

/// Adam with bias correction.
template <typename T>
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParameterStore<T>& store) {
    if (m_.size() != store.size()) {
      m_.clear();
      v_.clear();
      for (const auto& p : store) {
        m_.emplace_back(p.count(), 0.0);
        v_.emplace_back(p.count(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    std::size_t k = 0;
    for (auto& p : store) {
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.count(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        const double upd = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        p.value[i] = static_cast<T>(p.value[i] - upd);
      }
      ++k;
    }
  }

  long steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace neuroforge::nn
