#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mmasr/core/tensor.hpp"

namespace mmasr::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;

  Matrix<T>& value() { return tensor.matrix(); }
  const Matrix<T>& value() const { return tensor.matrix(); }
  Matrix<T>& grad() { return tensor.grad(); }
};

/// Named parameters in registration order. Addresses are stable for the
/// lifetime of the set.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(const std::string& name, std::size_t rows, std::size_t cols, bool trainable = true) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->tensor = Tensor<T>(Shape{rows, cols});
    p->trainable = trainable;
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Parameter<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Parameter<T>& at(const std::string& name) {
    auto* p = find(name);
    if (!p) throw LookupError("no parameter named " + name);
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->tensor.grad().setZero();
  }

  // Copies values (not gradients) into another set with identical layout.
  template <typename U>
  void copy_values_to(ParameterSet<U>& other) const {
    for (const auto& p : params_) {
      other.at(p->name).value() = p->value().template cast<U>();
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform in [-k, k] with k = 1/sqrt(fan_in); biases are left at zero.
template <typename T>
void init_uniform(Parameter<T>& p, std::size_t fan_in, std::mt19937_64& rng) {
  const double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-k, k);
  auto& m = p.value();
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
}

}  // namespace mmasr::nn
