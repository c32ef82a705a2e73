#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "mmasr/core/parameters.hpp"

namespace mmasr::nn {

/// Scales every gradient by threshold/g when the global L2 norm g exceeds
/// the threshold. Returns the factor applied (1 when untouched).
template <typename T>
double clip_grad_norm(ParameterSet<T>& params, double threshold) {
  if (!(threshold > 0.0)) throw ArgumentError("clip_grad_norm: threshold must be positive");
  double sq = 0.0;
  for (auto& p : params) {
    if (!p->trainable) continue;
    sq += p->grad().template cast<double>().squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm <= threshold) return 1.0;
  const double factor = threshold / norm;
  for (auto& p : params) {
    if (p->trainable) p->grad() *= static_cast<T>(factor);
  }
  return factor;
}

template <typename T>
double grad_norm(ParameterSet<T>& params) {
  double sq = 0.0;
  for (auto& p : params) {
    if (p->trainable) sq += p->grad().template cast<double>().squaredNorm();
  }
  return std::sqrt(sq);
}

struct AdamConfig {
  double learning_rate = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter name.
template <typename T>
class Adam {
 public:
  struct Moments {
    Matrix<T> first;
    Matrix<T> second;
  };

  explicit Adam(AdamConfig config = {}) : config_(config) {
    if (!(config_.learning_rate > 0.0)) throw ArgumentError("Adam: learning rate must be positive");
  }

  void step(ParameterSet<T>& params) {
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T lr = static_cast<T>(config_.learning_rate);
    const T eps = static_cast<T>(config_.epsilon);
    const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
    for (auto& p : params) {
      if (!p->trainable) continue;
      auto& value = p->value();
      const auto& g = p->grad();
      auto it = moments_.find(p->name);
      if (it == moments_.end()) {
        it = moments_.emplace(p->name, Moments{Matrix<T>::Zero(value.rows(), value.cols()),
                                               Matrix<T>::Zero(value.rows(), value.cols())}).first;
      }
      auto& m = it->second;
      if (m.first.rows() != value.rows() || m.first.cols() != value.cols()) {
        throw StateError("Adam: moment shape " + shape_string(m.first) + " does not match parameter " + p->name +
                         " " + shape_string(value));
      }
      m.first = b1 * m.first + (T(1) - b1) * g;
      m.second = b2 * m.second + (T(1) - b2) * g.cwiseProduct(g);
      value.array() -= lr * (m.first.array() * ic1) / ((m.second.array() * ic2).sqrt() + eps);
    }
  }

  std::uint64_t steps() const { return steps_; }
  double learning_rate() const { return config_.learning_rate; }
  void set_learning_rate(double lr) {
    if (!(lr > 0.0)) throw ArgumentError("Adam: learning rate must be positive");
    config_.learning_rate = lr;
  }
  const AdamConfig& config() const { return config_; }
  std::map<std::string, Moments>& moments() { return moments_; }

 private:
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mmasr::nn
