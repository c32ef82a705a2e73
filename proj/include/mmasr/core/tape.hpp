#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <unordered_map>
#include <vector>

#include "mmasr/core/parameters.hpp"
#include "mmasr/core/tensor.hpp"

namespace mmasr::nn {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const { return tape_->value(id_); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so a reverse sweep over ids is a
/// valid topological order. Parameter leaves forward their gradient into the
/// Parameter's own buffer, accumulating across every use on the tape.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  // With grad disabled, parameter leaves do not require gradients, so no
  // backward closures are kept (inference mode).
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Matrix<T> value) {
    nodes_.push_back(Node{std::move(value), {}, false, false, {}, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> parameter(Parameter<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) return Var<T>(this, it->second);
    const bool track = grad_enabled_ && p.trainable;
    nodes_.push_back(Node{p.value(), {}, track, false, {}, track ? &p : nullptr});
    param_ids_[&p] = nodes_.size() - 1;
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> record(Matrix<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(fn));
  }

  Var<T> record(Matrix<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_[v.id()].needs_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}, nullptr});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Matrix<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  Matrix<T>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.grad_ready) {
      n.grad = Matrix<T>::Zero(n.value.rows(), n.value.cols());
      n.grad_ready = true;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  void backward(Var<T> loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
      throw ArgumentError("backward requires a scalar loss, got " + shape_string(loss.value()));
    }
    grad(loss.id()).setConstant(T(1));
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      auto& n = nodes_[id];
      if (!n.grad_ready || !n.needs_grad) continue;
      if (n.param) {
        n.param->grad() += n.grad;
      } else if (n.backward) {
        n.backward(*this, id);
      }
    }
  }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool needs_grad;
    bool grad_ready;
    BackwardFn backward;
    Parameter<T>* param;
  };

  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
};

}  // namespace mmasr::nn
