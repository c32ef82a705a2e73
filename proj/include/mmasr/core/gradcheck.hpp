#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "mmasr/core/parameters.hpp"
#include "mmasr/core/tape.hpp"

namespace mmasr::nn {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double analytic = 0.0;   // at the worst entry
  double numerical = 0.0;  // at the worst entry
  std::size_t checked = 0;
};

/// Compares backward against central differences for every entry of every
/// trainable parameter. `loss` builds a scalar on the tape it is given.
/// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps
/// entries whose true gradient is zero from dividing rounding noise by
/// rounding noise.
template <typename Loss>
GradCheckResult check_gradients(ParameterSet<double>& params, Loss&& loss, double step = 1e-4, double floor = 1e-6) {
  params.zero_grad();
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return loss(tape).value()(0, 0);
  };
  GradCheckResult out;
  for (auto& p : params) {
    if (!p->trainable) continue;
    auto& v = p->value();
    const auto& g = p->grad();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + step;
      const double up = eval();
      v.data()[i] = orig - step;
      const double down = eval();
      v.data()[i] = orig;
      const double num = (up - down) / (2.0 * step);
      const double ana = g.data()[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      ++out.checked;
      if (rel > out.max_relative_error || out.worst_parameter.empty()) {
        out.max_relative_error = std::max(out.max_relative_error, rel);
        if (rel >= out.max_relative_error) {
          out.worst_parameter = p->name;
          out.worst_index = static_cast<std::size_t>(i);
          out.analytic = ana;
          out.numerical = num;
        }
      }
    }
  }
  return out;
}

}  // namespace mmasr::nn
