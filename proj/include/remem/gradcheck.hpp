#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "remem/tensor.hpp"

namespace remem {

// Central-difference validation of the tape. loss_fn must rebuild the forward
// pass from the current parameter values on every call; it runs under a tape
// once for the analytic gradients and tape-free for the probe evaluations.
// Per-coordinate error |ad - fd| / max(1, |ad|, |fd|); returns the max.
// Meant for double precision.
inline double grad_check(const std::function<Tensor<double>()>& loss_fn,
                         std::vector<Tensor<double>> params, double h = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    for (auto& p : params) {
      if (!p.requires_grad()) throw UsageError("grad_check param without requires_grad");
      p.zero_grad();
    }
    auto loss = loss_fn();
    tape.backward(loss);
    for (auto& p : params) analytic.push_back(p.grad());
  }
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& value = params[pi].data();
    for (std::size_t i = 0; i < value.size(); ++i) {
      double keep = value[i];
      value[i] = keep + h;
      double fp = loss_fn().item();
      value[i] = keep - h;
      double fm = loss_fn().item();
      value[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double ad = analytic[pi][i];
      double denom = std::max({1.0, std::abs(ad), std::abs(fd)});
      worst = std::max(worst, std::abs(ad - fd) / denom);
    }
  }
  return worst;
}

}  // namespace remem
