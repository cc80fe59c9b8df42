#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "remem/errors.hpp"
#include "remem/vit.hpp"

namespace remem {

// linear warmup to peak_lr, then cosine to 0 at total_steps
struct Schedule {
  double peak_lr = 0.1;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  void validate() const {
    if (peak_lr < 0) throw ParamError("schedule peak_lr must be non-negative");
    if (total_steps == 0 || warmup_steps >= total_steps)
      throw ParamError("schedule needs warmup_steps < total_steps");
  }
};

inline double lr_at(const Schedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps)
    throw ParamError("schedule step " + std::to_string(step) + " past total " +
                     std::to_string(s.total_steps));
  if (step < s.warmup_steps) return s.peak_lr * double(step) / double(s.warmup_steps);
  double t = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  return 0.5 * s.peak_lr * (1.0 + std::cos(t * 3.14159265358979323846));
}

template <class T>
void zero_grads(std::vector<Param<T>>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <class T>
struct SgdState {
  Schedule sched;
  T momentum = T(0.9);
  T weight_decay = T(0);
  std::vector<std::vector<T>> velocity;
};

template <class T>
SgdState<T> make_sgd(const std::vector<Param<T>>& params, Schedule sched, T momentum,
                     T weight_decay) {
  sched.validate();
  if (weight_decay < T(0)) throw ParamError("weight decay must be non-negative");
  SgdState<T> s;
  s.sched = sched;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const auto& p : params) s.velocity.emplace_back(p.tensor.size(), T(0));
  return s;
}

// v <- mu*v + g + wd*w; w <- w - lr(step)*v
template <class T>
void sgd_step(SgdState<T>& s, std::vector<Param<T>>& params, std::size_t step_index) {
  if (s.velocity.size() != params.size())
    throw UsageError("sgd state was built for a different parameter list");
  T lr = T(lr_at(s.sched, step_index));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor.data();
    const auto& g = params[i].tensor.grad();
    auto& v = s.velocity[i];
    T wd = params[i].decay ? s.weight_decay : T(0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = s.momentum * v[j] + g[j] + wd * w[j];
      w[j] -= lr * v[j];
    }
  }
}

struct SamConfig {
  double rho = 0.0;

  void validate() const {
    if (rho < 0) throw ParamError("sam rho must be non-negative");
  }
};

// One sharpness-aware step: ascend along the normalized data-loss gradient,
// take the base-optimizer step with the gradient measured at the perturbed
// point, and restore the weights bit-exactly in between. loss_fn must zero
// grads, run forward/backward on the same batch, and return the loss.
template <class T, class LossFn>
T sam_step(const SamConfig& sam, SgdState<T>& base, std::vector<Param<T>>& params,
           LossFn&& loss_fn, std::size_t step_index) {
  sam.validate();
  T loss = loss_fn();
  if (!std::isfinite(double(loss)))
    throw NumericError("non-finite loss at step " + std::to_string(step_index));

  double norm_sq = 0.0;
  for (auto& p : params)
    for (T g : p.tensor.grad()) norm_sq += double(g) * double(g);
  double norm = std::sqrt(norm_sq);

  if (sam.rho > 0.0 && norm >= 1e-12) {
    std::vector<std::vector<T>> saved;
    saved.reserve(params.size());
    for (auto& p : params) saved.push_back(p.tensor.data());
    T sc = T(sam.rho / norm);
    for (auto& p : params) {
      auto& w = p.tensor.data();
      const auto& g = p.tensor.grad();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] += sc * g[j];
    }
    T loss2 = loss_fn();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = saved[i];
    if (!std::isfinite(double(loss2)))
      throw NumericError("non-finite perturbed loss at step " + std::to_string(step_index));
  }
  sgd_step(base, params, step_index);
  return loss;
}

template <class T>
struct AdamwState {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(1e-4);
  std::size_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <class T>
AdamwState<T> make_adamw(const std::vector<Param<T>>& params, T lr = T(1e-3),
                         T weight_decay = T(1e-4)) {
  if (lr < T(0) || weight_decay < T(0)) throw ParamError("adamw lr and wd must be non-negative");
  AdamwState<T> s;
  s.lr = lr;
  s.weight_decay = weight_decay;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.size(), T(0));
    s.v.emplace_back(p.tensor.size(), T(0));
  }
  return s;
}

// standard bias-corrected AdamW with decoupled weight decay
template <class T>
void adamw_step(AdamwState<T>& s, std::vector<Param<T>>& params) {
  if (s.m.size() != params.size())
    throw UsageError("adamw state was built for a different parameter list");
  ++s.step;
  T bc1 = T(1) - std::pow(s.beta1, T(s.step));
  T bc2 = T(1) - std::pow(s.beta2, T(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params[i].tensor.data();
    const auto& g = params[i].tensor.grad();
    T wd = params[i].decay ? s.weight_decay : T(0);
    for (std::size_t j = 0; j < w.size(); ++j) {
      s.m[i][j] = s.beta1 * s.m[i][j] + (T(1) - s.beta1) * g[j];
      s.v[i][j] = s.beta2 * s.v[i][j] + (T(1) - s.beta2) * g[j] * g[j];
      T mhat = s.m[i][j] / bc1;
      T vhat = s.v[i][j] / bc2;
      w[j] -= s.lr * (mhat / (std::sqrt(vhat) + s.eps) + wd * w[j]);
    }
  }
}

}  // namespace remem
