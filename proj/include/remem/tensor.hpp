#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "remem/errors.hpp"
#include "remem/kernels.hpp"

namespace remem {

template <class T>
class Tape;

template <class T>
struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const Tape<T>* producer = nullptr;  // tape that recorded this node as an op output
};

// Shared-storage handle: copying a Tensor aliases the same node, which is how
// autodiff closures and optimizers see parameter updates.
template <class T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> data,
                     bool requires_grad = false) {
    std::size_t expect = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
      expect *= d;
    }
    if (expect != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    if (requires_grad) t.set_requires_grad(true);
    return t;
  }

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    std::size_t total = 1;
    for (std::size_t d : shape) total *= d;
    return from(std::move(shape), std::vector<T>(total, T(0)), requires_grad);
  }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    std::size_t total = 1;
    for (std::size_t d : shape) total *= d;
    return from(std::move(shape), std::vector<T>(total, v));
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const std::shared_ptr<Node>& node() const { return n_; }
  const std::vector<std::size_t>& shape() const { return n_->shape; }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t size() const { return n_->value.size(); }

  std::size_t rows() const {
    require_rank2("rows()");
    return n_->shape[0];
  }
  std::size_t cols() const {
    require_rank2("cols()");
    return n_->shape[1];
  }

  std::vector<T>& data() { return n_->value; }
  const std::vector<T>& data() const { return n_->value; }

  std::vector<T>& grad() {
    if (!n_->requires_grad) throw UsageError("grad() on a tensor without requires_grad");
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    if (!n_->requires_grad) throw UsageError("grad() on a tensor without requires_grad");
    return n_->grad;
  }

  T item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }

  void set_requires_grad(bool v) {
    n_->requires_grad = v;
    if (v && n_->grad.size() != n_->value.size()) n_->grad.assign(n_->value.size(), T(0));
  }

  void zero_grad() {
    if (n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  // new leaf with copied values and no gradient tracking
  Tensor detach() const { return from(n_->shape, n_->value); }

 private:
  void require_rank2(const char* what) const {
    if (rank() != 2) throw ShapeError(std::string(what) + " needs rank 2, got " + shape_str(shape()));
  }

  std::shared_ptr<Node> n_;
};

// Ordered record of executed ops; backward replays local gradient rules in
// exact reverse recording order. Ops record themselves only while a
// Tape::Scope is alive, so plain forward evaluation never allocates autodiff
// state.
template <class T>
class Tape {
 public:
  using Node = TensorNode<T>;

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current_ref()) { current_ref() = &t; }
    ~Scope() { current_ref() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  static Tape* current() { return current_ref(); }

  void record(std::shared_ptr<Node> out, std::function<void()> pull) {
    out->producer = this;
    steps_.push_back(Step{std::move(out), std::move(pull)});
  }

  std::size_t size() const { return steps_.size(); }

  // Populates grads of every requires_grad tensor reachable from root.
  // Intermediate (op output) grads are reset per call; leaf grads accumulate
  // across calls until zero_grad.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw UsageError("backward root must be scalar, got " + shape_str(root.shape()));
    if (root.node()->producer != this) throw UsageError("backward root is not on this tape");
    for (auto& s : steps_)
      if (s.out->requires_grad) std::fill(s.out->grad.begin(), s.out->grad.end(), T(0));
    root.node()->grad[0] = T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->pull();
  }

 private:
  struct Step {
    std::shared_ptr<Node> out;
    std::function<void()> pull;
  };

  static Tape*& current_ref() {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<Step> steps_;
};

namespace detail {

template <class T>
Tape<T>* tape_for(std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* t = Tape<T>::current();
  if (!t) return nullptr;
  for (const Tensor<T>* in : ins)
    if (in->requires_grad()) return t;
  return nullptr;
}

template <class T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = Tensor<T>::zeros({m, n});
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
  if (auto* tape = detail::tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(on, [an, bn, on, m, n, k] {
      if (an->requires_grad)
        kernels::gemm_nt(m, k, n, on->grad.data(), bn->value.data(), an->grad.data(), true);
      if (bn->requires_grad)
        kernels::gemm_tn(k, n, m, an->value.data(), on->grad.data(), bn->grad.data(), true);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("add", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (auto* tape = detail::tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(on, [an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("sub", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  if (auto* tape = detail::tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(on, [an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape("mul", a, b);
  auto out = Tensor<T>::zeros(a.shape());
  const auto &av = a.data(), &bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (auto* tape = detail::tape_for<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    tape->record(on, [an, bn, on] {
      if (an->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record(on, [an, on, c] {
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
    });
  }
  return out;
}

// relu'(0) := 0 so activation sparsity counts stay deterministic
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record(on, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        if (an->value[i] > T(0)) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto out = Tensor<T>::zeros(a.shape());
  const auto& av = a.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    T z = av[i];
    ov[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
  }
  if (auto* tape = detail::tape_for<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    tape->record(on, [an, on] {
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += on->grad[i] * on->value[i] * (T(1) - on->value[i]);
    });
  }
  return out;
}

// broadcast bias over the rows of a 2-D tensor
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || b.shape()[0] != x.shape()[1])
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  std::size_t rows = x.shape()[0], d = x.shape()[1];
  auto out = Tensor<T>::zeros(x.shape());
  const auto &xv = x.data(), &bv = b.data();
  auto& ov = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] + bv[j];
  if (auto* tape = detail::tape_for<T>({&x, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), bn = b.node(), on = out.node();
    tape->record(on, [xn, bn, on, rows, d] {
      if (xn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      if (bn->requires_grad) kernels::colsum_acc(rows, d, on->grad.data(), bn->grad.data());
    });
  }
  return out;
}

template <class T>
Tensor<T> softmax(const Tensor<T>& x, T temperature) {
  if (temperature <= T(0)) throw ParamError("softmax temperature must be positive");
  if (x.rank() != 2) throw ShapeError("softmax needs rank 2, got " + shape_str(x.shape()));
  std::size_t rows = x.shape()[0], n = x.shape()[1];
  T inv_temp = T(1) / temperature;
  auto out = Tensor<T>::zeros(x.shape());
  kernels::softmax_rows(rows, n, x.data().data(), out.data().data(), inv_temp);
  if (auto* tape = detail::tape_for<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    tape->record(on, [xn, on, rows, n, inv_temp] {
      kernels::softmax_rows_bwd(rows, n, on->value.data(), on->grad.data(), xn->grad.data(),
                                inv_temp);
    });
  }
  return out;
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                    T eps = T(1e-5)) {
  if (x.rank() != 2) throw ShapeError("layernorm needs rank 2, got " + shape_str(x.shape()));
  std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 || bias.shape()[0] != d)
    throw ShapeError("layernorm affine params " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  if (eps <= T(0)) throw ParamError("layernorm eps must be positive");
  auto out = Tensor<T>::zeros(x.shape());
  auto mean = std::make_shared<std::vector<T>>(rows);
  auto rstd = std::make_shared<std::vector<T>>(rows);
  kernels::layernorm_rows(rows, d, x.data().data(), gain.data().data(), bias.data().data(), eps,
                          out.data().data(), mean->data(), rstd->data());
  if (auto* tape = detail::tape_for<T>({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    tape->record(on, [xn, gn, bn, on, rows, d, mean, rstd] {
      if (xn->requires_grad)
        kernels::layernorm_rows_bwd_x(rows, d, xn->value.data(), gn->value.data(), mean->data(),
                                      rstd->data(), on->grad.data(), xn->grad.data());
      if (gn->requires_grad || bn->requires_grad) {
        // the kernel accumulates both; route through scratch when one side is frozen
        std::vector<T> dg(d, T(0)), db(d, T(0));
        kernels::layernorm_rows_bwd_affine(rows, d, xn->value.data(), mean->data(), rstd->data(),
                                           on->grad.data(), dg.data(), db.data());
        if (gn->requires_grad)
          for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dg[j];
        if (bn->requires_grad)
          for (std::size_t j = 0; j < d; ++j) bn->grad[j] += db[j];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto out = Tensor<T>::scalar(acc);
  if (auto* tape = detail::tape_for<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    tape->record(on, [xn, on] {
      T g = on->grad[0];
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  T inv = T(1) / T(x.size());
  auto out = Tensor<T>::scalar(acc * inv);
  if (auto* tape = detail::tape_for<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    tape->record(on, [xn, on, inv] {
      T g = on->grad[0] * inv;
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy logits must be rank 2");
  std::size_t rows = logits.shape()[0], n = logits.shape()[1];
  if (labels.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= n)
      throw ParamError("cross_entropy label " + std::to_string(y) + " out of range [0," +
                       std::to_string(n) + ")");
  auto probs = std::make_shared<std::vector<T>>(rows * n);
  kernels::softmax_rows(rows, n, logits.data().data(), probs->data(), T(1));
  const auto& lv = logits.data();
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = lv.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = xr[j] > mx ? xr[j] : mx;
    T se = T(0);
    for (std::size_t j = 0; j < n; ++j) se += std::exp(xr[j] - mx);
    loss += mx + std::log(se) - xr[static_cast<std::size_t>(labels[r])];
  }
  auto out = Tensor<T>::scalar(loss / T(rows));
  if (auto* tape = detail::tape_for<T>({&logits})) {
    out.set_requires_grad(true);
    auto xn = logits.node(), on = out.node();
    auto lab = labels;
    tape->record(on, [xn, on, probs, lab, rows, n] {
      T g = on->grad[0] / T(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          T p = (*probs)[r * n + j];
          T ind = (static_cast<std::size_t>(lab[r]) == j) ? T(1) : T(0);
          xn->grad[r * n + j] += g * (p - ind);
        }
    });
  }
  return out;
}

// cross-entropy against soft target rows (each row sums to 1)
template <class T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& targets) {
  detail::check_same_shape("cross_entropy_soft", logits, targets);
  if (logits.rank() != 2) throw ShapeError("cross_entropy_soft logits must be rank 2");
  std::size_t rows = logits.shape()[0], n = logits.shape()[1];
  auto probs = std::make_shared<std::vector<T>>(rows * n);
  kernels::softmax_rows(rows, n, logits.data().data(), probs->data(), T(1));
  const auto &lv = logits.data(), &tv = targets.data();
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = lv.data() + r * n;
    T mx = xr[0];
    for (std::size_t j = 1; j < n; ++j) mx = xr[j] > mx ? xr[j] : mx;
    T se = T(0);
    for (std::size_t j = 0; j < n; ++j) se += std::exp(xr[j] - mx);
    T lse = mx + std::log(se);
    for (std::size_t j = 0; j < n; ++j) loss += tv[r * n + j] * (lse - xr[j]);
  }
  auto out = Tensor<T>::scalar(loss / T(rows));
  if (auto* tape = detail::tape_for<T>({&logits})) {
    out.set_requires_grad(true);
    auto xn = logits.node(), tn = targets.node(), on = out.node();
    tape->record(on, [xn, tn, on, probs, rows, n] {
      T g = on->grad[0] / T(rows);
      for (std::size_t i = 0; i < rows * n; ++i)
        xn->grad[i] += g * ((*probs)[i] - tn->value[i]);
    });
  }
  return out;
}

// mean over rows of sum_j p*(ln p - ln q), 0*ln 0 := 0; gradient flows to both
// arguments when tracked
template <class T>
Tensor<T> kl_div(const Tensor<T>& p, const Tensor<T>& q) {
  detail::check_same_shape("kl_div", p, q);
  if (p.rank() != 2) throw ShapeError("kl_div needs rank 2 probability rows");
  std::size_t rows = p.shape()[0], n = p.shape()[1];
  const auto &pv = p.data(), &qv = q.data();
  T loss = T(0);
  for (std::size_t i = 0; i < rows * n; ++i)
    if (pv[i] > T(0)) loss += pv[i] * (std::log(pv[i]) - std::log(qv[i]));
  auto out = Tensor<T>::scalar(loss / T(rows));
  if (auto* tape = detail::tape_for<T>({&p, &q})) {
    out.set_requires_grad(true);
    auto pn = p.node(), qn = q.node(), on = out.node();
    tape->record(on, [pn, qn, on, rows, n] {
      T g = on->grad[0] / T(rows);
      if (qn->requires_grad)
        for (std::size_t i = 0; i < rows * n; ++i)
          if (pn->value[i] > T(0)) qn->grad[i] -= g * pn->value[i] / qn->value[i];
      if (pn->requires_grad)
        for (std::size_t i = 0; i < rows * n; ++i)
          if (pn->value[i] > T(0))
            pn->grad[i] += g * (std::log(pn->value[i]) - std::log(qn->value[i]) + T(1));
    });
  }
  return out;
}

// mean binary cross-entropy over every element
template <class T>
Tensor<T> bce(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::check_same_shape("bce", pred, target);
  const auto &pv = pred.data(), &tv = target.data();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < T(0) || pv[i] > T(1))
      throw DomainError("bce prediction outside [0,1]: " + std::to_string(pv[i]));
    if (tv[i] < T(0) || tv[i] > T(1))
      throw DomainError("bce target outside [0,1]: " + std::to_string(tv[i]));
  }
  std::size_t total = pv.size();
  T loss = T(0);
  for (std::size_t i = 0; i < total; ++i) {
    if (tv[i] > T(0)) loss -= tv[i] * std::log(pv[i]);
    if (tv[i] < T(1)) loss -= (T(1) - tv[i]) * std::log(T(1) - pv[i]);
  }
  auto out = Tensor<T>::scalar(loss / T(total));
  if (auto* tape = detail::tape_for<T>({&pred})) {
    out.set_requires_grad(true);
    auto pn = pred.node(), tn = target.node(), on = out.node();
    tape->record(on, [pn, tn, on, total] {
      T g = on->grad[0] / T(total);
      for (std::size_t i = 0; i < total; ++i) {
        T t = tn->value[i], pv2 = pn->value[i];
        if (t > T(0)) pn->grad[i] -= g * t / pv2;
        if (t < T(1)) pn->grad[i] += g * (T(1) - t) / (T(1) - pv2);
      }
    });
  }
  return out;
}

// numerically stable mean BCE on logits: max(z,0) - z*t + log1p(exp(-|z|));
// same value as bce(sigmoid(z), t) without saturating
template <class T>
Tensor<T> bce_logits(const Tensor<T>& z, const Tensor<T>& target) {
  detail::check_same_shape("bce_logits", z, target);
  const auto &zv = z.data(), &tv = target.data();
  std::size_t total = zv.size();
  T loss = T(0);
  for (std::size_t i = 0; i < total; ++i) {
    T x = zv[i];
    loss += (x > T(0) ? x : T(0)) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
  }
  auto out = Tensor<T>::scalar(loss / T(total));
  if (auto* tape = detail::tape_for<T>({&z})) {
    out.set_requires_grad(true);
    auto zn = z.node(), tn = target.node(), on = out.node();
    tape->record(on, [zn, tn, on, total] {
      T g = on->grad[0] / T(total);
      for (std::size_t i = 0; i < total; ++i) {
        T x = zn->value[i];
        T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        zn->grad[i] += g * (s - tn->value[i]);
      }
    });
  }
  return out;
}

// x is [b*t x d] token rows, pos is [t x d]; adds pos to every batch block
template <class T>
Tensor<T> add_token_pos(const Tensor<T>& x, const Tensor<T>& pos, std::size_t batch) {
  if (x.rank() != 2 || pos.rank() != 2 || x.shape()[1] != pos.shape()[1] ||
      x.shape()[0] != batch * pos.shape()[0])
    throw ShapeError("add_token_pos: " + shape_str(x.shape()) + " with pos " +
                     shape_str(pos.shape()) + " batch " + std::to_string(batch));
  std::size_t t = pos.shape()[0], d = pos.shape()[1];
  auto out = Tensor<T>::zeros(x.shape());
  const auto &xv = x.data(), &pv = pos.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t j = 0; j < d; ++j)
        ov[(i * t + r) * d + j] = xv[(i * t + r) * d + j] + pv[r * d + j];
  if (auto* tape = detail::tape_for<T>({&x, &pos})) {
    out.set_requires_grad(true);
    auto xn = x.node(), pn = pos.node(), on = out.node();
    tape->record(on, [xn, pn, on, batch, t, d] {
      if (xn->requires_grad)
        for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
      if (pn->requires_grad)
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t r = 0; r < t; ++r)
            for (std::size_t j = 0; j < d; ++j)
              pn->grad[r * d + j] += on->grad[(i * t + r) * d + j];
    });
  }
  return out;
}

// prepend one learned CLS row to every batch block: [b*np x d] -> [b*(np+1) x d]
template <class T>
Tensor<T> prepend_cls(const Tensor<T>& x, const Tensor<T>& cls, std::size_t batch) {
  if (x.rank() != 2 || cls.rank() != 2 || cls.shape()[0] != 1 || cls.shape()[1] != x.shape()[1] ||
      x.shape()[0] % batch != 0)
    throw ShapeError("prepend_cls: " + shape_str(x.shape()) + " with cls " +
                     shape_str(cls.shape()) + " batch " + std::to_string(batch));
  std::size_t np = x.shape()[0] / batch, d = x.shape()[1], t = np + 1;
  auto out = Tensor<T>::zeros({batch * t, d});
  const auto &xv = x.data(), &cv = cls.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = 0; j < d; ++j) ov[i * t * d + j] = cv[j];
    for (std::size_t r = 0; r < np; ++r)
      for (std::size_t j = 0; j < d; ++j) ov[(i * t + 1 + r) * d + j] = xv[(i * np + r) * d + j];
  }
  if (auto* tape = detail::tape_for<T>({&x, &cls})) {
    out.set_requires_grad(true);
    auto xn = x.node(), cn = cls.node(), on = out.node();
    tape->record(on, [xn, cn, on, batch, np, d, t] {
      if (cn->requires_grad)
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t j = 0; j < d; ++j) cn->grad[j] += on->grad[i * t * d + j];
      if (xn->requires_grad)
        for (std::size_t i = 0; i < batch; ++i)
          for (std::size_t r = 0; r < np; ++r)
            for (std::size_t j = 0; j < d; ++j)
              xn->grad[(i * np + r) * d + j] += on->grad[(i * t + 1 + r) * d + j];
    });
  }
  return out;
}

// rows start, start+stride, ... of a 2-D tensor (used to pull CLS rows out of
// token blocks)
template <class T>
Tensor<T> take_rows_strided(const Tensor<T>& x, std::size_t start, std::size_t stride) {
  if (x.rank() != 2) throw ShapeError("take_rows_strided needs rank 2");
  std::size_t rows = x.shape()[0], d = x.shape()[1];
  if (stride == 0 || start >= rows || (rows - start) % stride != 0)
    throw ShapeError("take_rows_strided: start " + std::to_string(start) + " stride " +
                     std::to_string(stride) + " does not tile " + shape_str(x.shape()));
  std::size_t n = (rows - start) / stride;
  auto out = Tensor<T>::zeros({n, d});
  const auto& xv = x.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = xv[(start + i * stride) * d + j];
  if (auto* tape = detail::tape_for<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    tape->record(on, [xn, on, start, stride, n, d] {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          xn->grad[(start + i * stride) * d + j] += on->grad[i * d + j];
    });
  }
  return out;
}

// scaled Q.K^T per (batch, head): q,k are [b*t x d], result [b*heads*t x t]
template <class T>
Tensor<T> attn_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t batch, std::size_t tokens,
                      std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2) throw ShapeError("attn_scores needs rank 2 inputs");
  detail::check_same_shape("attn_scores", q, k);
  std::size_t d = q.shape()[1];
  if (q.shape()[0] != batch * tokens || d % heads != 0)
    throw ShapeError("attn_scores: " + shape_str(q.shape()) + " with batch " +
                     std::to_string(batch) + " tokens " + std::to_string(tokens) + " heads " +
                     std::to_string(heads));
  std::size_t dh = d / heads;
  T sc = T(1) / std::sqrt(T(dh));
  auto out = Tensor<T>::zeros({batch * heads * tokens, tokens});
  kernels::attn_scores(batch, heads, tokens, dh, q.data().data(), k.data().data(),
                       out.data().data(), sc);
  if (auto* tape = detail::tape_for<T>({&q, &k})) {
    out.set_requires_grad(true);
    auto qn = q.node(), kn = k.node(), on = out.node();
    tape->record(on, [qn, kn, on, batch, heads, tokens, dh, sc] {
      kernels::attn_scores_bwd(batch, heads, tokens, dh, qn->value.data(), kn->value.data(),
                               on->grad.data(), qn->requires_grad ? qn->grad.data() : nullptr,
                               kn->requires_grad ? kn->grad.data() : nullptr, sc);
    });
  }
  return out;
}

// probs [b*heads*t x t] times v [b*t x d] -> [b*t x d]
template <class T>
Tensor<T> attn_context(const Tensor<T>& p, const Tensor<T>& v, std::size_t batch,
                       std::size_t tokens, std::size_t heads) {
  if (p.rank() != 2 || v.rank() != 2) throw ShapeError("attn_context needs rank 2 inputs");
  std::size_t d = v.shape()[1];
  if (p.shape()[0] != batch * heads * tokens || p.shape()[1] != tokens ||
      v.shape()[0] != batch * tokens || d % heads != 0)
    throw ShapeError("attn_context: probs " + shape_str(p.shape()) + " values " +
                     shape_str(v.shape()));
  std::size_t dh = d / heads;
  auto out = Tensor<T>::zeros({batch * tokens, d});
  kernels::attn_context(batch, heads, tokens, dh, p.data().data(), v.data().data(),
                        out.data().data());
  if (auto* tape = detail::tape_for<T>({&p, &v})) {
    out.set_requires_grad(true);
    auto pn = p.node(), vn = v.node(), on = out.node();
    tape->record(on, [pn, vn, on, batch, heads, tokens, dh] {
      kernels::attn_context_bwd(batch, heads, tokens, dh, pn->value.data(), vn->value.data(),
                                on->grad.data(), pn->requires_grad ? pn->grad.data() : nullptr,
                                vn->requires_grad ? vn->grad.data() : nullptr);
    });
  }
  return out;
}

namespace detail {

template <class T>
struct PearsonParts {
  T corr;        // convention: 1 when either side has zero variance
  bool degenerate;
};

template <class T>
PearsonParts<T> pearson(const T* a, const T* b, std::size_t n, std::size_t stride) {
  T ma = T(0), mb = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i * stride];
    mb += b[i * stride];
  }
  ma /= T(n);
  mb /= T(n);
  T saa = T(0), sbb = T(0), sab = T(0);
  for (std::size_t i = 0; i < n; ++i) {
    T da = a[i * stride] - ma, db = b[i * stride] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= T(0) || sbb <= T(0)) return {T(1), true};
  return {sab / (std::sqrt(saa) * std::sqrt(sbb)), false};
}

}  // namespace detail

// mean over rows of (1 - Pearson(teacher_row, student_row)); the teacher side
// must be detached, gradient flows to the student only; zero-variance rows
// contribute 0 and bump *flagged
template <class T>
Tensor<T> pearson_row_loss(const Tensor<T>& teacher, const Tensor<T>& student,
                           int* flagged = nullptr) {
  detail::check_same_shape("pearson_row_loss", teacher, student);
  if (teacher.rank() != 2) throw ShapeError("pearson_row_loss needs rank 2");
  if (teacher.requires_grad()) throw UsageError("pearson_row_loss teacher must be detached");
  std::size_t rows = teacher.shape()[0], n = teacher.shape()[1];
  if (n < 2) throw ParamError("pearson_row_loss needs at least 2 columns");
  const auto &tv = teacher.data(), &sv = student.data();
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    auto pr = detail::pearson(tv.data() + r * n, sv.data() + r * n, n, 1);
    if (pr.degenerate && flagged) ++*flagged;
    loss += T(1) - pr.corr;
  }
  auto out = Tensor<T>::scalar(loss / T(rows));
  if (auto* tape = detail::tape_for<T>({&student})) {
    out.set_requires_grad(true);
    auto tn = teacher.node(), sn = student.node(), on = out.node();
    tape->record(on, [tn, sn, on, rows, n] {
      T g = on->grad[0] / T(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* a = tn->value.data() + r * n;
        const T* b = sn->value.data() + r * n;
        T ma = T(0), mb = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          ma += a[j];
          mb += b[j];
        }
        ma /= T(n);
        mb /= T(n);
        T saa = T(0), sbb = T(0), sab = T(0);
        for (std::size_t j = 0; j < n; ++j) {
          T da = a[j] - ma, db = b[j] - mb;
          saa += da * da;
          sbb += db * db;
          sab += da * db;
        }
        if (saa <= T(0) || sbb <= T(0)) continue;
        T sa = std::sqrt(saa), sb = std::sqrt(sbb);
        T corr = sab / (sa * sb);
        for (std::size_t j = 0; j < n; ++j) {
          T da = a[j] - ma, db = b[j] - mb;
          sn->grad[r * n + j] -= g * (da / (sa * sb) - corr * db / sbb);
        }
      }
    });
  }
  return out;
}

// mean over columns of (1 - Pearson(teacher_col, student_col))
template <class T>
Tensor<T> pearson_col_loss(const Tensor<T>& teacher, const Tensor<T>& student,
                           int* flagged = nullptr) {
  detail::check_same_shape("pearson_col_loss", teacher, student);
  if (teacher.rank() != 2) throw ShapeError("pearson_col_loss needs rank 2");
  if (teacher.requires_grad()) throw UsageError("pearson_col_loss teacher must be detached");
  std::size_t rows = teacher.shape()[0], n = teacher.shape()[1];
  if (rows < 2) throw ParamError("pearson_col_loss needs at least 2 rows");
  const auto &tv = teacher.data(), &sv = student.data();
  T loss = T(0);
  for (std::size_t c = 0; c < n; ++c) {
    auto pr = detail::pearson(tv.data() + c, sv.data() + c, rows, n);
    if (pr.degenerate && flagged) ++*flagged;
    loss += T(1) - pr.corr;
  }
  auto out = Tensor<T>::scalar(loss / T(n));
  if (auto* tape = detail::tape_for<T>({&student})) {
    out.set_requires_grad(true);
    auto tn = teacher.node(), sn = student.node(), on = out.node();
    tape->record(on, [tn, sn, on, rows, n] {
      T g = on->grad[0] / T(n);
      for (std::size_t c = 0; c < n; ++c) {
        const T* a = tn->value.data() + c;
        const T* b = sn->value.data() + c;
        T ma = T(0), mb = T(0);
        for (std::size_t r = 0; r < rows; ++r) {
          ma += a[r * n];
          mb += b[r * n];
        }
        ma /= T(rows);
        mb /= T(rows);
        T saa = T(0), sbb = T(0), sab = T(0);
        for (std::size_t r = 0; r < rows; ++r) {
          T da = a[r * n] - ma, db = b[r * n] - mb;
          saa += da * da;
          sbb += db * db;
          sab += da * db;
        }
        if (saa <= T(0) || sbb <= T(0)) continue;
        T sa = std::sqrt(saa), sb = std::sqrt(sbb);
        T corr = sab / (sa * sb);
        for (std::size_t r = 0; r < rows; ++r) {
          T da = a[r * n] - ma, db = b[r * n] - mb;
          sn->grad[r * n + c] -= g * (da / (sa * sb) - corr * db / sbb);
        }
      }
    });
  }
  return out;
}

}  // namespace remem
