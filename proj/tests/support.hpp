#pragma once

#include <cstring>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "remem/gradcheck.hpp"
#include "remem/rng.hpp"
#include "remem/tensor.hpp"

namespace testsupport {

inline std::vector<double> rand_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// values with |x| >= margin, for ops with a kink at zero
inline std::vector<double> rand_vec_off_kink(std::mt19937_64& rng, std::size_t n,
                                             double margin = 0.05) {
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return v;
}

inline std::vector<double> rand_prob_rows(std::mt19937_64& rng, std::size_t rows, std::size_t n) {
  std::uniform_real_distribution<double> dist(0.05, 1.0);
  std::vector<double> v(rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      v[r * n + j] = dist(rng);
      s += v[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) v[r * n + j] /= s;
  }
  return v;
}

template <class T>
bool bits_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

// finite-difference error for every differentiable tensor op, each wrapped
// into a scalar loss; shared by the unit tests and the acceptance gate
inline std::vector<std::pair<std::string, double>> op_gradcheck_battery(std::uint64_t seed) {
  using remem::Tensor;
  namespace rm = remem;
  auto rng = rm::make_rng(seed);
  std::vector<std::pair<std::string, double>> out;

  auto weighted_sum = [](Tensor<double> t, const Tensor<double>& w) {
    return rm::sum(rm::mul(t, w));
  };

  {
    auto a = Tensor<double>::from({3, 4}, rand_vec(rng, 12), true);
    auto b = Tensor<double>::from({4, 2}, rand_vec(rng, 8), true);
    auto w = Tensor<double>::from({3, 2}, rand_vec(rng, 6));
    out.emplace_back("matmul", rm::grad_check([=] { return weighted_sum(rm::matmul(a, b), w); },
                                              {a, b}));
  }
  {
    auto a = Tensor<double>::from({2, 5}, rand_vec(rng, 10), true);
    auto b = Tensor<double>::from({2, 5}, rand_vec(rng, 10), true);
    auto w = Tensor<double>::from({2, 5}, rand_vec(rng, 10));
    out.emplace_back("add", rm::grad_check([=] { return weighted_sum(rm::add(a, b), w); }, {a, b}));
    out.emplace_back("sub", rm::grad_check([=] { return weighted_sum(rm::sub(a, b), w); }, {a, b}));
    out.emplace_back("mul", rm::grad_check([=] { return weighted_sum(rm::mul(a, b), w); }, {a, b}));
    out.emplace_back("scale",
                     rm::grad_check([=] { return weighted_sum(rm::scale(a, -1.7), w); }, {a}));
  }
  {
    auto a = Tensor<double>::from({3, 4}, rand_vec_off_kink(rng, 12), true);
    auto w = Tensor<double>::from({3, 4}, rand_vec(rng, 12));
    out.emplace_back("relu", rm::grad_check([=] { return weighted_sum(rm::relu(a), w); }, {a}));
    out.emplace_back("sigmoid",
                     rm::grad_check([=] { return weighted_sum(rm::sigmoid(a), w); }, {a}));
  }
  {
    auto x = Tensor<double>::from({3, 4}, rand_vec(rng, 12), true);
    auto b = Tensor<double>::from({4}, rand_vec(rng, 4), true);
    auto w = Tensor<double>::from({3, 4}, rand_vec(rng, 12));
    out.emplace_back("add_bias",
                     rm::grad_check([=] { return weighted_sum(rm::add_bias(x, b), w); }, {x, b}));
  }
  {
    auto x = Tensor<double>::from({3, 5}, rand_vec(rng, 15), true);
    auto w = Tensor<double>::from({3, 5}, rand_vec(rng, 15));
    out.emplace_back("softmax",
                     rm::grad_check([=] { return weighted_sum(rm::softmax(x, 2.0), w); }, {x}));
  }
  {
    auto x = Tensor<double>::from({4, 6}, rand_vec(rng, 24), true);
    auto g = Tensor<double>::from({6}, rand_vec(rng, 6, 0.5, 1.5), true);
    auto b = Tensor<double>::from({6}, rand_vec(rng, 6), true);
    auto w = Tensor<double>::from({4, 6}, rand_vec(rng, 24));
    out.emplace_back("layernorm", rm::grad_check(
                                      [=] { return weighted_sum(rm::layernorm(x, g, b), w); },
                                      {x, g, b}));
  }
  {
    auto a = Tensor<double>::from({2, 3}, rand_vec(rng, 6), true);
    out.emplace_back("sum", rm::grad_check([=] { return rm::sum(a); }, {a}));
    out.emplace_back("mean", rm::grad_check([=] { return rm::mean(a); }, {a}));
  }
  {
    auto logits = Tensor<double>::from({4, 5}, rand_vec(rng, 20), true);
    std::vector<int> labels{0, 2, 4, 1};
    out.emplace_back("cross_entropy",
                     rm::grad_check([=] { return rm::cross_entropy(logits, labels); }, {logits}));
    auto targets = Tensor<double>::from({4, 5}, rand_prob_rows(rng, 4, 5));
    out.emplace_back("cross_entropy_soft", rm::grad_check(
                                               [=] { return rm::cross_entropy_soft(logits, targets); },
                                               {logits}));
  }
  {
    auto p = Tensor<double>::from({3, 4}, rand_vec(rng, 12, 0.2, 1.0), true);
    auto q = Tensor<double>::from({3, 4}, rand_vec(rng, 12, 0.2, 1.0), true);
    out.emplace_back("kl_div", rm::grad_check([=] { return rm::kl_div(p, q); }, {p, q}));
    auto pl = Tensor<double>::from({3, 4}, rand_vec(rng, 12), true);
    auto ql = Tensor<double>::from({3, 4}, rand_vec(rng, 12), true);
    out.emplace_back("kl_div_softmax",
                     rm::grad_check(
                         [=] { return rm::kl_div(rm::softmax(pl, 1.0), rm::softmax(ql, 1.0)); },
                         {pl, ql}));
  }
  {
    auto pred = Tensor<double>::from({3, 4}, rand_vec(rng, 12, 0.1, 0.9), true);
    auto tgt = Tensor<double>::from({3, 4}, rand_vec(rng, 12, 0.0, 1.0));
    out.emplace_back("bce", rm::grad_check([=] { return rm::bce(pred, tgt); }, {pred}));
    auto z = Tensor<double>::from({3, 4}, rand_vec(rng, 12, -3.0, 3.0), true);
    out.emplace_back("bce_logits",
                     rm::grad_check([=] { return rm::bce_logits(z, tgt); }, {z}));
  }
  {
    auto x = Tensor<double>::from({6, 4}, rand_vec(rng, 24), true);
    auto pos = Tensor<double>::from({3, 4}, rand_vec(rng, 12), true);
    auto w = Tensor<double>::from({6, 4}, rand_vec(rng, 24));
    out.emplace_back("add_token_pos",
                     rm::grad_check(
                         [=] { return weighted_sum(rm::add_token_pos(x, pos, 2), w); }, {x, pos}));
  }
  {
    auto x = Tensor<double>::from({6, 4}, rand_vec(rng, 24), true);
    auto cls = Tensor<double>::from({1, 4}, rand_vec(rng, 4), true);
    auto w = Tensor<double>::from({8, 4}, rand_vec(rng, 32));
    out.emplace_back("prepend_cls",
                     rm::grad_check(
                         [=] { return weighted_sum(rm::prepend_cls(x, cls, 2), w); }, {x, cls}));
  }
  {
    auto x = Tensor<double>::from({6, 4}, rand_vec(rng, 24), true);
    auto w = Tensor<double>::from({2, 4}, rand_vec(rng, 8));
    out.emplace_back("take_rows_strided",
                     rm::grad_check(
                         [=] { return weighted_sum(rm::take_rows_strided(x, 0, 3), w); }, {x}));
  }
  {
    std::size_t b = 2, t = 3, heads = 2, d = 4;
    auto q = Tensor<double>::from({b * t, d}, rand_vec(rng, b * t * d), true);
    auto k = Tensor<double>::from({b * t, d}, rand_vec(rng, b * t * d), true);
    auto w = Tensor<double>::from({b * heads * t, t}, rand_vec(rng, b * heads * t * t));
    out.emplace_back("attn_scores",
                     rm::grad_check(
                         [=] { return weighted_sum(rm::attn_scores(q, k, b, t, heads), w); },
                         {q, k}));
    auto p = Tensor<double>::from({b * heads * t, t}, rand_vec(rng, b * heads * t * t), true);
    auto v = Tensor<double>::from({b * t, d}, rand_vec(rng, b * t * d), true);
    auto w2 = Tensor<double>::from({b * t, d}, rand_vec(rng, b * t * d));
    out.emplace_back("attn_context",
                     rm::grad_check(
                         [=] { return weighted_sum(rm::attn_context(p, v, b, t, heads), w2); },
                         {p, v}));
  }
  {
    auto teacher = Tensor<double>::from({3, 5}, rand_vec(rng, 15));
    auto student = Tensor<double>::from({3, 5}, rand_vec(rng, 15), true);
    out.emplace_back("pearson_row_loss",
                     rm::grad_check([=] { return rm::pearson_row_loss(teacher, student); },
                                    {student}));
    auto teacher_c = Tensor<double>::from({5, 3}, rand_vec(rng, 15));
    auto student_c = Tensor<double>::from({5, 3}, rand_vec(rng, 15), true);
    out.emplace_back("pearson_col_loss",
                     rm::grad_check([=] { return rm::pearson_col_loss(teacher_c, student_c); },
                                    {student_c}));
  }
  return out;
}

}  // namespace testsupport
