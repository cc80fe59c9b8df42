#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "remem/csv.hpp"
#include "remem/data.hpp"
#include "remem/distill.hpp"
#include "remem/optim.hpp"
#include "remem/tensor.hpp"
#include "remem/vit.hpp"

namespace remem {

constexpr std::size_t kDecoderHidden = 256;
constexpr std::size_t kDecoderBatch = 64;
constexpr std::size_t kDecoderUpdates = 2000;

// feature -> pixel reconstruction head; sigmoid keeps outputs inside (0,1)
template <class T>
struct DecoderModel {
  std::size_t d_embed = 0, pixels = 0;
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
DecoderModel<T> make_decoder(std::size_t d_embed, std::size_t pixels, std::uint64_t seed) {
  if (!d_embed || !pixels) throw ParamError("decoder dims must be positive");
  auto rng = make_rng(derive_seed(seed, "decoder_init"));
  auto mat = [&](std::size_t r, std::size_t c) {
    std::vector<T> v(r * c);
    for (auto& x : v) x = T(truncated_normal(rng, 0.01));
    return Tensor<T>::from({r, c}, std::move(v), true);
  };
  DecoderModel<T> m;
  m.d_embed = d_embed;
  m.pixels = pixels;
  m.w1 = mat(d_embed, kDecoderHidden);
  m.b1 = Tensor<T>::zeros({kDecoderHidden}, true);
  m.w2 = mat(kDecoderHidden, pixels);
  m.b2 = Tensor<T>::zeros({pixels}, true);
  return m;
}

template <class T>
std::vector<Param<T>> params(DecoderModel<T>& m) {
  return {{"decoder.w1", m.w1, true},
          {"decoder.b1", m.b1, false},
          {"decoder.w2", m.w2, true},
          {"decoder.b2", m.b2, false}};
}

template <class T>
Tensor<T> decoder_logits(const DecoderModel<T>& m, const Tensor<T>& features) {
  if (features.rank() != 2 || features.shape()[1] != m.d_embed)
    throw ShapeError("decoder expects [n," + std::to_string(m.d_embed) + "] features, got " +
                     shape_str(features.shape()));
  auto h = relu(add_bias(matmul(features, m.w1), m.b1));
  return add_bias(matmul(h, m.w2), m.b2);
}

template <class T>
Tensor<T> decoder_forward(const DecoderModel<T>& m, const Tensor<T>& features) {
  return sigmoid(decoder_logits(m, features));
}

// mean BCE of the decoder's reconstructions, value only; computed on logits so
// a confidently wrong pixel costs a large finite amount instead of overflowing
template <class T>
double decoder_bce(const DecoderModel<T>& m, const Tensor<T>& features, const Tensor<T>& targets) {
  return double(bce_logits(decoder_logits(m, features), targets).item());
}

// AdamW on mean pixel BCE; datasets smaller than the batch size train
// full-batch in natural order, larger ones cycle reshuffled slices from the
// "order" stream
template <class T>
DecoderModel<T> train_decoder(const Tensor<T>& features, const Tensor<T>& images,
                              std::size_t updates, std::uint64_t seed,
                              std::size_t batch = kDecoderBatch) {
  if (features.rank() != 2 || images.rank() != 2) throw ShapeError("train_decoder needs rank 2");
  if (features.shape()[0] != images.shape()[0])
    throw ShapeError("train_decoder feature and image counts differ");
  if (features.requires_grad()) throw UsageError("train_decoder features must be detached");
  if (batch == 0) throw ParamError("decoder batch must be positive");
  for (T v : images.data())
    if (v < T(0) || v > T(1)) throw DomainError("decoder targets must lie in [0,1]");

  std::size_t n = features.shape()[0];
  std::size_t d = features.shape()[1], px = images.shape()[1];
  auto model = make_decoder<T>(d, px, seed);
  auto ps = params(model);
  auto opt = make_adamw(ps, T(1e-3), T(1e-4));

  bool full_batch = n < batch;
  auto order_rng = make_rng(derive_seed(seed, "order"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::size_t cursor = n;

  for (std::size_t step = 1; step <= updates; ++step) {
    Tensor<T> fb, ib;
    if (full_batch) {
      fb = features;
      ib = images;
    } else {
      if (cursor >= n) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      std::size_t b = std::min(batch, n - cursor);
      std::vector<T> fv(b * d), iv(b * px);
      for (std::size_t i = 0; i < b; ++i) {
        std::size_t src = order[cursor + i];
        std::copy_n(features.data().data() + src * d, d, fv.data() + i * d);
        std::copy_n(images.data().data() + src * px, px, iv.data() + i * px);
      }
      cursor += b;
      fb = Tensor<T>::from({b, d}, std::move(fv));
      ib = Tensor<T>::from({b, px}, std::move(iv));
    }
    zero_grads(ps);
    {
      Tape<T> tape;
      typename Tape<T>::Scope scope(tape);
      auto loss = bce_logits(decoder_logits(model, fb), ib);
      if (!std::isfinite(double(loss.item())))
        throw NumericError("non-finite decoder loss at update " + std::to_string(step));
      tape.backward(loss);
    }
    adamw_step(opt, ps);
  }
  return model;
}

// BCE on held-out targets of the constant per-pixel predictor fitted to the
// training targets; the analytic optimum of any constant decoder
template <class T>
double mean_image_bce(const Tensor<T>& train_targets, const Tensor<T>& heldout_targets) {
  if (train_targets.rank() != 2 || heldout_targets.rank() != 2 ||
      train_targets.shape()[1] != heldout_targets.shape()[1])
    throw ShapeError("mean_image_bce needs matching [n,pixels] tensors");
  std::size_t n1 = train_targets.shape()[0], px = train_targets.shape()[1];
  std::size_t n2 = heldout_targets.shape()[0];
  const auto &tv = train_targets.data(), &hv = heldout_targets.data();
  std::vector<double> mu(px, 0.0);
  for (std::size_t i = 0; i < n1; ++i)
    for (std::size_t j = 0; j < px; ++j) mu[j] += double(tv[i * px + j]);
  for (auto& m : mu) m = std::clamp(m / double(n1), 1e-7, 1.0 - 1e-7);
  double loss = 0.0;
  for (std::size_t i = 0; i < n2; ++i)
    for (std::size_t j = 0; j < px; ++j) {
      double t = double(hv[i * px + j]);
      loss -= t * std::log(mu[j]) + (1.0 - t) * std::log(1.0 - mu[j]);
    }
  return loss / double(n2 * px);
}

struct MiEstimate {
  double recon_loss = 0.0;
  double mi_proxy = 0.0;  // -recon_loss, so larger means more recoverable input
  double baseline_loss = 0.0;
  std::size_t n_train_updates = 0;
  std::size_t d_embed = 0;
  std::uint64_t seed = 0;
};

// difference a-b in proxy units; refuses estimates whose feature widths differ
inline double mi_delta(const MiEstimate& a, const MiEstimate& b) {
  if (a.d_embed != b.d_embed)
    throw UsageError("mutual-information estimates with feature widths " +
                     std::to_string(a.d_embed) + " and " + std::to_string(b.d_embed) +
                     " are not comparable");
  return a.mi_proxy - b.mi_proxy;
}

// split rows 80/20 with the "mi_split" stream, fit the decoder on the large
// part, and score reconstruction on the held-out part
template <class T>
MiEstimate mi_from_features(const Tensor<T>& features, const Dataset& ds, std::size_t updates,
                            std::uint64_t seed) {
  ds.validate();
  if (ds.n < 2) throw ParamError("mutual-information probe needs at least 2 examples");
  if (features.rank() != 2 || features.shape()[0] != ds.n)
    throw ShapeError("features must be [n,d] matching the dataset");
  auto pixels = flatten_images(images_of<T>(ds, all_indices(ds)));
  std::size_t d = features.shape()[1], px = pixels.shape()[1];

  auto rng = make_rng(derive_seed(seed, "mi_split"));
  std::vector<std::size_t> order(ds.n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_tr = std::size_t(std::lround(0.8 * double(ds.n)));
  n_tr = std::clamp<std::size_t>(n_tr, 1, ds.n - 1);

  auto gather = [&](const Tensor<T>& src, std::size_t w, std::size_t lo, std::size_t hi) {
    std::vector<T> v((hi - lo) * w);
    for (std::size_t i = lo; i < hi; ++i)
      std::copy_n(src.data().data() + order[i] * w, w, v.data() + (i - lo) * w);
    return Tensor<T>::from({hi - lo, w}, std::move(v));
  };
  auto f_tr = gather(features, d, 0, n_tr);
  auto p_tr = gather(pixels, px, 0, n_tr);
  auto f_ho = gather(features, d, n_tr, ds.n);
  auto p_ho = gather(pixels, px, n_tr, ds.n);

  auto decoder = train_decoder(f_tr, p_tr, updates, derive_seed(seed, "decoder"));
  MiEstimate e;
  e.recon_loss = decoder_bce(decoder, f_ho, p_ho);
  e.mi_proxy = -e.recon_loss;
  e.baseline_loss = mean_image_bce(p_tr, p_ho);
  e.n_train_updates = updates;
  e.d_embed = d;
  e.seed = seed;
  return e;
}

template <class T>
MiEstimate mi_proxy(const VitModel<T>& m, const ReMemConfig& remem, const Dataset& ds,
                    std::size_t updates, std::uint64_t seed) {
  remem.validate(m.cfg.n_layers);
  auto features = forward(m, remem, images_of<T>(ds, all_indices(ds))).cls_embedding;
  return mi_from_features(features, ds, updates, seed);
}

struct InfoPlanePoint {
  std::string tag;
  double teacher_err = 0.0;  // 1 - test accuracy
  MiEstimate mi;
};

template <class T>
InfoPlanePoint info_plane_point(const VitModel<T>& m, const ReMemConfig& remem, const Dataset& ds,
                                std::size_t updates, std::uint64_t seed, std::string tag) {
  InfoPlanePoint p;
  p.tag = std::move(tag);
  p.teacher_err = 1.0 - eval_accuracy(m, remem, ds);
  p.mi = mi_proxy(m, remem, ds, updates, seed);
  return p;
}

inline void write_info_plane_csv(const std::string& path,
                                 const std::vector<InfoPlanePoint>& points) {
  csv::Writer w(path, "tag,teacher_err,mi_proxy,baseline_loss,d_embed,seed");
  for (const auto& p : points)
    w.row({p.tag, csv::num(p.teacher_err), csv::num(p.mi.mi_proxy), csv::num(p.mi.baseline_loss),
           std::to_string(p.mi.d_embed), std::to_string(p.mi.seed)});
}

}  // namespace remem
