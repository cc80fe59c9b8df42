#pragma once

#include <cmath>
#include <string>
#include <type_traits>
#include <vector>

#include "remem/rng.hpp"
#include "remem/tensor.hpp"

namespace remem {

struct VitConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 1;
  std::size_t d_embed = 40;
  std::size_t d_mlp = 80;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t n_classes = 8;

  void validate() const {
    if (!image_size || !patch_size || !channels || !d_embed || !d_mlp || !n_heads || !n_layers ||
        !n_classes)
      throw ParamError("vit config fields must be positive");
    if (image_size % patch_size != 0)
      throw ParamError("patch size " + std::to_string(patch_size) + " does not divide image size " +
                       std::to_string(image_size));
    if (d_embed % n_heads != 0)
      throw ParamError("d_embed " + std::to_string(d_embed) + " not divisible by " +
                       std::to_string(n_heads) + " heads");
  }
  std::size_t n_patches() const {
    std::size_t g = image_size / patch_size;
    return g * g;
  }
  std::size_t tokens() const { return n_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
};

// residual reweighting and top-down block pruning knobs; (1, 1, 0, 0) leaves
// the network untouched
struct ReMemConfig {
  double alpha_attn = 1.0;
  double alpha_mlp = 1.0;
  std::size_t prune_attn_top_k = 0;
  std::size_t prune_mlp_top_k = 0;

  void validate(std::size_t n_layers) const {
    if (alpha_attn < 0.0 || alpha_attn > 1.0 || alpha_mlp < 0.0 || alpha_mlp > 1.0)
      throw ParamError("reweighting alpha must lie in [0,1]");
    if (prune_attn_top_k > n_layers || prune_mlp_top_k > n_layers)
      throw ParamError("prune count exceeds layer count " + std::to_string(n_layers));
  }
  bool attn_pruned(std::size_t layer, std::size_t n_layers) const {
    return layer >= n_layers - prune_attn_top_k;
  }
  bool mlp_pruned(std::size_t layer, std::size_t n_layers) const {
    return layer >= n_layers - prune_mlp_top_k;
  }
};

// residual weight a sublayer at depth l (1-based, of l_tot) carries to the
// output under reweighting alpha
inline double effective_weight(double alpha, std::size_t l, std::size_t l_tot) {
  if (alpha < 0.0 || alpha > 1.0) throw ParamError("effective_weight alpha must lie in [0,1]");
  if (l < 1 || l > l_tot)
    throw ParamError("effective_weight layer " + std::to_string(l) + " outside 1.." +
                     std::to_string(l_tot));
  return alpha * std::pow(2.0 - alpha, double(l_tot - l));
}

template <class T>
struct LnParams {
  Tensor<T> g, b;
};

template <class T>
struct VitBlock {
  LnParams<T> ln1;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  LnParams<T> ln2;
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct VitModel {
  VitConfig cfg;
  Tensor<T> patch_w, patch_b;
  Tensor<T> cls, pos;
  std::vector<VitBlock<T>> blocks;
  LnParams<T> ln_f;
  Tensor<T> head_w, head_b;
};

template <class T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  bool decay;  // weight decay applies; biases and layernorm params opt out
};

template <class T>
std::vector<Param<T>> params(VitModel<T>& m) {
  std::vector<Param<T>> out;
  out.push_back({"patch_embed.w", m.patch_w, true});
  out.push_back({"patch_embed.b", m.patch_b, false});
  out.push_back({"cls", m.cls, true});
  out.push_back({"pos", m.pos, true});
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    auto& bl = m.blocks[l];
    std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.g", bl.ln1.g, false});
    out.push_back({p + "ln1.b", bl.ln1.b, false});
    out.push_back({p + "attn.wq", bl.wq, true});
    out.push_back({p + "attn.bq", bl.bq, false});
    out.push_back({p + "attn.wk", bl.wk, true});
    out.push_back({p + "attn.bk", bl.bk, false});
    out.push_back({p + "attn.wv", bl.wv, true});
    out.push_back({p + "attn.bv", bl.bv, false});
    out.push_back({p + "attn.wo", bl.wo, true});
    out.push_back({p + "attn.bo", bl.bo, false});
    out.push_back({p + "ln2.g", bl.ln2.g, false});
    out.push_back({p + "ln2.b", bl.ln2.b, false});
    out.push_back({p + "mlp.w1", bl.w1, true});
    out.push_back({p + "mlp.b1", bl.b1, false});
    out.push_back({p + "mlp.w2", bl.w2, true});
    out.push_back({p + "mlp.b2", bl.b2, false});
  }
  out.push_back({"final_ln.g", m.ln_f.g, false});
  out.push_back({"final_ln.b", m.ln_f.b, false});
  out.push_back({"head.w", m.head_w, true});
  out.push_back({"head.b", m.head_b, false});
  return out;
}

template <class T>
VitModel<T> init_vit(const VitConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto rng = make_rng(derive_seed(seed, "vit_init"));
  auto mat = [&](std::size_t r, std::size_t c) {
    std::vector<T> v(r * c);
    for (auto& x : v) x = T(truncated_normal(rng, 0.02));
    return Tensor<T>::from({r, c}, std::move(v), true);
  };
  auto vec0 = [&](std::size_t n) { return Tensor<T>::zeros({n}, true); };
  auto vec1 = [&](std::size_t n) {
    return Tensor<T>::from({n}, std::vector<T>(n, T(1)), true);
  };
  VitModel<T> m;
  m.cfg = cfg;
  std::size_t d = cfg.d_embed;
  m.patch_w = mat(cfg.patch_dim(), d);
  m.patch_b = vec0(d);
  m.cls = mat(1, d);
  m.pos = mat(cfg.tokens(), d);
  m.blocks.resize(cfg.n_layers);
  for (auto& bl : m.blocks) {
    bl.ln1 = {vec1(d), vec0(d)};
    bl.wq = mat(d, d);
    bl.bq = vec0(d);
    bl.wk = mat(d, d);
    bl.bk = vec0(d);
    bl.wv = mat(d, d);
    bl.bv = vec0(d);
    bl.wo = mat(d, d);
    bl.bo = vec0(d);
    bl.ln2 = {vec1(d), vec0(d)};
    bl.w1 = mat(d, cfg.d_mlp);
    bl.b1 = vec0(cfg.d_mlp);
    bl.w2 = mat(cfg.d_mlp, d);
    bl.b2 = vec0(d);
  }
  m.ln_f = {vec1(d), vec0(d)};
  m.head_w = mat(d, cfg.n_classes);
  m.head_b = vec0(cfg.n_classes);
  return m;
}

struct LoraConfig {
  std::size_t rank = 32;
  double alpha_lora = 32.0;
};

template <class T>
struct LoraPair {
  Tensor<T> b;  // d_in x r, zero at attach time
  Tensor<T> a;  // r x d_out, small Gaussian
};

// adapters on the attention query and value matrices of every layer
template <class T>
struct LoraState {
  LoraConfig cfg;
  std::vector<LoraPair<T>> q, v;
};

template <class T>
LoraState<T> make_lora(const VitModel<T>& m, const LoraConfig& cfg, std::uint64_t seed) {
  std::size_t d = m.cfg.d_embed;
  if (cfg.rank < 1) throw ParamError("lora rank must be at least 1");
  if (cfg.rank > d)
    throw ParamError("lora rank " + std::to_string(cfg.rank) + " exceeds matrix dim " +
                     std::to_string(d));
  auto rng = make_rng(derive_seed(seed, "lora_init"));
  LoraState<T> s;
  s.cfg = cfg;
  std::normal_distribution<double> gauss(0.0, 0.01);
  auto make_pair = [&] {
    LoraPair<T> p;
    p.b = Tensor<T>::zeros({d, cfg.rank}, true);
    std::vector<T> av(cfg.rank * d);
    for (auto& x : av) x = T(gauss(rng));
    p.a = Tensor<T>::from({cfg.rank, d}, std::move(av), true);
    return p;
  };
  for (std::size_t l = 0; l < m.cfg.n_layers; ++l) {
    s.q.push_back(make_pair());
    s.v.push_back(make_pair());
  }
  return s;
}

template <class T>
std::vector<Param<T>> params(LoraState<T>& s) {
  std::vector<Param<T>> out;
  for (std::size_t l = 0; l < s.q.size(); ++l) {
    std::string p = "lora." + std::to_string(l) + ".";
    out.push_back({p + "q.b", s.q[l].b, true});
    out.push_back({p + "q.a", s.q[l].a, true});
    out.push_back({p + "v.b", s.v[l].b, true});
    out.push_back({p + "v.a", s.v[l].a, true});
  }
  return out;
}

// y = x*W + bias + (alpha/r) * (x*B)*A
template <class T>
Tensor<T> lora_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                       const LoraPair<T>& lp, const LoraConfig& cfg) {
  auto base = add_bias(matmul(x, w), bias);
  auto delta = matmul(matmul(x, lp.b), lp.a);
  return add(base, scale(delta, T(cfg.alpha_lora / double(cfg.rank))));
}

// folds every adapter into its base matrix; the adapters are dead afterwards
template <class T>
void lora_merge(VitModel<T>& m, const LoraState<T>& s) {
  std::size_t d = m.cfg.d_embed;
  T sc = T(s.cfg.alpha_lora / double(s.cfg.rank));
  auto fold = [&](Tensor<T>& w, const LoraPair<T>& lp) {
    std::vector<T> delta(d * d, T(0));
    kernels::ref::gemm_nn(d, d, s.cfg.rank, lp.b.data().data(), lp.a.data().data(), delta.data(),
                          false);
    for (std::size_t i = 0; i < d * d; ++i) w.data()[i] += sc * delta[i];
  };
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    fold(m.blocks[l].wq, s.q[l]);
    fold(m.blocks[l].wv, s.v[l]);
  }
}

// [b, c, h, w] image tensor to [b*n_patches x patch_dim] rows; within a patch
// the layout is channel-major, then pixel row, then pixel column
template <class T>
Tensor<T> patchify(const Tensor<T>& images, const VitConfig& cfg) {
  const auto& sh = images.shape();
  if (images.rank() != 4 || sh[1] != cfg.channels || sh[2] != cfg.image_size ||
      sh[3] != cfg.image_size)
    throw ShapeError("patchify: image tensor " + shape_str(sh) + " does not match config");
  std::size_t b = sh[0], c = cfg.channels, hw = cfg.image_size, p = cfg.patch_size;
  std::size_t grid = hw / p, np = grid * grid, pd = cfg.patch_dim();
  auto out = Tensor<T>::zeros({b * np, pd});
  const auto& iv = images.data();
  auto& ov = out.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        std::size_t row = bi * np + gy * grid + gx;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t ry = 0; ry < p; ++ry)
            for (std::size_t rx = 0; rx < p; ++rx)
              ov[row * pd + (ci * p + ry) * p + rx] =
                  iv[((bi * c + ci) * hw + gy * p + ry) * hw + gx * p + rx];
      }
  return out;
}

template <class T>
struct ForwardResult {
  Tensor<T> logits;         // [b x n_classes]
  Tensor<T> cls_embedding;  // [b x d_embed], after the final layernorm
  Tensor<T> tokens_pre_final_ln;
  // post-ReLU MLP intermediates per layer, [b*tokens x d_mlp]; a pruned layer
  // leaves an undefined slot
  std::vector<Tensor<T>> mlp_activations;
};

// forces one neuron's post-ReLU MLP activation to zero during the forward
// pass; targeting a pruned layer has no effect
struct MlpZero {
  std::size_t layer = 0;
  std::size_t neuron = 0;
};

template <class T>
ForwardResult<T> forward(const VitModel<T>& m, const ReMemConfig& remem, const Tensor<T>& images,
                         std::type_identity_t<const LoraState<T>*> lora = nullptr,
                         bool want_activations = false, const MlpZero* zero_neuron = nullptr) {
  const VitConfig& cfg = m.cfg;
  remem.validate(cfg.n_layers);
  std::size_t b = images.shape()[0];
  std::size_t t = cfg.tokens();
  T aa = T(remem.alpha_attn), am = T(remem.alpha_mlp);
  if (zero_neuron && zero_neuron->neuron >= cfg.d_mlp)
    throw ParamError("silenced neuron " + std::to_string(zero_neuron->neuron) +
                     " out of range for d_mlp " + std::to_string(cfg.d_mlp));

  auto x = add_bias(matmul(patchify(images, cfg), m.patch_w), m.patch_b);
  x = prepend_cls(x, m.cls, b);
  x = add_token_pos(x, m.pos, b);

  ForwardResult<T> res;
  if (want_activations) res.mlp_activations.resize(cfg.n_layers);

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& bl = m.blocks[l];
    if (!remem.attn_pruned(l, cfg.n_layers)) {
      auto h = layernorm(x, bl.ln1.g, bl.ln1.b);
      Tensor<T> q, v;
      if (lora) {
        q = lora_forward(h, bl.wq, bl.bq, lora->q[l], lora->cfg);
        v = lora_forward(h, bl.wv, bl.bv, lora->v[l], lora->cfg);
      } else {
        q = add_bias(matmul(h, bl.wq), bl.bq);
        v = add_bias(matmul(h, bl.wv), bl.bv);
      }
      auto k = add_bias(matmul(h, bl.wk), bl.bk);
      auto probs = softmax(attn_scores(q, k, b, t, cfg.n_heads), T(1));
      auto attn_out = add_bias(matmul(attn_context(probs, v, b, t, cfg.n_heads), bl.wo), bl.bo);
      x = add(scale(x, T(2) - aa), scale(attn_out, aa));
    }
    if (!remem.mlp_pruned(l, cfg.n_layers)) {
      auto h = layernorm(x, bl.ln2.g, bl.ln2.b);
      auto act = relu(add_bias(matmul(h, bl.w1), bl.b1));
      if (zero_neuron && zero_neuron->layer == l) {
        std::vector<T> mv(act.data().size(), T(1));
        for (std::size_t r = 0; r < b * t; ++r) mv[r * cfg.d_mlp + zero_neuron->neuron] = T(0);
        act = mul(act, Tensor<T>::from(act.shape(), std::move(mv)));
      }
      if (want_activations) res.mlp_activations[l] = act;
      auto mlp_out = add_bias(matmul(act, bl.w2), bl.b2);
      x = add(scale(x, T(2) - am), scale(mlp_out, am));
    }
  }

  res.tokens_pre_final_ln = x;
  auto y = layernorm(x, m.ln_f.g, m.ln_f.b);
  res.cls_embedding = take_rows_strided(y, 0, t);
  res.logits = add_bias(matmul(res.cls_embedding, m.head_w), m.head_b);
  return res;
}

}  // namespace remem
