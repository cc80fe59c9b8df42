#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "remem/csv.hpp"
#include "remem/data.hpp"
#include "remem/errors.hpp"
#include "remem/rng.hpp"
#include "remem/tensor.hpp"
#include "remem/vit.hpp"

namespace remem {

// bipartite activation graph: rows are neurons, columns are inputs, entries
// are non-negative activation magnitudes
struct ActivationGraph {
  std::size_t n_neurons = 0;
  std::size_t n_inputs = 0;
  std::vector<double> w;  // row-major n_neurons x n_inputs

  double at(std::size_t i, std::size_t j) const { return w[i * n_inputs + j]; }
  double& at(std::size_t i, std::size_t j) { return w[i * n_inputs + j]; }
  void validate() const;
};

struct Bipartition {
  std::size_t k = 1;
  std::vector<std::size_t> neuron_labels;
  std::vector<std::size_t> input_labels;
};

struct ExpertnessResult {
  double e = 0.0;
  Bipartition parts;
};

// sum of squared entries over the given row and column index sets; the full
// sets give the squared Frobenius norm
double cut(const ActivationGraph& g, const std::vector<std::size_t>& rows,
           const std::vector<std::size_t>& cols);

// fraction of the total squared edge mass kept inside same-labeled clusters
double partition_score(const ActivationGraph& g, const Bipartition& p);

// exact maximum over all assignments that use every cluster index at least
// once; guarded by k^(|U|+|X|) <= 1e7
ExpertnessResult expertness_bruteforce(const ActivationGraph& g, std::size_t k);

// squared-edge co-clustering: normalized matrix SVD, ceil(log2 k) singular
// vector pairs after the first, scaled stacked embeddings, seeded k-means
ExpertnessResult expertness_spectral(const ActivationGraph& g, std::size_t k, std::uint64_t seed);

// sparse expert MLP with a shared weight pair, per-expert neuron subsets, and
// uniform activation quantization; bits == 0 disables quantization
struct MoeMlp {
  std::size_t n_experts = 1;
  std::vector<std::vector<std::size_t>> expert_neurons;
  std::function<std::size_t(const std::vector<double>&)> router;
  Tensor<double> w1;  // [d_in x d_mlp]
  Tensor<double> w2;  // [d_mlp x d_out]
  unsigned bits = 0;

  void validate() const;
};

Tensor<double> moe_forward(const MoeMlp& moe, const Tensor<double>& x);

// log2(M) + sum_z |S_z| * b, in bits
double moe_mi_bound(std::size_t n_experts, const std::vector<std::size_t>& expert_sizes,
                    unsigned bits);

// exact output entropy in bits over an equiprobable finite input support
// (rows may repeat to weight inputs); deterministic channel, so this equals
// the mutual information between input and output
double moe_mi_empirical(const MoeMlp& moe, const Tensor<double>& support);

struct NeuronSigma {
  std::size_t neuron = 0;
  double sigma = 0.0;
};

// relative CLS-embedding change when one neuron's activation is forced to
// zero; embed(nullopt) returns the unmodified embeddings, embed(h) the
// embeddings with neuron h silenced. Rows with near-zero base norm are
// skipped; result is sorted by sigma descending, index ascending on ties.
std::vector<NeuronSigma> criticality_core(
    const std::function<std::vector<std::vector<double>>(std::optional<std::size_t>)>& embed,
    std::size_t n_neurons);

struct LayerExpertness {
  std::size_t layer = 0;
  double e = 0.0;
  std::size_t n_neurons = 0;
  std::size_t n_inputs = 0;
};

void write_expertness_csv(const std::string& path, const std::vector<LayerExpertness>& rows,
                          std::size_t k, std::uint64_t seed);
void write_criticality_csv(const std::string& path, std::size_t layer,
                           const std::vector<NeuronSigma>& sigmas);

// per-input activation magnitudes of one MLP layer; by default each neuron's
// activation is reduced over tokens by L2 norm (preserving squared-edge
// totals), with concat_tokens each (neuron, token) pair becomes its own row
template <class T>
ActivationGraph extract_graph(const VitModel<T>& m, const ReMemConfig& remem, std::size_t layer,
                              const Dataset& ds, bool concat_tokens = false) {
  const VitConfig& cfg = m.cfg;
  if (layer >= cfg.n_layers)
    throw ParamError("layer " + std::to_string(layer) + " out of range for " +
                     std::to_string(cfg.n_layers) + " layers");
  if (remem.mlp_pruned(layer, cfg.n_layers))
    throw UsageError("layer " + std::to_string(layer) + " is pruned and has no activations");
  ds.validate();

  auto res = forward(m, remem, images_of<T>(ds, all_indices(ds)), nullptr, true);
  const auto& act = res.mlp_activations[layer];  // [n*tokens x d_mlp]
  std::size_t t = cfg.tokens(), d = cfg.d_mlp, n = ds.n;
  const auto& av = act.data();

  ActivationGraph g;
  g.n_neurons = concat_tokens ? d * t : d;
  g.n_inputs = n;
  g.w.assign(g.n_neurons * n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < d; ++i) {
      if (concat_tokens) {
        for (std::size_t ti = 0; ti < t; ++ti)
          g.at(i * t + ti, j) = double(av[(j * t + ti) * d + i]);
      } else {
        double s = 0.0;
        for (std::size_t ti = 0; ti < t; ++ti) {
          double a = double(av[(j * t + ti) * d + i]);
          s += a * a;
        }
        g.at(i, j) = std::sqrt(s);
      }
    }
  return g;
}

// spectral expertness of every non-pruned MLP layer; pruned layers have no
// activation graph and are skipped
template <class T>
std::vector<LayerExpertness> expertness_profile(const VitModel<T>& m, const ReMemConfig& remem,
                                                const Dataset& ds, std::size_t k,
                                                std::uint64_t seed, bool concat_tokens = false) {
  std::vector<LayerExpertness> rows;
  for (std::size_t l = 0; l < m.cfg.n_layers; ++l) {
    if (remem.mlp_pruned(l, m.cfg.n_layers)) continue;
    auto g = extract_graph(m, remem, l, ds, concat_tokens);
    auto r = expertness_spectral(g, k, derive_seed(seed, "expertness", l));
    rows.push_back({l, r.e, g.n_neurons, g.n_inputs});
  }
  return rows;
}

// max over inputs of the relative CLS-embedding change from silencing each
// neuron of one MLP layer; a pruned layer contributes nothing downstream, so
// every sigma is exactly zero
template <class T>
std::vector<NeuronSigma> criticality(const VitModel<T>& m, const ReMemConfig& remem,
                                     const Dataset& ds, std::size_t layer) {
  const VitConfig& cfg = m.cfg;
  if (layer >= cfg.n_layers)
    throw ParamError("layer " + std::to_string(layer) + " out of range for " +
                     std::to_string(cfg.n_layers) + " layers");
  ds.validate();
  if (remem.mlp_pruned(layer, cfg.n_layers)) {
    std::vector<NeuronSigma> out(cfg.d_mlp);
    for (std::size_t h = 0; h < cfg.d_mlp; ++h) out[h] = {h, 0.0};
    return out;
  }

  auto images = images_of<T>(ds, all_indices(ds));
  auto embed = [&](std::optional<std::size_t> h) {
    MlpZero zero;
    const MlpZero* zp = nullptr;
    if (h) {
      zero = {layer, *h};
      zp = &zero;
    }
    auto cls = forward(m, remem, images, nullptr, false, zp).cls_embedding;
    std::size_t n = cls.shape()[0], d = cls.shape()[1];
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) rows[i][c] = double(cls.data()[i * d + c]);
    return rows;
  };
  return criticality_core(embed, cfg.d_mlp);
}

}  // namespace remem
