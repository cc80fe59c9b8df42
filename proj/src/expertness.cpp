#include "remem/expertness.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cstring>
#include <limits>
#include <map>

namespace remem {

void ActivationGraph::validate() const {
  if (n_neurons == 0 || n_inputs == 0 || w.size() != n_neurons * n_inputs)
    throw ShapeError("activation graph of " + std::to_string(n_neurons) + "x" +
                     std::to_string(n_inputs) + " does not match " + std::to_string(w.size()) +
                     " entries");
  for (double v : w)
    if (!std::isfinite(v) || v < 0.0)
      throw DomainError("activation graph entries must be finite and non-negative");
}

double cut(const ActivationGraph& g, const std::vector<std::size_t>& rows,
           const std::vector<std::size_t>& cols) {
  for (std::size_t i : rows)
    if (i >= g.n_neurons) throw ParamError("cut row index " + std::to_string(i) + " out of range");
  for (std::size_t j : cols)
    if (j >= g.n_inputs) throw ParamError("cut col index " + std::to_string(j) + " out of range");
  double s = 0.0;
  for (std::size_t i : rows)
    for (std::size_t j : cols) s += g.at(i, j) * g.at(i, j);
  return s;
}

static double total_mass(const ActivationGraph& g) {
  double s = 0.0;
  for (double v : g.w) s += v * v;
  return s;
}

double partition_score(const ActivationGraph& g, const Bipartition& p) {
  if (p.neuron_labels.size() != g.n_neurons || p.input_labels.size() != g.n_inputs)
    throw ShapeError("bipartition labels do not match the graph");
  for (std::size_t l : p.neuron_labels)
    if (l >= p.k) throw ParamError("neuron label " + std::to_string(l) + " outside k clusters");
  for (std::size_t l : p.input_labels)
    if (l >= p.k) throw ParamError("input label " + std::to_string(l) + " outside k clusters");
  double within = 0.0, total = 0.0;
  for (std::size_t i = 0; i < g.n_neurons; ++i)
    for (std::size_t j = 0; j < g.n_inputs; ++j) {
      double e2 = g.at(i, j) * g.at(i, j);
      total += e2;
      if (p.neuron_labels[i] == p.input_labels[j]) within += e2;
    }
  return total == 0.0 ? 0.0 : within / total;
}

ExpertnessResult expertness_bruteforce(const ActivationGraph& g, std::size_t k) {
  g.validate();
  if (k < 1) throw ParamError("cluster count must be at least 1");
  std::size_t nodes = g.n_neurons + g.n_inputs;
  if (k > nodes)
    throw ParamError("cannot fill " + std::to_string(k) + " clusters with " +
                     std::to_string(nodes) + " vertices");
  double combos = std::pow(double(k), double(nodes));
  if (combos > 1e7)
    throw SizeError("brute force over " + std::to_string(combos) +
                    " assignments exceeds the 1e7 guard");

  ExpertnessResult best;
  best.parts.k = k;
  best.parts.neuron_labels.assign(g.n_neurons, 0);
  best.parts.input_labels.assign(g.n_inputs, 0);
  double total = total_mass(g);
  if (total == 0.0) {
    for (std::size_t i = 0; i < g.n_neurons && i < k; ++i) best.parts.neuron_labels[i] = i % k;
    for (std::size_t j = 0; j < g.n_inputs; ++j)
      best.parts.input_labels[j] = (g.n_neurons + j) % k;
    return best;  // all-zero graph scores 0 by convention
  }

  std::vector<std::size_t> labels(nodes, 0);
  std::vector<std::size_t> used(k);
  double best_within = -1.0;
  while (true) {
    std::fill(used.begin(), used.end(), std::size_t(0));
    for (std::size_t l : labels) ++used[l];
    bool all_used = std::all_of(used.begin(), used.end(), [](std::size_t c) { return c > 0; });
    if (all_used) {
      double within = 0.0;
      for (std::size_t i = 0; i < g.n_neurons; ++i)
        for (std::size_t j = 0; j < g.n_inputs; ++j)
          if (labels[i] == labels[g.n_neurons + j]) within += g.at(i, j) * g.at(i, j);
      if (within > best_within) {
        best_within = within;
        std::copy_n(labels.begin(), g.n_neurons, best.parts.neuron_labels.begin());
        std::copy_n(labels.begin() + g.n_neurons, g.n_inputs, best.parts.input_labels.begin());
      }
    }
    std::size_t pos = 0;
    while (pos < nodes && ++labels[pos] == k) {
      labels[pos] = 0;
      ++pos;
    }
    if (pos == nodes) break;
  }
  best.e = best_within / total;
  return best;
}

namespace {

double canon(std::mt19937_64& rng) { return double(rng() >> 11) * 0x1.0p-53; }

std::vector<std::size_t> kmeans_once(const Eigen::MatrixXd& pts, std::size_t k,
                                     std::mt19937_64& rng, double& obj_out) {
  std::size_t n = std::size_t(pts.rows());
  Eigen::MatrixXd centers(k, pts.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());

  std::size_t first = std::min(n - 1, std::size_t(canon(rng) * double(n)));
  centers.row(0) = pts.row(Eigen::Index(first));
  for (std::size_t c = 1; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (pts.row(Eigen::Index(i)) - centers.row(Eigen::Index(c - 1)))
                                  .squaredNorm());
    double sum = 0.0;
    for (double v : d2) sum += v;
    std::size_t pick = 0;
    if (sum > 0.0) {
      double r = canon(rng) * sum, acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(n - 1, std::size_t(canon(rng) * double(n)));
    }
    centers.row(Eigen::Index(c)) = pts.row(Eigen::Index(pick));
  }

  std::vector<std::size_t> labels(n, 0);
  std::vector<std::size_t> counts(k, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double d = (pts.row(Eigen::Index(i)) - centers.row(Eigen::Index(c))).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (labels[i] != best) changed = true;
      labels[i] = best;
    }
    std::fill(counts.begin(), counts.end(), std::size_t(0));
    for (std::size_t l : labels) ++counts[l];
    // revive empty clusters with the farthest point of a non-singleton cluster
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = n;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[labels[i]] < 2) continue;
        double d =
            (pts.row(Eigen::Index(i)) - centers.row(Eigen::Index(labels[i]))).squaredNorm();
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      if (far == n) continue;  // nothing movable
      --counts[labels[far]];
      labels[far] = c;
      ++counts[c];
      changed = true;
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(pts.cols());
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == c) mean += pts.row(Eigen::Index(i));
      centers.row(Eigen::Index(c)) = mean / double(counts[c]);
    }
    if (!changed) break;
  }

  obj_out = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    obj_out +=
        (pts.row(Eigen::Index(i)) - centers.row(Eigen::Index(labels[i]))).squaredNorm();
  return labels;
}

std::vector<std::size_t> kmeans(const Eigen::MatrixXd& pts, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> best;
  double best_obj = std::numeric_limits<double>::infinity();
  for (std::uint64_t restart = 0; restart < 5; ++restart) {
    auto rng = make_rng(derive_seed(seed, "kmeans", restart));
    double obj = 0.0;
    auto labels = kmeans_once(pts, k, rng, obj);
    if (obj < best_obj) {
      best_obj = obj;
      best = std::move(labels);
    }
  }
  return best;
}

}  // namespace

ExpertnessResult expertness_spectral(const ActivationGraph& g, std::size_t k,
                                     std::uint64_t seed) {
  g.validate();
  if (k < 2) throw ParamError("spectral expertness needs k >= 2");
  if (k > std::min(g.n_neurons, g.n_inputs))
    throw ParamError("k " + std::to_string(k) + " exceeds min(neurons, inputs) " +
                     std::to_string(std::min(g.n_neurons, g.n_inputs)));
  if (total_mass(g) == 0.0) throw DegenerateError("expertness of an all-zero activation graph");

  Eigen::Index nu = Eigen::Index(g.n_neurons), nx = Eigen::Index(g.n_inputs);
  Eigen::MatrixXd a(nu, nx);
  for (Eigen::Index i = 0; i < nu; ++i)
    for (Eigen::Index j = 0; j < nx; ++j) {
      double v = g.at(std::size_t(i), std::size_t(j));
      a(i, j) = v * v;
    }
  Eigen::VectorXd d1 = a.rowwise().sum(), d2 = a.colwise().sum();
  for (Eigen::Index i = 0; i < nu; ++i) d1(i) = d1(i) > 0.0 ? 1.0 / std::sqrt(d1(i)) : 1.0;
  for (Eigen::Index j = 0; j < nx; ++j) d2(j) = d2(j) > 0.0 ? 1.0 / std::sqrt(d2(j)) : 1.0;
  Eigen::MatrixXd an = d1.asDiagonal() * a * d2.asDiagonal();

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(an, Eigen::ComputeThinU | Eigen::ComputeThinV);
  std::size_t dims = 0;
  while ((std::size_t(1) << dims) < k) ++dims;

  Eigen::MatrixXd pts(nu + nx, Eigen::Index(dims));
  for (std::size_t d = 0; d < dims; ++d) {
    Eigen::Index col = Eigen::Index(d + 1);  // skip the leading singular pair
    for (Eigen::Index i = 0; i < nu; ++i) pts(i, Eigen::Index(d)) = d1(i) * svd.matrixU()(i, col);
    for (Eigen::Index j = 0; j < nx; ++j)
      pts(nu + j, Eigen::Index(d)) = d2(j) * svd.matrixV()(j, col);
  }

  auto labels = kmeans(pts, k, seed);
  ExpertnessResult res;
  res.parts.k = k;
  res.parts.neuron_labels.assign(labels.begin(), labels.begin() + nu);
  res.parts.input_labels.assign(labels.begin() + nu, labels.end());
  res.e = partition_score(g, res.parts);
  return res;
}

void MoeMlp::validate() const {
  if (n_experts < 1) throw ParamError("need at least one expert");
  if (expert_neurons.size() != n_experts)
    throw ParamError("expected " + std::to_string(n_experts) + " expert neuron sets, got " +
                     std::to_string(expert_neurons.size()));
  if (!router) throw ParamError("router not set");
  if (w1.rank() != 2 || w2.rank() != 2 || w1.shape()[1] != w2.shape()[0])
    throw ShapeError("expert weight shapes do not chain");
  if (bits > 31) throw ParamError("quantization beyond 31 bits is not representable");
  std::size_t d_mlp = w1.shape()[1];
  for (std::size_t z = 0; z < n_experts; ++z) {
    if (expert_neurons[z].empty())
      throw ParamError("expert " + std::to_string(z) + " has no neurons");
    for (std::size_t idx : expert_neurons[z])
      if (idx >= d_mlp)
        throw ParamError("expert neuron index " + std::to_string(idx) + " out of range");
  }
}

Tensor<double> moe_forward(const MoeMlp& moe, const Tensor<double>& x) {
  moe.validate();
  if (x.rank() != 2 || x.shape()[1] != moe.w1.shape()[0])
    throw ShapeError("expert mlp expects [n," + std::to_string(moe.w1.shape()[0]) +
                     "] inputs, got " + shape_str(x.shape()));
  std::size_t n = x.shape()[0], d_in = x.shape()[1];
  std::size_t d_mlp = moe.w1.shape()[1], d_out = moe.w2.shape()[1];
  const auto &xv = x.data(), &w1v = moe.w1.data(), &w2v = moe.w2.data();

  std::vector<double> act(n * d_mlp, 0.0);
  std::vector<double> row(d_in);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(xv.data() + r * d_in, d_in, row.begin());
    std::size_t z = moe.router(row);
    if (z >= moe.n_experts)
      throw ParamError("router chose expert " + std::to_string(z) + " of " +
                       std::to_string(moe.n_experts));
    for (std::size_t m : moe.expert_neurons[z]) {
      double a = 0.0;
      for (std::size_t c = 0; c < d_in; ++c) a += row[c] * w1v[c * d_mlp + m];
      act[r * d_mlp + m] = a > 0.0 ? a : 0.0;
    }
  }

  if (moe.bits > 0) {
    double levels = double((std::uint64_t(1) << moe.bits) - 1);
    for (std::size_t m = 0; m < d_mlp; ++m) {
      double mx = 0.0;
      for (std::size_t r = 0; r < n; ++r) mx = std::max(mx, act[r * d_mlp + m]);
      if (mx <= 0.0) continue;
      for (std::size_t r = 0; r < n; ++r) {
        double& v = act[r * d_mlp + m];
        v = std::round(v / mx * levels) * mx / levels;
      }
    }
  }

  auto out = Tensor<double>::zeros({n, d_out});
  auto& ov = out.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t m = 0; m < d_mlp; ++m) {
      double a = act[r * d_mlp + m];
      if (a == 0.0) continue;
      for (std::size_t c = 0; c < d_out; ++c) ov[r * d_out + c] += a * w2v[m * d_out + c];
    }
  return out;
}

double moe_mi_bound(std::size_t n_experts, const std::vector<std::size_t>& expert_sizes,
                    unsigned bits) {
  if (n_experts < 1) throw ParamError("need at least one expert");
  if (expert_sizes.size() != n_experts)
    throw ParamError("expected " + std::to_string(n_experts) + " expert sizes, got " +
                     std::to_string(expert_sizes.size()));
  if (bits < 1) throw ParamError("bound needs at least one bit per activation");
  double sum = 0.0;
  for (std::size_t s : expert_sizes) {
    if (s < 1) throw ParamError("expert sizes must be at least 1");
    sum += double(s) * double(bits);
  }
  return std::log2(double(n_experts)) + sum;
}

double moe_mi_empirical(const MoeMlp& moe, const Tensor<double>& support) {
  if (support.rank() != 2) throw ShapeError("support must be [n, d_in]");
  std::size_t n = support.shape()[0];
  if (n == 0) throw ParamError("empty input support");
  if (n > 10000)
    throw SizeError("support of " + std::to_string(n) + " rows exceeds the enumeration limit");

  auto out = moe_forward(moe, support);
  std::size_t d = out.shape()[1];
  std::map<std::string, std::size_t> alphabet;
  const auto& ov = out.data();
  for (std::size_t r = 0; r < n; ++r) {
    std::string key(reinterpret_cast<const char*>(ov.data() + r * d), d * sizeof(double));
    ++alphabet[key];
  }
  double h = 0.0;
  for (const auto& [key, count] : alphabet) {
    double p = double(count) / double(n);
    h -= p * std::log2(p);
  }
  return h;
}

std::vector<NeuronSigma> criticality_core(
    const std::function<std::vector<std::vector<double>>(std::optional<std::size_t>)>& embed,
    std::size_t n_neurons) {
  auto base = embed(std::nullopt);
  std::size_t n = base.size();
  if (n == 0) throw ParamError("criticality needs at least one input");
  std::vector<double> norms(n, 0.0);
  std::size_t usable = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double v : base[i]) s += v * v;
    norms[i] = std::sqrt(s);
    if (norms[i] >= 1e-9) ++usable;
  }
  if (usable == 0) throw DegenerateError("every input has a near-zero embedding norm");

  std::vector<NeuronSigma> out(n_neurons);
  for (std::size_t h = 0; h < n_neurons; ++h) {
    auto mod = embed(h);
    if (mod.size() != n) throw ShapeError("silenced embeddings changed row count");
    double sigma = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (norms[i] < 1e-9) continue;
      if (mod[i].size() != base[i].size())
        throw ShapeError("silenced embeddings changed width");
      double s = 0.0;
      for (std::size_t c = 0; c < base[i].size(); ++c) {
        double dv = mod[i][c] - base[i][c];
        s += dv * dv;
      }
      sigma = std::max(sigma, std::sqrt(s) / norms[i]);
    }
    out[h] = {h, sigma};
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const NeuronSigma& a, const NeuronSigma& b) { return a.sigma > b.sigma; });
  return out;
}

void write_expertness_csv(const std::string& path, const std::vector<LayerExpertness>& rows,
                          std::size_t k, std::uint64_t seed) {
  csv::Writer w(path, "layer,expertness,k,n_neurons,n_inputs,seed");
  for (const auto& r : rows)
    w.row({std::to_string(r.layer), csv::num(r.e), std::to_string(k),
           std::to_string(r.n_neurons), std::to_string(r.n_inputs), std::to_string(seed)});
}

void write_criticality_csv(const std::string& path, std::size_t layer,
                           const std::vector<NeuronSigma>& sigmas) {
  csv::Writer w(path, "layer,neuron,sigma");
  for (const auto& s : sigmas)
    w.row({std::to_string(layer), std::to_string(s.neuron), csv::num(s.sigma)});
}

}  // namespace remem
