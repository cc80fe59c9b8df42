#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "remem/errors.hpp"
#include "remem/tensor.hpp"

namespace remem {

// images live as u8 and are normalized to [0,1] when turned into tensors
struct Dataset {
  std::size_t n = 0, channels = 0, height = 0, width = 0, n_classes = 0;
  std::vector<std::uint8_t> pixels;  // n * channels * height * width
  std::vector<int> labels;
  std::string tag;
  std::string provenance;

  std::size_t image_elems() const { return channels * height * width; }
  void validate() const;
};

// procedural shapes: 4 silhouettes x 2 intensity bins = 8 possible classes
struct ShapesSpec {
  std::size_t n_classes = 8;
  std::size_t image_size = 32;
  std::size_t samples_per_class = 16;
  double sigma = 0.0;  // Gaussian pixel noise, [0,1] units
  std::uint64_t seed = 0;
};

constexpr std::size_t kShapeVocabulary = 8;

Dataset generate_shapes(const ShapesSpec& spec);

void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

struct SplitResult {
  Dataset train, test;
  std::vector<std::size_t> train_indices, test_indices;  // into the source dataset
};

// deterministic stratified split; fractions must sum to 1
SplitResult split(const Dataset& ds, double train_fraction, double test_fraction,
                  std::uint64_t seed);

// few examples, many classes: tuned to make a small teacher memorize
ShapesSpec memorization_preset(std::uint64_t seed);

template <class T>
Tensor<T> images_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::size_t elems = ds.image_elems();
  std::vector<T> v(idx.size() * elems);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.n) throw UsageError("dataset index " + std::to_string(idx[i]) + " out of range");
    const std::uint8_t* src = ds.pixels.data() + idx[i] * elems;
    for (std::size_t j = 0; j < elems; ++j) v[i * elems + j] = T(src[j]) / T(255);
  }
  return Tensor<T>::from({idx.size(), ds.channels, ds.height, ds.width}, std::move(v));
}

inline std::vector<int> labels_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= ds.n) throw UsageError("dataset index " + std::to_string(idx[i]) + " out of range");
    out[i] = ds.labels[idx[i]];
  }
  return out;
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) idx[i] = i;
  return idx;
}

}  // namespace remem
