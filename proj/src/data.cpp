#include "remem/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "remem/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "dataset io assumes a little-endian host");

namespace remem {

void Dataset::validate() const {
  if (labels.size() != n || pixels.size() != n * image_elems())
    throw ShapeError("dataset arrays do not match the declared count");
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] < 0 || std::size_t(labels[i]) >= n_classes)
      throw DomainError("dataset record " + std::to_string(i) + " has label " +
                        std::to_string(labels[i]) + " outside [0," + std::to_string(n_classes) +
                        ")");
}

namespace {

// analytic point-in-silhouette tests at pixel centers; all coordinates in
// pixel units
bool inside_shape(std::size_t kind, double x, double y, double cx, double cy, double r) {
  double dx = x - cx, dy = y - cy;
  switch (kind) {
    case 0:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:  // circle
      return dx * dx + dy * dy <= r * r;
    case 2:  // upward triangle
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    default:  // cross
      return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
  }
}

template <class T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

struct Reader {
  const std::string& buf;
  std::size_t off = 0;

  void need(std::size_t nbytes, const char* what) {
    if (off + nbytes > buf.size())
      throw TruncatedFileError(std::string("dataset truncated at byte ") + std::to_string(off) +
                               " while reading " + what);
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
  }
};

constexpr char kMagic[4] = {'R', 'M', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

Dataset generate_shapes(const ShapesSpec& spec) {
  if (spec.image_size < 8) throw ParamError("image_size must be at least 8");
  if (spec.n_classes == 0 || spec.n_classes > kShapeVocabulary)
    throw ParamError("n_classes " + std::to_string(spec.n_classes) +
                     " exceeds the shape vocabulary of " + std::to_string(kShapeVocabulary));
  if (spec.samples_per_class == 0) throw ParamError("samples_per_class must be positive");
  if (spec.sigma < 0) throw ParamError("sigma must be non-negative");

  std::size_t hw = spec.image_size;
  Dataset ds;
  ds.n = spec.n_classes * spec.samples_per_class;
  ds.channels = 1;
  ds.height = hw;
  ds.width = hw;
  ds.n_classes = spec.n_classes;
  ds.pixels.resize(ds.n * hw * hw);
  ds.labels.resize(ds.n);
  ds.tag = "generated";
  ds.provenance = "shapes(n_classes=" + std::to_string(spec.n_classes) +
                  ",image_size=" + std::to_string(hw) +
                  ",samples_per_class=" + std::to_string(spec.samples_per_class) +
                  ",sigma=" + std::to_string(spec.sigma) + ",seed=" + std::to_string(spec.seed) +
                  ")";

  auto rng = make_rng(derive_seed(spec.seed, "shapes"));
  std::uniform_real_distribution<double> center(0.38 * hw, 0.62 * hw);
  std::uniform_real_distribution<double> radius(0.18 * hw, 0.30 * hw);
  std::normal_distribution<double> noise(0.0, spec.sigma);

  std::size_t rec = 0;
  for (std::size_t cls = 0; cls < spec.n_classes; ++cls) {
    std::size_t kind = cls % 4;
    double intensity = cls < 4 ? 1.0 : 0.55;
    for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++rec) {
      double cx = center(rng), cy = center(rng), r = radius(rng);
      std::uint8_t* img = ds.pixels.data() + rec * hw * hw;
      for (std::size_t y = 0; y < hw; ++y)
        for (std::size_t x = 0; x < hw; ++x) {
          double v =
              inside_shape(kind, double(x) + 0.5, double(y) + 0.5, cx, cy, r) ? intensity : 0.0;
          if (spec.sigma > 0) v += noise(rng);
          v = std::clamp(v, 0.0, 1.0);
          img[y * hw + x] = std::uint8_t(std::lround(v * 255.0));
        }
      ds.labels[rec] = int(cls);
    }
  }
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  if (ds.height > 0xffff || ds.width > 0xffff || ds.channels > 0xffff || ds.n_classes > 0xffff ||
      ds.n > 0xffffffffull)
    throw IoError("dataset dimensions exceed the file format limits");
  std::string buf;
  buf.append(kMagic, 4);
  put(buf, kVersion);
  put(buf, std::uint32_t(ds.n));
  put(buf, std::uint16_t(ds.height));
  put(buf, std::uint16_t(ds.width));
  put(buf, std::uint16_t(ds.channels));
  put(buf, std::uint16_t(ds.n_classes));
  std::size_t elems = ds.image_elems();
  for (std::size_t i = 0; i < ds.n; ++i) {
    put(buf, std::uint16_t(ds.labels[i]));
    buf.append(reinterpret_cast<const char*>(ds.pixels.data() + i * elems), elems);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};

  r.need(4, "magic");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw BadMagicError("not a dataset file: " + path);
  r.off = 4;
  auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw BadVersionError("dataset version " + std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  Dataset ds;
  ds.n = r.get<std::uint32_t>("record count");
  ds.height = r.get<std::uint16_t>("height");
  ds.width = r.get<std::uint16_t>("width");
  ds.channels = r.get<std::uint16_t>("channels");
  ds.n_classes = r.get<std::uint16_t>("class count");
  if (ds.height == 0 || ds.width == 0 || ds.channels == 0 || ds.n_classes == 0)
    throw SchemaError("dataset header has zero dimensions");
  std::size_t elems = ds.image_elems();
  ds.pixels.resize(ds.n * elems);
  ds.labels.resize(ds.n);
  for (std::size_t i = 0; i < ds.n; ++i) {
    auto label = r.get<std::uint16_t>("label");
    if (label >= ds.n_classes)
      throw DomainError("dataset record " + std::to_string(i) + " has label " +
                        std::to_string(label) + " outside [0," + std::to_string(ds.n_classes) +
                        ")");
    ds.labels[i] = int(label);
    r.need(elems, "pixels");
    std::memcpy(ds.pixels.data() + i * elems, buf.data() + r.off, elems);
    r.off += elems;
  }
  if (r.off != buf.size())
    throw SchemaError("dataset has " + std::to_string(buf.size() - r.off) +
                      " trailing bytes past the declared records");
  ds.tag = "loaded";
  ds.provenance = path;
  return ds;
}

SplitResult split(const Dataset& ds, double train_fraction, double test_fraction,
                  std::uint64_t seed) {
  ds.validate();
  if (std::abs(train_fraction + test_fraction - 1.0) > 1e-9)
    throw ParamError("split fractions must sum to 1");
  if (train_fraction <= 0 || test_fraction <= 0)
    throw ParamError("split fractions must be positive");

  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < ds.n; ++i) by_class[std::size_t(ds.labels[i])].push_back(i);

  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t cls = 0; cls < ds.n_classes; ++cls) {
    auto& idx = by_class[cls];
    if (idx.size() < 2)
      throw StratificationError("class " + std::to_string(cls) + " has " +
                                std::to_string(idx.size()) + " examples, cannot stratify");
    auto rng = make_rng(derive_seed(seed, "split", cls));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_train = std::size_t(std::lround(train_fraction * double(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + std::ptrdiff_t(n_train));
    test_idx.insert(test_idx.end(), idx.begin() + std::ptrdiff_t(n_train), idx.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());

  auto take = [&](const std::vector<std::size_t>& idx, const char* tag) {
    Dataset out;
    out.n = idx.size();
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.n_classes = ds.n_classes;
    out.tag = tag;
    out.provenance = ds.provenance;
    std::size_t elems = ds.image_elems();
    out.pixels.resize(out.n * elems);
    out.labels.resize(out.n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::memcpy(out.pixels.data() + i * elems, ds.pixels.data() + idx[i] * elems, elems);
      out.labels[i] = ds.labels[idx[i]];
    }
    return out;
  };
  return {take(train_idx, "train"), take(test_idx, "test"), train_idx, test_idx};
}

ShapesSpec memorization_preset(std::uint64_t seed) {
  ShapesSpec s;
  s.n_classes = 8;
  s.image_size = 16;
  s.samples_per_class = 8;
  s.sigma = 0.08;
  s.seed = seed;
  return s;
}

}  // namespace remem
