#include "remem/snapshot.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

namespace remem {

namespace {

constexpr char kMagic[4] = {'R', 'M', 'E', 'M'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

template <class T>
void put(std::string& buf, T v) {
  char raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  buf.append(raw, sizeof(T));
}

struct Reader {
  const std::string& buf;
  std::size_t off = 0;

  void need(std::size_t n, const char* what) {
    if (off + n > buf.size())
      throw TruncatedFileError(std::string("checkpoint truncated at byte ") + std::to_string(off) +
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
  std::string get_str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(buf.data() + off, n);
    off += n;
    return s;
  }
};

}  // namespace

void save_tensors(const std::string& path, const std::vector<NamedTensorF>& tensors) {
  std::string buf;
  buf.append(kMagic, 4);
  put(buf, kVersion);
  put(buf, std::uint32_t(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw IoError("tensor name too long: " + t.name);
    put(buf, std::uint16_t(t.name.size()));
    buf.append(t.name);
    put(buf, kDtypeF32);
    if (t.shape.size() > 0xff) throw IoError("tensor rank too large for " + t.name);
    put(buf, std::uint8_t(t.shape.size()));
    std::size_t total = 1;
    for (std::size_t d : t.shape) {
      put(buf, std::uint32_t(d));
      total *= d;
    }
    if (total != t.data.size())
      throw IoError("tensor " + t.name + " payload does not match its shape");
    buf.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(buf.data(), std::streamsize(buf.size()));
  if (!f) throw IoError("short write to " + path);
}

std::vector<NamedTensorF> load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r{buf};

  auto magic = r.get_str(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw BadMagicError("not a checkpoint file: " + path);
  auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw BadVersionError("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kVersion));
  auto count = r.get<std::uint32_t>("tensor count");

  std::vector<NamedTensorF> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensorF t;
    auto name_len = r.get<std::uint16_t>("name length");
    t.name = r.get_str(name_len, "tensor name");
    auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != kDtypeF32)
      throw SchemaError("tensor " + t.name + " has unsupported dtype tag " +
                        std::to_string(int(dtype)));
    auto rank = r.get<std::uint8_t>("rank");
    std::size_t total = 1;
    for (std::uint8_t dj = 0; dj < rank; ++dj) {
      auto dim = r.get<std::uint32_t>("dim");
      if (dim == 0) throw SchemaError("tensor " + t.name + " has a zero dimension");
      t.shape.push_back(dim);
      total *= dim;
    }
    r.need(total * sizeof(float), "payload");
    t.data.resize(total);
    std::memcpy(t.data.data(), buf.data() + r.off, total * sizeof(float));
    r.off += total * sizeof(float);
    out.push_back(std::move(t));
  }
  if (r.off != buf.size())
    throw SchemaError("checkpoint has " + std::to_string(buf.size() - r.off) +
                      " trailing bytes past the declared tensors");
  return out;
}

}  // namespace remem
