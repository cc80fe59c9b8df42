#pragma once

#include <algorithm>
#include <string>
#include <unordered_map>
#include <vector>

#include "remem/errors.hpp"
#include "remem/vit.hpp"

namespace remem {

// One entry of the named-tensor checkpoint container. Payloads are f32 on
// disk regardless of the in-memory compute type.
struct NamedTensorF {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

void save_tensors(const std::string& path, const std::vector<NamedTensorF>& tensors);
std::vector<NamedTensorF> load_tensors(const std::string& path);

template <class T>
void save_params(const std::string& path, const std::vector<Param<T>>& ps) {
  std::vector<NamedTensorF> ts;
  ts.reserve(ps.size());
  for (const auto& p : ps) {
    NamedTensorF nt;
    nt.name = p.name;
    nt.shape = p.tensor.shape();
    nt.data.assign(p.tensor.data().begin(), p.tensor.data().end());
    ts.push_back(std::move(nt));
  }
  save_tensors(path, ts);
}

// Strict load: the file must carry exactly the target's parameter names with
// matching shapes. Validates everything before touching the model, so a
// failed load leaves no partial state.
template <class T>
void load_params(const std::string& path, const std::vector<Param<T>>& ps) {
  auto ts = load_tensors(path);
  std::unordered_map<std::string, const NamedTensorF*> by_name;
  for (const auto& t : ts) by_name[t.name] = &t;
  if (by_name.size() != ts.size()) throw SchemaError("checkpoint has duplicate tensor names");
  for (const auto& p : ps) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw SchemaError("checkpoint is missing tensor " + p.name);
    if (it->second->shape != p.tensor.shape())
      throw ShapeError("checkpoint tensor " + p.name + " has shape " +
                       shape_str(it->second->shape) + ", model expects " +
                       shape_str(p.tensor.shape()));
  }
  if (by_name.size() != ps.size()) {
    std::vector<std::string> expect;
    for (const auto& p : ps) expect.push_back(p.name);
    for (const auto& t : ts)
      if (std::find(expect.begin(), expect.end(), t.name) == expect.end())
        throw SchemaError("checkpoint has unknown tensor " + t.name);
  }
  for (const auto& p : ps) {
    const auto& src = by_name.at(p.name)->data;
    auto& dst = const_cast<Tensor<T>&>(p.tensor).data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = T(src[i]);
  }
}

template <class T>
void save_vit(const std::string& path, VitModel<T>& m) {
  auto ps = params(m);
  save_params(path, ps);
}

template <class T>
VitModel<T> load_vit(const std::string& path, const VitConfig& cfg) {
  auto m = init_vit<T>(cfg, 0);
  auto ps = params(m);
  load_params(path, ps);
  return m;
}

}  // namespace remem
