#include "dcct/layers.hpp"

#include <cmath>

#include "dcct/errors.hpp"
#include "dcct/ops.hpp"

namespace dcct {

Var ParameterStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  Var v(std::move(value), true);
  entries_.push_back({name, v});
  return v;
}

Var ParameterStore::create_weight(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng) {
  return create_normal(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

Var ParameterStore::create_normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.data) v = dist(rng);
  return add(name, std::move(t));
}

Var ParameterStore::create_constant(const std::string& name, Shape shape, double value) {
  return add(name, Tensor(std::move(shape), value));
}

Var ParameterStore::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.var;
  }
  throw ArgumentError("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return true;
  }
  return false;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.var.zero_grad();
}

std::vector<double> ParameterStore::flatten() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& e : entries_) out.insert(out.end(), e.var.value().data.begin(), e.var.value().data.end());
  return out;
}

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out, bool with_bias,
                      std::mt19937_64& rng) {
  Linear l;
  l.in_features = in;
  l.out_features = out;
  l.weight = store.create_weight(name + ".weight", {out, in}, in, rng);
  if (with_bias) l.bias = store.create_constant(name + ".bias", {out}, 0.0);
  return l;
}

Var Linear::operator()(const Var& x) const {
  return ops::linear(x, weight, bias.defined() ? &bias : nullptr);
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int width) {
  LayerNorm n;
  n.gamma = store.create_constant(name + ".gamma", {width}, 1.0);
  n.beta = store.create_constant(name + ".beta", {width}, 0.0);
  return n;
}

Var LayerNorm::operator()(const Var& x) const { return ops::layer_norm(x, gamma, beta); }

Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::Relu:
      return ops::relu(x);
    case Activation::Gelu:
      return ops::gelu(x);
    case Activation::None:
      break;
  }
  return x;
}

}  // namespace dcct
