#pragma once

#include <random>
#include <string>
#include <vector>

#include "dcct/autograd.hpp"

namespace dcct {

struct NamedParameter {
  std::string name;
  Var var;
};

// Owns every trainable tensor of a model under a dotted name, in creation
// order. Modules keep aliasing Var handles into the store.
class ParameterStore {
 public:
  // Normal(0, 1/fan_in) draw for weights.
  Var create_weight(const std::string& name, Shape shape, int fan_in, std::mt19937_64& rng);
  Var create_normal(const std::string& name, Shape shape, double stddev, std::mt19937_64& rng);
  Var create_constant(const std::string& name, Shape shape, double value);

  const std::vector<NamedParameter>& entries() const { return entries_; }
  Var find(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t scalar_count() const;

  void zero_grad();

  // All parameter values concatenated in creation order.
  std::vector<double> flatten() const;

 private:
  Var add(const std::string& name, Tensor value);
  std::vector<NamedParameter> entries_;
};

struct Linear {
  Var weight;  // [out, in]
  Var bias;    // [out], may be undefined
  int in_features = 0;
  int out_features = 0;

  static Linear create(ParameterStore& store, const std::string& name, int in, int out, bool with_bias,
                       std::mt19937_64& rng);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm create(ParameterStore& store, const std::string& name, int width);
  Var operator()(const Var& x) const;
};

enum class Activation { None, Relu, Gelu };

Var activate(const Var& x, Activation act);

}  // namespace dcct
