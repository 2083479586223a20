#pragma once

#include <random>
#include <string>
#include <vector>

#include "tener/tensor.hpp"

namespace tener {

/// Training flag and dropout source threaded through every forward pass.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

/// Per-position validity; true marks a real token. Empty means all valid.
using Mask = std::vector<bool>;

inline std::size_t valid_prefix_length(const Mask& mask, std::size_t length) {
  if (mask.empty()) return length;
  if (mask.size() != length)
    throw ShapeError("mask of length " + std::to_string(mask.size()) +
                     " for sequence of length " + std::to_string(length));
  std::size_t n = 0;
  while (n < length && mask[n]) ++n;
  for (std::size_t i = n; i < length; ++i)
    if (mask[i]) throw ContractError("mask must be a contiguous valid prefix");
  return n;
}

/// l×l additive mask: 0 for valid key columns, −∞ for masked ones.
inline Tensor key_mask_matrix(const Mask& mask, std::size_t length) {
  std::vector<Scalar> v(length * length, Scalar{0});
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t j = 0; j < length; ++j)
      if (!mask[j]) v[t * length + j] = -std::numeric_limits<Scalar>::infinity();
  return Tensor::matrix(length, length, std::move(v));
}

/// Affine map x·W (+ b).
struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // [out], undefined when the map has no bias

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in,
                       std::size_t out, bool with_bias, std::mt19937_64& rng) {
    Linear l;
    l.weight = store.add(name + ".weight", init_uniform({in, out}, in, rng));
    if (with_bias) l.bias = store.add(name + ".bias", Tensor::zeros({out}, true));
    return l;
  }

  Tensor operator()(const Tensor& x) const {
    auto y = matmul(x, weight);
    return bias.defined() ? add_rowwise(y, bias) : y;
  }

  std::size_t parameter_count() const {
    return weight.size() + (bias.defined() ? bias.size() : 0);
  }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  static LayerNormParams create(ParameterStore& store, const std::string& name,
                                std::size_t dim) {
    return {store.add(name + ".gain", Tensor::full({dim}, 1, true)),
            store.add(name + ".bias", Tensor::zeros({dim}, true))};
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  std::size_t parameter_count() const { return gain.size() + bias.size(); }
};

}  // namespace tener
