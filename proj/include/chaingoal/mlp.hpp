#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"

namespace chaingoal {

// Plain fully connected stack: every hidden layer is linear followed by
// GELU, the output layer is linear. Weights init uniform in
// [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases at zero.
template <typename F>
struct Mlp {
  std::vector<Tensor<F>> weights;  // layer l: [in_l, out_l]
  std::vector<Tensor<F>> biases;   // layer l: [out_l]

  static Mlp init(std::size_t in_dim, const std::vector<std::size_t>& hidden,
                  std::size_t out_dim, Pcg64& rng) {
    Mlp mlp;
    std::vector<std::size_t> dims;
    dims.push_back(in_dim);
    for (std::size_t h : hidden) dims.push_back(h);
    dims.push_back(out_dim);
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      std::size_t fan_in = dims[l], fan_out = dims[l + 1];
      double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      auto w = Tensor<F>::zeros({fan_in, fan_out});
      for (std::size_t i = 0; i < w.size(); ++i)
        w.data()[i] = static_cast<F>(rng.uniform(-bound, bound));
      mlp.weights.push_back(w);
      mlp.biases.push_back(Tensor<F>::zeros({fan_out}));
    }
    return mlp;
  }

  std::size_t in_dim() const { return weights.front().shape()[0]; }
  std::size_t out_dim() const { return weights.back().shape()[1]; }

  Tensor<F> forward(const Tensor<F>& x) const {
    Tensor<F> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      h = add(matmul(h, weights[l]), biases[l]);
      if (l + 1 < weights.size()) h = gelu(h);
    }
    return h;
  }

  void collect(const std::string& prefix, NamedParams<F>& out) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.emplace_back(prefix + "/w" + std::to_string(l), weights[l]);
      out.emplace_back(prefix + "/b" + std::to_string(l), biases[l]);
    }
  }
};

}  // namespace chaingoal
