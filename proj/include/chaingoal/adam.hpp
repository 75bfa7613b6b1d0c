#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "chaingoal/common.hpp"
#include "chaingoal/tensor.hpp"

namespace chaingoal {

// Parameters travel as (name, tensor) pairs. The names give checkpoints a
// stable layout and make optimizer diagnostics point at a concrete weight
// instead of "somewhere in the model".
template <typename F>
using NamedParams = std::vector<std::pair<std::string, Tensor<F>>>;

template <typename F>
struct AdamConfig {
  F lr = F(3e-4);
  F beta1 = F(0.9);
  F beta2 = F(0.999);
  F eps = F(1e-8);
};

// One state per parameter group; moment buffers are index-aligned with the
// group's NamedParams order, which never changes after construction.
template <typename F>
struct AdamState {
  AdamConfig<F> config;
  std::size_t step_count = 0;
  std::vector<std::vector<F>> m;
  std::vector<std::vector<F>> v;

  static AdamState init(const NamedParams<F>& params, AdamConfig<F> cfg = {}) {
    AdamState st;
    st.config = cfg;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, p] : params) {
      (void)name;
      st.m.emplace_back(p.size(), F(0));
      st.v.emplace_back(p.size(), F(0));
    }
    return st;
  }
};

// Standard bias-corrected Adam update, applied in place. Gradients are read
// from the tensors' grad buffers as left behind by Tape::backward. A NaN in
// any gradient aborts before touching the weights so the previous state
// stays intact for checkpoint recovery.
template <typename F>
void adam_step(NamedParams<F>& params, AdamState<F>& st, const std::string& group_name) {
  if (st.m.size() != params.size())
    throw NumericError("adam_step(" + group_name + "): state tracks " +
                       std::to_string(st.m.size()) + " tensors, group has " +
                       std::to_string(params.size()));
  for (const auto& [name, p] : params) {
    if (p.grad_vec().size() != p.size())
      throw NumericError("adam_step(" + group_name + "): parameter " + name +
                         " has no gradient buffer; was it watched?");
    if (detail::has_nan(p.grad(), p.size()))
      throw NumericError("adam_step(" + group_name + "): NaN gradient in parameter " + name);
  }

  st.step_count += 1;
  F b1 = st.config.beta1, b2 = st.config.beta2;
  F bc1 = F(1) - std::pow(b1, static_cast<F>(st.step_count));
  F bc2 = F(1) - std::pow(b2, static_cast<F>(st.step_count));

  for (std::size_t idx = 0; idx < params.size(); ++idx) {
    Tensor<F>& p = params[idx].second;
    const F* g = p.grad();
    F* w = p.data();
    F* mi = st.m[idx].data();
    F* vi = st.v[idx].data();
    std::size_t n = p.size();
    for (std::size_t i = 0; i < n; ++i) {
      mi[i] = b1 * mi[i] + (F(1) - b1) * g[i];
      vi[i] = b2 * vi[i] + (F(1) - b2) * g[i] * g[i];
      F mhat = mi[i] / bc1;
      F vhat = vi[i] / bc2;
      w[i] -= st.config.lr * mhat / (std::sqrt(vhat) + st.config.eps);
    }
  }
}

}  // namespace chaingoal
