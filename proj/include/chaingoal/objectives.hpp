#pragma once

// Advantage-weighted regression losses for the hierarchical policy. Each
// subgoal step and the action step get their own weighted log-likelihood
// objective; the per-step terms are combined with geometric decay over
// subgoal depth (nearest subgoal weighted full, farther ones discounted by
// gamma_h per step) into a single scalar to minimize. Advantages are plain
// numbers computed from the value function outside any tape, so the policy
// update can never move the value parameters.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "chaingoal/common.hpp"
#include "chaingoal/policy.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/value.hpp"

namespace chaingoal {

struct LossWeights {
  double lambda_h = 1.0;
  double lambda_l = 1.0;
  double gamma_h = 0.8;
  double beta = 3.0;
  double weight_clip = 100.0;

  void validate() const {
    auto finite = [](double x) { return std::isfinite(x); };
    if (!finite(lambda_h) || !finite(lambda_l) || !finite(gamma_h) || !finite(beta) ||
        !finite(weight_clip))
      throw ConfigError("loss weights must be finite");
    if (lambda_h < 0) throw ConfigError("lambda_h must be >= 0");
    if (lambda_l <= 0) throw ConfigError("lambda_l must be > 0");
    if (!(gamma_h > 0 && gamma_h <= 1)) throw ConfigError("gamma_h must lie in (0, 1]");
    if (beta < 0) throw ConfigError("beta must be >= 0");
    if (weight_clip < 1) throw ConfigError("weight_clip must be >= 1");
  }
};

template <typename F>
F awr_weight(F adv, double beta, double clip) {
  return std::min(std::exp(static_cast<F>(beta) * adv), static_cast<F>(clip));
}

// Multiplier on J^{h_i} in the aggregate loss: lambda_h * gamma_h^(i-1),
// returned at index i-1. The loss assembly below uses exactly these values,
// so probing this function probes the real weighting.
inline std::vector<double> effective_subgoal_weights(const LossWeights& w, std::size_t horizon) {
  std::vector<double> eff(horizon);
  double acc = w.lambda_h;
  for (std::size_t i = 0; i < horizon; ++i) {
    eff[i] = acc;
    acc *= w.gamma_h;
  }
  return eff;
}

// A batch of high advantages: V(s_i, e_g) - V(s, e_g), one per row. Must run with
// no live tape under the value parameters; the result is plain numbers.
template <typename F>
std::vector<F> high_advantages(const ValueFunction<F>& vf, const Tensor<F>& s,
                               const Tensor<F>& s_i, const Tensor<F>& e_g) {
  auto v_sub = vf.value(s_i.detach(), e_g.detach());
  auto v_cur = vf.value(s.detach(), e_g.detach());
  if (v_sub.on_tape() || v_cur.on_tape())
    throw NumericError("high_advantages: value parameters are on a live tape");
  std::vector<F> adv(v_sub.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = v_sub.data()[i] - v_cur.data()[i];
  return adv;
}

// A batch of low advantages: V(s', z_1) - V(s, z_1), with the nearest
// subgoal embedding standing in as the goal.
template <typename F>
std::vector<F> low_advantages(const ValueFunction<F>& vf, const Tensor<F>& s,
                              const Tensor<F>& s_next, const Tensor<F>& z1_embed) {
  auto v_next = vf.value(s_next.detach(), z1_embed.detach());
  auto v_cur = vf.value(s.detach(), z1_embed.detach());
  if (v_next.on_tape() || v_cur.on_tape())
    throw NumericError("low_advantages: value parameters are on a live tape");
  std::vector<F> adv(v_next.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = v_next.data()[i] - v_cur.data()[i];
  return adv;
}

template <typename F>
struct TotalLossResult {
  Tensor<F> loss;  // scalar to minimize
  std::vector<double> j_h;        // J^{h_i} at index i-1 (values of the maximized terms)
  double j_l = 0;
  std::vector<double> contrib_h;  // effective_weight_i * J^{h_i}
  double contrib_l = 0;
  std::vector<double> mean_w_h;   // mean AWR weight per subgoal step
  double mean_w_l = 0;
};

template <typename F>
TotalLossResult<F> total_loss(const PolicyLogProbs<F>& logp,
                              const std::vector<std::vector<F>>& adv_h,
                              const std::vector<F>& adv_l, const LossWeights& w) {
  w.validate();
  std::size_t horizon = logp.logp_h.size();
  if (adv_h.size() != horizon)
    throw ShapeError("total_loss: " + std::to_string(adv_h.size()) +
                     " advantage rows for horizon " + std::to_string(horizon));
  std::size_t b = logp.logp_l.size();
  if (adv_l.size() != b) throw ShapeError("total_loss: low advantage count mismatch");

  auto weight_tensor = [&](const std::vector<F>& adv, double& mean_out) {
    std::vector<F> vals(adv.size());
    double total = 0;
    for (std::size_t i = 0; i < adv.size(); ++i) {
      if (!std::isfinite(static_cast<double>(adv[i])))
        throw NumericError("total_loss: non-finite advantage");
      vals[i] = awr_weight(adv[i], w.beta, w.weight_clip);
      total += vals[i];
    }
    mean_out = total / static_cast<double>(adv.size());
    return Tensor<F>::from_vector({adv.size()}, std::move(vals));
  };

  TotalLossResult<F> out;
  out.j_h.resize(horizon);
  out.contrib_h.resize(horizon);
  out.mean_w_h.resize(horizon);
  auto eff = effective_subgoal_weights(w, horizon);

  auto check_term = [](double v, const std::string& name) {
    if (!std::isfinite(v)) throw NumericError("total_loss: non-finite term " + name);
  };

  double lw_mean = 0;
  auto w_l = weight_tensor(adv_l, lw_mean);
  out.mean_w_l = lw_mean;
  auto j_l_t = mean(mul(w_l, logp.logp_l));
  out.j_l = static_cast<double>(j_l_t.item());
  check_term(out.j_l, "j_l");
  out.contrib_l = w.lambda_l * out.j_l;

  Tensor<F> total = mul_scalar(j_l_t, w.lambda_l);
  for (std::size_t i = 1; i <= horizon; ++i) {
    if (adv_h[i - 1].size() != b)
      throw ShapeError("total_loss: high advantage count mismatch at i=" + std::to_string(i));
    double wh_mean = 0;
    auto w_h = weight_tensor(adv_h[i - 1], wh_mean);
    out.mean_w_h[i - 1] = wh_mean;
    auto j_h_t = mean(mul(w_h, logp.logp_h[i - 1]));
    out.j_h[i - 1] = static_cast<double>(j_h_t.item());
    check_term(out.j_h[i - 1], "j_h_" + std::to_string(i));
    out.contrib_h[i - 1] = eff[i - 1] * out.j_h[i - 1];
    total = add(total, mul_scalar(j_h_t, eff[i - 1]));
  }
  out.loss = neg(total);
  return out;
}

}  // namespace chaingoal
