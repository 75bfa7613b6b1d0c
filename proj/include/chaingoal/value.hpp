#pragma once

// Goal-conditioned state value V(s, e_g) on embedded goals, trained by
// expectile regression against a slowly-synced target copy. The same goal
// encoder embeds final goals and subgoal targets, and its output space is
// the backbone embedding space, so value estimates can rank latent
// subgoals directly.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/mlp.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"

namespace chaingoal {

template <typename F>
struct ValueBatch {
  Tensor<F> s;       // [B, obs]
  Tensor<F> s_next;  // [B, obs]
  Tensor<F> g;       // [B, obs]
  std::vector<F> r;               // 0 at goal, -1 otherwise, judged at s
  std::vector<std::uint8_t> done;  // 1 iff s is at the goal

  std::size_t size() const { return r.size(); }
};

template <typename F>
struct ValueFunction {
  std::size_t obs_dim = 0;
  std::size_t embed_dim = 0;
  Mlp<F> goal_encoder;  // obs -> d
  Mlp<F> value_mlp;     // obs + d -> 1
  // Target copies live outside any tape; only target_sync ever writes them.
  Mlp<F> target_goal_encoder;
  Mlp<F> target_value_mlp;

  static ValueFunction init(std::size_t obs_dim, std::size_t embed_dim,
                            const std::vector<std::size_t>& encoder_hidden,
                            const std::vector<std::size_t>& value_hidden, Pcg64& rng) {
    ValueFunction vf;
    vf.obs_dim = obs_dim;
    vf.embed_dim = embed_dim;
    vf.goal_encoder = Mlp<F>::init(obs_dim, encoder_hidden, embed_dim, rng);
    vf.value_mlp = Mlp<F>::init(obs_dim + embed_dim, value_hidden, 1, rng);
    vf.target_goal_encoder = vf.copy_plain(vf.goal_encoder);
    vf.target_value_mlp = vf.copy_plain(vf.value_mlp);
    return vf;
  }

  static Mlp<F> copy_plain(const Mlp<F>& src) {
    Mlp<F> dst;
    for (const auto& w : src.weights) dst.weights.push_back(w.detach());
    for (const auto& b : src.biases) dst.biases.push_back(b.detach());
    return dst;
  }

  Tensor<F> embed_goal(const Tensor<F>& g) const { return goal_encoder.forward(g); }

  Tensor<F> value(const Tensor<F>& s, const Tensor<F>& e_g) const {
    std::size_t n = s.shape()[0];
    return reshape(value_mlp.forward(concat_cols(s, e_g)), {n});
  }

  Tensor<F> target_value(const Tensor<F>& s, const Tensor<F>& e_g) const {
    for (const auto& w : target_value_mlp.weights)
      if (w.on_tape()) throw NumericError("target value parameters appeared on a tape");
    std::size_t n = s.shape()[0];
    return reshape(target_value_mlp.forward(concat_cols(s, e_g)), {n});
  }

  // Scalar convenience for evaluation and probes; runs outside any tape.
  F value_at(const std::vector<F>& obs, const Tensor<F>& e_g_row) const {
    auto s = Tensor<F>::from_vector({1, obs_dim}, obs);
    auto e = reshape(e_g_row.detach(), {1, embed_dim});
    return value(s, e).item();
  }

  // Mean over the batch of L2^tau(r + gamma*(1-done)*Vbar(s', e_g) - V(s, e_g)).
  // The bootstrap side uses the target value net on a detached copy of the
  // online goal embedding, so gradients reach psi only through the
  // prediction side.
  Tensor<F> loss(const ValueBatch<F>& batch, double tau, double gamma) const {
    if (!(tau >= 0.5 && tau < 1.0))
      throw ConfigError("value loss: tau must lie in [0.5, 1), got " + std::to_string(tau));
    std::size_t n = batch.size();
    if (n == 0) throw DataError("value loss: empty batch");
    for (std::size_t i = 0; i < n; ++i) {
      bool at_goal = batch.done[i] != 0;
      if (batch.r[i] != (at_goal ? F(0) : F(-1)))
        throw DataError("value loss: reward/done mismatch at row " + std::to_string(i));
    }
    auto e_g = embed_goal(batch.g);
    auto v = value(batch.s, e_g);
    auto v_next = target_value(batch.s_next, e_g.detach());

    std::vector<F> target(n);
    for (std::size_t i = 0; i < n; ++i) {
      F boot = batch.done[i] ? F(0) : static_cast<F>(gamma) * v_next.data()[i];
      target[i] = batch.r[i] + boot;
    }
    auto td = sub(Tensor<F>::from_vector({n}, std::move(target)), v);
    return mean(expectile_loss(td, tau));
  }

  void target_sync(double rho) {
    if (!(rho > 0.0 && rho <= 1.0))
      throw ConfigError("target_sync: rate must lie in (0, 1], got " + std::to_string(rho));
    auto blend = [rho](const Mlp<F>& online, Mlp<F>& tgt) {
      for (std::size_t l = 0; l < online.weights.size(); ++l) {
        auto mix = [rho](const Tensor<F>& src, Tensor<F>& dst) {
          F r = static_cast<F>(rho);
          for (std::size_t i = 0; i < src.size(); ++i)
            dst.data()[i] = (F(1) - r) * dst.data()[i] + r * src.data()[i];
        };
        mix(online.weights[l], tgt.weights[l]);
        mix(online.biases[l], tgt.biases[l]);
      }
    };
    blend(goal_encoder, target_goal_encoder);
    blend(value_mlp, target_value_mlp);
  }

  // Trainable parameters (psi). Target copies are excluded here and saved
  // separately by the checkpoint code.
  void collect(NamedParams<F>& out) {
    goal_encoder.collect("value/goal_encoder", out);
    value_mlp.collect("value/value_mlp", out);
  }

  void collect_target(NamedParams<F>& out) {
    target_goal_encoder.collect("value_target/goal_encoder", out);
    target_value_mlp.collect("value_target/value_mlp", out);
  }
};

}  // namespace chaingoal
