#pragma once

// Hierarchical policy over a fixed-slot token sequence
// [state, goal, subgoal_H, ..., subgoal_1, action]. Subgoal latents are
// generated autoregressively (farthest first by default) by rerunning the
// shared backbone with already-generated slots filled in and reading the
// hidden state at the slot being predicted. Training uses teacher forcing:
// dataset subgoal embeddings fill the conditioning slots and the policy's
// own predictions never feed back unless that is explicitly disabled.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/mixer.hpp"
#include "chaingoal/mlp.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"

namespace chaingoal {

enum class GenerationOrder { kReverse, kForward };

inline const char* to_string(GenerationOrder o) {
  return o == GenerationOrder::kReverse ? "reverse" : "forward";
}

inline GenerationOrder generation_order_from_string(const std::string& s) {
  if (s == "reverse") return GenerationOrder::kReverse;
  if (s == "forward") return GenerationOrder::kForward;
  throw ConfigError("unknown generation_order \"" + s + "\"");
}

// What filled a subgoal slot during a prediction step. Training asserts that
// kPolicyFeedback never appears while teacher forcing is on.
enum class ConditioningSource { kPlaceholder, kTeacherTarget, kPolicyFeedback };

struct PolicyConfig {
  std::size_t obs_dim = 2;
  std::size_t act_dim = 2;
  std::size_t embed_dim = 16;
  std::size_t horizon = 2;  // H, number of subgoal slots
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::vector<std::size_t> head_hidden{64, 64};
  std::vector<std::size_t> token_mixer_hidden{32, 32};
  std::vector<std::size_t> channel_mixer_hidden{32, 32};
  std::size_t n_blocks = 1;
  CausalMixerMode causal_mode = CausalMixerMode::kLearnable;
  GenerationOrder order = GenerationOrder::kReverse;

  std::size_t token_count() const { return horizon + 3; }

  void validate() const {
    if (obs_dim == 0 || act_dim == 0 || embed_dim == 0)
      throw ConfigError("policy config: dims must be positive");
  }
};

// Deterministic single-state generation output, used by evaluation and the
// subgoal visualizer. Latents and hiddens are plain values (no tape).
template <typename F>
struct Generation {
  std::vector<std::vector<F>> subgoals;  // index i-1 holds z_i, d values each
  std::vector<std::vector<F>> hidden;    // readout hidden per subgoal, d values
  std::vector<F> hidden_action;          // readout hidden at the action slot
  std::vector<F> action_mean;            // unclipped head mean
  std::vector<F> action;                 // executed action, clipped to bounds
};

template <typename F>
struct PolicyLogProbs {
  std::vector<Tensor<F>> logp_h;  // [B] per subgoal index i at position i-1
  Tensor<F> logp_l;               // [B]
  Tensor<F> joint;                // [B], left-to-right sum of the above
  // Per prediction step (generation order, then the action step), what each
  // of the H subgoal slots contained.
  std::vector<std::vector<ConditioningSource>> conditioning;
  std::vector<Tensor<F>> hidden_h;  // detached [B,d] readout per subgoal index
};

template <typename F>
struct Policy {
  PolicyConfig config;
  Mlp<F> state_encoder;             // obs -> d
  std::vector<Tensor<F>> initial_z;  // index i-1 holds the placeholder for z_i
  Tensor<F> initial_a;               // [d]
  MixerBackbone<F> backbone;
  Mlp<F> subgoal_head;   // d -> d, mean only
  Tensor<F> subgoal_log_std;  // [d]
  Mlp<F> action_head;    // d -> act_dim, mean only
  Tensor<F> action_log_std;   // [act_dim]
  bool training_started = false;

  static Policy init(const PolicyConfig& cfg, Pcg64& rng) {
    cfg.validate();
    Policy p;
    p.config = cfg;
    p.state_encoder = Mlp<F>::init(cfg.obs_dim, cfg.encoder_hidden, cfg.embed_dim, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
    auto init_token = [&] {
      auto t = Tensor<F>::zeros({cfg.embed_dim});
      for (std::size_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<F>(rng.uniform(-bound, bound));
      return t;
    };
    for (std::size_t i = 0; i < cfg.horizon; ++i) p.initial_z.push_back(init_token());
    p.initial_a = init_token();

    MixerConfig mc;
    mc.embed_dim = cfg.embed_dim;
    mc.token_count = cfg.token_count();
    mc.token_mixer_hidden = cfg.token_mixer_hidden;
    mc.channel_mixer_hidden = cfg.channel_mixer_hidden;
    mc.n_blocks = cfg.n_blocks;
    mc.causal_mode = cfg.causal_mode;
    p.backbone = MixerBackbone<F>::init(mc, rng);

    p.subgoal_head = Mlp<F>::init(cfg.embed_dim, cfg.head_hidden, cfg.embed_dim, rng);
    p.subgoal_log_std = Tensor<F>::zeros({cfg.embed_dim});
    p.action_head = Mlp<F>::init(cfg.embed_dim, cfg.head_hidden, cfg.act_dim, rng);
    p.action_log_std = Tensor<F>::zeros({cfg.act_dim});
    return p;
  }

  // Slot layout: 0 state, 1 goal, then subgoals farthest to nearest, then
  // the action slot. These indices never change during a run.
  std::size_t slot_state() const { return 0; }
  std::size_t slot_goal() const { return 1; }
  std::size_t slot_subgoal(std::size_t i) const {
    if (i < 1 || i > config.horizon)
      throw ShapeError("slot_subgoal: index " + std::to_string(i) + " outside 1.." +
                       std::to_string(config.horizon));
    return 2 + (config.horizon - i);
  }
  std::size_t slot_action() const { return config.horizon + 2; }

  void set_generation_order(GenerationOrder o) {
    if (training_started)
      throw ConfigError("generation order cannot change after training has started");
    config.order = o;
  }
  void mark_training_started() { training_started = true; }

  // Subgoal indices in the order they are predicted.
  std::vector<std::size_t> subgoal_step_sequence() const {
    std::vector<std::size_t> seq;
    if (config.order == GenerationOrder::kReverse) {
      for (std::size_t i = config.horizon; i >= 1; --i) seq.push_back(i);
    } else {
      for (std::size_t i = 1; i <= config.horizon; ++i) seq.push_back(i);
    }
    return seq;
  }

  Tensor<F> embed_state(const Tensor<F>& s) const { return state_encoder.forward(s); }

  static Tensor<F> broadcast_row(const Tensor<F>& row, std::size_t b) {
    return add(Tensor<F>::zeros({b, row.size()}), row);
  }

  // One backbone pass with the given subgoal slots filled; unfilled slots
  // carry their learnable initial tokens. Returns the hidden at readout_slot.
  Tensor<F> run_backbone(const Tensor<F>& e_o, const Tensor<F>& e_g,
                         const std::vector<const Tensor<F>*>& z_fill,
                         std::size_t readout_slot) const {
    if (z_fill.size() != config.horizon)
      throw ShapeError("run_backbone: fill list size " + std::to_string(z_fill.size()) +
                       " != horizon " + std::to_string(config.horizon));
    std::size_t b = e_o.shape()[0];
    std::vector<Tensor<F>> tokens;
    tokens.reserve(config.token_count());
    tokens.push_back(e_o);
    tokens.push_back(e_g);
    for (std::size_t pos = 0; pos < config.horizon; ++pos) {
      std::size_t i = config.horizon - pos;  // subgoal index living at this slot
      const Tensor<F>* zf = z_fill[i - 1];
      tokens.push_back(zf ? *zf : broadcast_row(initial_z[i - 1], b));
    }
    tokens.push_back(broadcast_row(initial_a, b));
    return select_token(backbone.forward(stack_tokens(tokens)), readout_slot);
  }

  // Autoregressive generation for one observation. In sample mode latents
  // and the action are drawn from the head Gaussians; otherwise the means
  // are used throughout. The executed action is clipped to +-action_bound.
  Generation<F> generate(const std::vector<F>& obs, const Tensor<F>& e_g_row, bool sample,
                         double action_bound, Pcg64* rng = nullptr) const {
    if (sample && rng == nullptr)
      throw ConfigError("generate: sample mode needs an rng");
    std::size_t h_count = config.horizon;
    auto s = Tensor<F>::from_vector({1, config.obs_dim}, obs);
    auto e_o = embed_state(s);
    auto e_g = reshape(e_g_row.detach(), {1, config.embed_dim});

    Generation<F> out;
    out.subgoals.resize(h_count);
    out.hidden.resize(h_count);
    std::vector<Tensor<F>> store;
    store.reserve(h_count);
    std::vector<const Tensor<F>*> fill(h_count, nullptr);

    for (std::size_t i : subgoal_step_sequence()) {
      auto h = run_backbone(e_o, e_g, fill, slot_subgoal(i));
      auto m = subgoal_head.forward(h);
      if (detail::has_nan(m.data(), m.size()))
        throw NumericError("generate: NaN in subgoal head at step i=" + std::to_string(i));
      std::vector<F> z = m.values();
      if (sample) {
        for (std::size_t j = 0; j < z.size(); ++j) {
          F c = std::clamp(subgoal_log_std.data()[j], F(-5), F(2));
          z[j] += std::exp(c) * static_cast<F>(rng->next_normal());
        }
      }
      out.subgoals[i - 1] = z;
      out.hidden[i - 1] = h.values();
      store.push_back(Tensor<F>::from_vector({1, config.embed_dim}, std::move(z)));
      fill[i - 1] = &store.back();
    }

    auto h_a = run_backbone(e_o, e_g, fill, slot_action());
    auto am = action_head.forward(h_a);
    if (detail::has_nan(am.data(), am.size()))
      throw NumericError("generate: NaN in action head");
    out.hidden_action = h_a.values();
    out.action_mean = am.values();
    out.action = out.action_mean;
    if (sample) {
      for (std::size_t j = 0; j < out.action.size(); ++j) {
        F c = std::clamp(action_log_std.data()[j], F(-5), F(2));
        out.action[j] += std::exp(c) * static_cast<F>(rng->next_normal());
      }
    }
    F ab = static_cast<F>(action_bound);
    for (F& a : out.action) a = std::clamp(a, -ab, ab);
    return out;
  }

  // Batched log-likelihoods for training. targets[i-1] is the goal-encoder
  // embedding of the dataset subgoal state s_i; targets and e_g are detached
  // here so the policy loss cannot reach the value parameters. With teacher
  // forcing off, the policy's own mean predictions fill the conditioning
  // slots (and stay on the tape), while the likelihood targets are still the
  // dataset embeddings.
  PolicyLogProbs<F> forward_logprobs(const Tensor<F>& s, const Tensor<F>& e_g_in,
                                     const std::vector<Tensor<F>>& targets,
                                     const Tensor<F>& actions, bool teacher_forcing) const {
    std::size_t h_count = config.horizon;
    if (targets.size() != h_count)
      throw ConfigError("forward_logprobs: got " + std::to_string(targets.size()) +
                        " subgoal targets, config horizon is " + std::to_string(h_count));
    std::size_t b = s.shape()[0];
    auto e_o = embed_state(s);
    auto e_g = e_g_in.detach();

    std::vector<Tensor<F>> tgt;
    tgt.reserve(h_count);
    for (const auto& t : targets) {
      if (t.shape() != Shape{b, config.embed_dim})
        throw ShapeError("forward_logprobs: target shape " + shape_str(t.shape()));
      tgt.push_back(t.detach());
    }

    PolicyLogProbs<F> out;
    out.logp_h.resize(h_count, Tensor<F>::zeros({1}));
    out.hidden_h.resize(h_count, Tensor<F>::zeros({1}));
    std::vector<Tensor<F>> cond_store;
    cond_store.reserve(h_count);
    std::vector<const Tensor<F>*> fill(h_count, nullptr);
    std::vector<ConditioningSource> slot_state_now(h_count, ConditioningSource::kPlaceholder);

    for (std::size_t i : subgoal_step_sequence()) {
      out.conditioning.push_back(slot_state_now);
      auto h = run_backbone(e_o, e_g, fill, slot_subgoal(i));
      out.hidden_h[i - 1] = h.detach();
      auto m = subgoal_head.forward(h);
      if (detail::has_nan(m.data(), m.size()))
        throw NumericError("forward_logprobs: NaN in subgoal head at step i=" + std::to_string(i));
      out.logp_h[i - 1] = gaussian_log_prob(m, subgoal_log_std, tgt[i - 1]);
      if (teacher_forcing) {
        cond_store.push_back(tgt[i - 1]);
        slot_state_now[i - 1] = ConditioningSource::kTeacherTarget;
      } else {
        cond_store.push_back(m);
        slot_state_now[i - 1] = ConditioningSource::kPolicyFeedback;
      }
      fill[i - 1] = &cond_store.back();
    }

    out.conditioning.push_back(slot_state_now);
    auto h_a = run_backbone(e_o, e_g, fill, slot_action());
    auto am = action_head.forward(h_a);
    if (detail::has_nan(am.data(), am.size()))
      throw NumericError("forward_logprobs: NaN in action head");
    out.logp_l = gaussian_log_prob(am, action_log_std, actions.detach());

    if (h_count == 0) {
      out.joint = out.logp_l;
    } else {
      Tensor<F> acc = out.logp_h[0];
      for (std::size_t i = 1; i < h_count; ++i) acc = add(acc, out.logp_h[i]);
      out.joint = add(acc, out.logp_l);
    }
    return out;
  }

  void collect(NamedParams<F>& out) {
    state_encoder.collect("policy/state_encoder", out);
    for (std::size_t i = 0; i < initial_z.size(); ++i)
      out.emplace_back("policy/initial_z" + std::to_string(i + 1), initial_z[i]);
    out.emplace_back("policy/initial_action", initial_a);
    backbone.collect("policy/backbone", out);
    subgoal_head.collect("policy/subgoal_head", out);
    out.emplace_back("policy/subgoal_log_std", subgoal_log_std);
    action_head.collect("policy/action_head", out);
    out.emplace_back("policy/action_log_std", action_log_std);
  }
};

}  // namespace chaingoal
