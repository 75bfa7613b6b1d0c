#pragma once

// Modified MLP-Mixer block. Relative to the vanilla Mixer, the token-mixing
// MLP's output runs through a lower-triangular mixing matrix before the
// residual add, so each token position aggregates mixed features only from
// itself and earlier positions. One block definition is shared by every
// autoregressive prediction step; causality across steps comes from the
// input assembly (later slots hold fixed placeholder tokens until they are
// generated), and the triangular mixer keeps the per-position aggregation
// ordered on top of that.

#include <cstddef>
#include <string>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/mlp.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"

namespace chaingoal {

enum class CausalMixerMode { kLearnable, kFixedAverage, kNone };

inline std::string to_string(CausalMixerMode m) {
  switch (m) {
    case CausalMixerMode::kLearnable: return "learnable";
    case CausalMixerMode::kFixedAverage: return "fixed_average";
    case CausalMixerMode::kNone: return "none";
  }
  return "?";
}

inline CausalMixerMode causal_mixer_mode_from_string(const std::string& s) {
  if (s == "learnable") return CausalMixerMode::kLearnable;
  if (s == "fixed_average") return CausalMixerMode::kFixedAverage;
  if (s == "none") return CausalMixerMode::kNone;
  throw ConfigError("unknown causal_mixer_mode \"" + s + "\"");
}

struct MixerConfig {
  std::size_t embed_dim = 16;
  std::size_t token_count = 0;
  std::vector<std::size_t> token_mixer_hidden{32, 32};
  std::vector<std::size_t> channel_mixer_hidden{32, 32};
  std::size_t n_blocks = 1;
  CausalMixerMode causal_mode = CausalMixerMode::kLearnable;
};

// The triangular matrix is stored packed (row m holds its m+1 coefficients),
// so entries above the diagonal do not exist as storage and no optimizer
// step can create them. Initialized to identity; the fixed_average variant
// fills row m with 1/(m+1) and is excluded from the trainable set.
template <typename F>
struct CausalMixer {
  std::size_t token_count = 0;
  CausalMixerMode mode = CausalMixerMode::kLearnable;
  Tensor<F> packed;

  static CausalMixer init(std::size_t t, CausalMixerMode mode) {
    CausalMixer cm;
    cm.token_count = t;
    cm.mode = mode;
    cm.packed = Tensor<F>::zeros({t * (t + 1) / 2});
    for (std::size_t m = 0; m < t; ++m) {
      F* row = cm.packed.data() + m * (m + 1) / 2;
      if (mode == CausalMixerMode::kFixedAverage) {
        for (std::size_t s = 0; s <= m; ++s) row[s] = F(1) / F(m + 1);
      } else {
        row[m] = F(1);
      }
    }
    return cm;
  }

  bool trainable() const { return mode == CausalMixerMode::kLearnable; }

  // Full T x T matrix, zeros above the diagonal.
  std::vector<F> materialize() const {
    std::vector<F> full(token_count * token_count, F(0));
    for (std::size_t m = 0; m < token_count; ++m) {
      const F* row = packed.data() + m * (m + 1) / 2;
      for (std::size_t s = 0; s <= m; ++s) full[m * token_count + s] = row[s];
    }
    return full;
  }

  Tensor<F> apply(const Tensor<F>& x) const {
    if (mode == CausalMixerMode::kNone) return x;
    return causal_mix(x, packed);
  }

  void collect(const std::string& prefix, NamedParams<F>& out) {
    if (trainable()) out.emplace_back(prefix + "/packed", packed);
  }
};

template <typename F>
struct LayerNormParams {
  Tensor<F> gain;
  Tensor<F> bias;

  static LayerNormParams init(std::size_t d) {
    LayerNormParams ln;
    ln.gain = Tensor<F>::full({d}, F(1));
    ln.bias = Tensor<F>::zeros({d});
    return ln;
  }

  Tensor<F> forward(const Tensor<F>& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, NamedParams<F>& out) {
    out.emplace_back(prefix + "/gain", gain);
    out.emplace_back(prefix + "/bias", bias);
  }
};

template <typename F>
struct MixerBlock {
  std::size_t token_count = 0;
  std::size_t embed_dim = 0;
  LayerNormParams<F> ln_token;
  Mlp<F> token_mlp;  // T -> hidden -> T, applied per channel
  CausalMixer<F> mixer;
  LayerNormParams<F> ln_channel;
  Mlp<F> channel_mlp;  // d -> hidden -> d, applied per token

  static MixerBlock init(const MixerConfig& cfg, Pcg64& rng) {
    MixerBlock b;
    b.token_count = cfg.token_count;
    b.embed_dim = cfg.embed_dim;
    b.ln_token = LayerNormParams<F>::init(cfg.embed_dim);
    b.token_mlp = Mlp<F>::init(cfg.token_count, cfg.token_mixer_hidden, cfg.token_count, rng);
    b.mixer = CausalMixer<F>::init(cfg.token_count, cfg.causal_mode);
    b.ln_channel = LayerNormParams<F>::init(cfg.embed_dim);
    b.channel_mlp = Mlp<F>::init(cfg.embed_dim, cfg.channel_mixer_hidden, cfg.embed_dim, rng);
    return b;
  }

  // Token mixing: normalize each token vector, flip to channels-major so the
  // MLP runs along the token axis, mix, flip back.
  Tensor<F> token_mix(const Tensor<F>& x) const {
    std::size_t n = x.shape()[0];
    auto normed = ln_token.forward(x);
    auto flipped = transpose_12(normed);  // [N, d, T]
    auto flat = reshape(flipped, {n * embed_dim, token_count});
    auto mixed = token_mlp.forward(flat);
    auto unflat = reshape(mixed, {n, embed_dim, token_count});
    return transpose_12(unflat);  // [N, T, d]
  }

  Tensor<F> channel_mix(const Tensor<F>& x) const {
    std::size_t n = x.shape()[0];
    auto normed = ln_channel.forward(x);
    auto flat = reshape(normed, {n * token_count, embed_dim});
    auto mixed = channel_mlp.forward(flat);
    return reshape(mixed, {n, token_count, embed_dim});
  }

  // x: [N, T, d]. Token-mix, triangular mix, residual with the block input,
  // channel-mix, residual.
  Tensor<F> forward(const Tensor<F>& x) const {
    auto u = mixer.apply(token_mix(x));
    auto v = add(x, u);
    return add(v, channel_mix(v));
  }

  void collect(const std::string& prefix, NamedParams<F>& out) {
    ln_token.collect(prefix + "/ln_token", out);
    token_mlp.collect(prefix + "/token_mlp", out);
    mixer.collect(prefix + "/causal", out);
    ln_channel.collect(prefix + "/ln_channel", out);
    channel_mlp.collect(prefix + "/channel_mlp", out);
  }
};

template <typename F>
struct MixerBackbone {
  MixerConfig config;
  std::vector<MixerBlock<F>> blocks;

  static MixerBackbone init(const MixerConfig& cfg, Pcg64& rng) {
    if (cfg.token_count == 0) throw ConfigError("MixerBackbone: token_count must be set");
    MixerBackbone bb;
    bb.config = cfg;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i)
      bb.blocks.push_back(MixerBlock<F>::init(cfg, rng));
    return bb;
  }

  Tensor<F> forward(const Tensor<F>& x) const {
    Tensor<F> h = x;
    for (const auto& b : blocks) h = b.forward(h);
    return h;
  }

  void collect(const std::string& prefix, NamedParams<F>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + "/block" + std::to_string(i), out);
  }
};

}  // namespace chaingoal
