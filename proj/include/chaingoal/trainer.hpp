#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/common.hpp"
#include "chaingoal/dataset.hpp"
#include "chaingoal/maze.hpp"
#include "chaingoal/mlp.hpp"
#include "chaingoal/objectives.hpp"
#include "chaingoal/policy.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/value.hpp"

namespace chaingoal {

// Mixture over relabeled goals for value batches: the state itself (a done
// transition), a geometrically distributed future state from the same
// trajectory, or any state in the dataset.
struct GoalSampleSpec {
  double p_current = 0.2;
  double p_future = 0.5;
  double p_random = 0.3;

  void validate() const {
    if (!(p_current >= 0.0) || !(p_future >= 0.0) || !(p_random >= 0.0))
      throw ConfigError("goal sample probabilities must be non-negative");
    double sum = p_current + p_future + p_random;
    if (std::abs(sum - 1.0) > 1e-12)
      throw ConfigError("goal sample probabilities sum to " + std::to_string(sum) +
                        ", expected 1");
  }
};

// Counters filled by sample_value_batch so the goal mixture and the raw
// (pre-truncation) geometric horizon can be checked empirically.
struct SampleStats {
  std::size_t n_current = 0;
  std::size_t n_future = 0;
  std::size_t n_random = 0;
  double sum_raw_delta = 0.0;
  std::size_t n_delta = 0;
};

struct TrainConfig {
  // Model dimensions, shared by policy and value nets.
  std::size_t embed_dim = 16;
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::vector<std::size_t> head_hidden{64, 64};
  std::vector<std::size_t> value_hidden{64, 64};
  std::vector<std::size_t> token_mixer_hidden{32, 32};
  std::vector<std::size_t> channel_mixer_hidden{32, 32};
  std::size_t n_blocks = 1;

  // Hierarchy.
  std::size_t horizon = 1;  // H
  std::size_t k = 10;       // dataset steps between consecutive subgoal targets
  bool teacher_forcing = true;
  GenerationOrder generation_order = GenerationOrder::kReverse;
  CausalMixerMode causal_mode = CausalMixerMode::kLearnable;

  // Optimization.
  std::size_t n_steps = 50000;
  std::size_t batch_size = 256;
  double lr = 3e-4;
  double gamma = 0.99;
  double tau = 0.7;
  double target_sync_rate = 0.005;
  std::size_t value_warmup_steps = 0;
  LossWeights weights;
  GoalSampleSpec goal_sample;

  // Auxiliary subgoal decoder (for visualization); reads detached hidden
  // states only, so it never steers the policy or value parameters.
  bool decoder_enabled = true;
  double decoder_weight = 1.0;
  std::vector<std::size_t> decoder_hidden{64, 64};

  // Schedule.
  std::size_t log_interval = 100;
  std::size_t eval_interval = 5000;
  std::size_t checkpoint_interval = 10000;
  std::size_t eval_episodes_per_pair = 10;

  std::uint64_t seed = 1;

  void validate() const {
    if (k == 0) throw ConfigError("k must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(gamma > 0.0 && gamma < 1.0))
      throw ConfigError("gamma must lie in (0, 1), got " + std::to_string(gamma));
    if (log_interval == 0 || eval_interval == 0 || checkpoint_interval == 0)
      throw ConfigError("log, eval and checkpoint intervals must be positive");
    if (eval_episodes_per_pair == 0)
      throw ConfigError("eval_episodes_per_pair must be positive");
    if (!(decoder_weight >= 0.0)) throw ConfigError("decoder_weight must be non-negative");
    weights.validate();
    goal_sample.validate();
  }

  PolicyConfig policy_config(std::size_t obs_dim, std::size_t act_dim) const {
    PolicyConfig pc;
    pc.obs_dim = obs_dim;
    pc.act_dim = act_dim;
    pc.embed_dim = embed_dim;
    pc.horizon = horizon;
    pc.encoder_hidden = encoder_hidden;
    pc.head_hidden = head_hidden;
    pc.token_mixer_hidden = token_mixer_hidden;
    pc.channel_mixer_hidden = channel_mixer_hidden;
    pc.n_blocks = n_blocks;
    pc.causal_mode = causal_mode;
    pc.order = generation_order;
    return pc;
  }
};

template <typename F>
struct PolicyBatch {
  Tensor<F> s, s_next, a, g;        // [B, obs] / [B, act]
  std::vector<Tensor<F>> sub_obs;   // index i-1 holds s_{min(t + i*k, T)}, [B, obs]
};

template <typename F>
struct ModelBundle {
  Policy<F> policy;
  ValueFunction<F> value_fn;
  Mlp<F> decoder;  // embed -> obs, for subgoal visualization
};

// Policy, value function and decoder built from the run seed's dedicated
// init streams; the trainer and the checkpoint loader share this so a
// restored model always has the exact parameter layout of a fresh one.
template <typename F>
ModelBundle<F> init_models(const TrainConfig& config, std::size_t obs_dim, std::size_t act_dim) {
  ModelBundle<F> b;
  Pcg64 policy_init(config.seed, rng_stream::kPolicyInit);
  b.policy = Policy<F>::init(config.policy_config(obs_dim, act_dim), policy_init);
  Pcg64 value_init(config.seed, rng_stream::kValueInit);
  b.value_fn = ValueFunction<F>::init(obs_dim, config.embed_dim, config.encoder_hidden,
                                      config.value_hidden, value_init);
  Pcg64 decoder_init(config.seed, rng_stream::kDecoderInit);
  b.decoder = Mlp<F>::init(config.embed_dim, config.decoder_hidden, obs_dim, decoder_init);
  return b;
}

struct EvalResult {
  std::vector<double> per_pair;  // success percentage per eval pair
  double mean = 0.0;
};

// Deterministic evaluation: mean-mode generation from each eval pair's
// start, success when the agent reaches the goal radius before the episode
// cap. Percentages in [0, 100].
template <typename F>
EvalResult evaluate(const Policy<F>& policy, const ValueFunction<F>& vf, const MazeSpec& spec,
                    std::size_t episodes_per_pair) {
  if (spec.eval_pairs.empty()) throw DataError("evaluate: maze has no eval pairs");
  EvalResult out;
  for (const EvalPair& pair : spec.eval_pairs) {
    auto g = Tensor<F>::from_vector(
        {1, 2}, {static_cast<F>(pair.gx), static_cast<F>(pair.gy)});
    auto e_g = vf.embed_goal(g);
    std::size_t successes = 0;
    for (std::size_t ep = 0; ep < episodes_per_pair; ++ep) {
      double x = pair.sx, y = pair.sy;
      for (std::size_t t = 0; t < spec.max_episode_steps; ++t) {
        auto gen = policy.generate({static_cast<F>(x), static_cast<F>(y)}, e_g,
                                   /*sample=*/false, spec.action_bound);
        StepResult res = step(spec, x, y, gen.action[0], gen.action[1], pair.gx, pair.gy);
        x = res.x;
        y = res.y;
        if (res.at_goal) {
          ++successes;
          break;
        }
      }
    }
    out.per_pair.push_back(100.0 * static_cast<double>(successes) /
                           static_cast<double>(episodes_per_pair));
  }
  double sum = 0.0;
  for (double p : out.per_pair) sum += p;
  out.mean = sum / static_cast<double>(out.per_pair.size());
  return out;
}

struct StepMetrics {
  std::size_t step = 0;
  double value_loss = 0.0;
  bool policy_ran = false;  // false during value warmup
  std::vector<double> j_h;
  double j_l = 0.0;
  double mean_w_h = 0.0;
  double mean_w_l = 0.0;
  double decoder_loss = 0.0;
};

// Optional sinks for run(): each finished CSV line (header included) and
// each checkpoint request. File handling stays with the caller.
struct TrainHooks {
  std::function<void(const std::string&)> on_row;
  std::function<void(std::size_t step)> on_checkpoint;
};

struct TrainSummary {
  std::string metrics_csv;  // header plus every row, newline-terminated
  std::size_t rows = 0;     // excludes the header
  std::vector<std::pair<std::size_t, EvalResult>> evals;
  EvalResult final_eval;
};

template <typename F>
class Trainer {
 public:
  static Trainer init(const TrainConfig& config, const MazeSpec& maze, Dataset dataset) {
    config.validate();
    if (dataset.trajectories.empty()) throw DataError("trainer: dataset has no trajectories");
    Trainer t(config, maze, std::move(dataset));
    if (t.dataset_.total_transitions() < config.batch_size)
      throw ConfigError("trainer: batch_size " + std::to_string(config.batch_size) +
                        " exceeds the dataset's " +
                        std::to_string(t.dataset_.total_transitions()) + " transitions");
    return t;
  }

  const TrainConfig& config() const { return config_; }
  const MazeSpec& maze() const { return maze_; }
  const Dataset& dataset() const { return dataset_; }
  Policy<F>& policy() { return policy_; }
  const Policy<F>& policy() const { return policy_; }
  ValueFunction<F>& value_fn() { return value_fn_; }
  const ValueFunction<F>& value_fn() const { return value_fn_; }
  Mlp<F>& decoder() { return decoder_; }
  NamedParams<F>& policy_params() { return policy_params_; }
  NamedParams<F>& value_params() { return value_params_; }
  NamedParams<F>& decoder_params() { return decoder_params_; }
  std::size_t step_count() const { return step_count_; }

  ValueBatch<F> sample_value_batch(SampleStats* stats = nullptr) {
    const GoalSampleSpec& gs = config_.goal_sample;
    std::size_t b = config_.batch_size;
    std::vector<F> s, s_next, g;
    std::vector<F> r(b);
    std::vector<std::uint8_t> done(b);
    s.reserve(b * 2);
    s_next.reserve(b * 2);
    g.reserve(b * 2);
    for (std::size_t row = 0; row < b; ++row) {
      auto [traj, t] = draw_transition(value_rng_);
      const Trajectory& tr = dataset_.trajectories[traj];
      double u = value_rng_.next_double();
      double gx, gy;
      if (u < gs.p_current) {
        gx = state_x(tr, t);
        gy = state_y(tr, t);
        if (stats) ++stats->n_current;
      } else if (u < gs.p_current + gs.p_future) {
        std::uint64_t delta = value_rng_.next_geometric(config_.gamma);
        if (stats) {
          stats->sum_raw_delta += static_cast<double>(delta);
          ++stats->n_delta;
        }
        std::size_t idx = std::min(t + static_cast<std::size_t>(delta), tr.steps);
        gx = state_x(tr, idx);
        gy = state_y(tr, idx);
        if (stats) ++stats->n_future;
      } else {
        auto [gtraj, gidx] = draw_state(value_rng_);
        const Trajectory& gt = dataset_.trajectories[gtraj];
        gx = state_x(gt, gidx);
        gy = state_y(gt, gidx);
        if (stats) ++stats->n_random;
      }
      double sx = state_x(tr, t), sy = state_y(tr, t);
      double dx = sx - gx, dy = sy - gy;
      bool at_goal = std::sqrt(dx * dx + dy * dy) <= maze_.success_radius;
      s.push_back(static_cast<F>(sx));
      s.push_back(static_cast<F>(sy));
      s_next.push_back(static_cast<F>(state_x(tr, t + 1)));
      s_next.push_back(static_cast<F>(state_y(tr, t + 1)));
      g.push_back(static_cast<F>(gx));
      g.push_back(static_cast<F>(gy));
      done[row] = at_goal ? 1 : 0;
      r[row] = at_goal ? F(0) : F(-1);
    }
    ValueBatch<F> batch;
    batch.s = Tensor<F>::from_vector({b, 2}, std::move(s));
    batch.s_next = Tensor<F>::from_vector({b, 2}, std::move(s_next));
    batch.g = Tensor<F>::from_vector({b, 2}, std::move(g));
    batch.r = std::move(r);
    batch.done = std::move(done);
    return batch;
  }

  PolicyBatch<F> sample_policy_batch() {
    std::size_t b = config_.batch_size;
    std::size_t h_count = config_.horizon;
    std::vector<F> s, s_next, a, g;
    std::vector<std::vector<F>> sub(h_count);
    s.reserve(b * 2);
    s_next.reserve(b * 2);
    a.reserve(b * 2);
    g.reserve(b * 2);
    for (auto& v : sub) v.reserve(b * 2);
    for (std::size_t row = 0; row < b; ++row) {
      auto [traj, t] = draw_transition(policy_rng_);
      const Trajectory& tr = dataset_.trajectories[traj];
      s.push_back(static_cast<F>(state_x(tr, t)));
      s.push_back(static_cast<F>(state_y(tr, t)));
      s_next.push_back(static_cast<F>(state_x(tr, t + 1)));
      s_next.push_back(static_cast<F>(state_y(tr, t + 1)));
      a.push_back(static_cast<F>(tr.actions[t * 2]));
      a.push_back(static_cast<F>(tr.actions[t * 2 + 1]));
      std::size_t g_idx = t + static_cast<std::size_t>(policy_rng_.next_below(tr.steps - t + 1));
      g.push_back(static_cast<F>(state_x(tr, g_idx)));
      g.push_back(static_cast<F>(state_y(tr, g_idx)));
      for (std::size_t i = 1; i <= h_count; ++i) {
        std::size_t idx = std::min(t + i * config_.k, tr.steps);
        sub[i - 1].push_back(static_cast<F>(state_x(tr, idx)));
        sub[i - 1].push_back(static_cast<F>(state_y(tr, idx)));
      }
    }
    PolicyBatch<F> batch;
    batch.s = Tensor<F>::from_vector({b, 2}, std::move(s));
    batch.s_next = Tensor<F>::from_vector({b, 2}, std::move(s_next));
    batch.a = Tensor<F>::from_vector({b, 2}, std::move(a));
    batch.g = Tensor<F>::from_vector({b, 2}, std::move(g));
    for (auto& v : sub) batch.sub_obs.push_back(Tensor<F>::from_vector({b, 2}, std::move(v)));
    return batch;
  }

  // One full step: value update (sample, expectile TD loss, Adam, target
  // sync), then policy update (sample, advantages outside any tape, AWR
  // loss, Adam). The policy half is skipped during value warmup.
  StepMetrics train_step(SampleStats* stats = nullptr) {
    StepMetrics m;
    m.step = step_count_ + 1;
    {
      ValueBatch<F> vb = sample_value_batch(stats);
      Tape<F> tape;
      for (auto& [name, p] : value_params_) tape.watch(p);
      auto loss = value_fn_.loss(vb, config_.tau, config_.gamma);
      m.value_loss = static_cast<double>(loss.item());
      tape.backward(loss);
      adam_step(value_params_, value_opt_, "value");
      tape.release();
      value_fn_.target_sync(config_.target_sync_rate);
    }
    if (m.step > config_.value_warmup_steps) {
      m.policy_ran = true;
      PolicyBatch<F> pb = sample_policy_batch();
      std::size_t h_count = config_.horizon;

      auto e_g = value_fn_.embed_goal(pb.g);
      std::vector<Tensor<F>> targets;
      for (std::size_t i = 0; i < h_count; ++i)
        targets.push_back(value_fn_.embed_goal(pb.sub_obs[i]));
      // With no subgoals the low level is conditioned on the goal itself.
      const Tensor<F>& z1 = h_count > 0 ? targets[0] : e_g;
      std::vector<std::vector<F>> adv_h;
      for (std::size_t i = 0; i < h_count; ++i)
        adv_h.push_back(high_advantages(value_fn_, pb.s, pb.sub_obs[i], e_g));
      auto adv_l = low_advantages(value_fn_, pb.s, pb.s_next, z1);

      policy_.mark_training_started();
      Tape<F> tape;
      for (auto& [name, p] : policy_params_) tape.watch(p);
      bool train_decoder = config_.decoder_enabled && h_count > 0;
      if (train_decoder)
        for (auto& [name, p] : decoder_params_) tape.watch(p);

      auto logp = policy_.forward_logprobs(pb.s, e_g, targets, pb.a, config_.teacher_forcing);
      check_conditioning(logp);
      auto res = total_loss(logp, adv_h, adv_l, config_.weights);
      m.j_h = res.j_h;
      m.j_l = res.j_l;
      m.mean_w_l = res.mean_w_l;
      if (h_count > 0) {
        double sum = 0.0;
        for (double w : res.mean_w_h) sum += w;
        m.mean_w_h = sum / static_cast<double>(h_count);
      }

      Tensor<F> full = res.loss;
      if (train_decoder) {
        Tensor<F> dec;
        for (std::size_t i = 0; i < h_count; ++i) {
          auto diff = sub(decoder_.forward(logp.hidden_h[i]), pb.sub_obs[i].detach());
          auto term = mean(mul(diff, diff));
          dec = i == 0 ? term : add(dec, term);
        }
        dec = mul_scalar(dec, F(1) / static_cast<F>(h_count));
        m.decoder_loss = static_cast<double>(dec.item());
        full = add(full, mul_scalar(dec, static_cast<F>(config_.decoder_weight)));
      }

      tape.backward(full);
      adam_step(policy_params_, policy_opt_, "policy");
      if (train_decoder) adam_step(decoder_params_, decoder_opt_, "decoder");
      tape.release();
    }
    ++step_count_;
    return m;
  }

  EvalResult run_eval() const {
    return evaluate(policy_, value_fn_, maze_, config_.eval_episodes_per_pair);
  }

  // Full training loop. Emits one metrics row per log_interval steps and one
  // eval row (success only) per eval_interval steps; a final evaluation is
  // run regardless so callers always get one.
  TrainSummary run(const TrainHooks& hooks = {}) {
    TrainSummary summary;
    auto emit = [&](const std::string& line) {
      summary.metrics_csv += line;
      summary.metrics_csv += '\n';
      if (hooks.on_row) hooks.on_row(line);
    };
    emit(header());
    bool evaluated_at_end = false;
    try {
      for (std::size_t i = 0; i < config_.n_steps; ++i) {
        StepMetrics m = train_step();
        if (m.step % config_.log_interval == 0) {
          emit(metrics_row(m));
          ++summary.rows;
        }
        if (m.step % config_.eval_interval == 0) {
          EvalResult ev = run_eval();
          emit(eval_row(m.step, ev));
          ++summary.rows;
          summary.evals.emplace_back(m.step, ev);
          summary.final_eval = ev;
          evaluated_at_end = m.step == config_.n_steps;
        }
        if (hooks.on_checkpoint &&
            (m.step % config_.checkpoint_interval == 0 || m.step == config_.n_steps))
          hooks.on_checkpoint(m.step);
      }
    } catch (const NumericError& e) {
      throw NumericError("training aborted at step " + std::to_string(step_count_ + 1) +
                         " (last checkpoint retained): " + e.what());
    }
    if (!evaluated_at_end) summary.final_eval = run_eval();
    return summary;
  }

  std::string header() const {
    std::string h = "step,value_loss";
    for (std::size_t i = 1; i <= config_.horizon; ++i) h += ",j_h_" + std::to_string(i);
    h += ",j_l,mean_awr_weight_h,mean_awr_weight_l,success_rate";
    return h;
  }

  std::string metrics_row(const StepMetrics& m) const {
    std::string row = std::to_string(m.step) + "," + fmt(m.value_loss);
    for (std::size_t i = 0; i < config_.horizon; ++i)
      row += "," + (m.policy_ran ? fmt(m.j_h[i]) : std::string());
    row += "," + (m.policy_ran ? fmt(m.j_l) : std::string());
    row += "," + (m.policy_ran && config_.horizon > 0 ? fmt(m.mean_w_h) : std::string());
    row += "," + (m.policy_ran ? fmt(m.mean_w_l) : std::string());
    row += ",";
    return row;
  }

  std::string eval_row(std::size_t step, const EvalResult& ev) const {
    std::string row = std::to_string(step) + ",";
    for (std::size_t i = 0; i < config_.horizon; ++i) row += ",";
    row += ",,,,";
    row += fmt(ev.mean);
    return row;
  }

 private:
  Trainer(const TrainConfig& config, const MazeSpec& maze, Dataset dataset)
      : config_(config),
        maze_(maze),
        dataset_(std::move(dataset)),
        value_rng_(config.seed, rng_stream::kValueSampling),
        policy_rng_(config.seed, rng_stream::kPolicySampling) {
    if (dataset_.obs_dim != 2 || dataset_.act_dim != 2)
      throw DataError("trainer: expected 2-d observations and actions, got obs_dim=" +
                      std::to_string(dataset_.obs_dim) +
                      " act_dim=" + std::to_string(dataset_.act_dim));
    std::size_t skipped = 0;
    for (const Trajectory& tr : dataset_.trajectories) {
      if (tr.steps == 0) ++skipped;
      transitions_before_.push_back(n_transitions_);
      states_before_.push_back(n_states_);
      n_transitions_ += tr.steps;
      n_states_ += tr.steps + 1;
    }
    if (skipped > 0)
      std::fprintf(stderr, "trainer: %zu trajectories have fewer than 2 states and are skipped\n",
                   skipped);
    if (n_transitions_ == 0) throw DataError("trainer: dataset has no transitions");

    ModelBundle<F> bundle = init_models<F>(config_, 2, 2);
    policy_ = std::move(bundle.policy);
    value_fn_ = std::move(bundle.value_fn);
    decoder_ = std::move(bundle.decoder);

    policy_.collect(policy_params_);
    value_fn_.collect(value_params_);
    decoder_.collect("decoder", decoder_params_);
    AdamConfig<F> ac;
    ac.lr = static_cast<F>(config_.lr);
    policy_opt_ = AdamState<F>::init(policy_params_, ac);
    value_opt_ = AdamState<F>::init(value_params_, ac);
    decoder_opt_ = AdamState<F>::init(decoder_params_, ac);
  }

  static double state_x(const Trajectory& tr, std::size_t idx) { return tr.states[idx * 2]; }
  static double state_y(const Trajectory& tr, std::size_t idx) { return tr.states[idx * 2 + 1]; }

  // Uniform over all (s_t, s_{t+1}) transitions in the dataset.
  std::pair<std::size_t, std::size_t> draw_transition(Pcg64& rng) const {
    std::size_t u = rng.next_below(n_transitions_);
    return locate(transitions_before_, u);
  }

  // Uniform over all states, including trajectory endpoints.
  std::pair<std::size_t, std::size_t> draw_state(Pcg64& rng) const {
    std::size_t u = rng.next_below(n_states_);
    return locate(states_before_, u);
  }

  static std::pair<std::size_t, std::size_t> locate(const std::vector<std::size_t>& before,
                                                    std::size_t u) {
    auto it = std::upper_bound(before.begin(), before.end(), u);
    std::size_t traj = static_cast<std::size_t>(it - before.begin()) - 1;
    return {traj, u - before[traj]};
  }

  void check_conditioning(const PolicyLogProbs<F>& logp) const {
    if (!config_.teacher_forcing) return;
    for (const auto& step : logp.conditioning)
      for (ConditioningSource src : step)
        if (src == ConditioningSource::kPolicyFeedback)
          throw NumericError("teacher forcing is on but a slot held policy feedback");
  }

  static std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
  }

  TrainConfig config_;
  MazeSpec maze_;
  Dataset dataset_;
  Pcg64 value_rng_;
  Pcg64 policy_rng_;
  Policy<F> policy_;
  ValueFunction<F> value_fn_;
  Mlp<F> decoder_;
  NamedParams<F> policy_params_, value_params_, decoder_params_;
  AdamState<F> policy_opt_, value_opt_, decoder_opt_;
  std::vector<std::size_t> transitions_before_, states_before_;
  std::size_t n_transitions_ = 0;
  std::size_t n_states_ = 0;
  std::size_t step_count_ = 0;
};

}  // namespace chaingoal
