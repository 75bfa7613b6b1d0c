#include <gtest/gtest.h>

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "chaingoal/objectives.hpp"
#include "chaingoal/policy.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/value.hpp"
#include "fd_check.hpp"

using chaingoal::ConfigError;
using chaingoal::LossWeights;
using chaingoal::NamedParams;
using chaingoal::NumericError;
using chaingoal::Pcg64;
using chaingoal::Policy;
using chaingoal::PolicyConfig;
using chaingoal::PolicyLogProbs;
using chaingoal::Tape;
using chaingoal::Tensor;
using chaingoal::ValueFunction;

namespace {

PolicyConfig small_config(std::size_t horizon) {
  PolicyConfig cfg;
  cfg.obs_dim = 2;
  cfg.act_dim = 2;
  cfg.embed_dim = 4;
  cfg.horizon = horizon;
  cfg.encoder_hidden = {8};
  cfg.head_hidden = {8};
  cfg.token_mixer_hidden = {6, 6};
  cfg.channel_mixer_hidden = {6};
  return cfg;
}

// Hand-built log-prob container, for tests that do not need a real policy.
PolicyLogProbs<double> fake_logprobs(const std::vector<std::vector<double>>& lp_h,
                                     const std::vector<double>& lp_l) {
  PolicyLogProbs<double> out;
  for (const auto& row : lp_h)
    out.logp_h.push_back(Tensor<double>::from_vector({row.size()}, row));
  out.logp_l = Tensor<double>::from_vector({lp_l.size()}, lp_l);
  out.joint = out.logp_l;
  return out;
}

// Value function whose output is exactly the first observation coordinate,
// making advantages trivially computable by hand.
ValueFunction<double> coordinate_value_fn() {
  Pcg64 rng(61, 0);
  auto vf = ValueFunction<double>::init(2, 4, {}, {}, rng);
  for (auto& w : vf.goal_encoder.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.0;
  auto& w = vf.value_mlp.weights[0];  // [obs + d, 1]
  for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.0;
  w.data()[0] = 1.0;
  vf.value_mlp.biases[0].data()[0] = 0.0;
  vf.target_sync(1.0);
  return vf;
}

}  // namespace

TEST(Objectives, AwrWeightPinnedValues) {
  EXPECT_EQ(chaingoal::awr_weight(0.0, 3.0, 100.0), 1.0);
  EXPECT_NEAR(chaingoal::awr_weight(1.0, 3.0, 100.0), 20.085536923187668, 1e-12);
  EXPECT_EQ(chaingoal::awr_weight(10.0, 3.0, 100.0), 100.0);
  EXPECT_GT(chaingoal::awr_weight(-10.0, 3.0, 100.0), 0.0);
}

TEST(Objectives, EffectiveWeightsGeometric) {
  LossWeights w;
  w.lambda_h = 0.5;
  w.gamma_h = 0.8;
  auto eff = chaingoal::effective_subgoal_weights(w, 3);
  ASSERT_EQ(eff.size(), 3u);
  EXPECT_NEAR(eff[0], 0.5, 1e-15);
  EXPECT_NEAR(eff[1], 0.4, 1e-15);
  EXPECT_NEAR(eff[2], 0.32, 1e-15);
}

TEST(Objectives, WeightValidation) {
  LossWeights w;
  EXPECT_NO_THROW(w.validate());
  w.lambda_l = 0.0;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.gamma_h = 1.5;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.weight_clip = 0.5;
  EXPECT_THROW(w.validate(), ConfigError);
  w = LossWeights{};
  w.lambda_h = std::numeric_limits<double>::infinity();
  EXPECT_THROW(w.validate(), ConfigError);
}

TEST(Objectives, FlatPolicyLoss) {
  auto logp = fake_logprobs({}, {-1.0, -2.0, -3.0});
  LossWeights w;
  w.lambda_l = 2.0;
  w.beta = 0.0;
  auto res = chaingoal::total_loss(logp, {}, {0.0, 0.0, 0.0}, w);
  // All weights are 1, so J_l = mean(logp_l) = -2 and the loss is 4.
  EXPECT_NEAR(res.j_l, -2.0, 1e-12);
  EXPECT_NEAR(res.loss.item(), 4.0, 1e-12);
  EXPECT_TRUE(res.j_h.empty());
}

TEST(Objectives, HierarchicalAssembly) {
  // Two subgoal terms with decay 0.8: nearest full weight, farthest 0.8.
  auto logp = fake_logprobs({{-1.0, -1.0}, {-2.0, -2.0}}, {-0.5, -0.5});
  LossWeights w;
  w.lambda_h = 0.5;
  w.lambda_l = 1.5;
  w.gamma_h = 0.8;
  w.beta = 0.0;
  auto res = chaingoal::total_loss(logp, {{0, 0}, {0, 0}}, {0, 0}, w);
  EXPECT_NEAR(res.j_h[0], -1.0, 1e-12);
  EXPECT_NEAR(res.j_h[1], -2.0, 1e-12);
  EXPECT_NEAR(res.j_l, -0.5, 1e-12);
  EXPECT_NEAR(res.contrib_h[0], 0.5 * -1.0, 1e-12);
  EXPECT_NEAR(res.contrib_h[1], 0.5 * 0.8 * -2.0, 1e-12);
  EXPECT_NEAR(res.contrib_l, 1.5 * -0.5, 1e-12);
  double want = -(res.contrib_l + res.contrib_h[0] + res.contrib_h[1]);
  EXPECT_NEAR(res.loss.item(), want, 1e-12);
}

TEST(Objectives, AwrWeightsScaleTerms) {
  auto logp = fake_logprobs({}, {-1.0, -1.0});
  LossWeights w;
  w.beta = 3.0;
  // One advantage at 0 (weight 1), one at 1 (weight e^3).
  auto res = chaingoal::total_loss(logp, {}, {0.0, 1.0}, w);
  double e3 = std::exp(3.0);
  EXPECT_NEAR(res.mean_w_l, (1.0 + e3) / 2.0, 1e-12);
  EXPECT_NEAR(res.j_l, (1.0 * -1.0 + e3 * -1.0) / 2.0, 1e-12);
}

TEST(Objectives, BetaZeroMakesAllWeightsOne) {
  Pcg64 rng(62, 0);
  std::vector<double> adv(50);
  for (auto& a : adv) a = rng.uniform(-5.0, 5.0);
  double max_dev = 0;
  for (double a : adv)
    max_dev = std::max(max_dev, std::fabs(chaingoal::awr_weight(a, 0.0, 100.0) - 1.0));
  EXPECT_EQ(max_dev, 0.0);
}

TEST(Objectives, DoublingLambdaDoublesContribution) {
  auto logp = fake_logprobs({{-1.3, -0.4}}, {-0.7, -2.1});
  std::vector<std::vector<double>> adv_h{{0.3, -0.2}};
  std::vector<double> adv_l{0.1, 0.4};
  LossWeights w1;
  auto r1 = chaingoal::total_loss(logp, adv_h, adv_l, w1);
  LossWeights w2 = w1;
  w2.lambda_l = 2.0 * w1.lambda_l;
  auto r2 = chaingoal::total_loss(logp, adv_h, adv_l, w2);
  EXPECT_EQ(r2.contrib_l, 2.0 * r1.contrib_l);
  EXPECT_EQ(r2.contrib_h[0], r1.contrib_h[0]);

  LossWeights w3 = w1;
  w3.lambda_h = 2.0 * w1.lambda_h;
  auto r3 = chaingoal::total_loss(logp, adv_h, adv_l, w3);
  EXPECT_EQ(r3.contrib_h[0], 2.0 * r1.contrib_h[0]);
  EXPECT_EQ(r3.contrib_l, r1.contrib_l);
}

TEST(Objectives, AdvantageHelpersByHand) {
  auto vf = coordinate_value_fn();
  auto s = Tensor<double>::from_vector({2, 2}, {-8.0, 0.0, 1.0, 0.0});
  auto s_i = Tensor<double>::from_vector({2, 2}, {-5.0, 0.0, 1.0, 0.0});
  auto e_g = Tensor<double>::zeros({2, 4});
  auto adv = chaingoal::high_advantages(vf, s, s_i, e_g);
  ASSERT_EQ(adv.size(), 2u);
  EXPECT_NEAR(adv[0], 3.0, 1e-12);  // V jumps from -8 to -5
  EXPECT_NEAR(adv[1], 0.0, 1e-12);  // same state, zero advantage

  auto s_next = Tensor<double>::from_vector({2, 2}, {-7.0, 0.0, 2.0, 0.0});
  auto low = chaingoal::low_advantages(vf, s, s_next, e_g);
  EXPECT_NEAR(low[0], 1.0, 1e-12);
  EXPECT_NEAR(low[1], 1.0, 1e-12);
}

TEST(Objectives, AdvantagesRefuseLiveValueTape) {
  auto vf = coordinate_value_fn();
  NamedParams<double> params;
  vf.collect(params);
  Tape<double> tape;
  for (auto& [name, t] : params) tape.watch(t);
  auto s = Tensor<double>::zeros({1, 2});
  auto e_g = Tensor<double>::zeros({1, 4});
  EXPECT_THROW(chaingoal::high_advantages(vf, s, s, e_g), NumericError);
  EXPECT_THROW(chaingoal::low_advantages(vf, s, s, e_g), NumericError);
}

TEST(Objectives, NanAbortsNameTheTerm) {
  double nan = std::numeric_limits<double>::quiet_NaN();
  auto bad_h = fake_logprobs({{nan, -1.0}}, {-1.0, -1.0});
  try {
    chaingoal::total_loss(bad_h, {{0, 0}}, {0, 0}, LossWeights{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("j_h_1"), std::string::npos) << e.what();
  }

  auto bad_l = fake_logprobs({}, {nan});
  try {
    chaingoal::total_loss(bad_l, {}, {0.0}, LossWeights{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("j_l"), std::string::npos) << e.what();
  }

  auto ok = fake_logprobs({}, {-1.0});
  EXPECT_THROW(chaingoal::total_loss(ok, {}, {nan}, LossWeights{}), NumericError);
}

TEST(Objectives, GradientsReachPolicyOnly) {
  Pcg64 rng(63, 0);
  auto policy = Policy<double>::init(small_config(2), rng);
  auto vf = ValueFunction<double>::init(2, 4, {8}, {8}, rng);
  std::size_t b = 4;
  auto s = fdcheck::random_tensor({b, 2}, rng);
  auto s_next = fdcheck::random_tensor({b, 2}, rng);
  auto g_obs = fdcheck::random_tensor({b, 2}, rng);
  auto acts = fdcheck::random_tensor({b, 2}, rng, 0.2);
  auto sub1 = fdcheck::random_tensor({b, 2}, rng);
  auto sub2 = fdcheck::random_tensor({b, 2}, rng);

  // Everything value-derived is computed before the tape goes live.
  auto e_g = vf.embed_goal(g_obs);
  std::vector<Tensor<double>> targets{vf.embed_goal(sub1), vf.embed_goal(sub2)};
  std::vector<std::vector<double>> adv_h{
      chaingoal::high_advantages(vf, s, sub1, e_g),
      chaingoal::high_advantages(vf, s, sub2, e_g)};
  auto adv_l = chaingoal::low_advantages(vf, s, s_next, targets[0]);

  NamedParams<double> policy_params, value_params;
  policy.collect(policy_params);
  vf.collect(value_params);

  Tape<double> tape;
  for (auto& [name, t] : policy_params) tape.watch(t);
  for (auto& [name, t] : value_params) tape.watch(t);
  auto logp = policy.forward_logprobs(s, e_g, targets, acts, true);
  auto res = chaingoal::total_loss(logp, adv_h, adv_l, LossWeights{});
  tape.backward(res.loss);

  for (auto& [name, t] : value_params)
    for (std::size_t i = 0; i < t.size(); ++i)
      ASSERT_EQ(t.grad()[i], 0.0) << name;
  double policy_total = 0;
  for (auto& [name, t] : policy_params)
    for (std::size_t i = 0; i < t.size(); ++i) policy_total += std::fabs(t.grad()[i]);
  EXPECT_GT(policy_total, 1e-6);
}

TEST(Objectives, TotalLossGradMatchesFiniteDifferences) {
  Pcg64 rng(64, 0);
  auto policy = Policy<double>::init(small_config(1), rng);
  std::size_t b = 2;
  auto s = fdcheck::random_tensor({b, 2}, rng);
  auto e_g = fdcheck::random_tensor({b, 4}, rng);
  auto acts = fdcheck::random_tensor({b, 2}, rng, 0.2);
  std::vector<Tensor<double>> targets{fdcheck::random_tensor({b, 4}, rng)};
  std::vector<std::vector<double>> adv_h{{0.4, -0.3}};
  std::vector<double> adv_l{-0.1, 0.6};

  NamedParams<double> named;
  policy.collect(named);
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : named) params.push_back(t);

  auto build = [&]() {
    auto logp = policy.forward_logprobs(s, e_g, targets, acts, true);
    return chaingoal::total_loss(logp, adv_h, adv_l, LossWeights{}).loss;
  };
  auto res = fdcheck::check_gradients(params, build, 1e-5);
  EXPECT_GT(res.checked, 200u);
  EXPECT_LT(res.max_rel_err, 1e-5);
}
