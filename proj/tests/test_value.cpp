#include <gtest/gtest.h>

#include <cmath>
#include <cstddef>
#include <vector>

#include "chaingoal/adam.hpp"
#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"
#include "chaingoal/value.hpp"
#include "fd_check.hpp"

using chaingoal::AdamConfig;
using chaingoal::AdamState;
using chaingoal::ConfigError;
using chaingoal::DataError;
using chaingoal::Mlp;
using chaingoal::NamedParams;
using chaingoal::Pcg64;
using chaingoal::Tape;
using chaingoal::Tensor;
using chaingoal::ValueBatch;
using chaingoal::ValueFunction;

namespace {

// Affine-only value function whose prediction is a constant, so the loss
// reduces to a hand-computable expectile of a single TD error.
ValueFunction<double> constant_value_fn(double bias) {
  Pcg64 rng(1, 0);
  auto vf = ValueFunction<double>::init(1, 1, {}, {}, rng);
  for (auto& w : vf.value_mlp.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.0;
  vf.value_mlp.biases.back().data()[0] = bias;
  for (auto& w : vf.goal_encoder.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] = 0.0;
  vf.target_sync(1.0);
  return vf;
}

ValueBatch<double> single_row_batch(double r, bool done) {
  ValueBatch<double> b;
  b.s = Tensor<double>::from_vector({1, 1}, {0.3});
  b.s_next = Tensor<double>::from_vector({1, 1}, {0.4});
  b.g = Tensor<double>::from_vector({1, 1}, {0.9});
  b.r = {r};
  b.done = {static_cast<std::uint8_t>(done ? 1 : 0)};
  return b;
}

ValueFunction<double> random_value_fn(Pcg64& rng) {
  auto vf = ValueFunction<double>::init(2, 3, {8}, {8}, rng);
  vf.target_sync(1.0);
  // Nudge the target away from the online net so the bootstrap side is not
  // trivially equal to the prediction side.
  for (auto& w : vf.target_value_mlp.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += 0.05;
  return vf;
}

ValueBatch<double> random_batch(std::size_t n, Pcg64& rng) {
  ValueBatch<double> b;
  b.s = fdcheck::random_tensor({n, 2}, rng);
  b.s_next = fdcheck::random_tensor({n, 2}, rng);
  b.g = fdcheck::random_tensor({n, 2}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    bool done = (i % 5 == 4);
    b.done.push_back(done ? 1 : 0);
    b.r.push_back(done ? 0.0 : -1.0);
  }
  return b;
}

}  // namespace

TEST(Value, PinnedExpectileExample) {
  // V(s) = Vbar(s') = -10 everywhere, r = -1, gamma = 0.99:
  // td = -1 + 0.99 * (-10) + 10 = -0.9, and the tau = 0.7 expectile weight
  // for a negative error is 0.3, so the loss is 0.3 * 0.81 = 0.243.
  auto vf = constant_value_fn(-10.0);
  auto batch = single_row_batch(-1.0, false);
  EXPECT_NEAR(vf.loss(batch, 0.7, 0.99).item(), 0.243, 1e-12);
}

TEST(Value, ZeroTdGivesZeroLoss) {
  auto vf = constant_value_fn(0.0);
  auto batch = single_row_batch(0.0, true);
  EXPECT_EQ(vf.loss(batch, 0.7, 0.99).item(), 0.0);
}

TEST(Value, TauHalfIsHalfMse) {
  Pcg64 rng(11, 0);
  auto vf = random_value_fn(rng);
  auto batch = random_batch(16, rng);
  double gamma = 0.97;

  auto e = vf.embed_goal(batch.g);
  auto v = vf.value(batch.s, e);
  auto vn = vf.target_value(batch.s_next, e);
  double mse = 0.0;
  for (std::size_t i = 0; i < 16; ++i) {
    double boot = batch.done[i] ? 0.0 : gamma * vn.data()[i];
    double td = batch.r[i] + boot - v.data()[i];
    mse += td * td;
  }
  mse /= 16.0;
  EXPECT_NEAR(vf.loss(batch, 0.5, gamma).item(), 0.5 * mse, 1e-12);
}

TEST(Value, GradMatchesFiniteDifferences) {
  Pcg64 rng(12, 0);
  auto vf = random_value_fn(rng);
  auto batch = random_batch(6, rng);
  double tau = 0.7, gamma = 0.95;

  // Freeze the bootstrap at its unperturbed value: the real loss detaches
  // the target-side embedding, so nudging online parameters must not move
  // the regression target.
  std::vector<double> frozen;
  {
    auto e = vf.embed_goal(batch.g);
    auto vn = vf.target_value(batch.s_next, e);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      double boot = batch.done[i] ? 0.0 : gamma * vn.data()[i];
      frozen.push_back(batch.r[i] + boot);
    }
  }
  auto frozen_loss = [&]() {
    auto e = vf.embed_goal(batch.g);
    auto v = vf.value(batch.s, e);
    auto td = chaingoal::sub(
        Tensor<double>::from_vector({batch.size()}, frozen), v);
    return chaingoal::mean(chaingoal::expectile_loss(td, tau));
  };

  NamedParams<double> named;
  vf.collect(named);
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : named) params.push_back(t);

  auto res = fdcheck::check_gradients(params, frozen_loss, 1e-5);
  EXPECT_GT(res.checked, 100u);
  EXPECT_LT(res.max_rel_err, 1e-6);

  // The library loss must produce exactly the gradients of the frozen
  // oracle: any leak through the bootstrap side would show up here.
  std::vector<std::vector<double>> g_lib, g_frozen;
  {
    Tape<double> tape;
    for (auto& p : params) tape.watch(p);
    tape.backward(vf.loss(batch, tau, gamma));
    for (auto& p : params) g_lib.emplace_back(p.grad(), p.grad() + p.size());
  }
  {
    Tape<double> tape;
    for (auto& p : params) tape.watch(p);
    tape.backward(frozen_loss());
    for (auto& p : params) g_frozen.emplace_back(p.grad(), p.grad() + p.size());
  }
  for (std::size_t pi = 0; pi < params.size(); ++pi)
    for (std::size_t i = 0; i < g_lib[pi].size(); ++i)
      ASSERT_NEAR(g_lib[pi][i], g_frozen[pi][i], 1e-12);
}

TEST(Value, TargetParamsNeverTouchTheTape) {
  Pcg64 rng(13, 0);
  auto vf = random_value_fn(rng);
  auto batch = random_batch(8, rng);

  NamedParams<double> online, target;
  vf.collect(online);
  vf.collect_target(target);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : target) before.emplace_back(t.data(), t.data() + t.size());

  auto opt = AdamState<double>::init(online);
  {
    Tape<double> tape;
    for (auto& [name, t] : online) tape.watch(t);
    tape.backward(vf.loss(batch, 0.7, 0.99));
  }
  chaingoal::adam_step(online, opt, "value");

  for (auto& [name, t] : target) EXPECT_FALSE(t.on_tape()) << name;
  for (std::size_t pi = 0; pi < target.size(); ++pi)
    for (std::size_t i = 0; i < before[pi].size(); ++i)
      ASSERT_EQ(target[pi].second.data()[i], before[pi][i]);
}

TEST(Value, TargetSyncFullRateIsHardCopy) {
  Pcg64 rng(14, 0);
  auto vf = ValueFunction<double>::init(2, 3, {8}, {8}, rng);
  for (auto& w : vf.goal_encoder.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += 1.5;
  vf.target_sync(1.0);
  NamedParams<double> online, target;
  vf.collect(online);
  vf.collect_target(target);
  ASSERT_EQ(online.size(), target.size());
  for (std::size_t pi = 0; pi < online.size(); ++pi)
    for (std::size_t i = 0; i < online[pi].second.size(); ++i)
      ASSERT_EQ(online[pi].second.data()[i], target[pi].second.data()[i]);
}

TEST(Value, TargetSyncGapDecaysGeometrically) {
  Pcg64 rng(15, 0);
  auto vf = ValueFunction<double>::init(2, 3, {8}, {8}, rng);
  vf.target_sync(1.0);
  for (auto& w : vf.goal_encoder.weights)
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] += 1.0;

  double rho = 0.005;
  int n = 17;
  double w_online = vf.goal_encoder.weights[0].data()[0];
  double gap0 = vf.target_goal_encoder.weights[0].data()[0] - w_online;
  for (int i = 0; i < n; ++i) vf.target_sync(rho);
  double gap = vf.target_goal_encoder.weights[0].data()[0] - w_online;
  EXPECT_NEAR(gap, gap0 * std::pow(1.0 - rho, n), 1e-12);
}

TEST(Value, TauOutsideRangeRejected) {
  Pcg64 rng(16, 0);
  auto vf = random_value_fn(rng);
  auto batch = random_batch(4, rng);
  EXPECT_THROW(vf.loss(batch, 0.45, 0.99), ConfigError);
  EXPECT_THROW(vf.loss(batch, 1.0, 0.99), ConfigError);
  EXPECT_NO_THROW(vf.loss(batch, 0.5, 0.99));
  EXPECT_NO_THROW(vf.loss(batch, 0.99, 0.99));
}

TEST(Value, RewardDoneMismatchRejected) {
  Pcg64 rng(17, 0);
  auto vf = random_value_fn(rng);
  auto bad = random_batch(4, rng);
  bad.r[1] = 0.0;  // done stays 0
  EXPECT_THROW(vf.loss(bad, 0.7, 0.99), DataError);
  auto bad2 = random_batch(4, rng);
  bad2.r[0] = -0.5;
  EXPECT_THROW(vf.loss(bad2, 0.7, 0.99), DataError);
}

TEST(Value, EmbeddingShape) {
  Pcg64 rng(18, 0);
  auto vf = ValueFunction<double>::init(2, 16, {32}, {32}, rng);
  auto g = fdcheck::random_tensor({5, 2}, rng);
  auto e = vf.embed_goal(g);
  ASSERT_EQ(e.shape(), (chaingoal::Shape{5, 16}));
  auto v = vf.value(fdcheck::random_tensor({5, 2}, rng), e);
  ASSERT_EQ(v.shape(), (chaingoal::Shape{5}));
}

TEST(Value, LearnsChainValues) {
  // Ten states on a line, deterministic unit steps toward the goal at the
  // right end. With deterministic transitions the expectile fixed point is
  // the true discounted cost-to-go, so training should recover the ordering
  // and push the goal state's value toward zero.
  Pcg64 rng(19, 0);
  auto vf = ValueFunction<double>::init(1, 4, {16}, {16}, rng);
  NamedParams<double> params;
  vf.collect(params);
  AdamConfig<double> cfg;
  cfg.lr = 3e-3;
  auto opt = AdamState<double>::init(params, cfg);

  double gamma = 0.9;
  Pcg64 sample_rng(20, 0);
  for (int step = 0; step < 1500; ++step) {
    std::size_t n = 64;
    ValueBatch<double> b;
    std::vector<double> s, sn, g;
    for (std::size_t i = 0; i < n; ++i) {
      int cell = static_cast<int>(sample_rng.next_below(11));
      int next = std::min(cell + 1, 10);
      bool done = cell == 10;
      s.push_back(cell / 10.0);
      sn.push_back(next / 10.0);
      g.push_back(1.0);
      b.done.push_back(done ? 1 : 0);
      b.r.push_back(done ? 0.0 : -1.0);
    }
    b.s = Tensor<double>::from_vector({n, 1}, std::move(s));
    b.s_next = Tensor<double>::from_vector({n, 1}, std::move(sn));
    b.g = Tensor<double>::from_vector({n, 1}, std::move(g));
    {
      Tape<double> tape;
      for (auto& [name, t] : params) tape.watch(t);
      tape.backward(vf.loss(b, 0.7, gamma));
    }
    chaingoal::adam_step(params, opt, "value");
    vf.target_sync(0.02);
  }

  auto goal = Tensor<double>::from_vector({1, 1}, {1.0});
  auto e_g = vf.embed_goal(goal);
  auto at = [&](double x) { return vf.value_at({x}, e_g); };
  EXPECT_GT(at(1.0), at(0.5) + 0.5);
  EXPECT_GT(at(0.5), at(0.0) + 0.5);
  EXPECT_NEAR(at(1.0), 0.0, 0.35);
  // True cost-to-go from cell 0 is -(1 - 0.9^10) / 0.1.
  EXPECT_NEAR(at(0.0), -(1.0 - std::pow(gamma, 10)) / (1.0 - gamma), 1.5);
}
