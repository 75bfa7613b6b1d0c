#pragma once

// Finite-difference gradient oracle shared by the unit tests and the
// acceptance suite. The builder closure re-runs the forward computation
// from scratch on every call; during the nudged evaluations no tape exists,
// so the library path being checked is exactly the one training uses.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "chaingoal/random.hpp"
#include "chaingoal/tensor.hpp"

namespace fdcheck {

struct Result {
  std::size_t checked = 0;
  double max_rel_err = 0.0;
};

// Compares tape gradients of build() wrt every element of every tensor in
// params against central differences. Returns the worst relative error;
// callers assert on it so failures name the op under test.
inline Result check_gradients(std::vector<chaingoal::Tensor<double>> params,
                              const std::function<chaingoal::Tensor<double>()>& build,
                              double h = 1e-5) {
  using chaingoal::Tape;
  using chaingoal::Tensor;

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    for (auto& p : params) tape.watch(p);
    Tensor<double> loss = build();
    tape.backward(loss);
    for (auto& p : params) analytic.emplace_back(p.grad(), p.grad() + p.size());
  }

  Result res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      double saved = p.data()[i];
      p.data()[i] = saved + h;
      double f_plus = build().item();
      p.data()[i] = saved - h;
      double f_minus = build().item();
      p.data()[i] = saved;
      double fd = (f_plus - f_minus) / (2.0 * h);
      double ad = analytic[pi][i];
      double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-3});
      double rel = std::fabs(ad - fd) / denom;
      res.max_rel_err = std::max(res.max_rel_err, rel);
      ++res.checked;
    }
  }
  return res;
}

inline chaingoal::Tensor<double> random_tensor(chaingoal::Shape shape, chaingoal::Pcg64& rng,
                                               double scale = 1.0) {
  auto t = chaingoal::Tensor<double>::zeros(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t.data()[i] = rng.uniform(-scale, scale);
  return t;
}

}  // namespace fdcheck
