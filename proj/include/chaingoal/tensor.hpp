#pragma once

// Reverse-mode autodiff on dense tensors, sized for this project: the full
// training graph is a few hundred ops, batches are a few thousand rows, and
// everything runs on one core. Ops record backward closures on an explicit
// Tape; calling Tape::backward runs them in reverse recording order, which
// makes gradient accumulation order, and therefore the trained bits,
// deterministic for a fixed graph.
//
// Tensors are cheap shared handles. A tensor not attached to a live tape is
// a constant: ops treat it as data and no gradient flows into it. detach()
// is therefore the stop-gradient primitive used throughout the training
// objectives.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "chaingoal/common.hpp"

namespace chaingoal {

namespace detail {

// exp/erf for the float training path. libm erf is correct but costs too
// much inside the GELU of every mixer MLP; these are branch-light
// polynomial versions that the compiler vectorizes. Absolute error is
// ~1.5e-7, i.e. at the float ulp scale. The double path below keeps libm.
inline float fast_expf(float x) {
  // Branchless range clamp so the surrounding elementwise loops vectorize
  // (gcc treats std::min/std::max and std::floor as control flow here).
  // Below -87 the true value is under 1.7e-38 and the clamped result is the
  // same magnitude, so nothing downstream can tell the difference.
  x = x > 88.0f ? 88.0f : x;
  x = x < -87.0f ? -87.0f : x;
  float z = x * 1.44269504088896341f;  // x / ln 2
  // Round to nearest via the 1.5*2^23 shift; ties land within poly range
  // either way.
  float nf = (z + 12582912.0f) - 12582912.0f;
  // Cody-Waite two-term reduction keeps r accurate near the end of range.
  float r = x - nf * 0.693359375f;
  r -= nf * -2.12194440e-4f;
  float p = 1.0f / 720.0f;
  p = p * r + 1.0f / 120.0f;
  p = p * r + 1.0f / 24.0f;
  p = p * r + 1.0f / 6.0f;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r;
  p += 1.0f;
  int n = static_cast<int>(nf);
  float scale = std::bit_cast<float>((n + 127) << 23);
  return p * scale;
}

// Abramowitz-Stegun 7.1.26 rational approximation, |err| <= 1.5e-7.
inline float fast_erff(float x) {
  float ax = std::fabs(x);
  float t = 1.0f / (1.0f + 0.3275911f * ax);
  float poly = 1.061405429f;
  poly = poly * t - 1.453152027f;
  poly = poly * t + 1.421413741f;
  poly = poly * t - 0.284496736f;
  poly = poly * t + 0.254829592f;
  float y = 1.0f - poly * t * fast_expf(-ax * ax);
  return std::copysign(y, x);
}

template <typename F>
inline F normal_cdf(F x);

template <>
inline double normal_cdf<double>(double x) {
  return 0.5 * std::erfc(-x * std::numbers::sqrt2 * 0.5);
}

template <>
inline float normal_cdf<float>(float x) {
  return 0.5f * (1.0f + fast_erff(x * 0.7071067811865476f));
}

template <typename F>
inline F normal_pdf(F x);

template <>
inline double normal_pdf<double>(double x) {
  return 0.3989422804014327 * std::exp(-0.5 * x * x);
}

template <>
inline float normal_pdf<float>(float x) {
  return 0.3989422804014327f * fast_expf(-0.5f * x * x);
}

// ===== dense kernels =====
// All matmul work funnels through these three accumulating kernels. The
// i-k-j / i-p-j orders keep the innermost loop a contiguous fused
// multiply-add that gcc vectorizes without -ffast-math.

// c[m,n] += a[m,k] * b[k,n]
template <typename F>
inline void gemm_nn_acc(const F* __restrict a, const F* __restrict b, F* __restrict c,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const F* arow = a + i * k;
    F* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      F av = arow[p];
      const F* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k,n] += a^T * g for a[m,k], g[m,n]
template <typename F>
inline void gemm_tn_acc(const F* __restrict a, const F* __restrict g, F* __restrict c,
                        std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const F* arow = a + i * k;
    const F* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      F av = arow[p];
      F* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename F>
inline std::vector<F> transpose_copy(const F* src, std::size_t rows, std::size_t cols) {
  std::vector<F> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
  return out;
}

template <typename F>
inline bool has_nan(const F* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (std::isnan(p[i])) return true;
  return false;
}

}  // namespace detail

template <typename F>
class Tape;

template <typename F>
struct TensorData {
  Shape shape;
  std::vector<F> value;
  std::vector<F> grad;  // sized like value while attached to a tape
  Tape<F>* tape = nullptr;
};

template <typename F>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<F>>();
    t.d_->value.assign(shape_numel(shape), F(0));
    t.d_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, F v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.d_->value.begin(), t.d_->value.end(), v);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<F> v) {
    if (shape_numel(shape) != v.size())
      throw ShapeError("Tensor::from_vector: " + shape_str(shape) + " does not hold " +
                       std::to_string(v.size()) + " elements");
    Tensor t;
    t.d_ = std::make_shared<TensorData<F>>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(v);
    return t;
  }

  static Tensor scalar(F v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->value.size(); }
  F* data() { return d_->value.data(); }
  const F* data() const { return d_->value.data(); }
  std::vector<F>& values() { return d_->value; }
  const std::vector<F>& values() const { return d_->value; }
  F* grad() { return d_->grad.data(); }
  const F* grad() const { return d_->grad.data(); }
  const std::vector<F>& grad_vec() const { return d_->grad; }
  bool on_tape() const { return d_->tape != nullptr; }
  Tape<F>* tape() const { return d_ ? d_->tape : nullptr; }
  const std::shared_ptr<TensorData<F>>& ptr() const { return d_; }

  F item() const {
    if (size() != 1) throw ShapeError("Tensor::item on non-scalar " + shape_str(shape()));
    return d_->value[0];
  }

  // Deep copy with no tape membership: the stop-gradient primitive.
  Tensor detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<F>>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
  }

 private:
  std::shared_ptr<TensorData<F>> d_;
};

template <typename F>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { release(); }

  // Attach an existing tensor (a parameter) so gradients accumulate into it.
  // Re-zeros its gradient buffer; unreached parameters end the step at zero.
  void watch(Tensor<F>& t) {
    auto& d = *t.ptr();
    if (d.tape == this) return;
    if (d.tape != nullptr) throw NumericError("Tape::watch: tensor already on another tape");
    d.tape = this;
    d.grad.assign(d.value.size(), F(0));
    registered_.push_back(t.ptr());
  }

  // Called by ops for freshly created results.
  void adopt(const Tensor<F>& t) {
    auto& d = *t.ptr();
    d.tape = this;
    d.grad.assign(d.value.size(), F(0));
    registered_.push_back(t.ptr());
  }

  void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops newest-first.
  void backward(const Tensor<F>& loss) {
    if (ran_) throw NumericError("Tape::backward: tape already consumed");
    if (loss.tape() != this) throw NumericError("Tape::backward: loss is not on this tape");
    if (loss.size() != 1)
      throw ShapeError("Tape::backward: loss must be scalar, got " + shape_str(loss.shape()));
    loss.ptr()->grad[0] = F(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    ran_ = true;
  }

  // Detaches every tensor that lived on this tape. Parameter gradient
  // buffers are kept so the optimizer can read them after the tape is gone.
  void release() {
    for (auto& d : registered_) d->tape = nullptr;
    registered_.clear();
    nodes_.clear();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData<F>>> registered_;
  bool ran_ = false;
};

namespace detail {

template <typename F>
inline Tape<F>* tape_of(std::initializer_list<const Tensor<F>*> ts) {
  Tape<F>* tp = nullptr;
  for (const Tensor<F>* t : ts) {
    Tape<F>* o = t->tape();
    if (o == nullptr) continue;
    if (tp == nullptr)
      tp = o;
    else if (tp != o)
      throw NumericError("op inputs belong to two different live tapes");
  }
  return tp;
}

}  // namespace detail

// ===== elementwise and linear ops =====

template <typename F>
Tensor<F> matmul(const Tensor<F>& a, const Tensor<F>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto out = Tensor<F>::zeros({m, n});
  detail::gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
  Tape<F>* tp = detail::tape_of<F>({&a, &b});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tp->push([ad, bd, od, m, k, n] {
      const F* g = od->grad.data();
      if (ad->tape) {
        // dA += g * B^T; transpose B once, it is small.
        auto bt = detail::transpose_copy(bd->value.data(), k, n);
        detail::gemm_nn_acc(g, bt.data(), ad->grad.data(), m, n, k);
      }
      if (bd->tape) detail::gemm_tn_acc(ad->value.data(), g, bd->grad.data(), m, k, n);
    });
  }
  return out;
}

// add supports equal shapes plus the one broadcast the networks use:
// [N, d] + [d] row bias.
template <typename F>
Tensor<F> add(const Tensor<F>& a, const Tensor<F>& b) {
  bool same = a.shape() == b.shape();
  bool rowb = !same && b.shape().size() == 1 && !a.shape().empty() &&
              a.shape().back() == b.shape()[0] && a.size() % b.size() == 0;
  if (!same && !rowb)
    throw ShapeError("add: incompatible shapes " + shape_str(a.shape()) + " + " +
                     shape_str(b.shape()));
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size(), d = b.size();
  const F* pa = a.data();
  const F* pb = b.data();
  F* po = out.data();
  if (same) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  } else {
    for (std::size_t r = 0; r < n / d; ++r) {
      const F* row = pa + r * d;
      F* orow = po + r * d;
      for (std::size_t j = 0; j < d; ++j) orow[j] = row[j] + pb[j];
    }
  }
  Tape<F>* tp = detail::tape_of<F>({&a, &b});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tp->push([ad, bd, od, same, n, d] {
      const F* g = od->grad.data();
      if (ad->tape) {
        F* ga = ad->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bd->tape) {
        F* gb = bd->grad.data();
        if (same) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        } else {
          for (std::size_t r = 0; r < n / d; ++r) {
            const F* grow = g + r * d;
            for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
          }
        }
      }
    });
  }
  return out;
}

template <typename F>
Tensor<F> sub(const Tensor<F>& a, const Tensor<F>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " - " +
                     shape_str(b.shape()));
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  Tape<F>* tp = detail::tape_of<F>({&a, &b});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tp->push([ad, bd, od, n] {
      const F* g = od->grad.data();
      if (ad->tape) {
        F* ga = ad->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (bd->tape) {
        F* gb = bd->grad.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename F>
Tensor<F> mul(const Tensor<F>& a, const Tensor<F>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " * " +
                     shape_str(b.shape()));
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  Tape<F>* tp = detail::tape_of<F>({&a, &b});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tp->push([ad, bd, od, n] {
      const F* g = od->grad.data();
      if (ad->tape) {
        F* ga = ad->grad.data();
        const F* vb = bd->value.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
      }
      if (bd->tape) {
        F* gb = bd->grad.data();
        const F* va = ad->value.data();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
      }
    });
  }
  return out;
}

template <typename F>
Tensor<F> mul_scalar(const Tensor<F>& a, double c) {
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size();
  F fc = static_cast<F>(c);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * fc;
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), od = out.ptr();
    tp->push([ad, od, n, fc] {
      if (!ad->tape) return;
      const F* g = od->grad.data();
      F* ga = ad->grad.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * fc;
    });
  }
  return out;
}

template <typename F>
Tensor<F> add_scalar(const Tensor<F>& a, double c) {
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size();
  F fc = static_cast<F>(c);
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + fc;
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), od = out.ptr();
    tp->push([ad, od, n] {
      if (!ad->tape) return;
      const F* g = od->grad.data();
      F* ga = ad->grad.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename F>
Tensor<F> neg(const Tensor<F>& a) {
  return mul_scalar(a, -1.0);
}

// GELU in the exact Gaussian-CDF form x * Phi(x), not the tanh shortcut.
// d/dx = Phi(x) + x * phi(x).
template <typename F>
Tensor<F> gelu(const Tensor<F>& a) {
  auto out = Tensor<F>::zeros(a.shape());
  std::size_t n = a.size();
  const F* pa = a.data();
  F* po = out.data();
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (!tp) {
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * detail::normal_cdf<F>(pa[i]);
    return out;
  }
  // Keep the cdf values for the backward pass; recomputing them doubles the
  // transcendental work in what is already the hottest elementwise op.
  std::vector<F> cdf(n);
  for (std::size_t i = 0; i < n; ++i) {
    cdf[i] = detail::normal_cdf<F>(pa[i]);
    po[i] = pa[i] * cdf[i];
  }
  tp->adopt(out);
  auto ad = a.ptr(), od = out.ptr();
  tp->push([ad, od, n, cdf = std::move(cdf)] {
    if (!ad->tape) return;
    const F* g = od->grad.data();
    const F* x = ad->value.data();
    F* ga = ad->grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      F d = cdf[i] + x[i] * detail::normal_pdf<F>(x[i]);
      ga[i] += g[i] * d;
    }
  });
  return out;
}

// Layer norm over the last axis with affine gain/bias, eps 1e-5.
template <typename F>
Tensor<F> layer_norm(const Tensor<F>& x, const Tensor<F>& gain, const Tensor<F>& bias) {
  if (x.shape().empty()) throw ShapeError("layer_norm: rank-0 input");
  std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  std::size_t rows = x.size() / d;
  constexpr F kEps = F(1e-5);

  auto out = Tensor<F>::zeros(x.shape());
  std::vector<F> xhat(x.size());
  std::vector<F> inv_std(rows);
  const F* px = x.data();
  const F* pg = gain.data();
  const F* pb = bias.data();
  F* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const F* row = px + r * d;
    F mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= F(d);
    F var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      F c = row[j] - mu;
      var += c * c;
    }
    var /= F(d);
    F istd = F(1) / std::sqrt(var + kEps);
    inv_std[r] = istd;
    F* h = xhat.data() + r * d;
    F* o = po + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      h[j] = (row[j] - mu) * istd;
      o[j] = pg[j] * h[j] + pb[j];
    }
  }

  Tape<F>* tp = detail::tape_of<F>({&x, &gain, &bias});
  if (tp) {
    tp->adopt(out);
    auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
    tp->push([xd, gd, bd, od, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const F* g = od->grad.data();
      const F* pg = gd->value.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const F* grow = g + r * d;
        const F* h = xhat.data() + r * d;
        if (xd->tape) {
          // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
          F s1 = 0, s2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            F dh = grow[j] * pg[j];
            s1 += dh;
            s2 += dh * h[j];
          }
          s1 /= F(d);
          s2 /= F(d);
          F* gx = xd->grad.data() + r * d;
          F istd = inv_std[r];
          for (std::size_t j = 0; j < d; ++j) {
            F dh = grow[j] * pg[j];
            gx[j] += istd * (dh - s1 - h[j] * s2);
          }
        }
        if (gd->tape) {
          F* gg = gd->grad.data();
          for (std::size_t j = 0; j < d; ++j) gg[j] += grow[j] * h[j];
        }
        if (bd->tape) {
          F* gb = bd->grad.data();
          for (std::size_t j = 0; j < d; ++j) gb[j] += grow[j];
        }
      }
    });
  }
  return out;
}

// Asymmetric squared loss |tau - 1{x<0}| * x^2, applied elementwise.
template <typename F>
Tensor<F> expectile_loss(const Tensor<F>& x, double tau) {
  auto out = Tensor<F>::zeros(x.shape());
  std::size_t n = x.size();
  F t = static_cast<F>(tau);
  const F* px = x.data();
  F* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    F w = px[i] < F(0) ? F(1) - t : t;
    po[i] = w * px[i] * px[i];
  }
  Tape<F>* tp = detail::tape_of<F>({&x});
  if (tp) {
    tp->adopt(out);
    auto xd = x.ptr(), od = out.ptr();
    tp->push([xd, od, n, t] {
      if (!xd->tape) return;
      const F* g = od->grad.data();
      const F* px = xd->value.data();
      F* gx = xd->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        F w = px[i] < F(0) ? F(1) - t : t;
        gx[i] += g[i] * w * F(2) * px[i];
      }
    });
  }
  return out;
}

// Diagonal Gaussian log density summed over the feature axis. log_std is a
// per-dimension vector shared across the batch, clamped to [lo, hi]; the
// clamp also zeroes log_std gradients where the raw value sits outside the
// range, so a saturated dimension stops moving instead of drifting.
template <typename F>
Tensor<F> gaussian_log_prob(const Tensor<F>& mean, const Tensor<F>& log_std,
                            const Tensor<F>& value, double lo = -5.0, double hi = 2.0) {
  Shape ms = mean.shape();
  if (ms.size() == 1) ms = {1, ms[0]};
  if (ms.size() != 2) throw ShapeError("gaussian_log_prob: mean must be [N,d] or [d]");
  std::size_t n = ms[0], d = ms[1];
  if (value.size() != n * d)
    throw ShapeError("gaussian_log_prob: value shape " + shape_str(value.shape()) +
                     " does not match mean " + shape_str(mean.shape()));
  if (log_std.shape() != Shape{d})
    throw ShapeError("gaussian_log_prob: log_std must be [" + std::to_string(d) + "]");

  F flo = static_cast<F>(lo), fhi = static_cast<F>(hi);
  std::vector<F> c(d), sigma_inv(d);
  for (std::size_t j = 0; j < d; ++j) {
    c[j] = std::clamp(log_std.data()[j], flo, fhi);
    sigma_inv[j] = std::exp(-c[j]);
  }
  constexpr F kHalfLog2Pi = F(0.91893853320467274178);  // 0.5*log(2*pi)

  auto out = Tensor<F>::zeros({n});
  const F* pm = mean.data();
  const F* pv = value.data();
  F* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    F acc = 0;
    for (std::size_t j = 0; j < d; ++j) {
      F z = (pv[i * d + j] - pm[i * d + j]) * sigma_inv[j];
      acc += -kHalfLog2Pi - c[j] - F(0.5) * z * z;
    }
    po[i] = acc;
  }

  Tape<F>* tp = detail::tape_of<F>({&mean, &log_std, &value});
  if (tp) {
    tp->adopt(out);
    auto md = mean.ptr(), sd = log_std.ptr(), vd = value.ptr(), od = out.ptr();
    tp->push([md, sd, vd, od, n, d, flo, fhi, sigma_inv = std::move(sigma_inv)] {
      const F* g = od->grad.data();
      const F* pm = md->value.data();
      const F* pv = vd->value.data();
      const F* raw_ls = sd->value.data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          F z = (pv[i * d + j] - pm[i * d + j]) * sigma_inv[j];
          if (md->tape) md->grad[i * d + j] += g[i] * z * sigma_inv[j];
          if (vd->tape) vd->grad[i * d + j] -= g[i] * z * sigma_inv[j];
          if (sd->tape && raw_ls[j] >= flo && raw_ls[j] <= fhi)
            sd->grad[j] += g[i] * (z * z - F(1));
        }
      }
    });
  }
  return out;
}

template <typename F>
Tensor<F> sum(const Tensor<F>& a) {
  auto out = Tensor<F>::zeros({1});
  std::size_t n = a.size();
  F acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a.data()[i];
  out.data()[0] = acc;
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), od = out.ptr();
    tp->push([ad, od, n] {
      if (!ad->tape) return;
      F g = od->grad[0];
      F* ga = ad->grad.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
  }
  return out;
}

template <typename F>
Tensor<F> mean(const Tensor<F>& a) {
  if (a.size() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ===== shape ops =====

template <typename F>
Tensor<F> reshape(const Tensor<F>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  auto out = Tensor<F>::from_vector(std::move(shape), a.values());
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), od = out.ptr();
    std::size_t n = a.size();
    tp->push([ad, od, n] {
      if (!ad->tape) return;
      const F* g = od->grad.data();
      F* ga = ad->grad.data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Swap the last two axes of a rank-3 tensor: [N,A,B] -> [N,B,A].
template <typename F>
Tensor<F> transpose_12(const Tensor<F>& a) {
  if (a.shape().size() != 3)
    throw ShapeError("transpose_12 expects rank 3, got " + shape_str(a.shape()));
  std::size_t n = a.shape()[0], r = a.shape()[1], c = a.shape()[2];
  auto out = Tensor<F>::zeros({n, c, r});
  const F* pa = a.data();
  F* po = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    const F* src = pa + b * r * c;
    F* dst = po + b * r * c;
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  }
  Tape<F>* tp = detail::tape_of<F>({&a});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), od = out.ptr();
    tp->push([ad, od, n, r, c] {
      if (!ad->tape) return;
      const F* g = od->grad.data();
      F* ga = ad->grad.data();
      for (std::size_t b = 0; b < n; ++b) {
        const F* src = g + b * r * c;  // [c, r]
        F* dst = ga + b * r * c;       // [r, c]
        for (std::size_t j = 0; j < c; ++j)
          for (std::size_t i = 0; i < r; ++i) dst[i * c + j] += src[j * r + i];
      }
    });
  }
  return out;
}

// Stack T tensors of shape [N,d] into one [N,T,d] token grid.
template <typename F>
Tensor<F> stack_tokens(const std::vector<Tensor<F>>& tokens) {
  if (tokens.empty()) throw ShapeError("stack_tokens: empty token list");
  const Shape& s0 = tokens[0].shape();
  if (s0.size() != 2) throw ShapeError("stack_tokens: tokens must be [N,d]");
  std::size_t n = s0[0], d = s0[1], t = tokens.size();
  for (const auto& tok : tokens)
    if (tok.shape() != s0)
      throw ShapeError("stack_tokens: mixed token shapes " + shape_str(s0) + " vs " +
                       shape_str(tok.shape()));
  auto out = Tensor<F>::zeros({n, t, d});
  F* po = out.data();
  for (std::size_t i = 0; i < t; ++i) {
    const F* src = tokens[i].data();
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(po + (b * t + i) * d, src + b * d, d * sizeof(F));
  }
  std::vector<const Tensor<F>*> refs;
  for (const auto& tok : tokens) refs.push_back(&tok);
  Tape<F>* tp = nullptr;
  for (const auto* r : refs) {
    Tape<F>* o = r->tape();
    if (o) {
      if (tp && tp != o) throw NumericError("stack_tokens: inputs on different tapes");
      tp = o;
    }
  }
  if (tp) {
    tp->adopt(out);
    std::vector<std::shared_ptr<TensorData<F>>> ins;
    for (const auto& tok : tokens) ins.push_back(tok.ptr());
    auto od = out.ptr();
    tp->push([ins, od, n, t, d] {
      const F* g = od->grad.data();
      for (std::size_t i = 0; i < t; ++i) {
        if (!ins[i]->tape) continue;
        F* gi = ins[i]->grad.data();
        for (std::size_t b = 0; b < n; ++b) {
          const F* src = g + (b * t + i) * d;
          F* dst = gi + b * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      }
    });
  }
  return out;
}

// Pull out token t of an [N,T,d] grid as [N,d].
template <typename F>
Tensor<F> select_token(const Tensor<F>& x, std::size_t t) {
  if (x.shape().size() != 3) throw ShapeError("select_token expects [N,T,d]");
  std::size_t n = x.shape()[0], tc = x.shape()[1], d = x.shape()[2];
  if (t >= tc) throw ShapeError("select_token: index " + std::to_string(t) + " out of range");
  auto out = Tensor<F>::zeros({n, d});
  const F* px = x.data();
  F* po = out.data();
  for (std::size_t b = 0; b < n; ++b)
    std::memcpy(po + b * d, px + (b * tc + t) * d, d * sizeof(F));
  Tape<F>* tp = detail::tape_of<F>({&x});
  if (tp) {
    tp->adopt(out);
    auto xd = x.ptr(), od = out.ptr();
    tp->push([xd, od, n, tc, d, t] {
      if (!xd->tape) return;
      const F* g = od->grad.data();
      F* gx = xd->grad.data();
      for (std::size_t b = 0; b < n; ++b) {
        F* dst = gx + (b * tc + t) * d;
        const F* src = g + b * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename F>
Tensor<F> concat_cols(const Tensor<F>& a, const Tensor<F>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[0] != b.shape()[0])
    throw ShapeError("concat_cols: need matching row counts, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  std::size_t n = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
  auto out = Tensor<F>::zeros({n, p + q});
  F* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(po + i * (p + q), a.data() + i * p, p * sizeof(F));
    std::memcpy(po + i * (p + q) + p, b.data() + i * q, q * sizeof(F));
  }
  Tape<F>* tp = detail::tape_of<F>({&a, &b});
  if (tp) {
    tp->adopt(out);
    auto ad = a.ptr(), bd = b.ptr(), od = out.ptr();
    tp->push([ad, bd, od, n, p, q] {
      const F* g = od->grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        if (ad->tape) {
          F* ga = ad->grad.data() + i * p;
          const F* src = g + i * (p + q);
          for (std::size_t j = 0; j < p; ++j) ga[j] += src[j];
        }
        if (bd->tape) {
          F* gb = bd->grad.data() + i * q;
          const F* src = g + i * (p + q) + p;
          for (std::size_t j = 0; j < q; ++j) gb[j] += src[j];
        }
      }
    });
  }
  return out;
}

// Mix tokens through a lower-triangular matrix stored packed row-major:
// row m holds coefficients for tokens 0..m at offset m(m+1)/2. Output
// token m of each batch row is sum_{t<=m} M[m,t] * x[:,t,:]; nothing later
// than m can reach it, which is the causality the packed layout enforces
// by construction.
template <typename F>
Tensor<F> causal_mix(const Tensor<F>& x, const Tensor<F>& packed) {
  if (x.shape().size() != 3) throw ShapeError("causal_mix expects [N,T,d]");
  std::size_t n = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  if (packed.shape() != Shape{t * (t + 1) / 2})
    throw ShapeError("causal_mix: packed matrix must be [" + std::to_string(t * (t + 1) / 2) +
                     "] for T=" + std::to_string(t) + ", got " + shape_str(packed.shape()));
  auto out = Tensor<F>::zeros({n, t, d});
  const F* px = x.data();
  const F* pm = packed.data();
  F* po = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    const F* xb = px + b * t * d;
    F* ob = po + b * t * d;
    for (std::size_t m = 0; m < t; ++m) {
      const F* row = pm + m * (m + 1) / 2;
      F* dst = ob + m * d;
      for (std::size_t s = 0; s <= m; ++s) {
        F coeff = row[s];
        const F* src = xb + s * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += coeff * src[j];
      }
    }
  }
  Tape<F>* tp = detail::tape_of<F>({&x, &packed});
  if (tp) {
    tp->adopt(out);
    auto xd = x.ptr(), md = packed.ptr(), od = out.ptr();
    tp->push([xd, md, od, n, t, d] {
      const F* g = od->grad.data();
      const F* pm = md->value.data();
      const F* px = xd->value.data();
      for (std::size_t b = 0; b < n; ++b) {
        const F* gb = g + b * t * d;
        for (std::size_t m = 0; m < t; ++m) {
          const F* row = pm + m * (m + 1) / 2;
          const F* gdst = gb + m * d;
          for (std::size_t s = 0; s <= m; ++s) {
            if (xd->tape) {
              F* gx = xd->grad.data() + (b * t + s) * d;
              F coeff = row[s];
              for (std::size_t j = 0; j < d; ++j) gx[j] += coeff * gdst[j];
            }
            if (md->tape) {
              const F* xs = px + (b * t + s) * d;
              F acc = 0;
              for (std::size_t j = 0; j < d; ++j) acc += gdst[j] * xs[j];
              md->grad[m * (m + 1) / 2 + s] += acc;
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace chaingoal
