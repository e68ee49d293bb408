#pragma once

// Shared helpers for the suites: random tensors and a central-difference
// gradient checker that compares the tape's analytic gradients against
// numeric ones on a double-precision projection of the op output.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <vector>

#include "bnas/ops.hpp"

namespace testutil {

using namespace bnas;

inline Tensor rand_tensor(Shape s, std::mt19937& rng, float lo = -1.f, float hi = 1.f) {
  Tensor t(s);
  std::uniform_real_distribution<float> d(lo, hi);
  for (float& v : t.values()) v = d(rng);
  return t;
}

// Shuffled evenly spaced values: pairwise distinct by > 2/numel and bounded
// away from zero, keeping ReLU kinks and pooling ties out of FD windows.
inline Tensor distinct_tensor(Shape s, std::mt19937& rng) {
  Tensor t(s);
  const int64_t n = s.numel();
  for (int64_t i = 0; i < n; ++i) {
    float v = -1.f + 2.f * static_cast<float>(i) / static_cast<float>(n) + 0.013f;
    t.values()[static_cast<size_t>(i)] = v;
  }
  std::shuffle(t.values().begin(), t.values().end(), rng);
  return t;
}

inline std::vector<float> rand_projection(int64_t n, std::mt19937& rng) {
  std::uniform_int_distribution<int> d(0, 1);
  std::vector<float> r(static_cast<size_t>(n));
  for (float& v : r) v = d(rng) ? 1.f : -1.f;
  return r;
}

// Tolerances pinned for the whole gradient suite: central difference with
// h = 1e-3 must match analytic gradients to 1e-3 relative error, with a
// small absolute allowance for float32 forward rounding. The forward carries
// ~1e-7 relative rounding per output; divided by 2h that is ~1e-4 of
// absolute noise on the FD side even when the true gradient is exactly zero
// (observed up to ~9e-5 on batch-norm channels with constant projections),
// so the check is the standard |analytic - fd| <= atol + rtol * max(|.|).
inline constexpr double kFdStep = 1e-3;
inline constexpr double kFdRelTol = 1e-3;
inline constexpr double kFdAbsTol = 2e-4;

template <typename F>
double projected_output(F&& op, const Tensor& x, const std::vector<float>& r) {
  Tape t;
  Tensor y = op(t, t.watch(x, nullptr));
  REQUIRE(static_cast<size_t>(y.numel()) == r.size());
  double L = 0;
  for (size_t i = 0; i < r.size(); ++i) L += static_cast<double>(r[i]) * static_cast<double>(y.values()[i]);
  return L;
}

// op: callable (Tape&, const Tensor&) -> Tensor; gradients are checked with
// respect to the tensor argument (fix other inputs in the closure).
template <typename F>
void check_gradient(F&& op, const Tensor& x, std::mt19937& rng) {
  std::vector<float> gx(static_cast<size_t>(x.numel()), 0.f);
  std::vector<float> r;
  {
    Tape t;
    Tensor xt = t.watch(x, &gx);
    Tensor y = op(t, xt);
    r = rand_projection(y.numel(), rng);
    Tensor loss = sum_all(t, mul_const(t, y, r));
    t.backward(loss);
  }
  Tensor xp = Tensor(x.shape(), x.values());
  for (int64_t j = 0; j < x.numel(); ++j) {
    const float orig = xp.values()[static_cast<size_t>(j)];
    xp.values()[static_cast<size_t>(j)] = orig + static_cast<float>(kFdStep);
    const double lp = projected_output(op, xp, r);
    xp.values()[static_cast<size_t>(j)] = orig - static_cast<float>(kFdStep);
    const double lm = projected_output(op, xp, r);
    xp.values()[static_cast<size_t>(j)] = orig;
    const double fd = (lp - lm) / (2 * kFdStep);
    const double an = static_cast<double>(gx[static_cast<size_t>(j)]);
    const double denom = std::max(std::abs(fd), std::abs(an));
    INFO("entry " << j << ": analytic " << an << " vs fd " << fd);
    REQUIRE(std::abs(an - fd) <= kFdAbsTol + kFdRelTol * denom);
  }
}

}  // namespace testutil
