// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations shared by the unit tests and the acceptance
// runner. Nothing here calls into the kernels under test.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "cnxt/ops.hpp"
#include "cnxt/tensor.hpp"

namespace cnxt::testing {

inline Tensor4d random_tensor(const Shape4& shape, std::mt19937_64& rng, double lo = -1.0,
                              double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape.count());
  for (auto& x : v) x = u(rng);
  return Tensor4d(shape, std::move(v));
}

inline Tensor4 random_tensorf(const Shape4& shape, std::mt19937_64& rng, double lo = -1.0,
                              double hi = 1.0) {
  return random_tensor(shape, rng, lo, hi).cast<float>();
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Direct summation over (n, o, y, x, c, ky, kx).
inline Tensor4d conv_oracle(const Tensor4d& in, const Tensor4d& w, const std::vector<double>* bias,
                            std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t N = in.shape().n(), A = in.shape().c(), H = in.shape().h(), W = in.shape().w();
  const std::size_t B = w.shape().n(), F = w.shape().h();
  const std::size_t ag = A / groups, bg = B / groups;
  const std::size_t OH = (H + 2 * pad - F) / stride + 1, OW = (W + 2 * pad - F) / stride + 1;
  std::vector<double> out(N * B * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < B; ++o)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t x = 0; x < OW; ++x) {
          double acc = bias ? (*bias)[o] : 0.0;
          const std::size_t g = o / bg;
          for (std::size_t c = 0; c < ag; ++c)
            for (std::size_t ky = 0; ky < F; ++ky)
              for (std::size_t kx = 0; kx < F; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                const auto ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                    ix >= static_cast<std::ptrdiff_t>(W)) {
                  continue;
                }
                acc += in.at(n, g * ag + c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) *
                       w.at(o, c, ky, kx);
              }
          out[((n * B + o) * OH + y) * OW + x] = acc;
        }
  return Tensor4d(Shape4(N, B, OH, OW), std::move(out));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

template <typename A, typename B>
double max_abs_diff(const BasicTensor4<A>& a, const BasicTensor4<B>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// Central differences, step h, of a scalar function of a flat vector.
inline std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                            std::vector<double> x, double h = 1e-4) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double up = f(x);
    x[i] = x0 - h;
    const double down = f(x);
    x[i] = x0;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  return denom == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

/// Σ r_i y_i for a fixed random projection r, so one FD sweep checks the
/// full vector-Jacobian product.
inline double project(const Tensor4d& y, const Tensor4d& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
  return s;
}

inline Tensor4d with_values(const Shape4& s, const std::vector<double>& v) { return Tensor4d(s, v); }

/// Moves values away from the relu6 kinks at 0 and 6 by at least `gap`.
inline Tensor4d avoid_kinks(const Tensor4d& t, double gap = 1e-2) {
  std::vector<double> v = t.to_vector();
  for (auto& x : v) {
    for (double k : {0.0, 6.0}) {
      if (std::abs(x - k) < gap) x = x < k ? k - gap : k + gap;
    }
  }
  return Tensor4d(t.shape(), std::move(v));
}

inline std::vector<double> softmax_row(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> e(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (e[i] = std::exp(z[i] - m));
  for (auto& v : e) v /= s;
  return e;
}

/// Stable-sort oracle for one group: the indices of the `keep` largest
/// scores, lower index first on ties, returned ascending.
inline std::vector<std::size_t> sort_keep(std::span<const double> scores, std::size_t keep) {
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace cnxt::testing
