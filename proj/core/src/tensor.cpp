// SPDX-License-Identifier: Apache-2.0
#include "cnxt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cnxt {

Shape4::Shape4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) : dims_{n, c, h, w} {
  std::size_t total = 1;
  for (std::size_t d : dims_) {
    if (d == 0) {
      throw ShapeError("shape dims must be positive: " + str());
    }
    if (total > std::numeric_limits<std::size_t>::max() / d) {
      throw ShapeError("element count overflows for shape " + str());
    }
    total *= d;
  }
}

std::string Shape4::str() const {
  return "(" + std::to_string(dims_[0]) + "," + std::to_string(dims_[1]) + "," +
         std::to_string(dims_[2]) + "," + std::to_string(dims_[3]) + ")";
}

template <typename T>
BasicTensor4<T> elementwise(const BasicTensor4<T>& a, const BasicTensor4<T>& b, BinaryOp op) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise shape mismatch: " + a.shape().str() + " vs " + b.shape().str());
  }
  std::vector<T> out(a.size());
  auto x = a.values();
  auto y = b.values();
  switch (op) {
    case BinaryOp::kAdd:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
      break;
    case BinaryOp::kSub:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
      break;
    case BinaryOp::kMul:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
      break;
  }
  return BasicTensor4<T>(a.shape(), std::move(out));
}

template <typename T>
BasicTensor4<T> scale(const BasicTensor4<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (T& v : out) v *= factor;
  return BasicTensor4<T>(a.shape(), std::move(out));
}

template <typename T>
BasicTensor4<T> reduce(const BasicTensor4<T>& a, Reduction kind, Axes axes) {
  const auto& in = a.shape();
  std::array<std::size_t, 4> od{};
  for (std::size_t k = 0; k < 4; ++k) od[k] = axes.contains(k) ? 1 : in[k];
  const Shape4 out_shape(od[0], od[1], od[2], od[3]);

  std::size_t group = 1;
  for (std::size_t k = 0; k < 4; ++k) {
    if (axes.contains(k)) group *= in[k];
  }

  const bool is_max = kind == Reduction::kMax;
  std::vector<double> acc(out_shape.count(),
                          is_max ? -std::numeric_limits<double>::infinity() : 0.0);
  const BasicTensor4<T> probe(out_shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Coord4 k = a.coords(i);
    const std::size_t o = probe.index(axes.contains(0) ? 0 : k.n, axes.contains(1) ? 0 : k.c,
                                      axes.contains(2) ? 0 : k.h, axes.contains(3) ? 0 : k.w);
    const double v = static_cast<double>(a[i]);
    switch (kind) {
      case Reduction::kSum:
      case Reduction::kMean:
        acc[o] += v;
        break;
      case Reduction::kMax:
        acc[o] = std::max(acc[o], v);
        break;
      case Reduction::kL1Norm:
        acc[o] += std::abs(v);
        break;
    }
  }
  std::vector<T> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    const double v = kind == Reduction::kMean ? acc[i] / static_cast<double>(group) : acc[i];
    out[i] = static_cast<T>(v);
  }
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> concat_channels(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.n() != sb.n() || sa.h() != sb.h() || sa.w() != sb.w()) {
    throw ShapeError("concat_channels mismatch: " + sa.str() + " vs " + sb.str());
  }
  const Shape4 out_shape(sa.n(), sa.c() + sb.c(), sa.h(), sa.w());
  std::vector<T> out;
  out.reserve(out_shape.count());
  for (std::size_t n = 0; n < sa.n(); ++n) {
    auto pa = a.values().subspan(n * sa.sample_size(), sa.sample_size());
    auto pb = b.values().subspan(n * sb.sample_size(), sb.sample_size());
    out.insert(out.end(), pa.begin(), pa.end());
    out.insert(out.end(), pb.begin(), pb.end());
  }
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> slice_channels(const BasicTensor4<T>& a, std::size_t begin, std::size_t count) {
  const auto& s = a.shape();
  if (count == 0 || begin + count > s.c()) {
    throw ShapeError("channel slice [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + s.str());
  }
  const Shape4 out_shape(s.n(), count, s.h(), s.w());
  std::vector<T> out;
  out.reserve(out_shape.count());
  for (std::size_t n = 0; n < s.n(); ++n) {
    auto src = a.values().subspan(a.index(n, begin, 0, 0), count * s.plane_size());
    out.insert(out.end(), src.begin(), src.end());
  }
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> stack_batch(std::span<const BasicTensor4<T>> samples) {
  if (samples.empty()) {
    throw ShapeError("stack_batch needs at least one sample");
  }
  const Shape4 first = samples.front().shape();
  std::size_t n = 0;
  for (const auto& s : samples) {
    if (s.shape().c() != first.c() || s.shape().h() != first.h() || s.shape().w() != first.w()) {
      throw ShapeError("stack_batch mismatch: " + first.str() + " vs " + s.shape().str());
    }
    n += s.shape().n();
  }
  std::vector<T> out;
  out.reserve(n * first.sample_size());
  for (const auto& s : samples) out.insert(out.end(), s.values().begin(), s.values().end());
  return BasicTensor4<T>(first.with_n(n), std::move(out));
}

template <typename T>
BasicTensor4<T> take_sample(const BasicTensor4<T>& a, std::size_t n) {
  if (n >= a.shape().n()) {
    throw ShapeError("sample " + std::to_string(n) + " out of range for " + a.shape().str());
  }
  const std::size_t len = a.shape().sample_size();
  auto src = a.values().subspan(n * len, len);
  return BasicTensor4<T>(a.shape().with_n(1), std::vector<T>(src.begin(), src.end()));
}

template <typename T>
bool all_finite(const BasicTensor4<T>& a) {
  return std::all_of(a.values().begin(), a.values().end(),
                     [](T v) { return std::isfinite(v); });
}

#define CNXT_INSTANTIATE_TENSOR(T)                                                           \
  template BasicTensor4<T> elementwise(const BasicTensor4<T>&, const BasicTensor4<T>&,       \
                                       BinaryOp);                                            \
  template BasicTensor4<T> scale(const BasicTensor4<T>&, T);                                 \
  template BasicTensor4<T> reduce(const BasicTensor4<T>&, Reduction, Axes);                  \
  template BasicTensor4<T> concat_channels(const BasicTensor4<T>&, const BasicTensor4<T>&);  \
  template BasicTensor4<T> slice_channels(const BasicTensor4<T>&, std::size_t, std::size_t); \
  template BasicTensor4<T> stack_batch(std::span<const BasicTensor4<T>>);                    \
  template BasicTensor4<T> take_sample(const BasicTensor4<T>&, std::size_t);                 \
  template bool all_finite(const BasicTensor4<T>&);

CNXT_INSTANTIATE_TENSOR(float)
CNXT_INSTANTIATE_TENSOR(double)

#undef CNXT_INSTANTIATE_TENSOR

}  // namespace cnxt
