// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cnxt/error.hpp"

namespace cnxt {

/// Dimensions of a dense (n, c, h, w) array. All dims are >= 1 and the
/// element count is checked for overflow at construction.
class Shape4 {
 public:
  Shape4() = default;
  Shape4(std::size_t n, std::size_t c, std::size_t h, std::size_t w);

  std::size_t n() const noexcept { return dims_[0]; }
  std::size_t c() const noexcept { return dims_[1]; }
  std::size_t h() const noexcept { return dims_[2]; }
  std::size_t w() const noexcept { return dims_[3]; }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::array<std::size_t, 4>& dims() const noexcept { return dims_; }

  std::size_t count() const noexcept { return dims_[0] * dims_[1] * dims_[2] * dims_[3]; }
  /// Elements in one (c, h, w) sample.
  std::size_t sample_size() const noexcept { return dims_[1] * dims_[2] * dims_[3]; }
  std::size_t plane_size() const noexcept { return dims_[2] * dims_[3]; }

  Shape4 with_n(std::size_t n) const { return {n, c(), h(), w()}; }
  Shape4 with_c(std::size_t c) const { return {n(), c, h(), w()}; }

  std::string str() const;

  friend bool operator==(const Shape4&, const Shape4&) = default;

 private:
  std::array<std::size_t, 4> dims_{1, 1, 1, 1};
};

struct Coord4 {
  std::size_t n = 0, c = 0, h = 0, w = 0;
  friend bool operator==(const Coord4&, const Coord4&) = default;
};

/// Dense 4-D array in row-major (n, c, h, w) order. Values are immutable
/// once constructed; operations return fresh tensors.
template <typename T>
class BasicTensor4 {
 public:
  using value_type = T;

  BasicTensor4() : data_(1, T{0}) {}
  explicit BasicTensor4(const Shape4& shape, T fill = T{0})
      : shape_(shape), data_(shape.count(), fill) {}
  BasicTensor4(const Shape4& shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.count()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }
  BasicTensor4(const Shape4& shape, std::initializer_list<T> values)
      : BasicTensor4(shape, std::vector<T>(values)) {}

  static BasicTensor4 filled(const Shape4& shape, T value) { return BasicTensor4(shape, value); }

  const Shape4& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::span<const T> values() const noexcept { return data_; }
  const T* data() const noexcept { return data_.data(); }

  std::size_t index(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
    return ((n * shape_.c() + c) * shape_.h() + h) * shape_.w() + w;
  }
  Coord4 coords(std::size_t flat) const noexcept {
    Coord4 k;
    k.w = flat % shape_.w();
    flat /= shape_.w();
    k.h = flat % shape_.h();
    flat /= shape_.h();
    k.c = flat % shape_.c();
    k.n = flat / shape_.c();
    return k;
  }

  T operator[](std::size_t flat) const { return data_[flat]; }
  T at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    if (n >= shape_.n() || c >= shape_.c() || h >= shape_.h() || w >= shape_.w()) {
      throw ShapeError("index out of range for shape " + shape_.str());
    }
    return data_[index(n, c, h, w)];
  }

  std::vector<T> to_vector() const { return data_; }
  /// Moves the storage out; the tensor is left as a 1x1x1x1 zero.
  std::vector<T> release() && {
    std::vector<T> out = std::move(data_);
    shape_ = Shape4{};
    data_.assign(1, T{0});
    return out;
  }

  BasicTensor4 reshape(const Shape4& shape) const& {
    if (shape.count() != shape_.count()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return BasicTensor4(shape, data_);
  }
  BasicTensor4 reshape(const Shape4& shape) && {
    if (shape.count() != shape_.count()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
    }
    return BasicTensor4(shape, std::move(*this).release());
  }

  template <typename U>
  BasicTensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor4<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor4&, const BasicTensor4&) = default;

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

using Tensor4 = BasicTensor4<float>;
using Tensor4d = BasicTensor4<double>;

enum class BinaryOp { kAdd, kSub, kMul };
enum class Reduction { kSum, kMean, kMax, kL1Norm };

/// Bit set over the four axes.
class Axes {
 public:
  static constexpr std::uint8_t kN = 1, kC = 2, kH = 4, kW = 8;

  constexpr Axes() = default;
  constexpr explicit Axes(std::uint8_t bits) : bits_(bits & 0xF) {}
  static constexpr Axes none() { return Axes(0); }
  static constexpr Axes all() { return Axes(0xF); }
  static constexpr Axes spatial() { return Axes(kH | kW); }

  constexpr bool contains(std::size_t axis) const { return (bits_ >> axis) & 1U; }
  constexpr std::uint8_t bits() const { return bits_; }

 private:
  std::uint8_t bits_ = 0;
};

template <typename T>
BasicTensor4<T> elementwise(const BasicTensor4<T>& a, const BasicTensor4<T>& b, BinaryOp op);

template <typename T>
BasicTensor4<T> add(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  return elementwise(a, b, BinaryOp::kAdd);
}
template <typename T>
BasicTensor4<T> sub(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  return elementwise(a, b, BinaryOp::kSub);
}
template <typename T>
BasicTensor4<T> mul(const BasicTensor4<T>& a, const BasicTensor4<T>& b) {
  return elementwise(a, b, BinaryOp::kMul);
}

template <typename T>
BasicTensor4<T> scale(const BasicTensor4<T>& a, T factor);

/// Reduced axes collapse to size 1. Accumulation runs in double.
template <typename T>
BasicTensor4<T> reduce(const BasicTensor4<T>& a, Reduction kind, Axes axes);

/// Concatenates along the channel axis; batch and spatial dims must agree.
template <typename T>
BasicTensor4<T> concat_channels(const BasicTensor4<T>& a, const BasicTensor4<T>& b);

template <typename T>
BasicTensor4<T> slice_channels(const BasicTensor4<T>& a, std::size_t begin, std::size_t count);

/// Stacks single-sample tensors along n.
template <typename T>
BasicTensor4<T> stack_batch(std::span<const BasicTensor4<T>> samples);

template <typename T>
BasicTensor4<T> take_sample(const BasicTensor4<T>& a, std::size_t n);

template <typename T>
bool all_finite(const BasicTensor4<T>& a);

}  // namespace cnxt
