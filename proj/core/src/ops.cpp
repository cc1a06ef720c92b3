// SPDX-License-Identifier: Apache-2.0
#include "cnxt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>

#include "cnxt/parallel.hpp"

namespace cnxt {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

void check_conv_operands(const Shape4& input, const Shape4& weights,
                         const std::optional<Shape4>& bias, const ConvSpec& spec) {
  spec.validate();
  if (input.c() != spec.in_channels) {
    throw ShapeError("conv input has " + std::to_string(input.c()) + " channels, spec " +
                     spec.str() + " expects " + std::to_string(spec.in_channels));
  }
  if (weights != spec.weight_shape()) {
    throw ShapeError("conv weights " + weights.str() + " do not match spec " + spec.str() +
                     " (expected " + spec.weight_shape().str() + ")");
  }
  if (bias && *bias != Shape4(1, spec.out_channels, 1, 1)) {
    throw ShapeError("conv bias " + bias->str() + " does not match " +
                     std::to_string(spec.out_channels) + " output channels");
  }
  (void)spec.output_shape(input);
}

template <typename T>
std::optional<Shape4> bias_shape(const ConvParams<T>& p) {
  if (!p.bias) return std::nullopt;
  return p.bias->shape();
}

// Lowers one group's input planes to a (channels*F*F) x (oh*ow) matrix.
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, const ConvSpec& s,
            std::size_t oh, std::size_t ow, T* col) {
  const std::size_t f = s.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(s.padding);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = x + c * h * w;
    for (std::size_t ki = 0; ki < f; ++ki) {
      for (std::size_t kj = 0; kj < f; ++kj) {
        T* dst = col + ((c * f + ki) * f + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s.stride + ki) - pad;
          T* row = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(row, row + ow, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s.stride + kj) - pad;
            row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T{0}
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t channels, std::size_t h, std::size_t w, const ConvSpec& s,
            std::size_t oh, std::size_t ow, T* x) {
  const std::size_t f = s.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(s.padding);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = x + c * h * w;
    for (std::size_t ki = 0; ki < f; ++ki) {
      for (std::size_t kj = 0; kj < f; ++kj) {
        const T* src = col + ((c * f + ki) * f + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * s.stride + ki) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * s.stride + kj) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst[static_cast<std::size_t>(ix)] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// ConvSpec

ConvSpec ConvSpec::standard(std::size_t kernel, std::size_t in, std::size_t out,
                            std::size_t stride, std::size_t padding) {
  return {kernel, in, out, 1, stride, padding};
}

ConvSpec ConvSpec::grouped(std::size_t kernel, std::size_t in, std::size_t out,
                           std::size_t groups, std::size_t stride, std::size_t padding) {
  return {kernel, in, out, groups, stride, padding};
}

ConvSpec ConvSpec::depthwise(std::size_t channels, std::size_t kernel, std::size_t stride,
                             std::size_t padding) {
  return {kernel, channels, channels, channels, stride, padding};
}

ConvSpec ConvSpec::pointwise(std::size_t in, std::size_t out) { return {1, in, out, 1, 1, 0}; }

void ConvSpec::validate() const {
  if (kernel == 0 || in_channels == 0 || out_channels == 0 || groups == 0 || stride == 0) {
    throw SpecError("conv spec counts must be positive: " + str());
  }
  if (in_channels % groups != 0 || out_channels % groups != 0) {
    throw SpecError("groups must divide both channel counts: " + str());
  }
}

std::size_t ConvSpec::output_extent(std::size_t extent) const {
  const std::size_t padded = extent + 2 * padding;
  if (padded < kernel) {
    throw SpecError("padded extent " + std::to_string(padded) + " is smaller than kernel " +
                    std::to_string(kernel));
  }
  return (padded - kernel) / stride + 1;
}

Shape4 ConvSpec::output_shape(const Shape4& input) const {
  return {input.n(), out_channels, output_extent(input.h()), output_extent(input.w())};
}

std::string ConvSpec::str() const {
  return "{F=" + std::to_string(kernel) + " A=" + std::to_string(in_channels) +
         " B=" + std::to_string(out_channels) + " G=" + std::to_string(groups) +
         " stride=" + std::to_string(stride) + " pad=" + std::to_string(padding) + "}";
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  const Shape4 s(1, channels, 1, 1);
  return {BasicTensor4<T>(s, T{1}), BasicTensor4<T>(s, T{0}), BasicTensor4<T>(s, T{0}),
          BasicTensor4<T>(s, T{1})};
}

template <typename T>
void BatchNormParams<T>::validate(std::size_t expected) const {
  const Shape4 s(1, expected, 1, 1);
  if (gamma.shape() != s || beta.shape() != s || running_mean.shape() != s ||
      running_var.shape() != s) {
    throw ShapeError("batch-norm parameters sized " + gamma.shape().str() + " do not match " +
                     std::to_string(expected) + " channels");
  }
  if (!(epsilon > 0.0)) {
    throw ConfigError("batch-norm epsilon must be positive");
  }
  for (T v : running_var.values()) {
    if (v < T{0}) throw ConfigError("batch-norm running variance must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// Convolution

template <typename T>
BasicTensor4<T> conv2d(const BasicTensor4<T>& input, const ConvParams<T>& params,
                       const ConvSpec& spec) {
  check_conv_operands(input.shape(), params.weights.shape(), bias_shape(params), spec);
  const Shape4& in = input.shape();
  const Shape4 out_shape = spec.output_shape(in);
  const std::size_t oh = out_shape.h(), ow = out_shape.w(), plane = oh * ow;
  const std::size_t cg = spec.in_per_group(), bg = spec.out_per_group();
  const std::size_t k = cg * spec.kernel * spec.kernel;
  const bool direct = spec.is_pointwise();

  std::vector<T> out(out_shape.count());
  const T* x = input.data();
  const T* w = params.weights.data();
  parallel_for(in.n(), [&](std::size_t n) {
    const auto col = std::make_unique_for_overwrite<T[]>(direct ? 0 : k * plane);
    for (std::size_t g = 0; g < spec.groups; ++g) {
      const T* xg = x + (n * in.c() + g * cg) * in.plane_size();
      const T* lowered = xg;
      if (!direct) {
        im2col(xg, cg, in.h(), in.w(), spec, oh, ow, col.get());
        lowered = col.get();
      }
      ConstMap<T> wm(w + g * bg * k, bg, k);
      ConstMap<T> cm(lowered, k, plane);
      MutMap<T> ym(out.data() + (n * spec.out_channels + g * bg) * plane, bg, plane);
      ym.noalias() = wm * cm;
    }
    if (params.bias) {
      for (std::size_t b = 0; b < spec.out_channels; ++b) {
        const T bv = (*params.bias)[b];
        T* row = out.data() + (n * spec.out_channels + b) * plane;
        for (std::size_t i = 0; i < plane; ++i) row[i] += bv;
      }
    }
  });
  return BasicTensor4<T>(out_shape, std::move(out));
}

namespace {

// Output positions o in [lo, hi) whose input tap o*stride + k - pad is inside [0, extent).
struct TapRange {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

TapRange tap_range(std::size_t k, std::size_t pad, std::size_t stride, std::size_t extent,
                   std::size_t out) {
  TapRange r;
  r.lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  if (extent + pad <= k) {
    r.hi = 0;
  } else {
    r.hi = std::min(out, (extent + pad - k - 1) / stride + 1);
  }
  if (r.hi < r.lo) r.hi = r.lo;
  return r;
}

}  // namespace

template <typename T>
BasicTensor4<T> depthwise_conv(const BasicTensor4<T>& input, const ConvParams<T>& params,
                               const ConvSpec& spec) {
  check_conv_operands(input.shape(), params.weights.shape(), bias_shape(params), spec);
  if (!spec.is_depthwise()) {
    throw SpecError("depthwise conv requires groups == in == out, got " + spec.str());
  }
  const Shape4& in = input.shape();
  const Shape4 out_shape = spec.output_shape(in);
  const std::size_t oh = out_shape.h(), ow = out_shape.w();
  const std::size_t h = in.h(), w = in.w(), f = spec.kernel, ch = in.c();
  const std::size_t s = spec.stride, pad = spec.padding;

  std::vector<T> out(out_shape.count());
  const T* x = input.data();
  const T* wt = params.weights.data();
  parallel_for(in.n() * ch, [&](std::size_t nc) {
    const std::size_t c = nc % ch;
    const T* plane = x + nc * h * w;
    const T* kern = wt + c * f * f;
    T* dst = out.data() + nc * oh * ow;
    const T bv = params.bias ? (*params.bias)[c] : T{0};
    std::fill_n(dst, oh * ow, bv);
    for (std::size_t ki = 0; ki < f; ++ki) {
      const TapRange ry = tap_range(ki, pad, s, h, oh);
      for (std::size_t kj = 0; kj < f; ++kj) {
        const TapRange rx = tap_range(kj, pad, s, w, ow);
        const T wv = kern[ki * f + kj];
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          const T* row = plane + (oy * s + ki - pad) * w;
          T* drow = dst + oy * ow;
          for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) drow[ox] += wv * row[ox * s + kj - pad];
        }
      }
    }
  });
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> pointwise_conv(const BasicTensor4<T>& input, const ConvParams<T>& params,
                               const ConvSpec& spec) {
  if (!spec.is_pointwise()) {
    throw SpecError("pointwise conv requires F=1, stride=1, padding=0, got " + spec.str());
  }
  return conv2d(input, params, spec);
}

template <typename T>
BasicTensor4<T> separable_conv(const BasicTensor4<T>& input, const ConvParams<T>& dw,
                               const ConvSpec& dw_spec, const ConvParams<T>& pw,
                               const ConvSpec& pw_spec) {
  if (pw_spec.in_channels != dw_spec.out_channels) {
    throw ShapeError("separable stages disagree: depthwise produces " +
                     std::to_string(dw_spec.out_channels) + " channels, pointwise expects " +
                     std::to_string(pw_spec.in_channels));
  }
  return pointwise_conv(depthwise_conv(input, dw, dw_spec), pw, pw_spec);
}

template <typename T>
GradientBundle<T> conv2d_backward(const BasicTensor4<T>& input, const ConvParams<T>& params,
                                  const ConvSpec& spec, const BasicTensor4<T>& upstream) {
  check_conv_operands(input.shape(), params.weights.shape(), bias_shape(params), spec);
  const Shape4& in = input.shape();
  const Shape4 out_shape = spec.output_shape(in);
  if (upstream.shape() != out_shape) {
    throw ShapeError("conv upstream gradient " + upstream.shape().str() + " expected " +
                     out_shape.str());
  }
  const std::size_t oh = out_shape.h(), ow = out_shape.w(), plane = oh * ow;
  const std::size_t cg = spec.in_per_group(), bg = spec.out_per_group();
  const std::size_t k = cg * spec.kernel * spec.kernel;
  const std::size_t wsize = params.weights.size();
  const bool direct = spec.is_pointwise();

  std::vector<T> dx(in.count(), T{0});
  std::vector<std::vector<T>> dw_partial(in.n());
  const T* x = input.data();
  const T* w = params.weights.data();
  const T* dy = upstream.data();
  parallel_for(in.n(), [&](std::size_t n) {
    const auto col = std::make_unique_for_overwrite<T[]>(direct ? 0 : k * plane);
    const auto dcol = std::make_unique_for_overwrite<T[]>(direct ? 0 : k * plane);
    auto& dwn = dw_partial[n];
    dwn.assign(wsize, T{0});
    for (std::size_t g = 0; g < spec.groups; ++g) {
      const T* xg = x + (n * in.c() + g * cg) * in.plane_size();
      T* dxg = dx.data() + (n * in.c() + g * cg) * in.plane_size();
      const T* lowered = xg;
      if (!direct) {
        im2col(xg, cg, in.h(), in.w(), spec, oh, ow, col.get());
        lowered = col.get();
      }
      ConstMap<T> wm(w + g * bg * k, bg, k);
      ConstMap<T> cm(lowered, k, plane);
      ConstMap<T> dym(dy + (n * spec.out_channels + g * bg) * plane, bg, plane);
      MutMap<T> dwm(dwn.data() + g * bg * k, bg, k);
      dwm.noalias() = dym * cm.transpose();
      if (direct) {
        MutMap<T> dxm(dxg, k, plane);
        dxm.noalias() = wm.transpose() * dym;
      } else {
        MutMap<T> dcm(dcol.get(), k, plane);
        dcm.noalias() = wm.transpose() * dym;
        col2im(dcol.get(), cg, in.h(), in.w(), spec, oh, ow, dxg);
      }
    }
  });

  std::vector<T> dw(wsize, T{0});
  for (const auto& part : dw_partial) {
    for (std::size_t i = 0; i < wsize; ++i) dw[i] += part[i];
  }

  GradientBundle<T> grads{BasicTensor4<T>(in, std::move(dx)),
                          BasicTensor4<T>(params.weights.shape(), std::move(dw)), std::nullopt};
  if (params.bias) {
    std::vector<T> db(spec.out_channels);
    for (std::size_t b = 0; b < spec.out_channels; ++b) {
      double acc = 0.0;
      for (std::size_t n = 0; n < in.n(); ++n) {
        const T* row = dy + (n * spec.out_channels + b) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += row[i];
      }
      db[b] = static_cast<T>(acc);
    }
    grads.d_bias = BasicTensor4<T>(params.bias->shape(), std::move(db));
  }
  return grads;
}

template <typename T>
GradientBundle<T> depthwise_conv_backward(const BasicTensor4<T>& input,
                                          const ConvParams<T>& params, const ConvSpec& spec,
                                          const BasicTensor4<T>& upstream) {
  check_conv_operands(input.shape(), params.weights.shape(), bias_shape(params), spec);
  if (!spec.is_depthwise()) {
    throw SpecError("depthwise conv requires groups == in == out, got " + spec.str());
  }
  const Shape4& in = input.shape();
  const Shape4 out_shape = spec.output_shape(in);
  if (upstream.shape() != out_shape) {
    throw ShapeError("depthwise upstream gradient " + upstream.shape().str() + " expected " +
                     out_shape.str());
  }
  const std::size_t oh = out_shape.h(), ow = out_shape.w();
  const std::size_t h = in.h(), w = in.w(), f = spec.kernel, ch = in.c();
  const T* x = input.data();
  const T* wt = params.weights.data();
  const T* dy = upstream.data();

  const std::size_t s = spec.stride, pad = spec.padding;
  std::vector<TapRange> rows(f), cols(f);
  for (std::size_t k = 0; k < f; ++k) {
    rows[k] = tap_range(k, pad, s, h, oh);
    cols[k] = tap_range(k, pad, s, w, ow);
  }

  std::vector<T> dx(in.count(), T{0});
  parallel_for(in.n() * ch, [&](std::size_t nc) {
    const std::size_t c = nc % ch;
    const T* kern = wt + c * f * f;
    const T* g = dy + nc * oh * ow;
    T* dst = dx.data() + nc * h * w;
    for (std::size_t ki = 0; ki < f; ++ki) {
      for (std::size_t kj = 0; kj < f; ++kj) {
        const T wv = kern[ki * f + kj];
        for (std::size_t oy = rows[ki].lo; oy < rows[ki].hi; ++oy) {
          T* drow = dst + (oy * s + ki - pad) * w;
          const T* grow = g + oy * ow;
          for (std::size_t ox = cols[kj].lo; ox < cols[kj].hi; ++ox) {
            drow[ox * s + kj - pad] += wv * grow[ox];
          }
        }
      }
    }
  });

  std::vector<T> dw(params.weights.size(), T{0});
  std::vector<T> db(ch, T{0});
  parallel_for(ch, [&](std::size_t c) {
    std::vector<double> acc(f * f, 0.0);
    double bacc = 0.0;
    for (std::size_t n = 0; n < in.n(); ++n) {
      const T* plane = x + (n * ch + c) * h * w;
      const T* g = dy + (n * ch + c) * oh * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) bacc += g[i];
      for (std::size_t ki = 0; ki < f; ++ki) {
        for (std::size_t kj = 0; kj < f; ++kj) {
          double tap = 0.0;
          for (std::size_t oy = rows[ki].lo; oy < rows[ki].hi; ++oy) {
            const T* row = plane + (oy * s + ki - pad) * w;
            const T* grow = g + oy * ow;
            T part = T{0};
            for (std::size_t ox = cols[kj].lo; ox < cols[kj].hi; ++ox) {
              part += grow[ox] * row[ox * s + kj - pad];
            }
            tap += part;
          }
          acc[ki * f + kj] += tap;
        }
      }
    }
    for (std::size_t i = 0; i < f * f; ++i) dw[c * f * f + i] = static_cast<T>(acc[i]);
    db[c] = static_cast<T>(bacc);
  });

  GradientBundle<T> grads{BasicTensor4<T>(in, std::move(dx)),
                          BasicTensor4<T>(params.weights.shape(), std::move(dw)), std::nullopt};
  if (params.bias) grads.d_bias = BasicTensor4<T>(params.bias->shape(), std::move(db));
  return grads;
}

// ---------------------------------------------------------------------------
// Activations, normalization, pooling

template <typename T>
BasicTensor4<T> relu6(const BasicTensor4<T>& input) {
  std::vector<T> out(input.values().begin(), input.values().end());
  for (T& v : out) {
    if (v < T{0}) v = T{0};
    else if (v > T{6}) v = T{6};
  }
  return BasicTensor4<T>(input.shape(), std::move(out));
}

template <typename T>
BasicTensor4<T> relu6_backward(const BasicTensor4<T>& input, const BasicTensor4<T>& upstream) {
  if (input.shape() != upstream.shape()) {
    throw ShapeError("relu6 gradient shape " + upstream.shape().str() + " vs input " +
                     input.shape().str());
  }
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = input[i];
    out[i] = (x > T{0} && x < T{6}) ? upstream[i] : T{0};
  }
  return BasicTensor4<T>(input.shape(), std::move(out));
}

namespace {

template <typename T>
struct BatchNormState {
  BasicTensor4<T> output;
  BasicTensor4<T> normalized;
  std::vector<double> inv_std;
};

template <typename T>
BatchNormState<T> batch_norm_impl(const BasicTensor4<T>& input, BatchNormParams<T>& params,
                                  Mode mode) {
  const Shape4& s = input.shape();
  params.validate(s.c());
  const std::size_t ch = s.c(), plane = s.plane_size();
  const std::size_t m = s.n() * plane;
  std::vector<double> mean(ch), var(ch), inv_std(ch);
  const T* x = input.data();

  if (mode == Mode::kTrain) {
    parallel_for(ch, [&](std::size_t c) {
      double sum = 0.0;
      for (std::size_t n = 0; n < s.n(); ++n) {
        const T* p = x + (n * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t n = 0; n < s.n(); ++n) {
        const T* p = x + (n * ch + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      mean[c] = mu;
      var[c] = sq / static_cast<double>(m);
    });
    std::vector<T> rm(ch), rv(ch);
    const double mom = params.momentum;
    for (std::size_t c = 0; c < ch; ++c) {
      const double unbiased = m > 1 ? var[c] * static_cast<double>(m) / (m - 1) : var[c];
      rm[c] = static_cast<T>((1.0 - mom) * params.running_mean[c] + mom * mean[c]);
      rv[c] = static_cast<T>((1.0 - mom) * params.running_var[c] + mom * unbiased);
    }
    params.running_mean = BasicTensor4<T>(params.running_mean.shape(), std::move(rm));
    params.running_var = BasicTensor4<T>(params.running_var.shape(), std::move(rv));
  } else {
    for (std::size_t c = 0; c < ch; ++c) {
      mean[c] = params.running_mean[c];
      var[c] = params.running_var[c];
    }
  }
  for (std::size_t c = 0; c < ch; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + params.epsilon);

  std::vector<T> xhat(s.count()), y(s.count());
  parallel_for(s.n() * ch, [&](std::size_t nc) {
    const std::size_t c = nc % ch;
    const double g = params.gamma[c], b = params.beta[c];
    const T* p = x + nc * plane;
    T* xh = xhat.data() + nc * plane;
    T* o = y.data() + nc * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = (p[i] - mean[c]) * inv_std[c];
      xh[i] = static_cast<T>(v);
      o[i] = static_cast<T>(g * v + b);
    }
  });
  return {BasicTensor4<T>(s, std::move(y)), BasicTensor4<T>(s, std::move(xhat)),
          std::move(inv_std)};
}

}  // namespace

template <typename T>
BasicTensor4<T> batch_norm(const BasicTensor4<T>& input, BatchNormParams<T>& params, Mode mode) {
  return batch_norm_impl(input, params, mode).output;
}

template <typename T>
BasicTensor4<T> avg_pool(const BasicTensor4<T>& input, const PoolSpec& pool) {
  const Shape4& s = input.shape();
  if (pool.window == 0 || pool.stride == 0) {
    throw SpecError("pool window and stride must be positive");
  }
  if (pool.window > s.h() || pool.window > s.w()) {
    throw SpecError("pool window " + std::to_string(pool.window) + " larger than input " +
                    s.str());
  }
  const std::size_t oh = (s.h() - pool.window) / pool.stride + 1;
  const std::size_t ow = (s.w() - pool.window) / pool.stride + 1;
  const Shape4 out_shape(s.n(), s.c(), oh, ow);
  std::vector<T> out(out_shape.count());
  const double inv = 1.0 / static_cast<double>(pool.window * pool.window);
  const T* x = input.data();
  parallel_for(s.n() * s.c(), [&](std::size_t nc) {
    const T* p = x + nc * s.plane_size();
    T* o = out.data() + nc * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < pool.window; ++i) {
          for (std::size_t j = 0; j < pool.window; ++j) {
            acc += p[(oy * pool.stride + i) * s.w() + ox * pool.stride + j];
          }
        }
        o[oy * ow + ox] = static_cast<T>(acc * inv);
      }
    }
  });
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> avg_pool_backward(const Shape4& input_shape, const PoolSpec& pool,
                                  const BasicTensor4<T>& upstream) {
  const std::size_t oh = (input_shape.h() - pool.window) / pool.stride + 1;
  const std::size_t ow = (input_shape.w() - pool.window) / pool.stride + 1;
  if (upstream.shape() != Shape4(input_shape.n(), input_shape.c(), oh, ow)) {
    throw ShapeError("avg_pool upstream gradient " + upstream.shape().str() +
                     " does not match input " + input_shape.str());
  }
  std::vector<T> dx(input_shape.count(), T{0});
  const T inv = static_cast<T>(1.0 / static_cast<double>(pool.window * pool.window));
  parallel_for(input_shape.n() * input_shape.c(), [&](std::size_t nc) {
    T* d = dx.data() + nc * input_shape.plane_size();
    const T* g = upstream.data() + nc * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const T v = g[oy * ow + ox] * inv;
        for (std::size_t i = 0; i < pool.window; ++i) {
          for (std::size_t j = 0; j < pool.window; ++j) {
            d[(oy * pool.stride + i) * input_shape.w() + ox * pool.stride + j] += v;
          }
        }
      }
    }
  });
  return BasicTensor4<T>(input_shape, std::move(dx));
}

template <typename T>
BasicTensor4<T> global_avg_pool(const BasicTensor4<T>& input) {
  const Shape4& s = input.shape();
  const Shape4 out_shape(s.n(), s.c(), 1, 1);
  std::vector<T> out(out_shape.count());
  for (std::size_t nc = 0; nc < out.size(); ++nc) {
    double acc = 0.0;
    const T* p = input.data() + nc * s.plane_size();
    for (std::size_t i = 0; i < s.plane_size(); ++i) acc += p[i];
    out[nc] = static_cast<T>(acc / static_cast<double>(s.plane_size()));
  }
  return BasicTensor4<T>(out_shape, std::move(out));
}

template <typename T>
BasicTensor4<T> global_avg_pool_backward(const Shape4& input_shape,
                                         const BasicTensor4<T>& upstream) {
  if (upstream.shape() != Shape4(input_shape.n(), input_shape.c(), 1, 1)) {
    throw ShapeError("global pool upstream gradient " + upstream.shape().str() +
                     " does not match input " + input_shape.str());
  }
  std::vector<T> dx(input_shape.count());
  const T inv = static_cast<T>(1.0 / static_cast<double>(input_shape.plane_size()));
  for (std::size_t nc = 0; nc < upstream.size(); ++nc) {
    std::fill_n(dx.begin() + static_cast<std::ptrdiff_t>(nc * input_shape.plane_size()),
                input_shape.plane_size(), upstream[nc] * inv);
  }
  return BasicTensor4<T>(input_shape, std::move(dx));
}

// ---------------------------------------------------------------------------
// Classifier head

template <typename T>
BasicTensor4<T> linear(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                       const BasicTensor4<T>& bias) {
  const std::size_t n = input.shape().n(), in = input.shape().sample_size();
  const std::size_t out = weights.shape().n();
  if (weights.shape().sample_size() != in) {
    throw ShapeError("linear weights " + weights.shape().str() + " expect " +
                     std::to_string(weights.shape().sample_size()) + " features, input has " +
                     std::to_string(in));
  }
  if (bias.shape() != Shape4(1, out, 1, 1)) {
    throw ShapeError("linear bias " + bias.shape().str() + " does not match " +
                     std::to_string(out) + " outputs");
  }
  std::vector<T> y(n * out);
  ConstMap<T> xm(input.data(), n, in);
  ConstMap<T> wm(weights.data(), out, in);
  MutMap<T> ym(y.data(), n, out);
  ym.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t o = 0; o < out; ++o) y[i * out + o] += bias[o];
  }
  return BasicTensor4<T>(Shape4(n, out, 1, 1), std::move(y));
}

template <typename T>
GradientBundle<T> linear_backward(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                                  const BasicTensor4<T>& upstream) {
  const std::size_t n = input.shape().n(), in = input.shape().sample_size();
  const std::size_t out = weights.shape().n();
  if (upstream.shape() != Shape4(n, out, 1, 1)) {
    throw ShapeError("linear upstream gradient " + upstream.shape().str() + " expected (" +
                     std::to_string(n) + "," + std::to_string(out) + ",1,1)");
  }
  std::vector<T> dx(n * in), dw(out * in), db(out);
  ConstMap<T> xm(input.data(), n, in);
  ConstMap<T> wm(weights.data(), out, in);
  ConstMap<T> gm(upstream.data(), n, out);
  MutMap<T>(dx.data(), n, in).noalias() = gm * wm;
  MutMap<T>(dw.data(), out, in).noalias() = gm.transpose() * xm;
  for (std::size_t o = 0; o < out; ++o) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += upstream[i * out + o];
    db[o] = static_cast<T>(acc);
  }
  return {BasicTensor4<T>(input.shape(), std::move(dx)),
          BasicTensor4<T>(weights.shape(), std::move(dw)),
          BasicTensor4<T>(Shape4(1, out, 1, 1), std::move(db))};
}

template <typename T>
BasicTensor4<T> softmax(const BasicTensor4<T>& input) {
  const std::size_t rows = input.shape().n(), cols = input.shape().sample_size();
  std::vector<T> out(input.size());
  std::vector<double> e(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = input.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      e[j] = std::exp(static_cast<double>(x[j]) - mx);
      total += e[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = static_cast<T>(e[j] / total);
  }
  return BasicTensor4<T>(input.shape(), std::move(out));
}

template <typename T>
BasicTensor4<T> softmax_backward(const BasicTensor4<T>& output, const BasicTensor4<T>& upstream) {
  if (output.shape() != upstream.shape()) {
    throw ShapeError("softmax gradient shape " + upstream.shape().str() + " vs output " +
                     output.shape().str());
  }
  const std::size_t rows = output.shape().n(), cols = output.shape().sample_size();
  std::vector<T> dx(output.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      dot += static_cast<double>(upstream[r * cols + j]) * output[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t i = r * cols + j;
      dx[i] = static_cast<T>(output[i] * (upstream[i] - dot));
    }
  }
  return BasicTensor4<T>(output.shape(), std::move(dx));
}

std::vector<float> dropout_mask(std::size_t count, double rate, std::uint64_t seed) {
  check_rate(rate);
  std::mt19937_64 gen(seed);
  const float keep_scale = static_cast<float>(1.0 / (1.0 - rate));
  std::vector<float> mask(count);
  for (float& m : mask) {
    const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
    m = u < rate ? 0.0F : keep_scale;
  }
  return mask;
}

template <typename T>
BasicTensor4<T> dropout(const BasicTensor4<T>& input, double rate, Mode mode,
                        std::uint64_t seed) {
  check_rate(rate);
  if (mode == Mode::kInfer || rate == 0.0) return input;
  const auto mask = dropout_mask(input.size(), rate, seed);
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] * static_cast<T>(mask[i]);
  return BasicTensor4<T>(input.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Op instances

namespace {
[[noreturn]] void missing_forward(const char* op) {
  throw UsageError(std::string(op) + " backward called without a cached forward pass");
}
}  // namespace

template <typename T>
ConvOp<T>::ConvOp(ConvSpec spec, Kind kind) : spec_(spec), kind_(kind) {
  spec_.validate();
  if (kind_ == Kind::kDepthwise && !spec_.is_depthwise()) {
    throw SpecError("depthwise op requires groups == in == out, got " + spec_.str());
  }
  if (kind_ == Kind::kPointwise && !spec_.is_pointwise()) {
    throw SpecError("pointwise op requires F=1, stride=1, padding=0, got " + spec_.str());
  }
}

template <typename T>
BasicTensor4<T> ConvOp<T>::forward(const BasicTensor4<T>& input, const ConvParams<T>& params) {
  BasicTensor4<T> out = kind_ == Kind::kDepthwise ? depthwise_conv(input, params, spec_)
                                                  : conv2d(input, params, spec_);
  input_ = input;
  params_ = params;
  return out;
}

template <typename T>
GradientBundle<T> ConvOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!input_ || !params_) missing_forward("conv");
  return kind_ == Kind::kDepthwise ? depthwise_conv_backward(*input_, *params_, spec_, upstream)
                                   : conv2d_backward(*input_, *params_, spec_, upstream);
}

template <typename T>
BasicTensor4<T> BatchNormOp<T>::forward(const BasicTensor4<T>& input, BatchNormParams<T>& params,
                                        Mode mode) {
  auto state = batch_norm_impl(input, params, mode);
  std::vector<double> gamma(params.gamma.values().begin(), params.gamma.values().end());
  cache_ = Cache{std::move(state.normalized), std::move(state.inv_std), std::move(gamma), mode};
  return std::move(state.output);
}

template <typename T>
GradientBundle<T> BatchNormOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!cache_) missing_forward("batch_norm");
  const auto& xhat = cache_->normalized;
  const Shape4& s = xhat.shape();
  if (upstream.shape() != s) {
    throw ShapeError("batch-norm upstream gradient " + upstream.shape().str() + " expected " +
                     s.str());
  }
  const std::size_t ch = s.c(), plane = s.plane_size();
  const double m = static_cast<double>(s.n() * plane);
  std::vector<double> dgamma(ch, 0.0), dbeta(ch, 0.0);
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t n = 0; n < s.n(); ++n) {
      const std::size_t off = (n * ch + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dgamma[c] += static_cast<double>(upstream[off + i]) * xhat[off + i];
        dbeta[c] += upstream[off + i];
      }
    }
  }
  std::vector<T> dx(s.count());
  const bool train = cache_->mode == Mode::kTrain;
  parallel_for(s.n() * ch, [&](std::size_t nc) {
    const std::size_t c = nc % ch;
    const double scale_c = cache_->gamma[c] * cache_->inv_std[c];
    const std::size_t off = nc * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double g = upstream[off + i];
      dx[off + i] = train ? static_cast<T>(scale_c / m *
                                           (m * g - dbeta[c] - xhat[off + i] * dgamma[c]))
                          : static_cast<T>(scale_c * g);
    }
  });
  std::vector<T> dg(dgamma.begin(), dgamma.end()), db(dbeta.begin(), dbeta.end());
  const Shape4 ps(1, ch, 1, 1);
  return {BasicTensor4<T>(s, std::move(dx)), BasicTensor4<T>(ps, std::move(dg)),
          BasicTensor4<T>(ps, std::move(db))};
}

template <typename T>
BasicTensor4<T> ReLU6Op<T>::forward(const BasicTensor4<T>& input) {
  input_ = input;
  return relu6(input);
}

template <typename T>
GradientBundle<T> ReLU6Op<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!input_) missing_forward("relu6");
  return {relu6_backward(*input_, upstream), std::nullopt, std::nullopt};
}

template <typename T>
BasicTensor4<T> AvgPoolOp<T>::forward(const BasicTensor4<T>& input) {
  auto out = avg_pool(input, pool_);
  input_shape_ = input.shape();
  return out;
}

template <typename T>
GradientBundle<T> AvgPoolOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!input_shape_) missing_forward("avg_pool");
  return {avg_pool_backward(*input_shape_, pool_, upstream), std::nullopt, std::nullopt};
}

template <typename T>
BasicTensor4<T> GlobalAvgPoolOp<T>::forward(const BasicTensor4<T>& input) {
  input_shape_ = input.shape();
  return global_avg_pool(input);
}

template <typename T>
GradientBundle<T> GlobalAvgPoolOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!input_shape_) missing_forward("global_avg_pool");
  return {global_avg_pool_backward(*input_shape_, upstream), std::nullopt, std::nullopt};
}

template <typename T>
BasicTensor4<T> LinearOp<T>::forward(const BasicTensor4<T>& input, const BasicTensor4<T>& weights,
                                     const BasicTensor4<T>& bias) {
  auto out = linear(input, weights, bias);
  input_ = input;
  weights_ = weights;
  return out;
}

template <typename T>
GradientBundle<T> LinearOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!input_ || !weights_) missing_forward("linear");
  return linear_backward(*input_, *weights_, upstream);
}

template <typename T>
BasicTensor4<T> SoftmaxOp<T>::forward(const BasicTensor4<T>& input) {
  output_ = softmax(input);
  return *output_;
}

template <typename T>
GradientBundle<T> SoftmaxOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!output_) missing_forward("softmax");
  return {softmax_backward(*output_, upstream), std::nullopt, std::nullopt};
}

template <typename T>
BasicTensor4<T> DropoutOp<T>::forward(const BasicTensor4<T>& input, double rate, Mode mode,
                                      std::uint64_t seed) {
  check_rate(rate);
  shape_ = input.shape();
  if (mode == Mode::kInfer || rate == 0.0) {
    mask_ = std::vector<float>{};
    return input;
  }
  mask_ = dropout_mask(input.size(), rate, seed);
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] * static_cast<T>((*mask_)[i]);
  return BasicTensor4<T>(input.shape(), std::move(out));
}

template <typename T>
GradientBundle<T> DropoutOp<T>::backward(const BasicTensor4<T>& upstream) const {
  if (!mask_ || !shape_) missing_forward("dropout");
  if (upstream.shape() != *shape_) {
    throw ShapeError("dropout upstream gradient " + upstream.shape().str() + " expected " +
                     shape_->str());
  }
  if (mask_->empty()) return {upstream, std::nullopt, std::nullopt};
  std::vector<T> dx(upstream.size());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = upstream[i] * static_cast<T>((*mask_)[i]);
  return {BasicTensor4<T>(upstream.shape(), std::move(dx)), std::nullopt, std::nullopt};
}

#define CNXT_INSTANTIATE_OPS(T)                                                               \
  template struct BatchNormParams<T>;                                                         \
  template BasicTensor4<T> conv2d(const BasicTensor4<T>&, const ConvParams<T>&,               \
                                  const ConvSpec&);                                           \
  template BasicTensor4<T> depthwise_conv(const BasicTensor4<T>&, const ConvParams<T>&,       \
                                          const ConvSpec&);                                   \
  template BasicTensor4<T> pointwise_conv(const BasicTensor4<T>&, const ConvParams<T>&,       \
                                          const ConvSpec&);                                   \
  template BasicTensor4<T> separable_conv(const BasicTensor4<T>&, const ConvParams<T>&,       \
                                          const ConvSpec&, const ConvParams<T>&,              \
                                          const ConvSpec&);                                   \
  template BasicTensor4<T> relu6(const BasicTensor4<T>&);                                     \
  template BasicTensor4<T> batch_norm(const BasicTensor4<T>&, BatchNormParams<T>&, Mode);     \
  template BasicTensor4<T> avg_pool(const BasicTensor4<T>&, const PoolSpec&);                 \
  template BasicTensor4<T> global_avg_pool(const BasicTensor4<T>&);                           \
  template BasicTensor4<T> linear(const BasicTensor4<T>&, const BasicTensor4<T>&,             \
                                  const BasicTensor4<T>&);                                    \
  template BasicTensor4<T> softmax(const BasicTensor4<T>&);                                   \
  template BasicTensor4<T> dropout(const BasicTensor4<T>&, double, Mode, std::uint64_t);      \
  template GradientBundle<T> conv2d_backward(const BasicTensor4<T>&, const ConvParams<T>&,    \
                                             const ConvSpec&, const BasicTensor4<T>&);        \
  template GradientBundle<T> depthwise_conv_backward(                                         \
      const BasicTensor4<T>&, const ConvParams<T>&, const ConvSpec&, const BasicTensor4<T>&); \
  template BasicTensor4<T> relu6_backward(const BasicTensor4<T>&, const BasicTensor4<T>&);    \
  template BasicTensor4<T> avg_pool_backward(const Shape4&, const PoolSpec&,                  \
                                             const BasicTensor4<T>&);                         \
  template BasicTensor4<T> global_avg_pool_backward(const Shape4&, const BasicTensor4<T>&);   \
  template GradientBundle<T> linear_backward(const BasicTensor4<T>&, const BasicTensor4<T>&,  \
                                             const BasicTensor4<T>&);                         \
  template BasicTensor4<T> softmax_backward(const BasicTensor4<T>&, const BasicTensor4<T>&);  \
  template class ConvOp<T>;                                                                   \
  template class BatchNormOp<T>;                                                              \
  template class ReLU6Op<T>;                                                                  \
  template class AvgPoolOp<T>;                                                                \
  template class GlobalAvgPoolOp<T>;                                                          \
  template class LinearOp<T>;                                                                 \
  template class SoftmaxOp<T>;                                                                \
  template class DropoutOp<T>;

CNXT_INSTANTIATE_OPS(float)
CNXT_INSTANTIATE_OPS(double)

#undef CNXT_INSTANTIATE_OPS

}  // namespace cnxt
