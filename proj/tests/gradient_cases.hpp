// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every backward kernel and loss gradient, in
// double precision. Shared by the unit tests and the acceptance runner.
#pragma once

#include <string>
#include <vector>

#include "cnxt/ops.hpp"
#include "cnxt/training.hpp"
#include "test_support.hpp"

namespace cnxt::testing {

struct GradCase {
  std::string name;
  double rel_error = 0.0;
};

namespace detail {

inline std::vector<double> vec(const Tensor4d& t) { return t.to_vector(); }

/// FD of project(op(x), r) against the analytic vector-Jacobian product.
inline double check(const std::function<double(const std::vector<double>&)>& f,
                    const std::vector<double>& at, const Tensor4d& analytic) {
  const auto fd = numeric_gradient(f, at);
  return relative_error(fd, analytic.values());
}

inline void conv_case(std::vector<GradCase>& out, const std::string& name, const ConvSpec& spec,
                      const Shape4& in_shape, ConvOp<double>::Kind kind, std::mt19937_64& rng) {
  const Tensor4d x = random_tensor(in_shape, rng);
  const Tensor4d w = random_tensor(spec.weight_shape(), rng);
  const Tensor4d b = random_tensor({1, spec.out_channels, 1, 1}, rng);
  const Shape4 out_shape = spec.output_shape(in_shape);
  const Tensor4d r = random_tensor(out_shape, rng);
  auto run = [&](const Tensor4d& xi, const Tensor4d& wi, const Tensor4d& bi) {
    ConvOp<double> op(spec, kind);
    return project(op.forward(xi, ConvParams<double>{wi, bi}), r);
  };
  ConvOp<double> op(spec, kind);
  op.forward(x, ConvParams<double>{w, b});
  const auto g = op.backward(r);
  out.push_back({name + " d_input",
                 check([&](const auto& v) { return run(Tensor4d(x.shape(), v), w, b); }, vec(x), g.d_input)});
  out.push_back({name + " d_weights",
                 check([&](const auto& v) { return run(x, Tensor4d(w.shape(), v), b); }, vec(w), *g.d_weights)});
  out.push_back({name + " d_bias",
                 check([&](const auto& v) { return run(x, w, Tensor4d(b.shape(), v)); }, vec(b), *g.d_bias)});
}

}  // namespace detail

inline std::vector<GradCase> gradient_cases(std::uint64_t seed = 2024) {
  using detail::check;
  using detail::vec;
  std::mt19937_64 rng(seed);
  std::vector<GradCase> out;

  detail::conv_case(out, "conv2d 1x2x4x4 F3", ConvSpec::standard(3, 2, 3, 1, 1), {1, 2, 4, 4},
                    ConvOp<double>::Kind::kGeneral, rng);
  detail::conv_case(out, "conv2d grouped strided", ConvSpec::grouped(3, 4, 4, 2, 2, 1), {2, 4, 5, 5},
                    ConvOp<double>::Kind::kGeneral, rng);
  detail::conv_case(out, "depthwise", ConvSpec::depthwise(3, 3, 1, 1), {2, 3, 5, 5},
                    ConvOp<double>::Kind::kDepthwise, rng);
  detail::conv_case(out, "depthwise strided", ConvSpec::depthwise(2, 3, 2, 0), {1, 2, 7, 6},
                    ConvOp<double>::Kind::kDepthwise, rng);
  detail::conv_case(out, "pointwise", ConvSpec::pointwise(4, 5), {2, 4, 3, 3},
                    ConvOp<double>::Kind::kPointwise, rng);

  {
    const Tensor4d x = avoid_kinks(random_tensor({2, 3, 4, 4}, rng, -2.0, 8.0));
    const Tensor4d r = random_tensor(x.shape(), rng);
    ReLU6Op<double> op;
    op.forward(x);
    out.push_back({"relu6", check([&](const auto& v) { return project(relu6(Tensor4d(x.shape(), v)), r); },
                                  vec(x), op.backward(r).d_input)});
  }

  {
    const Shape4 s(3, 2, 3, 3);
    const Tensor4d x = random_tensor(s, rng, -2.0, 3.0);
    auto params = BatchNormParams<double>::identity(2);
    params.gamma = random_tensor({1, 2, 1, 1}, rng, 0.5, 1.5);
    params.beta = random_tensor({1, 2, 1, 1}, rng);
    params.running_mean = random_tensor({1, 2, 1, 1}, rng);
    params.running_var = random_tensor({1, 2, 1, 1}, rng, 0.5, 2.0);
    const Tensor4d r = random_tensor(s, rng);
    for (Mode mode : {Mode::kTrain, Mode::kInfer}) {
      const std::string tag = mode == Mode::kTrain ? "batch_norm train" : "batch_norm infer";
      auto run = [&](const Tensor4d& xi, const Tensor4d& gi, const Tensor4d& bi) {
        auto p = params;
        p.gamma = gi;
        p.beta = bi;
        return project(batch_norm(xi, p, mode), r);
      };
      auto p = params;
      BatchNormOp<double> op;
      op.forward(x, p, mode);
      const auto g = op.backward(r);
      out.push_back({tag + " d_input", check([&](const auto& v) {
                       return run(Tensor4d(s, v), params.gamma, params.beta);
                     }, vec(x), g.d_input)});
      out.push_back({tag + " d_gamma", check([&](const auto& v) {
                       return run(x, Tensor4d(params.gamma.shape(), v), params.beta);
                     }, vec(params.gamma), *g.d_weights)});
      out.push_back({tag + " d_beta", check([&](const auto& v) {
                       return run(x, params.gamma, Tensor4d(params.beta.shape(), v));
                     }, vec(params.beta), *g.d_bias)});
    }
  }

  {
    const Tensor4d x = random_tensor({2, 2, 4, 6}, rng);
    const PoolSpec pool{};
    const Tensor4d r = random_tensor(avg_pool(x, pool).shape(), rng);
    AvgPoolOp<double> op(pool);
    op.forward(x);
    out.push_back({"avg_pool", check([&](const auto& v) { return project(avg_pool(Tensor4d(x.shape(), v), pool), r); },
                                     vec(x), op.backward(r).d_input)});
    const Tensor4d rg = random_tensor({2, 2, 1, 1}, rng);
    GlobalAvgPoolOp<double> gp;
    gp.forward(x);
    out.push_back({"global_avg_pool",
                   check([&](const auto& v) { return project(global_avg_pool(Tensor4d(x.shape(), v)), rg); },
                         vec(x), gp.backward(rg).d_input)});
  }

  {
    const Tensor4d x = random_tensor({3, 6, 1, 1}, rng);
    const Tensor4d w = random_tensor({4, 6, 1, 1}, rng);
    const Tensor4d b = random_tensor({1, 4, 1, 1}, rng);
    const Tensor4d r = random_tensor({3, 4, 1, 1}, rng);
    LinearOp<double> op;
    op.forward(x, w, b);
    const auto g = op.backward(r);
    out.push_back({"linear d_input", check([&](const auto& v) { return project(linear(Tensor4d(x.shape(), v), w, b), r); },
                                           vec(x), g.d_input)});
    out.push_back({"linear d_weights", check([&](const auto& v) { return project(linear(x, Tensor4d(w.shape(), v), b), r); },
                                             vec(w), *g.d_weights)});
    out.push_back({"linear d_bias", check([&](const auto& v) { return project(linear(x, w, Tensor4d(b.shape(), v)), r); },
                                          vec(b), *g.d_bias)});
  }

  {
    const Tensor4d x = random_tensor({3, 5, 1, 1}, rng, -3, 3);
    const Tensor4d r = random_tensor(x.shape(), rng);
    SoftmaxOp<double> op;
    op.forward(x);
    out.push_back({"softmax", check([&](const auto& v) { return project(softmax(Tensor4d(x.shape(), v)), r); },
                                    vec(x), op.backward(r).d_input)});
  }

  {
    const Tensor4d x = random_tensor({4, 8, 1, 1}, rng);
    const Tensor4d r = random_tensor(x.shape(), rng);
    DropoutOp<double> op;
    op.forward(x, 0.3, Mode::kTrain, 77);
    out.push_back({"dropout", check([&](const auto& v) {
                     return project(dropout(Tensor4d(x.shape(), v), 0.3, Mode::kTrain, 77), r);
                   }, vec(x), op.backward(r).d_input)});
  }

  {
    const Tensor4d z = random_tensor({4, 6, 1, 1}, rng, -2, 2);
    const std::vector<std::size_t> labels{0, 3, 5, 3};
    const std::vector<std::size_t> counts{10, 40, 5, 20, 1, 7};
    auto ce = [&](const std::vector<double>& v) {
      return cross_entropy_loss(softmax(Tensor4d(z.shape(), v)), labels).loss;
    };
    out.push_back({"cross_entropy", check(ce, vec(z), cross_entropy_loss(softmax(z), labels).grad)});
    for (double gamma : {0.0, 0.5, 2.0}) {
      auto fl = [&](const std::vector<double>& v) {
        return class_balanced_focal_loss(softmax(Tensor4d(z.shape(), v)), labels, counts, 0.9, gamma).loss;
      };
      out.push_back({"focal gamma=" + std::to_string(gamma).substr(0, 3),
                     check(fl, vec(z), class_balanced_focal_loss(softmax(z), labels, counts, 0.9, gamma).grad)});
    }
  }

  {
    std::vector<std::vector<double>> groups{{0.3, -0.4, 1.2}, {2.0}, {-0.7, 0.1}};
    constexpr double rate = 0.05;
    const auto analytic = group_lasso_penalty(groups, rate);
    std::vector<double> flat, grad;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      flat.insert(flat.end(), groups[g].begin(), groups[g].end());
      grad.insert(grad.end(), analytic.grads[g].begin(), analytic.grads[g].end());
    }
    auto f = [&](const std::vector<double>& v) {
      auto gs = groups;
      std::size_t k = 0;
      for (auto& g : gs)
        for (auto& x : g) x = v[k++];
      return group_lasso_penalty(gs, rate).penalty;
    };
    out.push_back({"group_lasso", relative_error(numeric_gradient(f, flat), grad)});

    const Tensor4d w = random_tensor({6, 4, 1, 1}, rng);
    auto s = [&](const std::vector<double>& v) { return slot_group_lasso(Tensor4d(w.shape(), v), 3, rate).loss; };
    out.push_back({"slot_group_lasso", check(s, vec(w), slot_group_lasso(w, 3, rate).grad)});
  }
  return out;
}

}  // namespace cnxt::testing
