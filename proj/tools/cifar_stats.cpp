// SPDX-License-Identifier: Apache-2.0
//
// Per-channel mean and standard deviation of a CIFAR train split, pixels
// scaled to [0, 1].
#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>

#include "cnxt/data.hpp"
#include "cnxt/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Channel statistics of a CIFAR train split", "cnxt-cifar-stats"};
  std::string dir = "data/cifar-10-batches-bin";
  std::string variant = "cifar10";
  app.add_option("--data-dir", dir, "Directory with the binary batches");
  app.add_option("--dataset", variant, "cifar10 or cifar100")->check(CLI::IsMember({"cifar10", "cifar100"}));
  CLI11_PARSE(app, argc, argv);

  try {
    const auto v = variant == "cifar10" ? cnxt::CifarVariant::kCifar10 : cnxt::CifarVariant::kCifar100;
    const cnxt::Dataset d = cnxt::load_cifar(dir, cnxt::Split::kTrain, v, false);
    if (d.empty()) throw cnxt::IoError("no training records under " + dir);
    const std::size_t plane = d.sample_shape().plane_size();
    for (std::size_t c = 0; c < 3; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        for (float x : d.pixels(i).subspan(c * plane, plane)) {
          sum += x;
          sq += static_cast<double>(x) * x;
        }
      }
      const double n = static_cast<double>(plane * d.size());
      const double mean = sum / n;
      std::printf("channel %zu mean %.6f stddev %.6f\n", c, mean, std::sqrt(sq / n - mean * mean));
    }
  } catch (const cnxt::Error& e) {
    std::cerr << "cnxt-cifar-stats: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
