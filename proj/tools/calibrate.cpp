// SPDX-License-Identifier: Apache-2.0
//
// Searches per-stage block counts so the pruned network lands on a FLOP and
// parameter budget.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "cnxt/analysis.hpp"
#include "cnxt/error.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Calibrate stage depths against a FLOP and parameter budget", "cnxt-calibrate"};
  std::string preset = "cifar10";
  std::string config;
  double flops = cnxt::CalibrationTarget{}.flops;
  double params = cnxt::CalibrationTarget{}.params;
  std::size_t max_blocks = 16;
  app.add_option("--preset", preset, "Starting architecture preset");
  app.add_option("--config", config, "Config file overriding the preset");
  app.add_option("--flops", flops, "Target multiply-accumulates");
  app.add_option("--params", params, "Target parameter count");
  app.add_option("--max-blocks", max_blocks, "Largest block count per stage");
  CLI11_PARSE(app, argc, argv);

  try {
    cnxt::ArchConfig base = cnxt::ArchConfig::preset(preset);
    if (!config.empty()) {
      cnxt::ConfigFile cfg = cnxt::ConfigFile::load(config);
      if (!cfg.has("arch.preset")) cfg.set("arch.preset", preset);
      base = cnxt::ArchConfig::from_config(cfg);
    }
    const auto r = cnxt::calibrate_depth(base, {flops, params}, max_blocks);
    std::printf("stages %s\n", cnxt::format_stages(r.config.stages).c_str());
    std::printf("flops %llu\nparams %llu\nscore %.6f\n",
                static_cast<unsigned long long>(r.cost.total_flops),
                static_cast<unsigned long long>(r.cost.total_params), r.score);
  } catch (const cnxt::Error& e) {
    std::cerr << "cnxt-calibrate: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
