/*
 * Copyright 2026 The qexit Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "qexit/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"qexit: noise-aware early exit for quantized ViT encoders"};
  std::string config_path, out_dir, command;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Seed for generation and training (overrides the config)");
  auto* out_opt = app.add_option("--out", out_dir, "Output directory for artifacts and reports");
  app.add_option("--command", command, "Command to run")
      ->required()
      ->check(CLI::IsMember(qexit::command_names()));
  CLI11_PARSE(app, argc, argv);

  qexit::RunConfig cfg;
  try {
    if (!config_path.empty()) cfg = qexit::config_from_json(nlohmann::json::parse(qexit::read_text(config_path)));
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return qexit::kConfig;
  }
  if (seed_opt->count()) qexit::apply_seed(cfg, seed);
  if (out_opt->count()) cfg.out = out_dir;
  return qexit::run_command(cfg, command);
}
