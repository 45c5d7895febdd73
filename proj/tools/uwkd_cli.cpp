/*
Copyright 2026 The uwkd Authors. All rights reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

// Command-line front end: run, sweep, surface, verify.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "uwkd/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNonFinite = 3;
constexpr int kExitVerify = 4;

/// Flags that override the config key of the same name.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> batch;
  std::optional<int> seq_len;
  std::optional<int> eval_every;
  std::optional<int> train_sequences;
  std::optional<int> eval_sequences;
  std::optional<int> feature_dim;
  std::optional<std::string> teacher_checkpoint;
  bool record_wall_clock = false;

  void apply(uwkd::ExperimentConfig& c) const {
    if (out) c.out_dir = *out;
    if (seed) c.seeds = {*seed};
    if (steps) c.steps = *steps;
    if (batch) c.batch = *batch;
    if (seq_len) c.seq_len = *seq_len;
    if (eval_every) c.eval_every = *eval_every;
    if (train_sequences) c.train_sequences = *train_sequences;
    if (eval_sequences) c.eval_sequences = *eval_sequences;
    if (feature_dim) c.feature_dim = *feature_dim;
    if (teacher_checkpoint) c.teacher_checkpoint = *teacher_checkpoint;
    if (record_wall_clock) c.record_wall_clock = true;
    c.finalize();
  }
};

int exit_code_for(const uwkd::Error& e) {
  switch (e.code()) {
    case uwkd::ErrorCode::ConfigError: return kExitConfig;
    case uwkd::ErrorCode::NonFiniteLoss: return kExitNonFinite;
    default: return kExitFailure;
  }
}

void print_summary(const uwkd::ExperimentResult& r) {
  const auto& s = r.summary;
  std::printf("teacher eval CE %.6f\n", r.teacher_eval_ce);
  for (const auto& seed : s["seeds"]) {
    std::printf("seed %-6llu eval CE %.6f  accuracy %.4f  entropy %.4f  matching %.4f\n",
                static_cast<unsigned long long>(seed["seed"].get<std::uint64_t>()), seed["eval_ce"].get<double>(),
                seed["accuracy"].get<double>(), seed["entropy"].get<double>(),
                seed["matching_distance"].get<double>());
  }
  std::printf("eval CE %.6f +- %.6f, accuracy %.4f +- %.4f\n", s["eval_ce"]["mean"].get<double>(),
              s["eval_ce"]["std"].get<double>(), s["accuracy"]["mean"].get<double>(),
              s["accuracy"]["std"].get<double>());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Uncertainty-weighted knowledge distillation experiments on synthetic token sources"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides ov;
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--out", ov.out, "Output directory (config key out_dir)");
  app.add_option("--jobs", jobs, "Concurrent sweep cells")->check(CLI::PositiveNumber);
  app.add_option("--seed", ov.seed, "Run a single seed (replaces config key seeds)");
  app.add_option("--steps", ov.steps, "Training steps per seed");
  app.add_option("--batch", ov.batch, "Sequences per step");
  app.add_option("--seq_len", ov.seq_len, "Tokens per sequence");
  app.add_option("--eval_every", ov.eval_every, "Steps between held-out CE evaluations");
  app.add_option("--train_sequences", ov.train_sequences, "Training corpus size");
  app.add_option("--eval_sequences", ov.eval_sequences, "Evaluation corpus size");
  app.add_option("--feature_dim", ov.feature_dim, "Shared dimension of the feature channel");
  app.add_option("--teacher_checkpoint", ov.teacher_checkpoint, "Load the teacher instead of pretraining it");
  app.add_flag("--record_wall_clock", ov.record_wall_clock, "Record per-step wall-clock time in the metrics");

  std::string config_path;
  auto* run = app.add_subcommand("run", "Train students for every seed of a config");
  run->add_option("config", config_path, "JSON config file")->required();

  std::string suite = "two_loss";
  std::string base_config;
  auto* sweep = app.add_subcommand("sweep", "Every divergence x weighting strategy; writes <out>/<suite>.csv");
  sweep->add_option("suite", suite, "two_loss or three_loss")->check(CLI::IsMember({"two_loss", "three_loss"}));
  sweep->add_option("--config", base_config, "Base config (channels are replaced per cell)");

  std::vector<std::string> kinds = {"fkl", "rkl", "mse_probs", "cosine_probs"};
  std::vector<double> anchor = {0.6, 0.3, 0.1};
  int grid_n = 60;
  auto* surface = app.add_subcommand("surface", "Loss surfaces over the 3-simplex; one CSV per kind");
  surface->add_option("--kinds", kinds, "Divergence kinds")->delimiter(',');
  surface->add_option("--anchor", anchor, "Teacher distribution (three probabilities)")->delimiter(',')->expected(3);
  surface->add_option("--grid_n", grid_n, "Grid subdivisions per edge")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "MAP-equivalence and Laplace checks; exit 4 on any failure");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      uwkd::ExperimentConfig config = uwkd::load_config(config_path);
      ov.apply(config);
      print_summary(uwkd::run_experiment(config));
      return kExitOk;
    }
    if (*sweep) {
      uwkd::ExperimentConfig config = base_config.empty() ? uwkd::default_config() : uwkd::load_config(base_config);
      ov.apply(config);
      const auto rows = uwkd::run_sweep(uwkd::parse_suite(suite), config, ov.out.value_or("runs/sweep"), jobs);
      int failed = 0;
      for (const auto& r : rows) {
        std::printf("%-14s %-14s eval CE %.6f +- %.6f  acc %.4f  delta vs manual %+.6f%s\n", r.method.c_str(),
                    r.strategy.c_str(), r.eval_ce_mean, r.eval_ce_std, r.acc_mean, r.delta_vs_manual,
                    r.error.empty() ? "" : "  FAILED");
        if (!r.error.empty()) ++failed;
      }
      return failed == 0 ? kExitOk : kExitFailure;
    }
    if (*surface) {
      std::vector<uwkd::DivergenceKind> parsed;
      for (const auto& k : kinds) parsed.push_back(uwkd::parse_kind(k));
      const Eigen::Vector3d a(anchor[0], anchor[1], anchor[2]);
      for (const auto& path : uwkd::run_surfaces(parsed, a, grid_n, ov.out.value_or("runs/surfaces"))) {
        std::printf("%s\n", path.c_str());
      }
      return kExitOk;
    }
    if (*verify) {
      const auto rows = uwkd::run_verify_suite(std::cout);
      for (const auto& r : rows) {
        if (!r.pass) {
          std::fprintf(stderr, "failed: %s (%s)\n", r.name.c_str(), r.detail.c_str());
          return kExitVerify;
        }
      }
      return kExitOk;
    }
  } catch (const uwkd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
