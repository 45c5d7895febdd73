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

#pragma once

// Declarative experiment runs: JSON configs, seeded multi-run experiments,
// Table-style sweeps, simplex surfaces and the verifier suite.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "uwkd/train.hpp"

namespace uwkd {

struct ExperimentConfig {
  // source
  int vocab = 32;
  int order = 2;
  double dirichlet_alpha = 0.3;
  std::uint64_t source_seed = 1234;

  // models
  TinyLMConfig teacher = TinyLMConfig::teacher_default();
  TinyLMConfig student = TinyLMConfig::student_default();
  double student_init_std = 0.08;
  PretrainConfig pretrain;
  std::string teacher_checkpoint;  // load instead of pretraining when set

  std::vector<ChannelSpec> channels;
  TrainSettings train;
  int feature_dim = 16;  // shared space of the feature channel

  int steps = 2000;
  int batch = 32;
  int seq_len = 24;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4};
  int train_sequences = 4096;
  int eval_sequences = 512;
  int eval_every = 100;
  std::string out_dir = "runs/default";
  bool record_wall_clock = false;

  /// Re-derives the dependent model fields (vocab, window, burn-in, length)
  /// from the source and sequence settings and checks the invariants.
  void finalize();
  MarkovSource source() const;
};

/// Parses a config document. Unknown keys are a ConfigError naming the key and
/// its line in `text`.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);
nlohmann::ordered_json config_to_json(const ExperimentConfig& config);

/// Defaults used by the canned suites: one FKL channel, or FKL plus a feature channel.
ExperimentConfig default_config(DivergenceKind kind = DivergenceKind::FKL, Strategy strategy = Strategy::Unweighted,
                                bool with_feature_channel = false);

struct SeedResult {
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> metrics;
  EvalResult initial;
  EvalResult final_eval;
  double final_matching_distance = 0.0;  // teacher vs student on the eval corpus
};

struct ExperimentResult {
  std::vector<SeedResult> seeds;
  nlohmann::ordered_json summary;
  double teacher_eval_ce = 0.0;
};

/// Teacher for a config: loaded from `teacher_checkpoint` or pretrained.
TinyLM obtain_teacher(const ExperimentConfig& config, PretrainReport* report = nullptr);

/// Runs every seed and writes `<out>/teacher.ckpt`, `<out>/seed_<s>/metrics.jsonl`,
/// `<out>/seed_<s>/step_<n>.ckpt` (0%, 50%, 100%) and `<out>/summary.json`.
/// When `write_files` is false nothing touches the filesystem.
ExperimentResult run_experiment(const ExperimentConfig& config, const TinyLM* teacher = nullptr,
                                bool write_files = true);

/// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(std::span<const double> values);

enum class SweepSuite { TwoLoss, ThreeLoss };
SweepSuite parse_suite(std::string_view id);
std::string_view suite_id(SweepSuite suite);

struct SweepRow {
  std::string method;
  std::string strategy;
  double eval_ce_mean = 0.0;
  double eval_ce_std = 0.0;
  double acc_mean = 0.0;
  double acc_std = 0.0;
  double delta_vs_manual = 0.0;  // manual eval_ce_mean minus this row's (positive = better)
  std::string error;
};

/// Every token-level divergence x every strategy, `jobs` cells at a time.
/// Writes `<out>/<suite>.csv`; failed cells are logged and left as NaN rows.
std::vector<SweepRow> run_sweep(SweepSuite suite, const ExperimentConfig& base, const std::string& out_dir, int jobs);
void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows);

/// One `surface_<kind>.csv` per kind; returns the written paths.
std::vector<std::string> run_surfaces(std::span<const DivergenceKind> kinds, const Eigen::Vector3d& anchor, int grid_n,
                                      const std::string& out_dir);

struct VerifyRow {
  std::string name;
  std::string detail;
  bool pass = false;
};

std::vector<Theorem1Case> canned_theorem1_cases();
/// Runs the canned Theorem-1 and Laplace checks, printing one line per case.
std::vector<VerifyRow> run_verify_suite(std::ostream& out);

}  // namespace uwkd
