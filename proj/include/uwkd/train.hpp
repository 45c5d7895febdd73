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

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uwkd/beta.hpp"
#include "uwkd/divergence.hpp"
#include "uwkd/optim.hpp"
#include "uwkd/toy_models.hpp"

namespace uwkd {

enum class Strategy { Unweighted, Manual, BetaTask, BetaInstance };

inline constexpr std::array<Strategy, 4> kStrategies = {Strategy::Unweighted, Strategy::Manual, Strategy::BetaTask,
                                                        Strategy::BetaInstance};

std::string_view strategy_id(Strategy s);
Strategy parse_strategy(std::string_view id);

/// One distillation channel: which energy, how it is weighted.
struct ChannelSpec {
  DivergenceSpec divergence;
  Strategy strategy = Strategy::Unweighted;
  double dim_scale = 1.0;
  /// Manual weight; when absent it is set from the first batch's loss scales.
  std::optional<double> lambda;
};

struct TrainSettings {
  OptimizerKind optimizer = OptimizerKind::Adam;
  double student_lr = 3e-3;
  double beta_lr = 1e-2;
  double beta_min = kBetaMin;
  double beta_max = kBetaMax;
  /// Starting precision for learnable channels.
  double beta_init = 0.6932471805599453;  // softplus(0) + beta_min
  int beta_hidden = 16;
  double beta_init_std = 0.08;
  int feature_dim = 16;
  std::uint64_t seed = 1;
};

struct ChannelState {
  ChannelSpec spec;
  BetaChannel beta;
  OptimizerState beta_opt;
};

struct TrainState {
  TinyLM student;
  OptimizerState student_opt;
  std::vector<ChannelState> channels;
  std::optional<FeatureProjector> projector;
  TrainSettings settings;
  long step = 0;
  /// d total / d student params from the most recent step.
  Eigen::VectorXd last_student_grad;
};

/// Builds optimizers, beta parameters and (when a feature channel is present)
/// the frozen feature projector.
TrainState make_train_state(const TinyLM& teacher, TinyLM student, std::vector<ChannelSpec> channels,
                            const TrainSettings& settings);

/// Per-step log row. Channel vectors are indexed like TrainState::channels;
/// beta, weighted and regularizer are batch means.
struct MetricsRecord {
  long step = 0;
  double ce = 0.0;
  std::vector<double> channel_loss;
  std::vector<double> channel_beta;
  std::vector<double> channel_weighted;
  std::vector<double> channel_regularizer;
  double total = 0.0;
  double student_entropy = 0.0;
  double matching_distance = 0.0;
  std::optional<double> eval_ce;
  double wall_clock_ms = 0.0;

  nlohmann::ordered_json to_json() const;
};

/// Teacher outputs for a batch, when the caller has them cached.
struct TeacherBatch {
  Eigen::MatrixXd logits;  // V x (B*T)
  Eigen::MatrixXd pooled;  // M_teacher x B
};

/// One optimization step. The returned record describes the state before the update.
/// Throws NonFiniteLoss (with the parameter checksum and the batch) on a non-finite objective.
MetricsRecord train_step(TrainState& state, const TinyLM& teacher, std::span<const Sequence> batch,
                         const TeacherBatch* cached_teacher = nullptr);

/// lambda_k = initial_ce / initial_loss_k.
std::vector<double> manual_lambda_from_initial_scales(double initial_ce, std::span<const double> initial_losses);

/// Mean |z_s - z_t| over all entries after mean-centering every logit column.
double matching_distance(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits);

struct EvalResult {
  double ce = 0.0;
  double entropy = 0.0;
  double accuracy = 0.0;
};

/// Teacher-free cross-entropy, mean predictive entropy, greedy next-token accuracy.
EvalResult evaluate(const TinyLM& model, const Corpus& corpus);

}  // namespace uwkd
