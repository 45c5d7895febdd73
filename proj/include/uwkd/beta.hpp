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

// Uncertainty-weighted distillation objective.
//
// Each distillation channel k carries a precision beta_k > 0. The teacher acts
// as a Gibbs prior exp(-beta * l(a_s; a_t)) / Z over the student activation; a
// Laplace expansion of log Z around the energy minimum leaves
//
//     CE + sum_k [ beta_k * l_k - (d_k / 2) * ln beta_k ]
//
// to be minimized jointly over the student and the betas. For a frozen loss the
// optimum is beta_k = d_k / (2 l_k).

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "uwkd/divergence.hpp"

namespace uwkd {

inline constexpr double kBetaMin = 1e-4;
inline constexpr double kBetaMax = 1e4;

enum class BetaMode { Fixed, TaskLevel, InstanceLevel };

std::string_view mode_id(BetaMode mode);

/// Two-layer perceptron mapping pooled features to a positive precision:
/// beta(x) = softplus(w2 . tanh(w1^T x + b1) + b2) + beta_min.
struct BetaNet {
  Eigen::MatrixXd w1;  // D x H
  Eigen::VectorXd b1;  // H
  Eigen::VectorXd w2;  // H
  double b2 = 0.0;
  double beta_min = kBetaMin;

  static BetaNet zeros(int input_dim, int hidden, double beta_min = kBetaMin);
  /// Gaussian weights with the given std, zero b1, and b2 = `output_bias`.
  static BetaNet random(int input_dim, int hidden, std::uint64_t seed, double stddev = 0.08, double output_bias = 0.0,
                        double beta_min = kBetaMin);

  int input_dim() const { return static_cast<int>(w1.rows()); }
  int hidden() const { return static_cast<int>(w1.cols()); }
  /// D*H + H + H + 1.
  std::size_t parameter_count() const;

  /// Parameters packed as [w1 (column-major), b1, w2, b2].
  Eigen::VectorXd flatten() const;
  void assign(const Eigen::VectorXd& flat);
};

struct BetaNetOutput {
  double beta = 0.0;
  Eigen::VectorXd param_grad;  // d beta / d flatten()
  Eigen::VectorXd input_grad;  // d beta / d features
};

/// Forward pass plus gradients of beta. Throws DimensionMismatch on a bad input length.
BetaNetOutput beta_instance(const BetaNet& net, const Eigen::VectorXd& features);

struct BetaChannel {
  BetaMode mode = BetaMode::TaskLevel;
  double fixed_value = 1.0;  // Fixed
  double raw_param = 0.0;    // TaskLevel: beta = softplus(raw) + beta_min
  BetaNet net;               // InstanceLevel
  int dim_d = 1;
  double dim_scale = 1.0;
  double beta_min = kBetaMin;
  double beta_max = kBetaMax;

  /// d used by the log-beta regularizer: dim_d * dim_scale.
  double effective_dim() const { return dim_d * dim_scale; }
};

struct BetaValue {
  double beta = 0.0;
  double dbeta_draw = 0.0;  // zero once the beta_max clip engages
};

/// Task-level precision. Throws WrongMode for non task-level channels.
BetaValue beta_task(const BetaChannel& channel);

/// Raw parameter whose task-level beta equals `beta` (inverse softplus).
double raw_for_beta(double beta, double beta_min = kBetaMin);

/// exp(-beta * energy) / normalizer.
double gibbs_prior_density(double energy, double beta, double normalizer);
double gibbs_prior_density(const Eigen::VectorXd& a_s, const Eigen::VectorXd& a_t, double beta,
                           const DivergenceSpec& spec, double normalizer);

/// Laplace approximation of log Z_beta:
/// -beta*min_energy - (d/2) ln beta + (d/2) ln 2pi - (1/2) ln det H.
double laplace_log_z(double beta, double hessian_det, double d, double min_energy);

/// argmin over beta > 0 of beta*loss - (d/2) ln beta, i.e. d / (2 loss).
double beta_closed_form(double loss, double d);

struct ObjectiveChannel {
  BetaMode mode = BetaMode::TaskLevel;
  double dim = 1.0;  // effective d
  double loss = 0.0;
  double beta = 1.0;
};

struct ChannelBreakdown {
  int id = 0;
  double loss = 0.0;
  double beta = 0.0;
  double weighted = 0.0;     // beta * loss
  double regularizer = 0.0;  // -(d/2) ln beta
  double grad_scale = 0.0;   // multiplier for the channel's loss gradient (beta)
  double dtotal_dbeta = 0.0; // loss - d / (2 beta)
};

struct ObjectiveBreakdown {
  double ce = 0.0;
  std::vector<ChannelBreakdown> per_channel;
  /// ce + sum_k (weighted_k + regularizer_k)
  double total = 0.0;
  /// As `total`, with the regularizer of Fixed channels dropped (plain CE + lambda * KD).
  double total_fixed_unregularized = 0.0;
};

ObjectiveBreakdown assemble_objective(double ce, std::span<const ObjectiveChannel> channels);
ObjectiveBreakdown assemble_objective(const LossResult& ce, std::span<const ObjectiveChannel> channels);

// ---------------------------------------------------------------------------
// Brute-force verifiers

/// Exhaustive MAP check on a regular logit grid.
struct Theorem1Case {
  int vocab = 3;
  int points_per_axis = 51;
  double lo = -4.0;
  double hi = 4.0;
  int observed = 0;
  Eigen::VectorXd teacher_logits;
  double beta = 1.0;  // 0 is accepted as the flat-prior limit
  DivergenceSpec spec;
};

struct Theorem1Result {
  std::size_t argmax_posterior = 0;
  std::size_t argmin_objective = 0;
  Eigen::VectorXd posterior_point;
  Eigen::VectorXd objective_point;
  bool agree() const { return argmax_posterior == argmin_objective; }
};

inline constexpr std::size_t kMaxTheorem1Points = 200000;

/// Logit coordinates of a flat grid index (first axis varies fastest).
Eigen::VectorXd theorem1_grid_point(const Theorem1Case& c, std::size_t index);
Theorem1Result verify_theorem1(const Theorem1Case& c);

/// Energy with a known minimizer and Hessian, used to test Laplace's method.
struct LaplaceEnergy {
  std::string name;
  std::function<double(const Eigen::VectorXd&)> energy;
  Eigen::VectorXd minimizer;
  Eigen::MatrixXd hessian;
  double min_energy = 0.0;
  bool exactly_quadratic = false;
  int dim() const { return static_cast<int>(minimizer.size()); }
};

/// min_energy + (a - center)^T H (a - center) / 2.
LaplaceEnergy quadratic_energy(const Eigen::MatrixXd& hessian, const Eigen::VectorXd& center,
                               double min_energy = 0.0);
/// FKL(softmax(t) || softmax(a)) over the free logits a with the last logit pinned at 0
/// (one free logit for V=2, two for V=3). `teacher_free_logits` has length 1 or 2.
LaplaceEnergy fkl_logit_energy(const Eigen::VectorXd& teacher_free_logits);

struct LaplaceCheck {
  double quadrature_log_z = 0.0;
  double laplace_log_z = 0.0;
  double abs_error = 0.0;
};

/// Quadrature vs Laplace log partition function for a 1- or 2-D energy.
/// Throws QuadratureNotConverged when the trapezoid refinement stalls.
LaplaceCheck verify_laplace(const LaplaceEnergy& energy, double beta);

}  // namespace uwkd
