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

// Teacher/student discrepancy energies. Each energy returns its value together
// with the analytic gradient with respect to the student side.
//
// Two layers are exposed:
//  - simplex-level functions (fkl, rkl, ...) take teacher probabilities p and
//    student probabilities q and differentiate with respect to q;
//  - `divergence` takes raw teacher/student logits plus a DivergenceSpec and
//    differentiates with respect to the student logits.

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uwkd/numerics.hpp"

namespace uwkd {

enum class DivergenceKind {
  FKL,
  RKL,
  SkewFKL,
  SkewRKL,
  JS,
  TVD,
  MseLogits,
  MseProbs,
  CosineLogits,
  CosineProbs,
  FeatureCosine,
  FeatureMse,
};

inline constexpr double kDefaultSkewLambda = 0.1;

/// Every logit/probability-level kind, in sweep order.
inline constexpr std::array<DivergenceKind, 10> kTokenKinds = {
    DivergenceKind::FKL,      DivergenceKind::RKL,      DivergenceKind::SkewFKL,      DivergenceKind::SkewRKL,
    DivergenceKind::JS,       DivergenceKind::TVD,      DivergenceKind::MseLogits,    DivergenceKind::MseProbs,
    DivergenceKind::CosineLogits, DivergenceKind::CosineProbs};

/// snake_case identifier used in configs and file names ("fkl", "cosine_probs", ...).
std::string_view kind_id(DivergenceKind kind);
/// Display name used in tables ("FKL", "Cosine-Probs", ...).
std::string_view kind_label(DivergenceKind kind);
DivergenceKind parse_kind(std::string_view id);

bool is_feature_kind(DivergenceKind kind);
bool is_skew_kind(DivergenceKind kind);
/// True for kinds that take logarithms of probabilities (and therefore clamp).
bool is_log_kind(DivergenceKind kind);

struct DivergenceSpec {
  DivergenceKind kind = DivergenceKind::FKL;
  std::optional<double> skew_lambda;
  Temperature teacher_temp;
  Temperature student_temp;

  /// Spec with default parameters (skew lambda 0.1 for skew kinds, unit temperatures).
  static DivergenceSpec make(DivergenceKind kind, double teacher_temp = 1.0, double student_temp = 1.0);

  /// Throws InvalidArgument when skew_lambda presence or range is inconsistent with `kind`.
  void validate() const;
  double lambda() const { return skew_lambda.value_or(0.0); }
};

struct LossResult {
  double value = 0.0;
  Eigen::VectorXd grad;
};

/// Loss over a sequence of positions; `grad` has one column per position.
struct SequenceLoss {
  double value = 0.0;
  Eigen::MatrixXd grad;
};

// Simplex-level energies: p is the teacher distribution, q the student's.
// Gradients are with respect to q. Log-based energies clamp both arguments.
LossResult fkl(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
LossResult rkl(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
LossResult skew_fkl(const Eigen::VectorXd& p, const Eigen::VectorXd& q, double lambda = kDefaultSkewLambda);
LossResult skew_rkl(const Eigen::VectorXd& p, const Eigen::VectorXd& q, double lambda = kDefaultSkewLambda);
LossResult js(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
LossResult tvd(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
LossResult mse_probs(const Eigen::VectorXd& p, const Eigen::VectorXd& q);
LossResult cosine_probs(const Eigen::VectorXd& p, const Eigen::VectorXd& q);

// Vector-level energies (logits or features). Gradients are with respect to
// the second (student) argument.
LossResult mse_logits(const Eigen::VectorXd& teacher, const Eigen::VectorXd& student);
LossResult cosine_logits(const Eigen::VectorXd& teacher, const Eigen::VectorXd& student);
LossResult feature_loss(const Eigen::VectorXd& teacher, const Eigen::VectorXd& student, DivergenceKind kind);

/// Simplex-level dispatch for probability-space kinds.
LossResult prob_energy(const DivergenceSpec& spec, const Eigen::VectorXd& p, const Eigen::VectorXd& q);

/// Per-token divergence between logit vectors; grad is d value / d student_logits.
LossResult divergence(const Eigen::VectorXd& teacher_logits, const Eigen::VectorXd& student_logits,
                      const DivergenceSpec& spec);

/// Mean of per-token divergences over the columns (positions) of the inputs.
SequenceLoss sequence_loss(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
                           const DivergenceSpec& spec);

/// -(1/L) sum_n log softmax(z_n / tau)[y_n], one column of logits per target.
SequenceLoss cross_entropy(const Eigen::MatrixXd& student_logits, std::span<const int> targets,
                           Temperature student_temp = Temperature{});

struct SurfacePoint {
  Eigen::Vector3d bary;
  double loss = 0.0;
};

inline constexpr int kDefaultSurfaceGrid = 60;

/// Energy of every student point on a triangular barycentric grid over the
/// 2-simplex ((grid_n+1)(grid_n+2)/2 points) against a fixed teacher anchor.
std::vector<SurfacePoint> simplex_surface(const DivergenceSpec& spec, const Eigen::Vector3d& anchor,
                                          int grid_n = kDefaultSurfaceGrid);

/// Writes `b0,b1,b2,loss` CSV.
void write_surface_csv(const std::string& path, const std::vector<SurfacePoint>& points);

}  // namespace uwkd
