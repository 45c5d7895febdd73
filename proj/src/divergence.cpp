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

#include "uwkd/divergence.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace uwkd {

namespace {

using Eigen::VectorXd;

void require_same_size(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "sizes differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
}

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "skew lambda must lie in [0, 1]");
  }
}

// sum_k a_k ln(a_k / b_k) on strictly positive vectors
double kl(const VectorXd& a, const VectorXd& b) { return (a.array() * (a.array() / b.array()).log()).sum(); }

LossResult cosine_distance(const VectorXd& teacher, const VectorXd& student, bool check_norms) {
  require_same_size(teacher, student);
  const double nt = teacher.norm();
  const double ns = student.norm();
  if (check_norms && (nt < 1e-12 || ns < 1e-12)) {
    throw Error(ErrorCode::ZeroVector, "cosine distance of a (numerically) zero vector");
  }
  const double dot = teacher.dot(student);
  const double cos = dot / (nt * ns);
  LossResult out;
  out.value = 1.0 - cos;
  out.grad = -(teacher / (nt * ns) - (cos / (ns * ns)) * student);
  return out;
}

LossResult mean_squared(const VectorXd& teacher, const VectorXd& student) {
  require_same_size(teacher, student);
  const double n = static_cast<double>(student.size());
  const VectorXd diff = student - teacher;
  return {diff.squaredNorm() / n, (2.0 / n) * diff};
}

}  // namespace

std::string_view kind_id(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::FKL: return "fkl";
    case DivergenceKind::RKL: return "rkl";
    case DivergenceKind::SkewFKL: return "skew_fkl";
    case DivergenceKind::SkewRKL: return "skew_rkl";
    case DivergenceKind::JS: return "js";
    case DivergenceKind::TVD: return "tvd";
    case DivergenceKind::MseLogits: return "mse_logits";
    case DivergenceKind::MseProbs: return "mse_probs";
    case DivergenceKind::CosineLogits: return "cosine_logits";
    case DivergenceKind::CosineProbs: return "cosine_probs";
    case DivergenceKind::FeatureCosine: return "feature_cosine";
    case DivergenceKind::FeatureMse: return "feature_mse";
  }
  return "?";
}

std::string_view kind_label(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::FKL: return "FKL";
    case DivergenceKind::RKL: return "RKL";
    case DivergenceKind::SkewFKL: return "Skew-FKL";
    case DivergenceKind::SkewRKL: return "Skew-RKL";
    case DivergenceKind::JS: return "JS";
    case DivergenceKind::TVD: return "TVD";
    case DivergenceKind::MseLogits: return "MSE-Logits";
    case DivergenceKind::MseProbs: return "MSE-Probs";
    case DivergenceKind::CosineLogits: return "Cosine-Logits";
    case DivergenceKind::CosineProbs: return "Cosine-Probs";
    case DivergenceKind::FeatureCosine: return "Feature-Cosine";
    case DivergenceKind::FeatureMse: return "Feature-MSE";
  }
  return "?";
}

DivergenceKind parse_kind(std::string_view id) {
  for (int k = 0; k <= static_cast<int>(DivergenceKind::FeatureMse); ++k) {
    const auto kind = static_cast<DivergenceKind>(k);
    if (kind_id(kind) == id) return kind;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown divergence kind '" + std::string(id) + "'");
}

bool is_feature_kind(DivergenceKind kind) {
  return kind == DivergenceKind::FeatureCosine || kind == DivergenceKind::FeatureMse;
}

bool is_skew_kind(DivergenceKind kind) { return kind == DivergenceKind::SkewFKL || kind == DivergenceKind::SkewRKL; }

bool is_log_kind(DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::FKL:
    case DivergenceKind::RKL:
    case DivergenceKind::SkewFKL:
    case DivergenceKind::SkewRKL:
    case DivergenceKind::JS:
      return true;
    default:
      return false;
  }
}

DivergenceSpec DivergenceSpec::make(DivergenceKind kind, double teacher_temp, double student_temp) {
  DivergenceSpec spec;
  spec.kind = kind;
  if (is_skew_kind(kind)) spec.skew_lambda = kDefaultSkewLambda;
  spec.teacher_temp = Temperature(teacher_temp);
  spec.student_temp = Temperature(student_temp);
  return spec;
}

void DivergenceSpec::validate() const {
  if (is_skew_kind(kind)) {
    if (!skew_lambda) throw Error(ErrorCode::InvalidArgument, "skew kinds require skew_lambda");
    check_lambda(*skew_lambda);
  } else if (skew_lambda) {
    throw Error(ErrorCode::InvalidArgument, "skew_lambda is only valid for skew kinds");
  }
}

LossResult fkl(const VectorXd& p_in, const VectorXd& q_in) {
  require_same_size(p_in, q_in);
  const VectorXd p = clamp_prob(p_in);
  const VectorXd q = clamp_prob(q_in);
  return {kl(p, q), -(p.array() / q.array()).matrix()};
}

LossResult rkl(const VectorXd& p_in, const VectorXd& q_in) {
  require_same_size(p_in, q_in);
  const VectorXd p = clamp_prob(p_in);
  const VectorXd q = clamp_prob(q_in);
  const VectorXd log_ratio = (q.array() / p.array()).log();
  return {q.dot(log_ratio), (log_ratio.array() + 1.0).matrix()};
}

LossResult skew_fkl(const VectorXd& p_in, const VectorXd& q_in, double lambda) {
  require_same_size(p_in, q_in);
  check_lambda(lambda);
  const VectorXd p = clamp_prob(p_in);
  const VectorXd q = clamp_prob(q_in);
  const VectorXd mix = lambda * p + (1.0 - lambda) * q;
  return {kl(p, mix), (-(1.0 - lambda) * p.array() / mix.array()).matrix()};
}

LossResult skew_rkl(const VectorXd& p_in, const VectorXd& q_in, double lambda) {
  require_same_size(p_in, q_in);
  check_lambda(lambda);
  const VectorXd p = clamp_prob(p_in);
  const VectorXd q = clamp_prob(q_in);
  const VectorXd mix = lambda * q + (1.0 - lambda) * p;
  const VectorXd log_ratio = (q.array() / mix.array()).log();
  return {q.dot(log_ratio), (log_ratio.array() + 1.0 - lambda * q.array() / mix.array()).matrix()};
}

LossResult js(const VectorXd& p_in, const VectorXd& q_in) {
  require_same_size(p_in, q_in);
  const VectorXd p = clamp_prob(p_in);
  const VectorXd q = clamp_prob(q_in);
  const VectorXd mid = 0.5 * (p + q);
  // d/dq [KL(p||m) + KL(q||m)] / 2 collapses to ln(q/m) / 2
  return {0.5 * kl(p, mid) + 0.5 * kl(q, mid), (0.5 * (q.array() / mid.array()).log()).matrix()};
}

LossResult tvd(const VectorXd& p, const VectorXd& q) {
  require_same_size(p, q);
  const VectorXd diff = q - p;
  // sign(0) = 0 picks the zero subgradient at ties
  const VectorXd grad = 0.5 * diff.array().sign().matrix();
  return {0.5 * diff.cwiseAbs().sum(), grad};
}

LossResult mse_probs(const VectorXd& p, const VectorXd& q) { return mean_squared(p, q); }

LossResult cosine_probs(const VectorXd& p, const VectorXd& q) { return cosine_distance(p, q, false); }

LossResult mse_logits(const VectorXd& teacher, const VectorXd& student) { return mean_squared(teacher, student); }

LossResult cosine_logits(const VectorXd& teacher, const VectorXd& student) {
  return cosine_distance(teacher, student, true);
}

LossResult feature_loss(const VectorXd& teacher, const VectorXd& student, DivergenceKind kind) {
  switch (kind) {
    case DivergenceKind::FeatureCosine: return cosine_distance(teacher, student, true);
    case DivergenceKind::FeatureMse: return mean_squared(teacher, student);
    default: throw Error(ErrorCode::InvalidArgument, "feature_loss needs a feature kind");
  }
}

LossResult prob_energy(const DivergenceSpec& spec, const VectorXd& p, const VectorXd& q) {
  switch (spec.kind) {
    case DivergenceKind::FKL: return fkl(p, q);
    case DivergenceKind::RKL: return rkl(p, q);
    case DivergenceKind::SkewFKL: return skew_fkl(p, q, spec.lambda());
    case DivergenceKind::SkewRKL: return skew_rkl(p, q, spec.lambda());
    case DivergenceKind::JS: return js(p, q);
    case DivergenceKind::TVD: return tvd(p, q);
    case DivergenceKind::MseProbs: return mse_probs(p, q);
    case DivergenceKind::CosineProbs: return cosine_probs(p, q);
    default:
      throw Error(ErrorCode::InvalidArgument, std::string(kind_id(spec.kind)) + " is not a probability-space kind");
  }
}

LossResult divergence(const VectorXd& teacher_logits, const VectorXd& student_logits, const DivergenceSpec& spec) {
  require_same_size(teacher_logits, student_logits);
  switch (spec.kind) {
    case DivergenceKind::MseLogits: return mse_logits(teacher_logits, student_logits);
    case DivergenceKind::CosineLogits: return cosine_logits(teacher_logits, student_logits);
    case DivergenceKind::FeatureCosine:
    case DivergenceKind::FeatureMse: return feature_loss(teacher_logits, student_logits, spec.kind);
    default: break;
  }
  const VectorXd p = softmax(teacher_logits, spec.teacher_temp);
  const VectorXd q = softmax(student_logits, spec.student_temp);
  LossResult out = prob_energy(spec, p, q);
  out.grad = softmax_vjp(q, out.grad, spec.student_temp);
  return out;
}

SequenceLoss sequence_loss(const Eigen::MatrixXd& teacher_logits, const Eigen::MatrixXd& student_logits,
                           const DivergenceSpec& spec) {
  if (teacher_logits.cols() != student_logits.cols() || teacher_logits.rows() != student_logits.rows()) {
    throw Error(ErrorCode::LengthMismatch, "teacher and student sequences differ in shape");
  }
  const Eigen::Index length = student_logits.cols();
  if (length < 1) throw Error(ErrorCode::LengthMismatch, "empty sequence");
  SequenceLoss out{0.0, Eigen::MatrixXd(student_logits.rows(), length)};
  const double scale = 1.0 / static_cast<double>(length);
  for (Eigen::Index n = 0; n < length; ++n) {
    LossResult token = divergence(teacher_logits.col(n), student_logits.col(n), spec);
    out.value += token.value;
    out.grad.col(n) = scale * token.grad;
  }
  out.value *= scale;
  return out;
}

SequenceLoss cross_entropy(const Eigen::MatrixXd& student_logits, std::span<const int> targets,
                           Temperature student_temp) {
  const Eigen::Index length = student_logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != length || length < 1) {
    throw Error(ErrorCode::LengthMismatch, "targets and logits differ in length");
  }
  const auto vocab = student_logits.rows();
  SequenceLoss out{0.0, Eigen::MatrixXd(vocab, length)};
  const double scale = 1.0 / static_cast<double>(length);
  for (Eigen::Index n = 0; n < length; ++n) {
    const int y = targets[static_cast<std::size_t>(n)];
    if (y < 0 || y >= vocab) throw Error(ErrorCode::TokenOutOfRange, "target id " + std::to_string(y));
    const VectorXd logq = log_softmax(student_logits.col(n), student_temp);
    out.value -= logq(y);
    VectorXd g = logq.array().exp();
    g(y) -= 1.0;
    out.grad.col(n) = g * (scale / student_temp.value());
  }
  out.value *= scale;
  return out;
}

std::vector<SurfacePoint> simplex_surface(const DivergenceSpec& spec, const Eigen::Vector3d& anchor, int grid_n) {
  if (grid_n < 2) throw Error(ErrorCode::InvalidArgument, "grid_n must be at least 2");
  if (is_feature_kind(spec.kind)) throw Error(ErrorCode::InvalidArgument, "feature kinds have no simplex surface");
  check_probs(anchor);
  const bool logit_level = spec.kind == DivergenceKind::MseLogits || spec.kind == DivergenceKind::CosineLogits;
  const VectorXd teacher = anchor;
  const VectorXd teacher_logits = clamp_prob(teacher).array().log();

  std::vector<SurfacePoint> points;
  points.reserve(static_cast<std::size_t>((grid_n + 1) * (grid_n + 2) / 2));
  for (int i = 0; i <= grid_n; ++i) {
    for (int j = 0; j <= grid_n - i; ++j) {
      const int k = grid_n - i - j;
      Eigen::Vector3d b(i, j, k);
      b /= grid_n;
      const VectorXd student = b;
      double value = 0.0;
      if (logit_level) {
        const VectorXd student_logits = clamp_prob(student).array().log();
        value = divergence(teacher_logits, student_logits, spec).value;
      } else {
        value = prob_energy(spec, teacher, student).value;
      }
      points.push_back({b, value});
    }
  }
  return points;
}

void write_surface_csv(const std::string& path, const std::vector<SurfacePoint>& points) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path);
  out << "b0,b1,b2,loss\n";
  char line[160];
  for (const auto& pt : points) {
    std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g,%.17g\n", pt.bary(0), pt.bary(1), pt.bary(2), pt.loss);
    out << line;
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

}  // namespace uwkd
