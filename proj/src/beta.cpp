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

#include "uwkd/beta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace uwkd {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view mode_id(BetaMode mode) {
  switch (mode) {
    case BetaMode::Fixed: return "fixed";
    case BetaMode::TaskLevel: return "task";
    case BetaMode::InstanceLevel: return "instance";
  }
  return "?";
}

BetaNet BetaNet::zeros(int input_dim, int hidden, double beta_min) {
  if (input_dim < 1 || hidden < 1) throw Error(ErrorCode::InvalidArgument, "beta net dims must be positive");
  BetaNet net;
  net.w1 = MatrixXd::Zero(input_dim, hidden);
  net.b1 = VectorXd::Zero(hidden);
  net.w2 = VectorXd::Zero(hidden);
  net.b2 = 0.0;
  net.beta_min = beta_min;
  return net;
}

BetaNet BetaNet::random(int input_dim, int hidden, std::uint64_t seed, double stddev, double output_bias,
                        double beta_min) {
  BetaNet net = zeros(input_dim, hidden, beta_min);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (Eigen::Index j = 0; j < net.w1.cols(); ++j)
    for (Eigen::Index i = 0; i < net.w1.rows(); ++i) net.w1(i, j) = normal(rng);
  for (Eigen::Index i = 0; i < net.w2.size(); ++i) net.w2(i) = normal(rng);
  net.b2 = output_bias;
  return net;
}

std::size_t BetaNet::parameter_count() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + 1);
}

VectorXd BetaNet::flatten() const {
  VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
  Eigen::Index at = 0;
  flat.segment(at, w1.size()) = w1.reshaped();
  at += w1.size();
  flat.segment(at, b1.size()) = b1;
  at += b1.size();
  flat.segment(at, w2.size()) = w2;
  at += w2.size();
  flat(at) = b2;
  return flat;
}

void BetaNet::assign(const VectorXd& flat) {
  if (flat.size() != static_cast<Eigen::Index>(parameter_count())) {
    throw Error(ErrorCode::DimensionMismatch, "beta net parameter vector has wrong length");
  }
  Eigen::Index at = 0;
  w1.reshaped() = flat.segment(at, w1.size());
  at += w1.size();
  b1 = flat.segment(at, b1.size());
  at += b1.size();
  w2 = flat.segment(at, w2.size());
  at += w2.size();
  b2 = flat(at);
}

BetaNetOutput beta_instance(const BetaNet& net, const VectorXd& features) {
  if (features.size() != net.w1.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "beta net expects " + std::to_string(net.w1.rows()) +
                                                  " features, got " + std::to_string(features.size()));
  }
  const VectorXd hidden = (net.w1.transpose() * features + net.b1).array().tanh().matrix();
  const double pre = net.w2.dot(hidden) + net.b2;
  const double slope = sigmoid(pre);

  BetaNetOutput out;
  out.beta = softplus(pre) + net.beta_min;

  const VectorXd d_pre_hidden = slope * (net.w2.array() * (1.0 - hidden.array().square())).matrix();
  out.param_grad.resize(static_cast<Eigen::Index>(net.parameter_count()));
  Eigen::Index at = 0;
  const MatrixXd d_w1 = features * d_pre_hidden.transpose();
  out.param_grad.segment(at, d_w1.size()) = d_w1.reshaped();
  at += d_w1.size();
  out.param_grad.segment(at, net.b1.size()) = d_pre_hidden;
  at += net.b1.size();
  out.param_grad.segment(at, net.w2.size()) = slope * hidden;
  at += net.w2.size();
  out.param_grad(at) = slope;
  out.input_grad = net.w1 * d_pre_hidden;
  return out;
}

BetaValue beta_task(const BetaChannel& channel) {
  if (channel.mode != BetaMode::TaskLevel) {
    throw Error(ErrorCode::WrongMode, "beta_task needs a task-level channel");
  }
  const double beta = softplus(channel.raw_param) + channel.beta_min;
  if (beta > channel.beta_max) return {channel.beta_max, 0.0};
  return {beta, sigmoid(channel.raw_param)};
}

double raw_for_beta(double beta, double beta_min) {
  const double target = beta - beta_min;
  if (!(target > 0.0)) throw Error(ErrorCode::NonPositiveBeta, "beta must exceed beta_min");
  // inverse softplus, stable for large targets
  return target > 30.0 ? target + std::log(-std::expm1(-target)) : std::log(std::expm1(target));
}

double gibbs_prior_density(double energy, double beta, double normalizer) {
  if (!(normalizer > 0.0)) throw Error(ErrorCode::InvalidArgument, "normalizer must be positive");
  if (!(beta >= 0.0)) throw Error(ErrorCode::NonPositiveBeta, "beta must be non-negative");
  return std::exp(-beta * energy) / normalizer;
}

double gibbs_prior_density(const VectorXd& a_s, const VectorXd& a_t, double beta, const DivergenceSpec& spec,
                           double normalizer) {
  return gibbs_prior_density(divergence(a_t, a_s, spec).value, beta, normalizer);
}

double laplace_log_z(double beta, double hessian_det, double d, double min_energy) {
  if (!(hessian_det > 0.0)) {
    throw Error(ErrorCode::NonPositiveDeterminant, "Hessian determinant must be positive");
  }
  if (!(beta > 0.0)) throw Error(ErrorCode::NonPositiveBeta, "beta must be positive");
  return -beta * min_energy - 0.5 * d * std::log(beta) + 0.5 * d * std::log(2.0 * std::numbers::pi) -
         0.5 * std::log(hessian_det);
}

double beta_closed_form(double loss, double d) {
  if (!(loss > 0.0)) {
    throw Error(ErrorCode::NonPositiveLoss, "optimal beta diverges for a non-positive loss");
  }
  if (!(d > 0.0)) throw Error(ErrorCode::InvalidArgument, "d must be positive");
  return d / (2.0 * loss);
}

ObjectiveBreakdown assemble_objective(double ce, std::span<const ObjectiveChannel> channels) {
  ObjectiveBreakdown out;
  out.ce = ce;
  out.total = ce;
  out.total_fixed_unregularized = ce;
  int id = 0;
  for (const auto& ch : channels) {
    if (!(ch.beta > 0.0) || !std::isfinite(ch.beta)) {
      throw Error(ErrorCode::NonPositiveBeta, "channel " + std::to_string(id) + " has beta " + std::to_string(ch.beta));
    }
    ChannelBreakdown row;
    row.id = id++;
    row.loss = ch.loss;
    row.beta = ch.beta;
    row.weighted = ch.beta * ch.loss;
    row.regularizer = -0.5 * ch.dim * std::log(ch.beta);
    row.grad_scale = ch.beta;
    row.dtotal_dbeta = ch.loss - ch.dim / (2.0 * ch.beta);
    out.total += row.weighted + row.regularizer;
    out.total_fixed_unregularized += row.weighted + (ch.mode == BetaMode::Fixed ? 0.0 : row.regularizer);
    out.per_channel.push_back(row);
  }
  return out;
}

ObjectiveBreakdown assemble_objective(const LossResult& ce, std::span<const ObjectiveChannel> channels) {
  return assemble_objective(ce.value, channels);
}

// ---------------------------------------------------------------------------

namespace {

std::size_t grid_size(const Theorem1Case& c) {
  std::size_t n = 1;
  for (int k = 0; k < c.vocab; ++k) n *= static_cast<std::size_t>(c.points_per_axis);
  return n;
}

}  // namespace

VectorXd theorem1_grid_point(const Theorem1Case& c, std::size_t index) {
  VectorXd a(c.vocab);
  const double step = (c.hi - c.lo) / (c.points_per_axis - 1);
  for (int k = 0; k < c.vocab; ++k) {
    a(k) = c.lo + step * static_cast<double>(index % static_cast<std::size_t>(c.points_per_axis));
    index /= static_cast<std::size_t>(c.points_per_axis);
  }
  return a;
}

Theorem1Result verify_theorem1(const Theorem1Case& c) {
  if (c.vocab < 2 || c.points_per_axis < 2 || !(c.hi > c.lo)) {
    throw Error(ErrorCode::InvalidArgument, "degenerate theorem-1 grid");
  }
  if (c.teacher_logits.size() != c.vocab) throw Error(ErrorCode::DimensionMismatch, "teacher logits vs vocab");
  if (c.observed < 0 || c.observed >= c.vocab) throw Error(ErrorCode::TokenOutOfRange, "observed token");
  if (!(c.beta >= 0.0)) throw Error(ErrorCode::NonPositiveBeta, "beta must be non-negative");
  const std::size_t n = grid_size(c);
  if (n > kMaxTheorem1Points) throw Error(ErrorCode::InvalidArgument, "grid too large for exhaustive scan");

  std::vector<double> log_lik(n);
  std::vector<double> energy(n);
  double min_energy = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    const VectorXd a = theorem1_grid_point(c, i);
    log_lik[i] = log_softmax(a)(c.observed);
    energy[i] = divergence(c.teacher_logits, a, c.spec).value;
    min_energy = std::min(min_energy, energy[i]);
  }

  // Posterior route, in probability space: likelihood x normalized Gibbs prior / evidence.
  std::vector<double> posterior(n);
  double prior_mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    posterior[i] = std::exp(-c.beta * (energy[i] - min_energy));
    prior_mass += posterior[i];
  }
  double evidence = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    posterior[i] = std::exp(log_lik[i]) * posterior[i] / prior_mass;
    evidence += posterior[i];
  }
  for (auto& v : posterior) v /= evidence;

  // Objective route: -ln p(y|a) + beta * l(a; a_t).
  std::vector<double> objective(n);
  for (std::size_t i = 0; i < n; ++i) objective[i] = -log_lik[i] + c.beta * energy[i];

  // Shift-invariant energies produce exact ties (a and a + c*1 share a softmax);
  // both routes resolve them to the lowest index within a rounding-level band.
  constexpr double kTieBand = 1e-9;
  const double best_post = *std::max_element(posterior.begin(), posterior.end());
  const double best_obj = *std::min_element(objective.begin(), objective.end());
  Theorem1Result out;
  out.argmax_posterior = static_cast<std::size_t>(
      std::find_if(posterior.begin(), posterior.end(), [&](double v) { return v >= best_post * (1.0 - kTieBand); }) -
      posterior.begin());
  out.argmin_objective = static_cast<std::size_t>(
      std::find_if(objective.begin(), objective.end(),
                   [&](double v) { return v <= best_obj + kTieBand * std::max(1.0, std::abs(best_obj)); }) -
      objective.begin());
  out.posterior_point = theorem1_grid_point(c, out.argmax_posterior);
  out.objective_point = theorem1_grid_point(c, out.argmin_objective);
  return out;
}

LaplaceEnergy quadratic_energy(const MatrixXd& hessian, const VectorXd& center, double min_energy) {
  if (hessian.rows() != center.size() || hessian.cols() != center.size()) {
    throw Error(ErrorCode::DimensionMismatch, "Hessian and center disagree");
  }
  LaplaceEnergy e;
  e.name = "quadratic-" + std::to_string(center.size()) + "d";
  e.minimizer = center;
  e.hessian = hessian;
  e.min_energy = min_energy;
  e.exactly_quadratic = true;
  e.energy = [hessian, center, min_energy](const VectorXd& a) {
    const VectorXd d = a - center;
    return min_energy + 0.5 * d.dot(hessian * d);
  };
  return e;
}

LaplaceEnergy fkl_logit_energy(const VectorXd& teacher_free_logits) {
  const Eigen::Index free = teacher_free_logits.size();
  if (free < 1 || free > 2) throw Error(ErrorCode::InvalidArgument, "fkl energy supports 1 or 2 free logits");
  VectorXd teacher(free + 1);
  teacher << teacher_free_logits, 0.0;
  const VectorXd p = softmax(teacher);
  const VectorXd log_p = p.array().log();

  LaplaceEnergy e;
  e.name = "fkl-" + std::to_string(free) + "d";
  e.minimizer = teacher_free_logits;
  const VectorXd p_free = p.head(free);
  e.hessian = MatrixXd(p_free.asDiagonal()) - p_free * p_free.transpose();
  e.min_energy = 0.0;
  // Unclamped log-softmax keeps the tails growing linearly so the integral converges.
  e.energy = [p, log_p, free](const VectorXd& a) {
    VectorXd logits(free + 1);
    logits << a, 0.0;
    return p.dot(log_p - log_softmax(logits));
  };
  return e;
}

namespace {

constexpr double kTailExponent = 50.0;  // exp(-50) ~ 2e-22 at the box edge

double box_edge_min(const LaplaceEnergy& e, double beta, double half_width) {
  const VectorXd& m = e.minimizer;
  double lowest = std::numeric_limits<double>::infinity();
  if (e.dim() == 1) {
    for (double s : {-1.0, 1.0}) {
      VectorXd a = m;
      a(0) += s * half_width;
      lowest = std::min(lowest, beta * (e.energy(a) - e.min_energy));
    }
    return lowest;
  }
  constexpr int kEdgeSamples = 257;
  for (int i = 0; i < kEdgeSamples; ++i) {
    const double t = -half_width + 2.0 * half_width * i / (kEdgeSamples - 1);
    for (double s : {-1.0, 1.0}) {
      VectorXd a = m;
      a(0) += s * half_width;
      a(1) += t;
      lowest = std::min(lowest, beta * (e.energy(a) - e.min_energy));
      a = m;
      a(0) += t;
      a(1) += s * half_width;
      lowest = std::min(lowest, beta * (e.energy(a) - e.min_energy));
    }
  }
  return lowest;
}

// Trapezoid rule for exp(-beta (l - l_min)) on the box m +- w with n intervals per axis.
double trapezoid(const LaplaceEnergy& e, double beta, double half_width, int n) {
  const double h = 2.0 * half_width / n;
  auto integrand = [&](const VectorXd& a) { return std::exp(-beta * (e.energy(a) - e.min_energy)); };
  double sum = 0.0;
  if (e.dim() == 1) {
    VectorXd a(1);
    for (int i = 0; i <= n; ++i) {
      a(0) = e.minimizer(0) - half_width + h * i;
      sum += (i == 0 || i == n ? 0.5 : 1.0) * integrand(a);
    }
    return sum * h;
  }
  VectorXd a(2);
  for (int i = 0; i <= n; ++i) {
    const double wi = (i == 0 || i == n) ? 0.5 : 1.0;
    a(0) = e.minimizer(0) - half_width + h * i;
    for (int j = 0; j <= n; ++j) {
      const double wj = (j == 0 || j == n) ? 0.5 : 1.0;
      a(1) = e.minimizer(1) - half_width + h * j;
      sum += wi * wj * integrand(a);
    }
  }
  return sum * h * h;
}

}  // namespace

LaplaceCheck verify_laplace(const LaplaceEnergy& e, double beta) {
  if (e.dim() < 1 || e.dim() > 2) throw Error(ErrorCode::InvalidArgument, "verify_laplace supports 1 or 2 dims");
  if (!(beta > 0.0)) throw Error(ErrorCode::NonPositiveBeta, "beta must be positive");

  double half_width = 1.0;
  while (box_edge_min(e, beta, half_width) < kTailExponent) {
    half_width *= 2.0;
    if (half_width > 1e5) throw Error(ErrorCode::QuadratureNotConverged, e.name + ": tails never decay");
  }

  const int max_n = e.dim() == 1 ? (1 << 16) : (1 << 11);
  int n = 32;
  double previous = trapezoid(e, beta, half_width, n);
  double integral = previous;
  bool converged = false;
  while (n < max_n) {
    n *= 2;
    integral = trapezoid(e, beta, half_width, n);
    if (std::abs(integral - previous) <= 1e-12 * integral) {
      converged = true;
      break;
    }
    previous = integral;
  }
  if (!converged || !(integral > 0.0)) {
    throw Error(ErrorCode::QuadratureNotConverged, e.name + ": trapezoid refinement did not settle");
  }

  LaplaceCheck out;
  out.quadrature_log_z = std::log(integral) - beta * e.min_energy;
  out.laplace_log_z = laplace_log_z(beta, e.hessian.determinant(), e.dim(), e.min_energy);
  out.abs_error = std::abs(out.quadrature_log_z - out.laplace_log_z);
  return out;
}

}  // namespace uwkd
