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

// Stable primitives over logit and probability vectors. Everything here is
// templated on the Eigen expression so callers can pass blocks, columns and
// maps without copies. Logarithms are natural throughout.

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "uwkd/error.hpp"

namespace uwkd {

/// Floor applied to probabilities before any logarithm is taken.
inline constexpr double kProbFloor = 1e-12;

/// Softmax temperature. Always strictly positive.
class Temperature {
 public:
  constexpr Temperature() = default;
  explicit Temperature(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw Error(ErrorCode::InvalidArgument, "temperature must be positive, got " + std::to_string(value));
    }
  }

  constexpr double value() const noexcept { return value_; }

 private:
  double value_ = 1.0;
};

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Throws unless `z` is a usable logit vector: length >= 2, all entries finite.
template <typename Derived>
void check_logits(const Eigen::MatrixBase<Derived>& z) {
  if (z.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "logit vector needs at least 2 entries");
  }
  if (!z.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "logit vector has non-finite entries");
  }
}

/// Throws unless `p` lies on the simplex (entries in [0,1], sum within `tol` of 1).
template <typename Derived>
void check_probs(const Eigen::MatrixBase<Derived>& p, double tol = 1e-9) {
  if (p.size() < 2 || !p.allFinite() || (p.array() < 0).any() || (p.array() > 1).any() ||
      std::abs(static_cast<double>(p.sum()) - 1.0) > tol) {
    throw Error(ErrorCode::InvalidArgument, "vector is not a probability vector");
  }
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const Scalar top = z.maxCoeff();
  return top + std::log((z.array() - top).exp().sum());
}

/// z / tau - LSE(z / tau).
template <typename Derived>
Vec<typename Derived::Scalar> log_softmax(const Eigen::MatrixBase<Derived>& z, Temperature tau = Temperature{}) {
  using Scalar = typename Derived::Scalar;
  Vec<Scalar> scaled = z / static_cast<Scalar>(tau.value());
  const Scalar lse = log_sum_exp(scaled);
  scaled.array() -= lse;
  return scaled;
}

template <typename Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z, Temperature tau = Temperature{}) {
  return log_softmax(z, tau).array().exp().matrix();
}

/// Shannon entropy with 0 ln 0 = 0.
template <typename Derived>
typename Derived::Scalar entropy(const Eigen::MatrixBase<Derived>& p) {
  using Scalar = typename Derived::Scalar;
  Scalar h = 0;
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    if (p(k) > 0) h -= p(k) * std::log(p(k));
  }
  return h;
}

/// Floors every entry at `eps` and renormalizes.
template <typename Derived>
Vec<typename Derived::Scalar> clamp_prob(const Eigen::MatrixBase<Derived>& p, double eps = kProbFloor) {
  using Scalar = typename Derived::Scalar;
  if (!(eps > 0.0) || eps > 1e-6) {
    throw Error(ErrorCode::InvalidArgument, "clamp eps must lie in (0, 1e-6]");
  }
  Vec<Scalar> out = p.array().max(static_cast<Scalar>(eps));
  out /= out.sum();
  return out;
}

/// Vector-Jacobian product through softmax(z / tau): given g = dL/dq and
/// q = softmax(z / tau), returns dL/dz = q .* (g - <q, g>) / tau.
template <typename DerivedQ, typename DerivedG>
Vec<typename DerivedQ::Scalar> softmax_vjp(const Eigen::MatrixBase<DerivedQ>& q, const Eigen::MatrixBase<DerivedG>& g,
                                           Temperature tau = Temperature{}) {
  using Scalar = typename DerivedQ::Scalar;
  const Scalar mean = q.dot(g);
  return (q.array() * (g.array() - mean)).matrix() / static_cast<Scalar>(tau.value());
}

inline double softplus(double x) {
  // log1p(exp(x)) without overflow for large x
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace uwkd
