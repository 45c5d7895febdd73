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

#include <cmath>
#include <string_view>

#include "uwkd/error.hpp"

namespace uwkd {

enum class OptimizerKind { SGD, Adam };

/// First-order optimizer over one flat parameter group.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;

  static OptimizerState make(OptimizerKind kind, double lr, Eigen::Index size) {
    OptimizerState s;
    s.kind = kind;
    s.lr = lr;
    s.m = Eigen::VectorXd::Zero(size);
    s.v = Eigen::VectorXd::Zero(size);
    return s;
  }

  void update(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
    if (grad.size() != params.size() || m.size() != params.size()) {
      throw Error(ErrorCode::DimensionMismatch, "optimizer state does not match parameter vector");
    }
    ++step;
    if (kind == OptimizerKind::SGD) {
      params -= lr * grad;
      return;
    }
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

inline std::string_view optimizer_id(OptimizerKind kind) { return kind == OptimizerKind::SGD ? "sgd" : "adam"; }

}  // namespace uwkd
