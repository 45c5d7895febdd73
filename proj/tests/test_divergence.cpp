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

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>

#include "test_support.hpp"
#include "uwkd/divergence.hpp"

using namespace uwkd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

VectorXd vec(std::initializer_list<double> v) {
  VectorXd out(static_cast<Eigen::Index>(v.size()));
  std::copy(v.begin(), v.end(), out.data());
  return out;
}

// Independent textbook definitions used as value oracles.
double kl_ref(const VectorXd& a, const VectorXd& b) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += a(i) * std::log(a(i) / b(i));
  return s;
}

double logit_fd_error(const VectorXd& zt, const VectorXd& zs, const DivergenceSpec& spec) {
  auto f = [&](const VectorXd& x) { return divergence(zt, x, spec).value; };
  return testing::relative_error(divergence(zt, zs, spec).grad, testing::numeric_gradient(f, zs));
}

}  // namespace

TEST_CASE("fkl examples") {
  const VectorXd h = vec({0.5, 0.5});
  const LossResult same = fkl(h, h);
  CHECK(std::abs(same.value) < 1e-15);
  CHECK((same.grad + VectorXd::Ones(2)).norm() < 1e-12);  // -p/q; vanishes after the softmax VJP

  // the 1e-12 floor on the zero entry shifts the value by about 3e-11
  CHECK(std::abs(fkl(vec({1, 0}), h).value - std::numbers::ln2) < 1e-10);

  const VectorXd z = vec({0.3, -0.2});
  CHECK(divergence(z, z, DivergenceSpec::make(DivergenceKind::FKL)).grad.norm() < 1e-12);

  std::mt19937_64 rng(1);
  const VectorXd zt = testing::random_vector(rng, 8);
  const VectorXd zs = testing::random_vector(rng, 8);
  CHECK(logit_fd_error(zt, zs, DivergenceSpec::make(DivergenceKind::FKL)) < 1e-6);

  // grad wrt student logits is (q - p) / tau_s
  DivergenceSpec spec = DivergenceSpec::make(DivergenceKind::FKL, 1.5, 0.7);
  const VectorXd p = softmax(zt, Temperature(1.5));
  const VectorXd q = softmax(zs, Temperature(0.7));
  CHECK((divergence(zt, zs, spec).grad - (q - p) / 0.7).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rkl examples") {
  const VectorXd u = VectorXd::Constant(4, 0.25);
  CHECK(std::abs(rkl(u, u).value) < 1e-15);
  CHECK(std::abs(rkl(vec({0.5, 0.5}), vec({1, 0})).value - std::numbers::ln2) < 1e-10);
  std::mt19937_64 rng(2);
  CHECK(logit_fd_error(testing::random_vector(rng, 8), testing::random_vector(rng, 8),
                       DivergenceSpec::make(DivergenceKind::RKL)) < 1e-6);
}

TEST_CASE("skew divergences") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd p = testing::random_simplex(rng, 6);
    const VectorXd q = testing::random_simplex(rng, 6);
    CHECK(std::abs(skew_fkl(p, q, 0.0).value - fkl(p, q).value) <= 1e-14);
    CHECK(std::abs(skew_rkl(p, q, 0.0).value - rkl(p, q).value) <= 1e-14);
    CHECK(std::abs(skew_fkl(p, q, 1.0).value) < 1e-15);
    CHECK(std::abs(skew_rkl(p, q, 1.0).value) < 1e-15);
    const VectorXd m = 0.3 * p + 0.7 * q;
    CHECK(std::abs(skew_fkl(p, q, 0.3).value - kl_ref(p, m)) < 1e-13);
    CHECK(std::abs(skew_rkl(p, q, 0.3).value - kl_ref(q, 0.3 * q + 0.7 * p)) < 1e-13);
  }
  for (DivergenceKind kind : {DivergenceKind::SkewFKL, DivergenceKind::SkewRKL}) {
    CHECK(logit_fd_error(testing::random_vector(rng, 8), testing::random_vector(rng, 8), DivergenceSpec::make(kind)) <
          1e-6);
  }
}

TEST_CASE("js and tvd") {
  std::mt19937_64 rng(4);
  const VectorXd p = testing::random_simplex(rng, 5);
  CHECK(std::abs(js(p, p).value) < 1e-15);
  CHECK(std::abs(tvd(p, p).value) < 1e-15);
  CHECK(std::abs(js(vec({1, 0}), vec({0, 1})).value - std::numbers::ln2) < 1e-10);
  CHECK(std::abs(tvd(vec({1, 0}), vec({0, 1})).value - 1.0) < 1e-15);
  for (int trial = 0; trial < 20; ++trial) {
    const VectorXd a = testing::random_simplex(rng, 7);
    const VectorXd b = testing::random_simplex(rng, 7);
    CHECK(std::abs(js(a, b).value - js(b, a).value) <= 1e-14);
    CHECK(std::abs(tvd(a, b).value - tvd(b, a).value) <= 1e-14);
    CHECK(js(a, b).value <= std::numbers::ln2);
    const VectorXd m = 0.5 * (a + b);
    CHECK(std::abs(js(a, b).value - 0.5 * (kl_ref(a, m) + kl_ref(b, m))) < 1e-13);
  }
  // fkl and rkl are not symmetric
  const VectorXd a = vec({0.7, 0.2, 0.1});
  const VectorXd b = vec({0.2, 0.2, 0.6});
  CHECK(std::abs(fkl(a, b).value - fkl(b, a).value) > 1e-3);
  CHECK(std::abs(fkl(a, b).value - rkl(a, b).value) > 1e-3);

  CHECK(logit_fd_error(testing::random_vector(rng, 8), testing::random_vector(rng, 8),
                       DivergenceSpec::make(DivergenceKind::JS)) < 1e-6);
  // TVD away from kinks
  for (;;) {
    const VectorXd zt = testing::random_vector(rng, 8);
    const VectorXd zs = testing::random_vector(rng, 8);
    if ((softmax(zt) - softmax(zs)).cwiseAbs().minCoeff() < 1e-3) continue;
    CHECK(logit_fd_error(zt, zs, DivergenceSpec::make(DivergenceKind::TVD)) < 1e-5);
    break;
  }
  // tie subgradient is zero
  CHECK(tvd(p, p).grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mse and cosine") {
  const VectorXd z = vec({0.4, -1.0, 2.0});
  CHECK(mse_logits(z, z).value == 0.0);
  CHECK(mse_logits(z, z).grad.norm() == 0.0);
  const LossResult m = mse_logits(vec({0, 0}), vec({1, -1}));
  CHECK(std::abs(m.value - 1.0) < 1e-15);
  CHECK((m.grad - vec({1, -1})).norm() < 1e-15);

  CHECK(std::abs(mse_probs(vec({1, 0}), vec({0, 1})).value - 1.0) < 1e-15);
  CHECK(std::abs(cosine_logits(z, 3.0 * z).value) < 1e-15);
  CHECK(std::abs(cosine_logits(vec({1, 0}), vec({0, 1})).value - 1.0) < 1e-15);
  CHECK_THROWS_AS(cosine_logits(vec({0, 0}), vec({1, 1})), Error);
  CHECK_THROWS_AS(cosine_logits(vec({1, 1}), vec({1e-13, 0})), Error);
  CHECK(std::abs(cosine_probs(vec({1, 0}), vec({0, 1})).value - 1.0) < 1e-15);
  CHECK(std::abs(cosine_probs(vec({0.3, 0.7}), vec({0.3, 0.7})).value) < 1e-15);

  std::mt19937_64 rng(5);
  for (DivergenceKind kind : {DivergenceKind::MseLogits, DivergenceKind::MseProbs, DivergenceKind::CosineLogits,
                              DivergenceKind::CosineProbs}) {
    CAPTURE(kind_id(kind));
    const Eigen::Index v = kind == DivergenceKind::MseLogits ? 16 : 8;
    CHECK(logit_fd_error(testing::random_vector(rng, v), testing::random_vector(rng, v), DivergenceSpec::make(kind)) <
          1e-6);
  }
}

TEST_CASE("feature losses") {
  std::mt19937_64 rng(6);
  const VectorXd f = testing::random_vector(rng, 32);
  for (DivergenceKind kind : {DivergenceKind::FeatureCosine, DivergenceKind::FeatureMse}) {
    CHECK(std::abs(feature_loss(f, f, kind).value) < 1e-15);
    const VectorXd ft = testing::random_vector(rng, 32);
    const VectorXd fs = testing::random_vector(rng, 32);
    auto loss = [&](const VectorXd& x) { return feature_loss(ft, x, kind).value; };
    CHECK(testing::relative_error(feature_loss(ft, fs, kind).grad, testing::numeric_gradient(loss, fs)) < 1e-6);
  }
  CHECK(std::abs(feature_loss(vec({1, 0, 0}), vec({0, 1, 0}), DivergenceKind::FeatureCosine).value - 1.0) < 1e-15);
  CHECK_THROWS_AS(feature_loss(vec({0, 0, 0}), vec({0, 1, 0}), DivergenceKind::FeatureCosine), Error);
  CHECK_THROWS_AS(feature_loss(f, f, DivergenceKind::FKL), Error);
}

TEST_CASE("zero at match and nonnegativity for every token kind") {
  std::mt19937_64 rng(7);
  for (DivergenceKind kind : kTokenKinds) {
    CAPTURE(kind_id(kind));
    const DivergenceSpec spec = DivergenceSpec::make(kind);
    const VectorXd z = testing::random_vector(rng, 8);
    const LossResult at = divergence(z, z, spec);
    CHECK(at.value < 1e-10);
    CHECK(at.grad.norm() < 1e-8);
    if (kind == DivergenceKind::CosineLogits) {
      const LossResult prop = divergence(z, 2.5 * z, spec);
      CHECK(prop.value < 1e-10);
      CHECK(prop.grad.norm() < 1e-8);
    }
    for (int trial = 0; trial < 50; ++trial) {
      CHECK(divergence(testing::random_vector(rng, 8, -6, 6), testing::random_vector(rng, 8, -6, 6), spec).value >=
            -1e-12);
    }
  }
}

TEST_CASE("temperature consistency") {
  std::mt19937_64 rng(8);
  for (double tau : {0.5, 2.0, 3.7}) {
    const VectorXd zt = testing::random_vector(rng, 10);
    const VectorXd zs = testing::random_vector(rng, 10);
    const double scaled = divergence(zt, zs, DivergenceSpec::make(DivergenceKind::FKL, tau, tau)).value;
    const double plain = divergence((zt / tau).eval(), (zs / tau).eval(), DivergenceSpec::make(DivergenceKind::FKL)).value;
    CHECK(std::abs(scaled - plain) < 1e-12);
  }
}

TEST_CASE("spec validation") {
  DivergenceSpec s = DivergenceSpec::make(DivergenceKind::SkewFKL);
  CHECK(s.lambda() == doctest::Approx(0.1));
  s.skew_lambda = 1.5;
  CHECK_THROWS_AS(s.validate(), Error);
  s.skew_lambda.reset();
  CHECK_THROWS_AS(s.validate(), Error);
  DivergenceSpec f = DivergenceSpec::make(DivergenceKind::FKL);
  f.skew_lambda = 0.2;
  CHECK_THROWS_AS(f.validate(), Error);
  for (DivergenceKind k : kTokenKinds) CHECK(parse_kind(kind_id(k)) == k);
  CHECK_THROWS_AS(parse_kind("kl"), Error);
}

TEST_CASE("sequence_loss") {
  std::mt19937_64 rng(9);
  const DivergenceSpec spec = DivergenceSpec::make(DivergenceKind::JS);
  const VectorXd zt = testing::random_vector(rng, 6);
  const VectorXd zs = testing::random_vector(rng, 6);
  const LossResult one = divergence(zt, zs, spec);
  const SequenceLoss single = sequence_loss(MatrixXd(zt), MatrixXd(zs), spec);
  CHECK(single.value == one.value);
  CHECK((single.grad.col(0) - one.grad).norm() == 0.0);

  MatrixXd rep_t(6, 4), rep_s(6, 4);
  for (int c = 0; c < 4; ++c) {
    rep_t.col(c) = zt;
    rep_s.col(c) = zs;
  }
  CHECK(std::abs(sequence_loss(rep_t, rep_s, spec).value - one.value) < 1e-15);

  MatrixXd t(6, 5), s(6, 5);
  for (int c = 0; c < 5; ++c) {
    t.col(c) = testing::random_vector(rng, 6);
    s.col(c) = testing::random_vector(rng, 6);
  }
  const SequenceLoss seq = sequence_loss(t, s, spec);
  double mean = 0.0;
  for (int c = 0; c < 5; ++c) {
    const LossResult r = divergence(t.col(c), s.col(c), spec);
    mean += r.value;
    CHECK((seq.grad.col(c) - r.grad / 5.0).cwiseAbs().maxCoeff() < 1e-15);
  }
  CHECK(std::abs(seq.value - mean / 5.0) < 1e-14);
  CHECK_THROWS_AS(sequence_loss(t, s.leftCols(4), spec), Error);
}

TEST_CASE("cross_entropy") {
  MatrixXd confident = MatrixXd::Constant(4, 3, -60.0);
  const std::vector<int> y = {2, 0, 3};
  for (int c = 0; c < 3; ++c) confident(y[static_cast<std::size_t>(c)], c) = 60.0;
  CHECK(cross_entropy(confident, y).value < 1e-12);

  CHECK(std::abs(cross_entropy(MatrixXd::Zero(5, 3), std::vector<int>{1, 4, 0}).value - std::log(5.0)) < 1e-15);

  std::mt19937_64 rng(10);
  MatrixXd z(6, 4);
  for (int c = 0; c < 4; ++c) z.col(c) = testing::random_vector(rng, 6);
  const std::vector<int> t = {1, 5, 0, 2};
  const Temperature tau(1.3);
  const SequenceLoss ce = cross_entropy(z, t, tau);
  auto f = [&](const VectorXd& flat) {
    return cross_entropy(Eigen::Map<const MatrixXd>(flat.data(), 6, 4), t, tau).value;
  };
  const VectorXd flat = Eigen::Map<const VectorXd>(z.data(), z.size());
  CHECK(testing::relative_error(Eigen::Map<const VectorXd>(ce.grad.data(), ce.grad.size()),
                                testing::numeric_gradient(f, flat)) < 1e-6);
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{1, 6, 0, 2}), Error);
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{1, -1, 0, 2}), Error);
  CHECK_THROWS_AS(cross_entropy(z, std::vector<int>{1, 2}), Error);
}

TEST_CASE("simplex_surface") {
  CHECK(simplex_surface(DivergenceSpec::make(DivergenceKind::FKL), Eigen::Vector3d(0.5, 0.3, 0.2), 2).size() == 6);
  CHECK(simplex_surface(DivergenceSpec::make(DivergenceKind::FKL), Eigen::Vector3d(0.5, 0.3, 0.2)).size() == 1891);

  const Eigen::Vector3d uniform = Eigen::Vector3d::Constant(1.0 / 3.0);
  for (DivergenceKind kind : {DivergenceKind::FKL, DivergenceKind::RKL, DivergenceKind::JS}) {
    const auto pts = simplex_surface(DivergenceSpec::make(kind), uniform, 60);
    const auto best = std::min_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.loss < b.loss; });
    CHECK(best->loss < 1e-10);
    CHECK((best->bary - uniform).cwiseAbs().maxCoeff() <= 1.0 / 60.0);
  }

  // FKL anchored at a grid point: minimum there, increasing along rays to each vertex.
  const Eigen::Vector3d anchor(0.8, 0.1, 0.1);
  const int n = 60;
  const auto pts = simplex_surface(DivergenceSpec::make(DivergenceKind::FKL), anchor, n);
  const auto best = std::min_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.loss < b.loss; });
  CHECK((best->bary - anchor).cwiseAbs().maxCoeff() < 1e-12);
  auto at = [&](int i, int j) {
    for (const auto& p : pts) {
      if (std::lround(p.bary(0) * n) == i && std::lround(p.bary(1) * n) == j) return p.loss;
    }
    FAIL("grid point missing");
    return 0.0;
  };
  // anchor is grid point (48, 6, 6); each ray steps on grid points toward a vertex
  const int rays[3][2] = {{2, -1}, {-8, 9}, {-8, -1}};
  for (const auto& step : rays) {
    double prev = at(48, 6);
    for (int s = 1; s <= 6; ++s) {
      const double v = at(48 + step[0] * s, 6 + step[1] * s);
      CHECK(v > prev);
      prev = v;
    }
  }

  // JS symmetric under swapping the two coordinates the anchor treats alike
  const auto jsp = simplex_surface(DivergenceSpec::make(DivergenceKind::JS), Eigen::Vector3d(0.6, 0.2, 0.2), 30);
  for (const auto& p : jsp) {
    for (const auto& q : jsp) {
      if (std::abs(p.bary(0) - q.bary(0)) < 1e-12 && std::abs(p.bary(1) - q.bary(2)) < 1e-12) {
        CHECK(std::abs(p.loss - q.loss) < 1e-14);
      }
    }
  }

  CHECK_THROWS_AS(simplex_surface(DivergenceSpec::make(DivergenceKind::FeatureMse), anchor, 10), Error);
  CHECK_THROWS_AS(simplex_surface(DivergenceSpec::make(DivergenceKind::FKL), anchor, 1), Error);
}

TEST_CASE("surface csv") {
  const auto path = std::filesystem::temp_directory_path() / "uwkd_surface_test.csv";
  write_surface_csv(path.string(), simplex_surface(DivergenceSpec::make(DivergenceKind::RKL), Eigen::Vector3d(0.2, 0.3, 0.5), 2));
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "b0,b1,b2,loss");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 6);
  std::filesystem::remove(path);
}
