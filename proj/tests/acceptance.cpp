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

// Acceptance suite: one PASS/FAIL line per criterion.
//
// Exit status is 0 when every criterion passes. With --expect-fail the run
// succeeds only if the failing set is exactly the listed one, so a fixed or a
// newly broken criterion both surface.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "test_support.hpp"
#include "uwkd/experiment.hpp"

using namespace uwkd;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 1 -------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const DivergenceKind kinds[] = {
      DivergenceKind::FKL,          DivergenceKind::RKL,          DivergenceKind::SkewFKL,    DivergenceKind::SkewRKL,
      DivergenceKind::JS,           DivergenceKind::TVD,          DivergenceKind::MseLogits,  DivergenceKind::MseProbs,
      DivergenceKind::CosineLogits, DivergenceKind::CosineProbs,  DivergenceKind::FeatureCosine, DivergenceKind::FeatureMse};
  const int vocabs[] = {2, 8, 32};
  const double taus[] = {0.5, 1.0, 2.0};
  std::mt19937_64 rng(1001);
  double worst = 0.0;
  std::string worst_kind;
  int instances = 0;
  for (DivergenceKind kind : kinds) {
    for (int i = 0; i < 100; ++i) {
      const int v = vocabs[i % 3];
      const double tau = taus[(i / 3) % 3];
      const DivergenceSpec spec = DivergenceSpec::make(kind, tau, tau);
      VectorXd zt, zs;
      for (;;) {
        zt = testing::random_vector(rng, v, -3.0, 3.0);
        zs = testing::random_vector(rng, v, -3.0, 3.0);
        if (kind != DivergenceKind::TVD) break;
        const VectorXd gap = softmax(zt, Temperature(tau)) - softmax(zs, Temperature(tau));
        if (gap.cwiseAbs().minCoeff() > 1e-4) break;  // off the |p - q| kinks
      }
      auto f = [&](const VectorXd& x) { return divergence(zt, x, spec).value; };
      const double err = testing::relative_error(divergence(zt, zs, spec).grad, testing::numeric_gradient(f, zs));
      if (err > worst) {
        worst = err;
        worst_kind = std::string(kind_id(kind));
      }
      ++instances;
    }
  }
  return {worst < 1e-5, fmt("%d instances, worst relative error %.3g (%s)", instances, worst, worst_kind.c_str())};
}

// 2 -------------------------------------------------------------------------

/// Plain gradient descent on beta*l - (d/2) ln beta in log-space.
double descend_beta(double loss, double d, double beta0) {
  double u = std::log(beta0);
  for (int it = 0; it < 1000000; ++it) {
    const double beta = std::exp(u);
    const double g = (loss - d / (2.0 * beta)) * beta;
    if (std::abs(g) < 1e-13) break;
    u -= 0.5 / d * g;
  }
  return std::exp(u);
}

Outcome beta_oracle() {
  std::mt19937_64 rng(2002);
  std::uniform_real_distribution<double> log_loss(std::log(1e-2), std::log(10.0));
  std::uniform_int_distribution<int> dim(1, 64);
  std::uniform_real_distribution<double> log_beta0(std::log(1e-3), std::log(1e3));
  double worst_gap = 0.0, worst_slope = 0.0;
  for (int i = 0; i < 50; ++i) {
    const double loss = std::exp(log_loss(rng));
    const double d = dim(rng);
    const double target = d / (2.0 * loss);
    const double found = descend_beta(loss, d, std::exp(log_beta0(rng)));
    worst_gap = std::max(worst_gap, std::abs(found - target));
    const ObjectiveChannel ch{BetaMode::TaskLevel, d, loss, beta_closed_form(loss, d)};
    const ObjectiveBreakdown obj = assemble_objective(1.0, std::span<const ObjectiveChannel>(&ch, 1));
    worst_slope = std::max(worst_slope, std::abs(obj.per_channel[0].dtotal_dbeta));
  }
  return {worst_gap < 1e-4 && worst_slope < 1e-10,
          fmt("50 pairs, max |beta_gd - d/2l| %.3g, max |dJ/dbeta| at d/2l %.3g", worst_gap, worst_slope)};
}

// 3 -------------------------------------------------------------------------

Outcome theorem1() {
  const auto cases = canned_theorem1_cases();
  int agree = 0;
  int independent = 0;
  for (const Theorem1Case& c : cases) {
    const Theorem1Result r = verify_theorem1(c);
    if (r.agree()) ++agree;
    // Independent scan of the objective. Shift-invariant energies tie along
    // a + c*1, so compare objective values and the induced distributions.
    const std::size_t n = static_cast<std::size_t>(c.points_per_axis) * c.points_per_axis * c.points_per_axis;
    const int label[] = {c.observed};
    auto objective = [&](std::size_t idx) {
      const VectorXd z = theorem1_grid_point(c, idx);
      const double ce = cross_entropy(z, label).value;
      return c.beta == 0.0 ? ce : ce + c.beta * divergence(c.teacher_logits, z, c.spec).value;
    };
    std::size_t best = 0;
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t idx = 0; idx < n; ++idx) {
      const double val = objective(idx);
      if (val < best_val) {
        best_val = val;
        best = idx;
      }
    }
    const double gap = objective(r.argmax_posterior) - best_val;
    const double dist = (softmax(theorem1_grid_point(c, best)) - softmax(r.posterior_point)).cwiseAbs().maxCoeff();
    if (gap <= 1e-9 * std::max(1.0, std::abs(best_val)) && dist < 1e-9) ++independent;
  }
  const int total = static_cast<int>(cases.size());
  return {agree == total && independent == total,
          fmt("%d/%d cases MAP == argmin on 51^3 grids, %d/%d MAP points attain the minimum of an independent objective scan", agree, total,
              independent, total)};
}

// 4 -------------------------------------------------------------------------

/// Exact log Z of exp(-beta * (e0 + 1/2 x'Hx)).
double gaussian_log_z(const MatrixXd& h, double e0, double beta) {
  const double d = static_cast<double>(h.rows());
  return -beta * e0 + 0.5 * d * std::log(2.0 * std::numbers::pi / beta) - 0.5 * std::log(h.determinant());
}

Outcome laplace() {
  struct Quad {
    MatrixXd h;
    VectorXd c;
    double e0;
    double beta;
  };
  const std::vector<Quad> quads = {
      {MatrixXd::Identity(1, 1), VectorXd::Zero(1), 0.0, 2.0},
      {MatrixXd::Constant(1, 1, 4.0), VectorXd::Constant(1, 0.3), 0.25, 1.0},
      {(MatrixXd(2, 2) << 2.0, 0.5, 0.5, 1.0).finished(), (VectorXd(2) << 0.2, -0.4).finished(), 0.0, 3.0},
      {(MatrixXd(2, 2) << 1.0, -0.3, -0.3, 0.5).finished(), (VectorXd(2) << -0.5, 0.1).finished(), 0.1, 0.7}};
  double worst_quad = 0.0;
  for (const Quad& q : quads) {
    const LaplaceCheck chk = verify_laplace(quadratic_energy(q.h, q.c, q.e0), q.beta);
    const double exact = gaussian_log_z(q.h, q.e0, q.beta);
    worst_quad = std::max({worst_quad, chk.abs_error, std::abs(chk.quadrature_log_z - exact)});
  }
  bool decreasing = true;
  std::string fkl_errors;
  for (const VectorXd& t : std::vector<VectorXd>{VectorXd::Constant(1, 0.7), (VectorXd(2) << 0.5, -0.3).finished()}) {
    const LaplaceEnergy energy = fkl_logit_energy(t);
    double prev = std::numeric_limits<double>::infinity();
    fkl_errors += fmt(" %dD:", energy.dim());
    for (double beta : {1.0, 10.0, 100.0}) {
      const double err = verify_laplace(energy, beta).abs_error;
      fkl_errors += fmt(" %.3g", err);
      decreasing = decreasing && err < prev;
      prev = err;
    }
  }
  return {worst_quad < 1e-6 && decreasing,
          fmt("quadratic max error %.3g; FKL errors over beta 1,10,100:%s", worst_quad, fkl_errors.c_str())};
}

// 5 -------------------------------------------------------------------------

Outcome reductions() {
  std::mt19937_64 rng(5005);
  double skew = 0.0, fixed = 0.0, shift = 0.0, temp = 0.0;
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int i = 0; i < 200; ++i) {
    const int v = 2 + i % 31;
    const VectorXd p = testing::random_simplex(rng, v);
    const VectorXd q = testing::random_simplex(rng, v);
    skew = std::max({skew, std::abs(skew_fkl(p, q, 0.0).value - fkl(p, q).value),
                     std::abs(skew_rkl(p, q, 0.0).value - rkl(p, q).value),
                     (skew_fkl(p, q, 0.0).grad - fkl(p, q).grad).cwiseAbs().maxCoeff(),
                     (skew_rkl(p, q, 0.0).grad - rkl(p, q).grad).cwiseAbs().maxCoeff()});

    const double ce = std::exp(u(rng) / 25.0);
    std::vector<ObjectiveChannel> chans;
    double eq1 = ce;
    for (int k = 0; k < 3; ++k) {
      const double lambda = std::exp(u(rng) / 20.0);
      const double loss = std::exp(u(rng) / 20.0);
      chans.push_back({BetaMode::Fixed, static_cast<double>(v), loss, lambda});
      eq1 += lambda * loss;
    }
    fixed = std::max(fixed, std::abs(assemble_objective(ce, chans).total_fixed_unregularized - eq1));

    const VectorXd z = testing::random_vector(rng, v, -20.0, 20.0);
    const double tau = 0.25 + 0.01 * i;
    const VectorXd sm = softmax(z, Temperature(tau));
    shift = std::max(shift, (softmax((z.array() + u(rng)).matrix(), Temperature(tau)) - sm).cwiseAbs().maxCoeff());
    temp = std::max(temp, (softmax((z / tau).eval()) - sm).cwiseAbs().maxCoeff());
  }
  return {skew <= 1e-14 && fixed <= 1e-12 && shift <= 1e-12 && temp <= 1e-12,
          fmt("skew(0) vs KL %.2g, fixed objective vs CE + sum lambda*l %.2g, softmax shift %.2g, temperature %.2g",
              skew, fixed, shift, temp)};
}

// 6-9 -----------------------------------------------------------------------

struct DefaultRuns {
  std::map<std::pair<DivergenceKind, Strategy>, ExperimentResult> runs;
  double seconds = 0.0;
};

DefaultRuns default_runs(const std::string& teacher_checkpoint) {
  const auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig base = default_config();
  base.teacher_checkpoint = teacher_checkpoint;
  PretrainReport rep;
  const TinyLM teacher = obtain_teacher(base, &rep);
  if (teacher_checkpoint.empty()) {
    std::printf("      teacher: CE %.4f after %d steps (entropy rate %.4f)\n", rep.final_ce, rep.steps_run,
                rep.entropy_rate);
  }
  DefaultRuns out;
  for (DivergenceKind kind : {DivergenceKind::FKL, DivergenceKind::RKL, DivergenceKind::CosineProbs}) {
    for (Strategy s : {Strategy::Unweighted, Strategy::Manual, Strategy::BetaTask, Strategy::BetaInstance}) {
      ExperimentConfig c = default_config(kind, s);
      out.runs[{kind, s}] = run_experiment(c, &teacher, false);
      std::printf("      %-13s %-14s eval CE", std::string(kind_id(kind)).c_str(), std::string(strategy_id(s)).c_str());
      for (const SeedResult& r : out.runs[{kind, s}].seeds) std::printf(" %.4f", r.final_eval.ce);
      std::printf("\n");
      std::fflush(stdout);
    }
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

int count_seeds(const ExperimentResult& a, const ExperimentResult& b,
                const std::function<double(const SeedResult&)>& metric) {
  int wins = 0;
  for (std::size_t i = 0; i < a.seeds.size(); ++i) wins += metric(a.seeds[i]) <= metric(b.seeds[i]) ? 1 : 0;
  return wins;
}

Outcome strategy_ranking(const DefaultRuns& d) {
  auto ce = [](const SeedResult& s) { return s.final_eval.ce; };
  bool pass = true;
  std::string detail;
  for (DivergenceKind kind : {DivergenceKind::FKL, DivergenceKind::RKL, DivergenceKind::CosineProbs}) {
    const int inst = count_seeds(d.runs.at({kind, Strategy::BetaInstance}), d.runs.at({kind, Strategy::Manual}), ce);
    const int task = count_seeds(d.runs.at({kind, Strategy::BetaTask}), d.runs.at({kind, Strategy::Unweighted}), ce);
    pass = pass && inst >= 3 && task >= 3;
    detail += fmt("%s: instance<=manual %d/4, task<=unweighted %d/4; ", std::string(kind_id(kind)).c_str(), inst, task);
  }
  detail += fmt("runs took %.0f s", d.seconds);
  return {pass && d.seconds < 1800.0, detail};
}

double auc(const SeedResult& s, double MetricsRecord::*field) {
  double a = 0.0;
  for (const MetricsRecord& r : s.metrics) a += r.*field;
  return a;
}

Outcome total_loss_auc(const DefaultRuns& d) {
  const ExperimentResult& task = d.runs.at({DivergenceKind::FKL, Strategy::BetaTask});
  const ExperimentResult& flat = d.runs.at({DivergenceKind::FKL, Strategy::Unweighted});
  const int wins = count_seeds(task, flat, [](const SeedResult& s) { return auc(s, &MetricsRecord::total); });
  const int ce_wins = count_seeds(task, flat, [](const SeedResult& s) { return auc(s, &MetricsRecord::ce); });
  return {wins >= 3, fmt("total-loss AUC beta_task<=unweighted %d/4 (seed 1: %.1f vs %.1f); CE-only AUC %d/4", wins,
                         auc(task.seeds[0], &MetricsRecord::total), auc(flat.seeds[0], &MetricsRecord::total),
                         ce_wins)};
}

Outcome matching_distance_check(const DefaultRuns& d) {
  const ExperimentResult& inst = d.runs.at({DivergenceKind::FKL, Strategy::BetaInstance});
  const ExperimentResult& flat = d.runs.at({DivergenceKind::FKL, Strategy::Unweighted});
  const int wins = count_seeds(inst, flat, [](const SeedResult& s) { return s.final_matching_distance; });
  return {wins >= 3, fmt("final matching distance beta_instance<=unweighted %d/4 (seed 1: %.4f vs %.4f)", wins,
                         inst.seeds[0].final_matching_distance, flat.seeds[0].final_matching_distance)};
}

Outcome entropy_beta_direction(const DefaultRuns& d) {
  const ExperimentResult& inst = d.runs.at({DivergenceKind::FKL, Strategy::BetaInstance});
  bool pass = true;
  std::string detail;
  for (const SeedResult& s : inst.seeds) {
    const std::size_t n = s.metrics.size();
    const std::size_t w = std::max<std::size_t>(1, n / 10);
    auto window_mean = [&](std::size_t from, auto get) {
      double m = 0.0;
      for (std::size_t i = from; i < from + w; ++i) m += get(s.metrics[i]);
      return m / static_cast<double>(w);
    };
    auto ent = [](const MetricsRecord& r) { return r.student_entropy; };
    auto beta = [](const MetricsRecord& r) { return r.channel_beta[0]; };
    const double e0 = window_mean(0, ent), e1 = window_mean(n - w, ent);
    const double b0 = window_mean(0, beta), b1 = window_mean(n - w, beta);
    const bool ok = !(e1 < e0) || b1 < b0;
    pass = pass && ok;
    detail += fmt("seed %llu entropy %.3f->%.3f beta %.2f->%.2f; ", static_cast<unsigned long long>(s.seed), e0, e1, b0,
                  b1);
  }
  return {pass, detail};
}

// 10 ------------------------------------------------------------------------

Outcome determinism(const std::string& cli, const std::string& source_dir) {
  const fs::path root = fs::temp_directory_path() / "uwkd_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cfg = "\"" + source_dir + "/configs/golden.json\"";
  const std::string exe = "\"" + cli + "\"";
  bool ok = true;
  std::string detail;

  for (const char* tag : {"a", "b"}) {
    const int code = shell(exe + " --out \"" + (root / tag).string() + "\" run " + cfg + " > /dev/null 2>&1");
    ok = ok && code == 0;
  }
  bool same = true;
  for (const char* s : {"seed_1", "seed_2"}) {
    const std::string a = slurp(root / "a" / s / "metrics.jsonl");
    same = same && !a.empty() && a == slurp(root / "b" / s / "metrics.jsonl") &&
           a == slurp(fs::path(source_dir) / "tests/golden" / (std::string(s) + "_metrics.jsonl"));
  }
  detail += same ? "golden metrics byte-identical; " : "golden metrics differ; ";

  const int sweep = shell(exe + " --out \"" + (root / "sweep").string() + "\" sweep two_loss --config " + cfg +
                          " > /dev/null 2>&1");
  std::ifstream csv(root / "sweep" / "two_loss.csv");
  std::string line;
  int rows = -1;  // header
  while (std::getline(csv, line)) ++rows;
  detail += fmt("two_loss sweep exit %d with %d rows; ", sweep, rows);

  const int verify = shell(exe + " verify > \"" + (root / "verify.txt").string() + "\" 2>&1");
  detail += fmt("verify exit %d", verify);
  return {ok && same && sweep == 0 && rows == 40 && verify == 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  std::string expect_fail;
  std::string teacher_checkpoint;
  std::vector<int> only;
  app.add_option("--expect-fail", expect_fail, "Comma-separated criteria known to fail");
  app.add_option("--teacher_checkpoint", teacher_checkpoint, "Reuse a pretrained default teacher for 6-9");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  std::set<int> expected;
  {
    std::stringstream ss(expect_fail);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) expected.insert(std::stoi(item));
    }
  }
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  std::set<int> failed;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& body) {
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) failed.insert(id);
    std::printf("[%s] %2d %-28s (%.1f s) %s\n", o.pass ? "PASS" : "FAIL", id, name, s, o.detail.c_str());
    std::fflush(stdout);
  };

  report(1, "gradient fidelity", [] {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o = gradient_fidelity();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    o.pass = o.pass && s < 30.0;
    return o;
  });
  report(2, "closed-form beta", beta_oracle);
  report(3, "MAP equivalence grid", [] {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o = theorem1();
    o.pass = o.pass && std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 120.0;
    return o;
  });
  report(4, "laplace", laplace);
  report(5, "reduction identities", reductions);

  if (wanted(6) || wanted(7) || wanted(8) || wanted(9)) {
    std::printf("      default runs: fkl, rkl, cosine_probs x 4 strategies x 4 seeds\n");
    std::fflush(stdout);
    std::optional<DefaultRuns> runs;
    try {
      runs = default_runs(teacher_checkpoint);
    } catch (const std::exception& e) {
      std::printf("      default runs failed: %s\n", e.what());
    }
    auto gated = [&](Outcome (*f)(const DefaultRuns&)) {
      return [&runs, f] { return runs ? f(*runs) : Outcome{false, "default runs unavailable"}; };
    };
    report(6, "strategy ranking", gated(strategy_ranking));
    report(7, "total-loss AUC", gated(total_loss_auc));
    report(8, "matching distance", gated(matching_distance_check));
    report(9, "entropy-beta direction", gated(entropy_beta_direction));
  }
  report(10, "determinism and formats", [] { return determinism(UWKD_CLI_PATH, UWKD_SOURCE_DIR); });

  std::printf("failed criteria:");
  for (int id : failed) std::printf(" %d", id);
  if (failed.empty()) std::printf(" none");
  std::printf("\n");
  if (!expected.empty()) {
    std::printf("expected failures:");
    for (int id : expected) std::printf(" %d", id);
    std::printf("\n");
    std::set<int> considered;
    for (int id : expected) {
      if (wanted(id)) considered.insert(id);
    }
    return failed == considered ? 0 : 1;
  }
  return failed.empty() ? 0 : 1;
}
