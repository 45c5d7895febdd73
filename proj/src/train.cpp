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

#include "uwkd/train.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace uwkd {

using Eigen::MatrixXd;
using Eigen::VectorXd;

std::string_view strategy_id(Strategy s) {
  switch (s) {
    case Strategy::Unweighted: return "unweighted";
    case Strategy::Manual: return "manual";
    case Strategy::BetaTask: return "beta_task";
    case Strategy::BetaInstance: return "beta_instance";
  }
  return "?";
}

Strategy parse_strategy(std::string_view id) {
  for (Strategy s : kStrategies) {
    if (strategy_id(s) == id) return s;
  }
  throw Error(ErrorCode::InvalidArgument, "unknown strategy '" + std::string(id) + "'");
}

nlohmann::ordered_json MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["ce"] = ce;
  j["channel_loss"] = channel_loss;
  j["channel_beta"] = channel_beta;
  j["channel_weighted"] = channel_weighted;
  j["channel_regularizer"] = channel_regularizer;
  j["total"] = total;
  j["student_entropy"] = student_entropy;
  j["matching_distance"] = matching_distance;
  j["eval_ce"] = eval_ce ? nlohmann::ordered_json(*eval_ce) : nlohmann::ordered_json(nullptr);
  j["wall_clock_ms"] = wall_clock_ms;
  return j;
}

TrainState make_train_state(const TinyLM& teacher, TinyLM student, std::vector<ChannelSpec> channels,
                            const TrainSettings& settings) {
  if (teacher.config().vocab != student.config().vocab) {
    throw Error(ErrorCode::DimensionMismatch, "teacher and student vocabularies differ");
  }
  const int vocab = student.config().vocab;
  const Eigen::Index n_params = student.parameter_count();
  TrainState state{std::move(student), OptimizerState::make(settings.optimizer, settings.student_lr, n_params), {},
                   std::nullopt, settings, 0, VectorXd()};

  int feature_channels = 0;
  for (std::size_t k = 0; k < channels.size(); ++k) {
    ChannelSpec& spec = channels[k];
    spec.divergence.validate();
    if (is_feature_kind(spec.divergence.kind)) ++feature_channels;
    if (!(spec.dim_scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "dim_scale must be positive");
    if (spec.lambda && !(*spec.lambda > 0.0)) throw Error(ErrorCode::InvalidArgument, "manual lambda must be positive");

    ChannelState ch;
    ch.spec = spec;
    ch.beta.dim_d = is_feature_kind(spec.divergence.kind) ? settings.feature_dim : vocab;
    ch.beta.dim_scale = spec.dim_scale;
    ch.beta.beta_min = settings.beta_min;
    ch.beta.beta_max = settings.beta_max;
    switch (spec.strategy) {
      case Strategy::Unweighted:
        ch.beta.mode = BetaMode::Fixed;
        ch.beta.fixed_value = 1.0;
        break;
      case Strategy::Manual:
        ch.beta.mode = BetaMode::Fixed;
        ch.beta.fixed_value = spec.lambda.value_or(0.0);  // 0 = derive on first step
        break;
      case Strategy::BetaTask:
        ch.beta.mode = BetaMode::TaskLevel;
        ch.beta.raw_param = raw_for_beta(settings.beta_init, settings.beta_min);
        ch.beta_opt = OptimizerState::make(settings.optimizer, settings.beta_lr, 1);
        break;
      case Strategy::BetaInstance: {
        ch.beta.mode = BetaMode::InstanceLevel;
        ch.beta.net = BetaNet::random(state.student.config().hidden, settings.beta_hidden,
                                      settings.seed * 7919 + k + 1, settings.beta_init_std,
                                      raw_for_beta(settings.beta_init, settings.beta_min), settings.beta_min);
        ch.beta_opt = OptimizerState::make(settings.optimizer, settings.beta_lr,
                                           static_cast<Eigen::Index>(ch.beta.net.parameter_count()));
        break;
      }
    }
    state.channels.push_back(std::move(ch));
  }
  if (feature_channels > 1) throw Error(ErrorCode::InvalidArgument, "at most one feature channel is allowed");
  if (feature_channels == 1) {
    state.projector = FeatureProjector::make(teacher.config().hidden, state.student.config().hidden,
                                             settings.feature_dim, settings.seed ^ 0x5eedULL);
  }
  return state;
}

std::vector<double> manual_lambda_from_initial_scales(double initial_ce, std::span<const double> initial_losses) {
  if (!(initial_ce > 0.0)) throw Error(ErrorCode::NonPositiveLoss, "initial CE must be positive");
  std::vector<double> out;
  out.reserve(initial_losses.size());
  for (double l : initial_losses) {
    if (!(l > 0.0)) throw Error(ErrorCode::NonPositiveLoss, "initial channel loss must be positive");
    out.push_back(initial_ce / l);
  }
  return out;
}

double matching_distance(const MatrixXd& teacher_logits, const MatrixXd& student_logits) {
  if (teacher_logits.rows() != student_logits.rows() || teacher_logits.cols() != student_logits.cols() ||
      teacher_logits.size() == 0) {
    throw Error(ErrorCode::ShapeMismatch, "teacher and student logits must have the same non-empty shape");
  }
  const MatrixXd diff = student_logits - teacher_logits;
  const Eigen::RowVectorXd centre = diff.colwise().mean();
  return (diff.rowwise() - centre).cwiseAbs().mean();
}

EvalResult evaluate(const TinyLM& model, const Corpus& corpus) {
  if (corpus.empty()) throw Error(ErrorCode::InvalidArgument, "empty evaluation corpus");
  EvalResult out;
  long tokens = 0;
  long correct = 0;
  double entropy_sum = 0.0;
  for (const auto& seq : corpus) {
    const ForwardPass pass = model.forward(seq);
    const std::vector<int> targets = model.targets(seq);
    out.ce += cross_entropy(pass.logits, targets).value;
    for (Eigen::Index n = 0; n < pass.logits.cols(); ++n) {
      Eigen::Index best = 0;
      pass.logits.col(n).maxCoeff(&best);
      if (best == targets[static_cast<std::size_t>(n)]) ++correct;
      entropy_sum += entropy(softmax(pass.logits.col(n)));
      ++tokens;
    }
  }
  out.ce /= static_cast<double>(corpus.size());
  out.entropy = entropy_sum / static_cast<double>(tokens);
  out.accuracy = static_cast<double>(correct) / static_cast<double>(tokens);
  return out;
}

namespace {

struct ChannelEval {
  std::vector<double> loss;     // per sample
  std::vector<MatrixXd> grad;   // per sample, d loss / d student logits (token kinds)
  std::vector<VectorXd> fgrad;  // per sample, d loss / d student pooled feature (feature kind)
};

[[noreturn]] void non_finite(const TrainState& state, std::span<const Sequence> batch, double total) {
  std::ostringstream msg;
  char checksum[64];
  std::snprintf(checksum, sizeof checksum, "%.17g", state.student.params().sum());
  msg << "objective " << total << " at step " << state.step << "; theta checksum " << checksum << "; batch:";
  for (const auto& seq : batch) {
    msg << "\n ";
    for (int tok : seq) msg << ' ' << tok;
  }
  throw Error(ErrorCode::NonFiniteLoss, msg.str());
}

}  // namespace

MetricsRecord train_step(TrainState& state, const TinyLM& teacher, std::span<const Sequence> batch,
                         const TeacherBatch* cached_teacher) {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "empty batch");
  const ForwardPass pass = state.student.forward(batch);
  TeacherBatch computed;
  if (!cached_teacher) {
    const ForwardPass tpass = teacher.forward(batch);
    computed.logits = tpass.logits;
    computed.pooled = tpass.pooled;
    cached_teacher = &computed;
  }
  const MatrixXd& t_logits = cached_teacher->logits;
  if (t_logits.rows() != pass.logits.rows() || t_logits.cols() != pass.logits.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "teacher logits do not match the student batch");
  }

  const int n_batch = pass.batch;
  const int positions = pass.positions;
  const double inv_batch = 1.0 / n_batch;
  const std::size_t n_channels = state.channels.size();
  auto cols = [&](const MatrixXd& m, int b) { return m.middleCols(static_cast<Eigen::Index>(b) * positions, positions); };
  auto cols_mut = [&](MatrixXd& m, int b) { return m.middleCols(static_cast<Eigen::Index>(b) * positions, positions); };

  // Losses at the current parameters.
  std::vector<double> ce(static_cast<std::size_t>(n_batch));
  MatrixXd dlogits(pass.logits.rows(), pass.logits.cols());
  for (int b = 0; b < n_batch; ++b) {
    const SequenceLoss l = cross_entropy(cols(pass.logits, b), state.student.targets(batch[static_cast<std::size_t>(b)]));
    ce[static_cast<std::size_t>(b)] = l.value;
    cols_mut(dlogits, b) = l.grad;
  }

  std::vector<ChannelEval> evals(n_channels);
  for (std::size_t k = 0; k < n_channels; ++k) {
    const DivergenceSpec& spec = state.channels[k].spec.divergence;
    ChannelEval& ev = evals[k];
    for (int b = 0; b < n_batch; ++b) {
      if (is_feature_kind(spec.kind)) {
        const VectorXd ft = project_features(*state.projector, cached_teacher->pooled.col(b), ModelRole::Teacher);
        const VectorXd fs = project_features(*state.projector, pass.pooled.col(b), ModelRole::Student);
        const LossResult l = feature_loss(ft, fs, spec.kind);
        ev.loss.push_back(l.value);
        ev.fgrad.push_back(state.projector->student * l.grad);
      } else {
        SequenceLoss l = sequence_loss(cols(t_logits, b), cols(pass.logits, b), spec);
        ev.loss.push_back(l.value);
        ev.grad.push_back(std::move(l.grad));
      }
    }
  }

  // Manual weights come from the very first batch.
  for (std::size_t k = 0; k < n_channels; ++k) {
    ChannelState& ch = state.channels[k];
    if (ch.spec.strategy == Strategy::Manual && !(ch.beta.fixed_value > 0.0)) {
      double ce0 = 0.0;
      double l0 = 0.0;
      for (int b = 0; b < n_batch; ++b) {
        ce0 += ce[static_cast<std::size_t>(b)] * inv_batch;
        l0 += evals[k].loss[static_cast<std::size_t>(b)] * inv_batch;
      }
      const double loss0[] = {l0};
      ch.beta.fixed_value = manual_lambda_from_initial_scales(ce0, loss0).front();
      ch.spec.lambda = ch.beta.fixed_value;
    }
  }

  // Per-sample betas.
  std::vector<std::vector<double>> betas(n_channels, std::vector<double>(static_cast<std::size_t>(n_batch)));
  std::vector<std::vector<VectorXd>> beta_param_grads(n_channels);
  std::vector<double> task_slope(n_channels, 0.0);
  for (std::size_t k = 0; k < n_channels; ++k) {
    ChannelState& ch = state.channels[k];
    switch (ch.beta.mode) {
      case BetaMode::Fixed:
        std::fill(betas[k].begin(), betas[k].end(), ch.beta.fixed_value);
        break;
      case BetaMode::TaskLevel: {
        const BetaValue bv = beta_task(ch.beta);
        std::fill(betas[k].begin(), betas[k].end(), bv.beta);
        task_slope[k] = bv.dbeta_draw;
        break;
      }
      case BetaMode::InstanceLevel:
        for (int b = 0; b < n_batch; ++b) {
          // pooled features are detached: the input gradient is dropped
          BetaNetOutput out = beta_instance(ch.beta.net, pass.pooled.col(b));
          if (out.beta > ch.beta.beta_max) {
            out.beta = ch.beta.beta_max;
            out.param_grad.setZero();
          }
          betas[k][static_cast<std::size_t>(b)] = out.beta;
          beta_param_grads[k].push_back(std::move(out.param_grad));
        }
        break;
    }
  }

  // Objective assembly, per sample, then batch means.
  MetricsRecord rec;
  rec.step = state.step;
  rec.channel_loss.assign(n_channels, 0.0);
  rec.channel_beta.assign(n_channels, 0.0);
  rec.channel_weighted.assign(n_channels, 0.0);
  rec.channel_regularizer.assign(n_channels, 0.0);
  std::vector<std::vector<double>> dtotal_dbeta(n_channels, std::vector<double>(static_cast<std::size_t>(n_batch)));
  MatrixXd dpooled;
  if (state.projector) dpooled = MatrixXd::Zero(state.student.config().hidden, n_batch);

  std::vector<ObjectiveChannel> terms(n_channels);
  for (int b = 0; b < n_batch; ++b) {
    const auto bi = static_cast<std::size_t>(b);
    for (std::size_t k = 0; k < n_channels; ++k) {
      terms[k] = {state.channels[k].beta.mode, state.channels[k].beta.effective_dim(), evals[k].loss[bi], betas[k][bi]};
    }
    const ObjectiveBreakdown obj = assemble_objective(ce[bi], terms);
    rec.ce += obj.ce * inv_batch;
    rec.total += obj.total_fixed_unregularized * inv_batch;
    cols_mut(dlogits, b) *= inv_batch;
    for (std::size_t k = 0; k < n_channels; ++k) {
      const ChannelBreakdown& row = obj.per_channel[k];
      const bool learnable = terms[k].mode != BetaMode::Fixed;
      rec.channel_loss[k] += row.loss * inv_batch;
      rec.channel_beta[k] += row.beta * inv_batch;
      rec.channel_weighted[k] += row.weighted * inv_batch;
      if (learnable) rec.channel_regularizer[k] += row.regularizer * inv_batch;
      dtotal_dbeta[k][bi] = row.dtotal_dbeta * inv_batch;
      if (is_feature_kind(state.channels[k].spec.divergence.kind)) {
        dpooled.col(b) += (row.grad_scale * inv_batch) * evals[k].fgrad[bi];
      } else {
        cols_mut(dlogits, b) += (row.grad_scale * inv_batch) * evals[k].grad[bi];
      }
    }
  }
  if (!std::isfinite(rec.total)) non_finite(state, batch, rec.total);

  double entropy_sum = 0.0;
  for (Eigen::Index n = 0; n < pass.logits.cols(); ++n) entropy_sum += entropy(softmax(pass.logits.col(n)));
  rec.student_entropy = entropy_sum / static_cast<double>(pass.logits.cols());
  rec.matching_distance = matching_distance(t_logits, pass.logits);

  // Updates.
  state.last_student_grad = state.student.backward(pass, dlogits, dpooled);
  if (!state.last_student_grad.allFinite()) non_finite(state, batch, rec.total);
  state.student_opt.update(state.student.params(), state.last_student_grad);

  for (std::size_t k = 0; k < n_channels; ++k) {
    ChannelState& ch = state.channels[k];
    if (ch.beta.mode == BetaMode::TaskLevel) {
      double g = 0.0;
      for (double d : dtotal_dbeta[k]) g += d;
      VectorXd raw(1);
      raw(0) = ch.beta.raw_param;
      ch.beta_opt.update(raw, VectorXd::Constant(1, g * task_slope[k]));
      ch.beta.raw_param = raw(0);
    } else if (ch.beta.mode == BetaMode::InstanceLevel) {
      VectorXd g = VectorXd::Zero(static_cast<Eigen::Index>(ch.beta.net.parameter_count()));
      for (int b = 0; b < n_batch; ++b) {
        g += dtotal_dbeta[k][static_cast<std::size_t>(b)] * beta_param_grads[k][static_cast<std::size_t>(b)];
      }
      VectorXd flat = ch.beta.net.flatten();
      ch.beta_opt.update(flat, g);
      ch.beta.net.assign(flat);
    }
  }
  ++state.step;
  return rec;
}

}  // namespace uwkd
