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

#include "uwkd/toy_models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "uwkd/divergence.hpp"
#include "uwkd/optim.hpp"

namespace uwkd {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Markov source

namespace {

Eigen::Index int_pow(int base, int exp) {
  Eigen::Index out = 1;
  for (int i = 0; i < exp; ++i) out *= base;
  return out;
}

void check_rows(const MatrixXd& table) {
  for (Eigen::Index r = 0; r < table.rows(); ++r) {
    if ((table.row(r).array() < 0).any() || std::abs(table.row(r).sum() - 1.0) > 1e-9) {
      throw Error(ErrorCode::InvalidArgument, "transition row " + std::to_string(r) + " is not a distribution");
    }
  }
}

}  // namespace

MarkovSource MarkovSource::dirichlet(int vocab, int order, double alpha, std::uint64_t seed) {
  if (vocab < 2 || order < 1 || !(alpha > 0.0)) throw Error(ErrorCode::InvalidArgument, "bad Markov source shape");
  MarkovSource src;
  src.vocab = vocab;
  src.order = order;
  src.seed = seed;
  src.transitions.resize(int_pow(vocab, order), vocab);
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);
  for (Eigen::Index r = 0; r < src.transitions.rows(); ++r) {
    double total = 0.0;
    for (int k = 0; k < vocab; ++k) {
      src.transitions(r, k) = gamma(rng);
      total += src.transitions(r, k);
    }
    if (!(total > 0.0)) {
      src.transitions.row(r).setConstant(1.0 / vocab);
    } else {
      src.transitions.row(r) /= total;
    }
  }
  return src;
}

MarkovSource MarkovSource::from_table(int vocab, int order, MatrixXd table, std::uint64_t seed) {
  if (table.rows() != int_pow(vocab, order) || table.cols() != vocab) {
    throw Error(ErrorCode::DimensionMismatch, "transition table must be vocab^order x vocab");
  }
  check_rows(table);
  MarkovSource src;
  src.vocab = vocab;
  src.order = order;
  src.seed = seed;
  src.transitions = std::move(table);
  return src;
}

Eigen::Index MarkovSource::context_index(std::span<const int> recent) const {
  if (static_cast<int>(recent.size()) != order) throw Error(ErrorCode::DimensionMismatch, "context length");
  Eigen::Index idx = 0;
  for (int tok : recent) idx = idx * vocab + tok;
  return idx;
}

VectorXd MarkovSource::stationary() const {
  const Eigen::Index n = context_count();
  VectorXd pi = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  VectorXd next(n);
  for (int iter = 0; iter < 100000; ++iter) {
    next.setZero();
    for (Eigen::Index c = 0; c < n; ++c) {
      const Eigen::Index shifted = (c * vocab) % n;  // drop the oldest token
      for (int k = 0; k < vocab; ++k) next(shifted + k) += pi(c) * transitions(c, k);
    }
    // lazy step guards against periodic chains
    next = 0.5 * (next + pi);
    const double change = (next - pi).lpNorm<1>();
    pi.swap(next);
    if (change < 1e-14) break;
  }
  return pi / pi.sum();
}

double MarkovSource::entropy_rate() const {
  const VectorXd pi = stationary();
  double rate = 0.0;
  for (Eigen::Index c = 0; c < context_count(); ++c) rate += pi(c) * entropy(transitions.row(c).transpose());
  return rate;
}

Corpus generate_corpus(const MarkovSource& source, int n_sequences, int length, std::uint64_t stream) {
  if (length <= source.order) throw Error(ErrorCode::InvalidArgument, "sequence length must exceed the source order");
  Corpus corpus(static_cast<std::size_t>(n_sequences));
  std::uniform_int_distribution<int> uniform(0, source.vocab - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int i = 0; i < n_sequences; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(source.seed), static_cast<std::uint32_t>(source.seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    Sequence& s = corpus[static_cast<std::size_t>(i)];
    s.reserve(static_cast<std::size_t>(length));
    for (int t = 0; t < source.order; ++t) s.push_back(uniform(rng));
    for (int t = source.order; t < length; ++t) {
      const auto row = source.transitions.row(
          source.context_index(std::span<const int>(s.data() + t - source.order, static_cast<std::size_t>(source.order))));
      const double u = unit(rng);
      double acc = 0.0;
      int pick = source.vocab - 1;
      for (int k = 0; k < source.vocab; ++k) {
        acc += row(k);
        if (u < acc) {
          pick = k;
          break;
        }
      }
      s.push_back(pick);
    }
  }
  return corpus;
}

void write_corpus(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path);
  for (const auto& seq : corpus) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (i) out << ' ';
      out << seq[i];
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

Corpus read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  Corpus corpus;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    Sequence seq;
    int tok = 0;
    while (fields >> tok) seq.push_back(tok);
    if (!fields.eof()) throw Error(ErrorCode::IoError, "non-numeric token in " + path);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// TinyLM

std::string_view role_id(ModelRole role) { return role == ModelRole::Teacher ? "teacher" : "student"; }

TinyLMConfig TinyLMConfig::teacher_default() {
  TinyLMConfig c;
  c.embed = 32;
  c.hidden = 64;
  c.layers = 2;
  return c;
}

TinyLMConfig TinyLMConfig::student_default() { return TinyLMConfig{}; }

TinyLM::TinyLM(const TinyLMConfig& config, ModelRole role) : config_(config), role_(role) {
  if (config.vocab < 2 || config.embed < 1 || config.hidden < 1 || config.layers < 1 || config.window < 1 ||
      config.burn_in < 0 || config.max_length <= config.burn_in) {
    throw Error(ErrorCode::InvalidArgument, "bad TinyLM configuration");
  }
  Eigen::Index offset = 0;
  auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols) {
    segments_.push_back({std::move(name), offset, rows, cols});
    offset += rows * cols;
  };
  add("embedding", config.embed, config.vocab);
  Eigen::Index in = static_cast<Eigen::Index>(config.window) * config.embed;
  for (int l = 0; l < config.layers; ++l) {
    add("hidden" + std::to_string(l) + ".weight", config.hidden, in);
    add("hidden" + std::to_string(l) + ".bias", config.hidden, 1);
    in = config.hidden;
  }
  add("output.weight", config.vocab, config.hidden);
  add("output.bias", config.vocab, 1);
  params_ = VectorXd::Zero(offset);
}

TinyLM TinyLM::initialized(const TinyLMConfig& config, ModelRole role, std::uint64_t seed, double stddev) {
  TinyLM model(config, role);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (const auto& s : model.segments_) {
    if (s.name.ends_with(".bias")) continue;
    for (Eigen::Index i = 0; i < s.size(); ++i) model.params_(s.offset + i) = normal(rng);
  }
  return model;
}

const Segment& TinyLM::segment(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  throw Error(ErrorCode::InvalidArgument, "no segment named " + std::string(name));
}

std::vector<int> TinyLM::targets(const Sequence& tokens) const {
  return {tokens.begin() + config_.burn_in, tokens.end()};
}

ForwardPass TinyLM::forward(const Sequence& tokens) const { return forward(std::span<const Sequence>(&tokens, 1)); }

ForwardPass TinyLM::forward(std::span<const Sequence> batch) const {
  if (batch.empty()) throw Error(ErrorCode::InvalidArgument, "empty batch");
  const int length = static_cast<int>(batch.front().size());
  if (length <= config_.burn_in || length > config_.max_length) {
    throw Error(ErrorCode::InvalidArgument, "sequence length " + std::to_string(length) + " outside model range");
  }
  const int positions = length - config_.burn_in;
  const int window = config_.window;
  const Eigen::Index embed = config_.embed;
  const Eigen::Index columns = static_cast<Eigen::Index>(batch.size()) * positions;

  ForwardPass pass;
  pass.batch = static_cast<int>(batch.size());
  pass.positions = positions;
  pass.tokens.assign(static_cast<std::size_t>(window * columns), -1);

  const auto emb = view(segment("embedding"));
  MatrixXd x = MatrixXd::Zero(window * embed, columns);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Sequence& seq = batch[b];
    if (static_cast<int>(seq.size()) != length) throw Error(ErrorCode::LengthMismatch, "batch sequences differ in length");
    for (int tok : seq) {
      if (tok < 0 || tok >= config_.vocab) throw Error(ErrorCode::TokenOutOfRange, "token id " + std::to_string(tok));
    }
    for (int t = 0; t < positions; ++t) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * positions + t;
      for (int w = 0; w < window; ++w) {
        const int pos = config_.burn_in + t - window + w;
        if (pos < 0) continue;
        const int tok = seq[static_cast<std::size_t>(pos)];
        pass.tokens[static_cast<std::size_t>(col * window + w)] = tok;
        x.block(w * embed, col, embed, 1) = emb.col(tok);
      }
    }
  }

  MatrixXd h = std::move(x);
  for (int l = 0; l < config_.layers; ++l) {
    const auto w = view(segment("hidden" + std::to_string(l) + ".weight"));
    const auto bias = view(segment("hidden" + std::to_string(l) + ".bias"));
    MatrixXd out = w * h;
    out.colwise() += bias.col(0);
    out = out.array().tanh().matrix();
    pass.layer_in.push_back(std::move(h));
    h = out;
    pass.layer_out.push_back(std::move(out));
  }

  const auto wo = view(segment("output.weight"));
  const auto bo = view(segment("output.bias"));
  pass.logits = wo * h;
  pass.logits.colwise() += bo.col(0);

  pass.pooled.resize(config_.hidden, pass.batch);
  for (int b = 0; b < pass.batch; ++b) {
    pass.pooled.col(b) = h.middleCols(static_cast<Eigen::Index>(b) * positions, positions).rowwise().mean();
  }
  return pass;
}

VectorXd TinyLM::backward(const ForwardPass& pass, const MatrixXd& dlogits, const MatrixXd& dpooled) const {
  const Eigen::Index columns = pass.logits.cols();
  if (dlogits.rows() != pass.logits.rows() || dlogits.cols() != columns) {
    throw Error(ErrorCode::ShapeMismatch, "dlogits does not match the forward pass");
  }
  const bool has_pooled = dpooled.size() > 0;
  if (has_pooled && (dpooled.rows() != config_.hidden || dpooled.cols() != pass.batch)) {
    throw Error(ErrorCode::ShapeMismatch, "dpooled does not match the forward pass");
  }

  VectorXd grad = VectorXd::Zero(params_.size());
  auto grad_view = [&](const Segment& s) { return Eigen::Map<MatrixXd>(grad.data() + s.offset, s.rows, s.cols); };

  const MatrixXd& top = pass.layer_out.back();
  const Segment& wo_seg = segment("output.weight");
  grad_view(wo_seg).noalias() = dlogits * top.transpose();
  grad_view(segment("output.bias")) = dlogits.rowwise().sum();
  MatrixXd dh = view(wo_seg).transpose() * dlogits;
  if (has_pooled) {
    const double inv = 1.0 / pass.positions;
    for (int b = 0; b < pass.batch; ++b) {
      dh.middleCols(static_cast<Eigen::Index>(b) * pass.positions, pass.positions).colwise() += inv * dpooled.col(b);
    }
  }

  for (int l = config_.layers - 1; l >= 0; --l) {
    const Segment& w_seg = segment("hidden" + std::to_string(l) + ".weight");
    const MatrixXd du = dh.array() * (1.0 - pass.layer_out[static_cast<std::size_t>(l)].array().square());
    grad_view(w_seg).noalias() = du * pass.layer_in[static_cast<std::size_t>(l)].transpose();
    grad_view(segment("hidden" + std::to_string(l) + ".bias")) = du.rowwise().sum();
    dh = view(w_seg).transpose() * du;
  }

  // dh is now d/dx, the stacked window embeddings
  auto demb = grad_view(segment("embedding"));
  const int window = config_.window;
  const Eigen::Index embed = config_.embed;
  for (Eigen::Index col = 0; col < columns; ++col) {
    for (int w = 0; w < window; ++w) {
      const int tok = pass.tokens[static_cast<std::size_t>(col * window + w)];
      if (tok >= 0) demb.col(tok) += dh.block(w * embed, col, embed, 1);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Feature projection

FeatureProjector FeatureProjector::make(int teacher_dim, int student_dim, int shared_dim, std::uint64_t seed) {
  if (shared_dim < 1 || shared_dim > teacher_dim || shared_dim > student_dim) {
    throw Error(ErrorCode::DimensionMismatch, "shared dim must not exceed either hidden dim");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto orthonormal = [&](int rows) {
    MatrixXd g(rows, shared_dim);
    for (Eigen::Index j = 0; j < g.cols(); ++j)
      for (Eigen::Index i = 0; i < g.rows(); ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<MatrixXd> qr(g);
    return MatrixXd(qr.householderQ() * MatrixXd::Identity(rows, shared_dim));
  };
  FeatureProjector p;
  p.teacher = orthonormal(teacher_dim);
  p.student = orthonormal(student_dim);
  p.seed = seed;
  return p;
}

VectorXd project_features(const FeatureProjector& proj, const VectorXd& f, ModelRole side) {
  const MatrixXd& p = side == ModelRole::Teacher ? proj.teacher : proj.student;
  if (f.size() != p.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "feature length " + std::to_string(f.size()) + " vs projector " +
                                                  std::to_string(p.rows()));
  }
  return p.transpose() * f;
}

// ---------------------------------------------------------------------------
// Teacher pretraining

double corpus_cross_entropy(const TinyLM& model, const Corpus& corpus) {
  if (corpus.empty()) throw Error(ErrorCode::InvalidArgument, "empty corpus");
  double total = 0.0;
  for (const auto& seq : corpus) {
    const ForwardPass pass = model.forward(seq);
    total += cross_entropy(pass.logits, model.targets(seq)).value;
  }
  return total / static_cast<double>(corpus.size());
}

TinyLM pretrain_teacher(const MarkovSource& source, const TinyLMConfig& model_config, const PretrainConfig& config,
                        PretrainReport* report) {
  if (model_config.vocab != source.vocab) throw Error(ErrorCode::DimensionMismatch, "model vocab vs source vocab");
  TinyLM model = TinyLM::initialized(model_config, ModelRole::Teacher, config.seed);
  const Corpus train = generate_corpus(source, config.train_sequences, config.length, 1);
  const Corpus valid = generate_corpus(source, config.eval_sequences, config.length, 2);
  const double target = source.entropy_rate();

  OptimizerState opt = OptimizerState::make(OptimizerKind::Adam, config.lr, model.parameter_count());
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

  PretrainReport rep;
  rep.entropy_rate = target;
  rep.initial_ce = corpus_cross_entropy(model, valid);
  rep.final_ce = rep.initial_ce;
  const int diverge_check = std::max(1, config.steps / 4);

  std::vector<Sequence> batch(static_cast<std::size_t>(config.batch));
  for (int step = 0; step < config.steps; ++step) {
    for (auto& seq : batch) seq = train[pick(rng)];
    const ForwardPass pass = model.forward(batch);
    Eigen::MatrixXd dlogits(pass.logits.rows(), pass.logits.cols());
    for (int b = 0; b < pass.batch; ++b) {
      const auto cols = pass.logits.middleCols(static_cast<Eigen::Index>(b) * pass.positions, pass.positions);
      const SequenceLoss ce = cross_entropy(cols, model.targets(batch[static_cast<std::size_t>(b)]));
      dlogits.middleCols(static_cast<Eigen::Index>(b) * pass.positions, pass.positions) = ce.grad / pass.batch;
    }
    opt.update(model.params(), model.backward(pass, dlogits, Eigen::MatrixXd()));
    rep.steps_run = step + 1;

    const bool last = step + 1 == config.steps;
    if ((step + 1) % config.eval_every == 0 || last || step + 1 == diverge_check) {
      rep.final_ce = corpus_cross_entropy(model, valid);
      if (!std::isfinite(rep.final_ce) || (step + 1 >= diverge_check && rep.final_ce > rep.initial_ce)) {
        throw Error(ErrorCode::Diverged, "teacher validation CE " + std::to_string(rep.final_ce) +
                                             " exceeds initial " + std::to_string(rep.initial_ce));
      }
      if (rep.final_ce <= target + config.tolerance) {
        rep.reached_tolerance = true;
        break;
      }
    }
  }
  if (report) *report = rep;
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::string_view kCheckpointFormat = "uwkd-checkpoint-v1";

nlohmann::json config_json(const TinyLMConfig& c) {
  return {{"vocab", c.vocab},   {"max_length", c.max_length}, {"embed", c.embed}, {"hidden", c.hidden},
          {"layers", c.layers}, {"window", c.window},         {"burn_in", c.burn_in}};
}

std::uint64_t to_little(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((bits >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return out;
  }
  return bits;
}

}  // namespace

void save_checkpoint(const std::string& path, const TinyLM& model, std::uint64_t seed) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["role"] = role_id(model.role());
  header["seed"] = seed;
  header["config"] = config_json(model.config());
  header["count"] = model.parameter_count();
  for (const auto& s : model.segments()) {
    header["segments"].push_back({{"name", s.name}, {"offset", s.offset}, {"rows", s.rows}, {"cols", s.cols}});
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path);
  out << header.dump() << '\n';
  for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
    const std::uint64_t bits = to_little(std::bit_cast<std::uint64_t>(model.params()(i)));
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path);
}

TinyLM load_checkpoint(const std::string& path, std::uint64_t* seed) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IoError, path + ": bad checkpoint header: " + e.what());
  }
  if (header.value("format", "") != kCheckpointFormat) throw Error(ErrorCode::IoError, path + ": not a checkpoint");
  const auto& c = header.at("config");
  TinyLMConfig config;
  config.vocab = c.at("vocab");
  config.max_length = c.at("max_length");
  config.embed = c.at("embed");
  config.hidden = c.at("hidden");
  config.layers = c.at("layers");
  config.window = c.at("window");
  config.burn_in = c.at("burn_in");
  const ModelRole role = header.at("role") == "teacher" ? ModelRole::Teacher : ModelRole::Student;
  TinyLM model(config, role);
  if (header.at("count").get<Eigen::Index>() != model.parameter_count()) {
    throw Error(ErrorCode::IoError, path + ": parameter count does not match the configuration");
  }
  for (Eigen::Index i = 0; i < model.parameter_count(); ++i) {
    std::uint64_t bits = 0;
    in.read(reinterpret_cast<char*>(&bits), sizeof bits);
    if (!in) throw Error(ErrorCode::IoError, path + ": truncated parameter block");
    model.params()(i) = std::bit_cast<double>(to_little(bits));
  }
  if (seed) *seed = header.at("seed").get<std::uint64_t>();
  return model;
}

}  // namespace uwkd
