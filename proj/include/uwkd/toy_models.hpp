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

// Desk-scale stand-ins for the teacher and student language models: a seeded
// order-k Markov token source and a windowed-MLP autoregressive model with
// hand-written backward pass.

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "uwkd/error.hpp"

namespace uwkd {

using Sequence = std::vector<int>;
using Corpus = std::vector<Sequence>;

struct MarkovSource {
  int vocab = 32;
  int order = 2;
  std::uint64_t seed = 0;
  /// vocab^order contexts x vocab; row c is p(next | context c).
  Eigen::MatrixXd transitions;

  /// Rows drawn from a symmetric Dirichlet(alpha).
  static MarkovSource dirichlet(int vocab, int order, double alpha, std::uint64_t seed);
  /// Validates and adopts an explicit table (rows must sum to 1).
  static MarkovSource from_table(int vocab, int order, Eigen::MatrixXd table, std::uint64_t seed);

  Eigen::Index context_count() const { return transitions.rows(); }
  /// Row index for the `order` most recent tokens (oldest first).
  Eigen::Index context_index(std::span<const int> recent) const;
  /// Stationary distribution over contexts (power iteration from uniform).
  Eigen::VectorXd stationary() const;
  /// sum_c pi(c) H(row c), in nats per token.
  double entropy_rate() const;
};

/// `n_sequences` sequences of `length` tokens: `order` uniform burn-in tokens,
/// then autoregressive draws from the table. Sequence i depends only on
/// (source.seed, stream, i).
Corpus generate_corpus(const MarkovSource& source, int n_sequences, int length, std::uint64_t stream = 0);

/// One sequence per line, space-separated decimal ids.
void write_corpus(const std::string& path, const Corpus& corpus);
Corpus read_corpus(const std::string& path);

enum class ModelRole { Teacher, Student };

std::string_view role_id(ModelRole role);

struct TinyLMConfig {
  int vocab = 32;
  int max_length = 24;
  int embed = 16;
  int hidden = 16;
  int layers = 1;
  /// Tokens visible to each prediction (the `window` most recent ones).
  int window = 3;
  /// Leading positions that are never predicted (the source's burn-in).
  int burn_in = 2;

  static TinyLMConfig teacher_default();
  static TinyLMConfig student_default();
};

struct Segment {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

/// Outputs for a batch of equal-length sequences. Sequence i owns logits
/// columns [i*T, (i+1)*T) where T = length - burn_in; column t predicts token
/// burn_in + t.
struct ForwardPass {
  Eigen::MatrixXd logits;  // V x (B*T)
  Eigen::MatrixXd pooled;  // M x B, mean of final hidden state over positions
  int batch = 0;
  int positions = 0;
  // cache for backward
  std::vector<int> tokens;               // window ids per column, -1 for padding (window x B*T)
  std::vector<Eigen::MatrixXd> layer_in;  // input to each hidden layer
  std::vector<Eigen::MatrixXd> layer_out; // tanh output of each hidden layer
};

class TinyLM {
 public:
  TinyLM(const TinyLMConfig& config, ModelRole role);

  /// Gaussian weights (std `stddev`), zero biases.
  static TinyLM initialized(const TinyLMConfig& config, ModelRole role, std::uint64_t seed, double stddev = 0.08);

  const TinyLMConfig& config() const { return config_; }
  ModelRole role() const { return role_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const Segment& segment(std::string_view name) const;

  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& params() { return params_; }
  Eigen::Index parameter_count() const { return params_.size(); }

  ForwardPass forward(std::span<const Sequence> batch) const;
  ForwardPass forward(const Sequence& tokens) const;

  /// Gradient wrt params() given dL/dlogits (V x B*T) and dL/dpooled (M x B,
  /// may be empty when no loss reads the pooled features).
  Eigen::VectorXd backward(const ForwardPass& pass, const Eigen::MatrixXd& dlogits,
                           const Eigen::MatrixXd& dpooled) const;

  /// Targets of `tokens`: ids at positions burn_in .. length-1.
  std::vector<int> targets(const Sequence& tokens) const;

 private:
  Eigen::Map<const Eigen::MatrixXd> view(const Segment& s) const {
    return {params_.data() + s.offset, s.rows, s.cols};
  }

  TinyLMConfig config_;
  ModelRole role_;
  std::vector<Segment> segments_;
  Eigen::VectorXd params_;
};

/// Fixed projections of teacher and student pooled features into a shared
/// D-dimensional space; both matrices have orthonormal columns.
struct FeatureProjector {
  Eigen::MatrixXd teacher;  // M_teacher x D
  Eigen::MatrixXd student;  // M_student x D
  std::uint64_t seed = 0;

  static FeatureProjector make(int teacher_dim, int student_dim, int shared_dim, std::uint64_t seed);
  int shared_dim() const { return static_cast<int>(teacher.cols()); }
};

Eigen::VectorXd project_features(const FeatureProjector& proj, const Eigen::VectorXd& f, ModelRole side);

struct PretrainConfig {
  int steps = 3000;
  int batch = 32;
  int length = 24;
  double lr = 3e-3;
  std::uint64_t seed = 17;
  int train_sequences = 4096;
  int eval_sequences = 256;
  int eval_every = 100;
  /// Early stop once validation CE is within this many nats of the entropy rate.
  double tolerance = 0.05;
};

struct PretrainReport {
  double initial_ce = 0.0;
  double final_ce = 0.0;
  double entropy_rate = 0.0;
  int steps_run = 0;
  bool reached_tolerance = false;
};

/// CE-only training of a teacher on the source. Throws Diverged when the
/// validation CE exceeds its initial value after a quarter of the budget.
TinyLM pretrain_teacher(const MarkovSource& source, const TinyLMConfig& model, const PretrainConfig& config,
                        PretrainReport* report = nullptr);

/// Mean next-token cross-entropy of `model` over `corpus` (targets after burn-in).
double corpus_cross_entropy(const TinyLM& model, const Corpus& corpus);

/// Writes the JSON header line followed by the parameters as little-endian doubles.
void save_checkpoint(const std::string& path, const TinyLM& model, std::uint64_t seed);
TinyLM load_checkpoint(const std::string& path, std::uint64_t* seed = nullptr);

}  // namespace uwkd
