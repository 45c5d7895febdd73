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

#include "uwkd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

namespace uwkd {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config reading

int line_of(std::string_view text, std::size_t pos) {
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(pos, text.size())), '\n'));
}

/// Position of `"key"` used as an object key, searching from `from`.
std::size_t find_key(std::string_view text, std::string_view key, std::size_t from) {
  const std::string quoted = "\"" + std::string(key) + "\"";
  for (std::size_t pos = text.find(quoted, from); pos != std::string_view::npos; pos = text.find(quoted, pos + 1)) {
    std::size_t after = pos + quoted.size();
    while (after < text.size() && std::isspace(static_cast<unsigned char>(text[after]))) ++after;
    if (after < text.size() && text[after] == ':') return pos;
  }
  return std::string_view::npos;
}

/// Reads one JSON object, remembering which keys were consumed.
class Section {
 public:
  Section(const json& object, std::string path, std::string_view text, std::size_t origin)
      : object_(object), path_(std::move(path)), text_(text), origin_(origin) {
    if (!object_.is_object()) fail(path_.empty() ? "config" : path_, "must be a JSON object");
  }

  bool has(const std::string& key) const { return object_.contains(key); }

  template <class T>
  void read(const std::string& key, T& target) {
    seen_.push_back(key);
    const auto it = object_.find(key);
    if (it == object_.end()) return;
    try {
      if constexpr (std::is_same_v<T, int> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_same_v<T, std::uint64_t>) {
          if (it->is_number_integer() && !it->is_number_unsigned() && it->template get<long long>() < 0) {
            throw std::invalid_argument("expected a non-negative integer");
          }
        }
      }
      target = it->template get<T>();
    } catch (const std::exception& e) {
      fail(key, std::string("has the wrong type (") + e.what() + ")");
    }
  }

  Section child(const std::string& key) {
    seen_.push_back(key);
    const std::size_t pos = find_key(text_, key, origin_);
    return Section(object_.at(key), qualified(key), text_, pos == std::string_view::npos ? origin_ : pos);
  }

  const json& raw(const std::string& key) {
    seen_.push_back(key);
    return object_.at(key);
  }

  /// Unknown keys are always an error.
  void finish() const {
    for (const auto& [key, value] : object_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) fail(key, "is not a recognised key");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    const std::size_t pos = find_key(text_, key, origin_);
    std::string msg = "config key '" + qualified(key) + "' " + what;
    if (pos != std::string_view::npos) msg += " (line " + std::to_string(line_of(text_, pos)) + ")";
    throw Error(ErrorCode::ConfigError, msg);
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::size_t origin() const { return origin_; }

 private:
  const json& object_;
  std::string path_;
  std::string_view text_;
  std::size_t origin_;
  std::vector<std::string> seen_;
};

OptimizerKind parse_optimizer(const std::string& id) {
  if (id == "adam") return OptimizerKind::Adam;
  if (id == "sgd") return OptimizerKind::SGD;
  throw std::invalid_argument("unknown optimizer '" + id + "'");
}

template <class F>
auto config_guard(const Section& s, const std::string& key, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) throw;
    s.fail(key, e.what());
  } catch (const std::invalid_argument& e) {
    s.fail(key, e.what());
  }
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------

void ExperimentConfig::finalize() {
  if (vocab < 2) throw Error(ErrorCode::ConfigError, "config key 'source.vocab' must be at least 2");
  if (order < 1) throw Error(ErrorCode::ConfigError, "config key 'source.order' must be at least 1");
  if (!(dirichlet_alpha > 0.0)) throw Error(ErrorCode::ConfigError, "config key 'source.dirichlet_alpha' must be positive");
  if (channels.empty()) throw Error(ErrorCode::ConfigError, "config key 'channels' must list at least one channel");
  const auto features = std::count_if(channels.begin(), channels.end(),
                                      [](const ChannelSpec& c) { return is_feature_kind(c.divergence.kind); });
  if (features > 1) throw Error(ErrorCode::ConfigError, "config key 'channels' has more than one feature channel");
  if (steps < 0) throw Error(ErrorCode::ConfigError, "config key 'steps' must be non-negative");
  if (batch < 1) throw Error(ErrorCode::ConfigError, "config key 'batch' must be positive");
  if (seq_len <= order) throw Error(ErrorCode::ConfigError, "config key 'seq_len' must exceed the source order");
  if (seeds.empty()) throw Error(ErrorCode::ConfigError, "config key 'seeds' must be non-empty");
  if (train_sequences < 1 || eval_sequences < 1) {
    throw Error(ErrorCode::ConfigError, "config keys 'train_sequences' and 'eval_sequences' must be positive");
  }
  if (eval_every < 1) throw Error(ErrorCode::ConfigError, "config key 'eval_every' must be positive");
  if (features > 0 && (feature_dim < 1 || feature_dim > std::min(teacher.hidden, student.hidden))) {
    throw Error(ErrorCode::ConfigError, "config key 'feature_dim' must lie in [1, min(teacher.hidden, student.hidden)]");
  }
  for (TinyLMConfig* m : {&teacher, &student}) {
    m->vocab = vocab;
    m->max_length = seq_len;
    m->burn_in = order;
    m->window = order + 1;
    if (m->embed < 1 || m->hidden < 1 || m->layers < 1) {
      throw Error(ErrorCode::ConfigError, "model dimensions (embed, hidden, layers) must be positive");
    }
  }
  pretrain.length = seq_len;
  train.feature_dim = feature_dim;
  for (auto& ch : channels) {
    try {
      ch.divergence.validate();
    } catch (const Error& e) {
      throw Error(ErrorCode::ConfigError, std::string("config key 'channels': ") + e.what());
    }
  }
}

MarkovSource ExperimentConfig::source() const {
  return MarkovSource::dirichlet(vocab, order, dirichlet_alpha, source_seed);
}

ExperimentConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::ConfigError,
                "malformed JSON (line " + std::to_string(line_of(text, e.byte == 0 ? 0 : e.byte - 1)) + "): " + e.what());
  }

  ExperimentConfig c;
  c.channels.clear();
  Section top(doc, "", text, 0);

  if (top.has("source")) {
    Section s = top.child("source");
    s.read("vocab", c.vocab);
    s.read("order", c.order);
    s.read("dirichlet_alpha", c.dirichlet_alpha);
    s.read("seed", c.source_seed);
    s.finish();
  }

  auto read_model = [&](const std::string& key, TinyLMConfig& m, bool teacher) {
    if (!top.has(key)) return;
    Section s = top.child(key);
    s.read("embed", m.embed);
    s.read("hidden", m.hidden);
    s.read("layers", m.layers);
    if (teacher) {
      s.read("checkpoint", c.teacher_checkpoint);
      if (s.has("pretrain")) {
        Section p = s.child("pretrain");
        p.read("steps", c.pretrain.steps);
        p.read("batch", c.pretrain.batch);
        p.read("lr", c.pretrain.lr);
        p.read("seed", c.pretrain.seed);
        p.read("train_sequences", c.pretrain.train_sequences);
        p.read("eval_sequences", c.pretrain.eval_sequences);
        p.read("eval_every", c.pretrain.eval_every);
        p.read("tolerance", c.pretrain.tolerance);
        p.finish();
      }
    } else {
      s.read("init_std", c.student_init_std);
    }
    s.finish();
  };
  read_model("teacher", c.teacher, true);
  read_model("student", c.student, false);

  if (top.has("channels")) {
    const json& list = top.raw("channels");
    if (!list.is_array()) top.fail("channels", "must be an array");
    const std::size_t origin = find_key(text, "channels", 0);
    std::size_t cursor = origin == std::string_view::npos ? 0 : origin;
    for (std::size_t i = 0; i < list.size(); ++i) {
      const std::size_t kind_pos = find_key(text, "kind", cursor);
      Section s(list[i], "channels[" + std::to_string(i) + "]", text, kind_pos == std::string_view::npos ? cursor : kind_pos);
      if (kind_pos != std::string_view::npos) cursor = kind_pos + 1;
      std::string kind = "fkl";
      std::string strategy = "unweighted";
      double teacher_temp = 1.0;
      double student_temp = 1.0;
      std::optional<double> skew;
      s.read("kind", kind);
      s.read("strategy", strategy);
      s.read("teacher_temp", teacher_temp);
      s.read("student_temp", student_temp);
      if (s.has("skew_lambda")) {
        double v = 0.0;
        s.read("skew_lambda", v);
        skew = v;
      }
      ChannelSpec ch;
      ch.divergence = config_guard(s, "kind", [&] { return DivergenceSpec::make(parse_kind(kind)); });
      ch.divergence.teacher_temp = config_guard(s, "teacher_temp", [&] { return Temperature(teacher_temp); });
      ch.divergence.student_temp = config_guard(s, "student_temp", [&] { return Temperature(student_temp); });
      if (skew) ch.divergence.skew_lambda = skew;
      ch.strategy = config_guard(s, "strategy", [&] { return parse_strategy(strategy); });
      s.read("dim_scale", ch.dim_scale);
      if (!(ch.dim_scale > 0.0)) s.fail("dim_scale", "must be positive");
      if (s.has("lambda")) {
        double lambda = 0.0;
        s.read("lambda", lambda);
        if (!(lambda > 0.0)) s.fail("lambda", "must be positive");
        ch.lambda = lambda;
      }
      config_guard(s, "skew_lambda", [&] {
        ch.divergence.validate();
        return 0;
      });
      s.finish();
      c.channels.push_back(ch);
    }
  }

  if (top.has("optimizer")) {
    Section s = top.child("optimizer");
    std::string kind = std::string(optimizer_id(c.train.optimizer));
    s.read("kind", kind);
    c.train.optimizer = config_guard(s, "kind", [&] { return parse_optimizer(kind); });
    s.read("lr", c.train.student_lr);
    s.read("beta_lr", c.train.beta_lr);
    s.finish();
  }

  if (top.has("beta")) {
    Section s = top.child("beta");
    s.read("min", c.train.beta_min);
    s.read("max", c.train.beta_max);
    s.read("init", c.train.beta_init);
    s.read("hidden", c.train.beta_hidden);
    s.read("init_std", c.train.beta_init_std);
    if (!(c.train.beta_min > 0.0 && c.train.beta_max > c.train.beta_min)) s.fail("max", "must exceed beta.min > 0");
    if (!(c.train.beta_init > c.train.beta_min)) s.fail("init", "must exceed beta.min");
    s.finish();
  }

  top.read("feature_dim", c.feature_dim);
  top.read("steps", c.steps);
  top.read("batch", c.batch);
  top.read("seq_len", c.seq_len);
  top.read("seeds", c.seeds);
  top.read("train_sequences", c.train_sequences);
  top.read("eval_sequences", c.eval_sequences);
  top.read("eval_every", c.eval_every);
  top.read("out_dir", c.out_dir);
  top.read("record_wall_clock", c.record_wall_clock);
  top.finish();

  if (!top.has("channels")) c.channels.push_back({DivergenceSpec::make(DivergenceKind::FKL), Strategy::Unweighted, 1.0, {}});
  try {
    c.finalize();
  } catch (const Error& e) {
    // point at the first key named in the message when it appears in the document
    const std::string what = e.what();
    const auto open = what.find('\'');
    const auto close = open == std::string::npos ? open : what.find('\'', open + 1);
    if (close == std::string::npos) throw;
    std::string key = what.substr(open + 1, close - open - 1);
    if (const auto dot = key.rfind('.'); dot != std::string::npos) key = key.substr(dot + 1);
    const std::size_t pos = find_key(text, key, 0);
    if (pos == std::string_view::npos) throw;
    throw Error(e.code(), what + " (line " + std::to_string(line_of(text, pos)) + ")");
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

ojson config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["source"] = {{"vocab", c.vocab}, {"order", c.order}, {"dirichlet_alpha", c.dirichlet_alpha}, {"seed", c.source_seed}};
  ojson pre = {{"steps", c.pretrain.steps},
               {"batch", c.pretrain.batch},
               {"lr", c.pretrain.lr},
               {"seed", c.pretrain.seed},
               {"train_sequences", c.pretrain.train_sequences},
               {"eval_sequences", c.pretrain.eval_sequences},
               {"eval_every", c.pretrain.eval_every},
               {"tolerance", c.pretrain.tolerance}};
  j["teacher"] = {{"embed", c.teacher.embed}, {"hidden", c.teacher.hidden}, {"layers", c.teacher.layers},
                  {"checkpoint", c.teacher_checkpoint}, {"pretrain", pre}};
  j["student"] = {{"embed", c.student.embed}, {"hidden", c.student.hidden}, {"layers", c.student.layers},
                  {"init_std", c.student_init_std}};
  ojson channels = ojson::array();
  for (const auto& ch : c.channels) {
    ojson row = {{"kind", kind_id(ch.divergence.kind)},
                 {"strategy", strategy_id(ch.strategy)},
                 {"dim_scale", ch.dim_scale},
                 {"teacher_temp", ch.divergence.teacher_temp.value()},
                 {"student_temp", ch.divergence.student_temp.value()}};
    if (ch.divergence.skew_lambda) row["skew_lambda"] = *ch.divergence.skew_lambda;
    if (ch.lambda) row["lambda"] = *ch.lambda;
    channels.push_back(row);
  }
  j["channels"] = channels;
  j["optimizer"] = {{"kind", optimizer_id(c.train.optimizer)}, {"lr", c.train.student_lr}, {"beta_lr", c.train.beta_lr}};
  j["beta"] = {{"min", c.train.beta_min},
               {"max", c.train.beta_max},
               {"init", c.train.beta_init},
               {"hidden", c.train.beta_hidden},
               {"init_std", c.train.beta_init_std}};
  j["feature_dim"] = c.feature_dim;
  j["steps"] = c.steps;
  j["batch"] = c.batch;
  j["seq_len"] = c.seq_len;
  j["seeds"] = c.seeds;
  j["train_sequences"] = c.train_sequences;
  j["eval_sequences"] = c.eval_sequences;
  j["eval_every"] = c.eval_every;
  j["out_dir"] = c.out_dir;
  j["record_wall_clock"] = c.record_wall_clock;
  return j;
}

ExperimentConfig default_config(DivergenceKind kind, Strategy strategy, bool with_feature_channel) {
  ExperimentConfig c;
  c.channels = {{DivergenceSpec::make(kind), strategy, 1.0, {}}};
  if (with_feature_channel) c.channels.push_back({DivergenceSpec::make(DivergenceKind::FeatureMse), strategy, 1.0, {}});
  c.finalize();
  return c;
}

// ---------------------------------------------------------------------------
// Runs

TinyLM obtain_teacher(const ExperimentConfig& config, PretrainReport* report) {
  if (!config.teacher_checkpoint.empty()) {
    TinyLM t = load_checkpoint(config.teacher_checkpoint);
    const TinyLMConfig& got = t.config();
    const TinyLMConfig& want = config.teacher;
    if (got.vocab != want.vocab || got.embed != want.embed || got.hidden != want.hidden || got.layers != want.layers ||
        got.window != want.window || got.burn_in != want.burn_in) {
      throw Error(ErrorCode::ConfigError, "teacher checkpoint " + config.teacher_checkpoint +
                                              " does not match the configured teacher dimensions");
    }
    return t;
  }
  return pretrain_teacher(config.source(), config.teacher, config.pretrain, report);
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

namespace {

MatrixXd corpus_logits(const TinyLM& model, const Corpus& corpus) {
  const ForwardPass pass = model.forward(std::span<const Sequence>(corpus));
  return pass.logits;
}

SeedResult run_seed(const ExperimentConfig& config, const TinyLM& teacher, std::uint64_t seed, const Corpus& train,
                    const MatrixXd& teacher_train_logits, const MatrixXd& teacher_train_pooled, const Corpus& eval,
                    const MatrixXd& teacher_eval_logits, const fs::path& dir, bool write_files) {
  TrainSettings settings = config.train;
  settings.seed = seed;
  TinyLM student = TinyLM::initialized(config.student, ModelRole::Student, seed, config.student_init_std);
  TrainState state = make_train_state(teacher, std::move(student), config.channels, settings);

  SeedResult out;
  out.seed = seed;
  out.initial = evaluate(state.student, eval);

  const int positions = config.seq_len - config.order;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  std::vector<Sequence> batch(static_cast<std::size_t>(config.batch));
  TeacherBatch cached;
  cached.logits.resize(teacher_train_logits.rows(), static_cast<Eigen::Index>(config.batch) * positions);
  cached.pooled.resize(teacher_train_pooled.rows(), config.batch);

  std::ofstream metrics;
  if (write_files) {
    fs::create_directories(dir);
    metrics.open(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
    if (!metrics) throw Error(ErrorCode::IoError, "cannot open " + (dir / "metrics.jsonl").string());
  }
  const std::vector<long> checkpoints = {0, config.steps / 2, config.steps};
  auto maybe_checkpoint = [&](long step) {
    if (write_files && std::find(checkpoints.begin(), checkpoints.end(), step) != checkpoints.end()) {
      save_checkpoint((dir / ("step_" + std::to_string(step) + ".ckpt")).string(), state.student, seed);
    }
  };

  for (long step = 0; step < config.steps; ++step) {
    maybe_checkpoint(step);
    const auto t0 = std::chrono::steady_clock::now();
    for (int b = 0; b < config.batch; ++b) {
      const std::size_t idx = pick(rng);
      batch[static_cast<std::size_t>(b)] = train[idx];
      cached.logits.middleCols(static_cast<Eigen::Index>(b) * positions, positions) =
          teacher_train_logits.middleCols(static_cast<Eigen::Index>(idx) * positions, positions);
      cached.pooled.col(b) = teacher_train_pooled.col(static_cast<Eigen::Index>(idx));
    }
    std::optional<double> eval_ce;
    if (step % config.eval_every == 0) eval_ce = corpus_cross_entropy(state.student, eval);
    MetricsRecord rec = train_step(state, teacher, batch, &cached);
    rec.eval_ce = eval_ce;
    if (config.record_wall_clock) {
      rec.wall_clock_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
    if (write_files) metrics << rec.to_json().dump() << '\n';
    out.metrics.push_back(std::move(rec));
  }
  maybe_checkpoint(config.steps);
  if (write_files && !metrics) throw Error(ErrorCode::IoError, "write failed for " + (dir / "metrics.jsonl").string());

  out.final_eval = config.steps == 0 ? out.initial : evaluate(state.student, eval);
  out.final_matching_distance = matching_distance(teacher_eval_logits, corpus_logits(state.student, eval));
  return out;
}

ojson summarize(const ExperimentConfig& config, const std::vector<SeedResult>& seeds, double teacher_eval_ce) {
  ojson s;
  s["steps"] = config.steps;
  s["teacher_eval_ce"] = teacher_eval_ce;
  ojson per_seed = ojson::array();
  std::vector<double> ce, acc, ent, md;
  for (const auto& r : seeds) {
    per_seed.push_back({{"seed", r.seed},
                        {"initial_eval_ce", r.initial.ce},
                        {"eval_ce", r.final_eval.ce},
                        {"accuracy", r.final_eval.accuracy},
                        {"entropy", r.final_eval.entropy},
                        {"matching_distance", r.final_matching_distance}});
    ce.push_back(r.final_eval.ce);
    acc.push_back(r.final_eval.accuracy);
    ent.push_back(r.final_eval.entropy);
    md.push_back(r.final_matching_distance);
  }
  s["seeds"] = per_seed;
  auto stat = [](const std::vector<double>& v) {
    const auto [m, sd] = mean_std(v);
    return ojson{{"mean", m}, {"std", sd}};
  };
  s["eval_ce"] = stat(ce);
  s["accuracy"] = stat(acc);
  s["entropy"] = stat(ent);
  s["matching_distance"] = stat(md);
  return s;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const TinyLM* teacher, bool write_files) {
  std::optional<TinyLM> owned;
  if (!teacher) {
    owned = obtain_teacher(config);
    teacher = &*owned;
  }
  const fs::path out_dir(config.out_dir);
  if (write_files) {
    fs::create_directories(out_dir);
    save_checkpoint((out_dir / "teacher.ckpt").string(), *teacher, config.pretrain.seed);
  }

  const MarkovSource source = config.source();
  const Corpus train = generate_corpus(source, config.train_sequences, config.seq_len, 3);
  const Corpus eval = generate_corpus(source, config.eval_sequences, config.seq_len, 4);
  const ForwardPass tpass = teacher->forward(std::span<const Sequence>(train));
  const MatrixXd teacher_eval_logits = corpus_logits(*teacher, eval);

  ExperimentResult result;
  result.teacher_eval_ce = corpus_cross_entropy(*teacher, eval);
  for (std::uint64_t seed : config.seeds) {
    result.seeds.push_back(run_seed(config, *teacher, seed, train, tpass.logits, tpass.pooled, eval,
                                    teacher_eval_logits, out_dir / ("seed_" + std::to_string(seed)), write_files));
  }
  result.summary = summarize(config, result.seeds, result.teacher_eval_ce);
  if (write_files) write_text(out_dir / "summary.json", result.summary.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps

SweepSuite parse_suite(std::string_view id) {
  if (id == "two_loss") return SweepSuite::TwoLoss;
  if (id == "three_loss") return SweepSuite::ThreeLoss;
  throw Error(ErrorCode::ConfigError, "unknown sweep suite '" + std::string(id) + "' (expected two_loss or three_loss)");
}

std::string_view suite_id(SweepSuite suite) { return suite == SweepSuite::TwoLoss ? "two_loss" : "three_loss"; }

void write_sweep_csv(const std::string& path, const std::vector<SweepRow>& rows) {
  std::string text = "method,strategy,eval_ce_mean,eval_ce_std,acc_mean,acc_std,delta_vs_manual\n";
  for (const auto& r : rows) {
    text += r.method + "," + r.strategy + "," + fmt17(r.eval_ce_mean) + "," + fmt17(r.eval_ce_std) + "," +
            fmt17(r.acc_mean) + "," + fmt17(r.acc_std) + "," + fmt17(r.delta_vs_manual) + "\n";
  }
  write_text(path, text);
}

std::vector<SweepRow> run_sweep(SweepSuite suite, const ExperimentConfig& base, const std::string& out_dir, int jobs) {
  const fs::path root = fs::path(out_dir) / suite_id(suite);
  fs::create_directories(root);
  const TinyLM teacher = obtain_teacher(base);
  save_checkpoint((root / "teacher.ckpt").string(), teacher, base.pretrain.seed);

  struct Cell {
    DivergenceKind kind;
    Strategy strategy;
  };
  std::vector<Cell> cells;
  for (DivergenceKind kind : kTokenKinds) {
    for (Strategy s : kStrategies) cells.push_back({kind, s});
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const Cell& cell = cells[i];
      SweepRow& row = rows[i];
      row.method = kind_id(cell.kind);
      row.strategy = strategy_id(cell.strategy);
      try {
        ExperimentConfig cfg = base;
        cfg.channels = {{DivergenceSpec::make(cell.kind), cell.strategy, 1.0, {}}};
        if (suite == SweepSuite::ThreeLoss) {
          cfg.channels.push_back({DivergenceSpec::make(DivergenceKind::FeatureMse), cell.strategy, 1.0, {}});
        }
        cfg.out_dir = (root / (row.method + "_" + row.strategy)).string();
        cfg.finalize();
        const ExperimentResult res = run_experiment(cfg, &teacher, true);
        row.eval_ce_mean = res.summary["eval_ce"]["mean"].get<double>();
        row.eval_ce_std = res.summary["eval_ce"]["std"].get<double>();
        row.acc_mean = res.summary["accuracy"]["mean"].get<double>();
        row.acc_std = res.summary["accuracy"]["std"].get<double>();
      } catch (const std::exception& e) {
        row.eval_ce_mean = row.eval_ce_std = row.acc_mean = row.acc_std = nan;
        row.error = e.what();
      }
    }
  };
  const int n_workers = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (auto& row : rows) {
    const auto manual = std::find_if(rows.begin(), rows.end(), [&](const SweepRow& r) {
      return r.method == row.method && r.strategy == strategy_id(Strategy::Manual);
    });
    row.delta_vs_manual = manual->eval_ce_mean - row.eval_ce_mean;
  }
  write_sweep_csv((fs::path(out_dir) / (std::string(suite_id(suite)) + ".csv")).string(), rows);

  std::string errors;
  for (const auto& r : rows) {
    if (!r.error.empty()) errors += r.method + "," + r.strategy + ": " + r.error + "\n";
  }
  const fs::path error_path = fs::path(out_dir) / (std::string(suite_id(suite)) + "_errors.txt");
  if (!errors.empty()) {
    write_text(error_path, errors);
  } else {
    fs::remove(error_path);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Surfaces and verifiers

std::vector<std::string> run_surfaces(std::span<const DivergenceKind> kinds, const Eigen::Vector3d& anchor, int grid_n,
                                      const std::string& out_dir) {
  fs::create_directories(out_dir);
  std::vector<std::string> paths;
  for (DivergenceKind kind : kinds) {
    const std::string path = (fs::path(out_dir) / ("surface_" + std::string(kind_id(kind)) + ".csv")).string();
    write_surface_csv(path, simplex_surface(DivergenceSpec::make(kind), anchor, grid_n));
    paths.push_back(path);
  }
  return paths;
}

std::vector<Theorem1Case> canned_theorem1_cases() {
  std::vector<Theorem1Case> cases;
  std::mt19937_64 rng(20240917);
  std::uniform_real_distribution<double> logit(-2.0, 2.0);
  std::uniform_real_distribution<double> log_beta(std::log(0.1), std::log(10.0));
  std::uniform_int_distribution<int> label(0, 2);
  const DivergenceKind kinds[] = {DivergenceKind::FKL, DivergenceKind::RKL, DivergenceKind::JS};
  for (int i = 0; i < 10; ++i) {
    Theorem1Case c;
    c.observed = label(rng);
    c.teacher_logits = VectorXd(3);
    for (int v = 0; v < 3; ++v) c.teacher_logits(v) = logit(rng);
    c.beta = std::exp(log_beta(rng));
    c.spec = DivergenceSpec::make(kinds[i % 3]);
    cases.push_back(c);
  }
  for (double beta : {0.0, 1e4}) {
    Theorem1Case c;
    c.observed = 1;
    c.teacher_logits = (VectorXd(3) << 0.5, -1.0, 1.5).finished();
    c.beta = beta;
    c.spec = DivergenceSpec::make(DivergenceKind::FKL);
    cases.push_back(c);
  }
  return cases;
}

std::vector<VerifyRow> run_verify_suite(std::ostream& out) {
  std::vector<VerifyRow> rows;
  auto emit = [&](VerifyRow row) {
    char line[256];
    std::snprintf(line, sizeof line, "%-4s  %-34s %s\n", row.pass ? "PASS" : "FAIL", row.name.c_str(), row.detail.c_str());
    out << line << std::flush;
    rows.push_back(std::move(row));
  };

  const auto cases = canned_theorem1_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Theorem1Case& c = cases[i];
    char name[64];
    std::snprintf(name, sizeof name, "theorem1[%zu] %s beta=%.4g", i, std::string(kind_id(c.spec.kind)).c_str(), c.beta);
    try {
      const Theorem1Result r = verify_theorem1(c);
      char detail[128];
      std::snprintf(detail, sizeof detail, "posterior idx %zu, objective idx %zu", r.argmax_posterior,
                    r.argmin_objective);
      emit({name, detail, r.agree()});
    } catch (const std::exception& e) {
      emit({name, e.what(), false});
    }
  }

  auto laplace_row = [&](const std::string& name, const LaplaceEnergy& energy, double beta, double tol) {
    try {
      const LaplaceCheck chk = verify_laplace(energy, beta);
      char detail[160];
      std::snprintf(detail, sizeof detail, "quadrature %.12f laplace %.12f error %.3e", chk.quadrature_log_z,
                    chk.laplace_log_z, chk.abs_error);
      emit({name, detail, chk.abs_error < tol});
      return chk.abs_error;
    } catch (const std::exception& e) {
      emit({name, e.what(), false});
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  const double inf = std::numeric_limits<double>::infinity();
  laplace_row("laplace quadratic-1d H=1 beta=2", quadratic_energy(MatrixXd::Identity(1, 1), VectorXd::Zero(1)), 2.0,
              1e-6);
  laplace_row("laplace quadratic-1d H=4 beta=1",
              quadratic_energy(MatrixXd::Constant(1, 1, 4.0), VectorXd::Constant(1, 0.3), 0.25), 1.0, 1e-6);
  laplace_row("laplace quadratic-2d beta=3",
              quadratic_energy((MatrixXd(2, 2) << 2.0, 0.5, 0.5, 1.0).finished(), (VectorXd(2) << 0.2, -0.4).finished()),
              3.0, 1e-6);

  const std::pair<std::string, VectorXd> fkl_cases[] = {{"fkl-1d", (VectorXd(1) << 0.7).finished()},
                                                        {"fkl-2d", (VectorXd(2) << 0.5, -0.3).finished()}};
  for (const auto& [label, logits] : fkl_cases) {
    const LaplaceEnergy energy = fkl_logit_energy(logits);
    std::vector<double> errors;
    for (double beta : {1.0, 10.0, 100.0}) {
      char name[64];
      std::snprintf(name, sizeof name, "laplace %s beta=%g", label.c_str(), beta);
      errors.push_back(laplace_row(name, energy, beta, inf));
    }
    const bool decreasing = errors[1] < errors[0] && errors[2] < errors[1];
    char detail[160];
    std::snprintf(detail, sizeof detail, "errors %.3e > %.3e > %.3e", errors[0], errors[1], errors[2]);
    emit({"laplace " + label + " error decreasing", detail, decreasing});
  }
  return rows;
}

}  // namespace uwkd
