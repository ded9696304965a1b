#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfpam/checkpoint.hpp"
#include "mfpam/evaluation.hpp"
#include "mfpam/model.hpp"
#include "mfpam/synth.hpp"

namespace mfpam {

/// Raised when the loss stops being finite.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 4;
  std::size_t max_steps = 2000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t eval_every = 0;        // 0: no periodic evaluation
  bool log_wall_time = false;        // off keeps logs byte-reproducible

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("train: betas must be in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("train: eps must be > 0");
  }

  static TrainConfig from_section(KeyValueFile& f, TrainConfig c) {
    const std::string s = "train";
    c.learning_rate = f.get_double(s, "learning_rate", c.learning_rate);
    c.batch_size = f.get_size(s, "batch_size", c.batch_size);
    c.max_steps = f.get_size(s, "max_steps", c.max_steps);
    c.seed = f.get_u64(s, "seed", c.seed);
    c.beta1 = f.get_double(s, "beta1", c.beta1);
    c.beta2 = f.get_double(s, "beta2", c.beta2);
    c.eps = f.get_double(s, "eps", c.eps);
    c.checkpoint_every = f.get_size(s, "checkpoint_every", c.checkpoint_every);
    c.eval_every = f.get_size(s, "eval_every", c.eval_every);
    c.log_wall_time = f.get_bool(s, "log_wall_time", c.log_wall_time);
    c.validate();
    return c;
  }
};

/// Adam with bias correction. Moments are kept in double.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Parameter<T>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& w = p.value();
      const auto& g = p.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = double(g[i]);
        m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
        v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        if (lr_ == 0.0) continue;
        const double mh = m[i] / c1, vh = v[i] / c2;
        w[i] = T(double(w[i]) - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps() const noexcept { return t_; }
  const std::vector<double>& first_moment(std::size_t k) const { return m_[k]; }
  const std::vector<double>& second_moment(std::size_t k) const { return v_[k]; }

 private:
  std::vector<Parameter<T>> params_;
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// A dataset item prepared for training: upsampled input and frame targets.
template <typename T>
struct TrainExample {
  std::vector<float> upsampled;
  Tensor<T> targets;  // [frames x 360]
  PitchTrajectory labels;
};

template <typename T>
std::vector<TrainExample<T>> prepare_examples(const MfPam<T>& model,
                                              const std::vector<DatasetItem>& items) {
  const auto& cfg = model.config();
  std::vector<TrainExample<T>> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    if (it.clip.size() != cfg.chunk_samples)
      throw UsageError("train: clip length " + std::to_string(it.clip.size()) +
                       " differs from chunk_samples " + std::to_string(cfg.chunk_samples));
    if (it.labels.size() != cfg.frames())
      throw UsageError("train: " + std::to_string(it.labels.size()) + " labels for " +
                       std::to_string(cfg.frames()) + " frames");
    out.push_back({model.upsampler()(it.clip.samples),
                   pitch::encode_targets<T>(it.labels.f0_hz), it.labels});
  }
  return out;
}

/// Decodes a network output into a trajectory on the model frame grid.
template <typename T>
PitchTrajectory decode_output(const ModelConfig& cfg, const Tensor<T>& post,
                              double threshold = pitch::kDefaultVoicingThreshold) {
  return decode_posteriorgram(post, cfg.hop_sec(), cfg.hop_sec() / 2.0, threshold);
}

/// Pools every item under its condition label, plus an "all" row when more
/// than one label is present.
template <typename T>
eval::EvalReport evaluate_conditions(const MfPam<T>& model, const std::vector<DatasetItem>& items,
                                     double threshold = pitch::kDefaultVoicingThreshold) {
  std::vector<eval::LabelledPair> pairs;
  std::vector<std::string> labels;
  for (const auto& it : items) {
    auto est = decode_output(model.config(), model.predict(it.clip.samples), threshold);
    pairs.push_back({it.condition, est, it.labels});
    if (std::find(labels.begin(), labels.end(), it.condition) == labels.end())
      labels.push_back(it.condition);
  }
  if (labels.size() > 1) {
    const auto n = pairs.size();
    for (std::size_t i = 0; i < n; ++i) pairs.push_back({"all", pairs[i].est, pairs[i].ref});
  }
  return eval::aggregate(pairs);
}

template <typename T>
eval::FrameTally evaluate_examples(const MfPam<T>& model,
                                   const std::vector<TrainExample<T>>& examples) {
  eval::FrameTally tally;
  for (const auto& ex : examples)
    tally.add(decode_output(model.config(), model.predict_upsampled(ex.upsampled)), ex.labels);
  return tally;
}

/// Mean over the batch of the per-chunk loss; gradients accumulate into the
/// model parameters.
template <typename T>
double batch_loss_and_grad(MfPam<T>& model, const std::vector<TrainExample<T>>& examples,
                           const std::vector<std::size_t>& batch) {
  double total = 0.0;
  const T inv = T(1.0 / double(batch.size()));
  for (std::size_t idx : batch) {
    Tape<T> tape;
    auto probs = model.forward_upsampled(tape, examples[idx].upsampled);
    auto loss = scale(tape, bce_loss(tape, probs, examples[idx].targets), inv);
    tape.backward(loss);
    total += double(loss->value[0]);
  }
  return total;
}

struct TrainResult {
  std::vector<std::string> log;  // JSON lines
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  std::optional<eval::FrameTally> final_metrics;
};

struct TrainHooks {
  std::string out_dir = {};  // empty: nothing written
  std::function<void(const std::string&)> on_log = {};
  bool final_eval = true;
};

/// Mini-batch training with epoch-wise shuffling. The result depends only
/// on the configs, the examples and the seed.
template <typename T>
TrainResult train(MfPam<T>& model, const TrainConfig& cfg,
                  const std::vector<TrainExample<T>>& examples, const TrainHooks& hooks = {},
                  const std::vector<TrainExample<T>>* eval_set = nullptr) {
  cfg.validate();
  if (examples.empty() && cfg.max_steps > 0) throw UsageError("train: empty dataset");
  TrainResult res;
  const auto start = std::chrono::steady_clock::now();
  auto emit = [&](const nlohmann::ordered_json& j) {
    res.log.push_back(j.dump());
    if (hooks.on_log) hooks.on_log(res.log.back());
  };
  auto save = [&](const std::string& name) {
    if (hooks.out_dir.empty()) return;
    std::filesystem::create_directories(hooks.out_dir);
    save_checkpoint(model, (std::filesystem::path(hooks.out_dir) / name).string());
  };
  auto& params = model.parameters();
  zero_grad(params);
  Adam<T> opt(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
  Rng rng(derive_seed(cfg.seed, 0, 3));
  std::vector<std::size_t> order(examples.size());
  std::size_t cursor = order.size();

  const auto& evals = eval_set ? *eval_set : examples;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::size_t> batch;
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const double loss = batch_loss_and_grad(model, examples, batch);
    if (!std::isfinite(loss)) {
      std::string msg = "non-finite loss at step " + std::to_string(step) + "; parameter norms:";
      for (auto& p : params) {
        double n2 = 0.0;
        for (T v : p.value().data()) n2 += double(v) * double(v);
        double g2 = 0.0;
        for (T v : p.grad().data()) g2 += double(v) * double(v);
        msg += "\n  " + p.name + " |w|=" + std::to_string(std::sqrt(n2)) +
               " |g|=" + std::to_string(std::sqrt(g2));
      }
      throw TrainingError(msg);
    }
    opt.step();
    zero_grad(params);
    res.final_loss = loss;

    nlohmann::ordered_json rec{{"type", "step"}, {"step", step}, {"loss", loss}};
    if (cfg.log_wall_time)
      rec["wall_time"] =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    emit(rec);
    if (cfg.eval_every && step % cfg.eval_every == 0) {
      auto t = evaluate_examples(model, evals);
      emit({{"type", "eval"}, {"step", step}, {"rpa", t.rpa()}, {"rca", t.rca()},
            {"mae", t.mae()}});
    }
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0 && step != cfg.max_steps) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06zu.ckpt", step);
      save(name);
    }
  }
  if (hooks.final_eval && !evals.empty()) {
    auto t = evaluate_examples(model, evals);
    if (t.voiced) res.final_metrics = t;
  }
  save("final.ckpt");
  if (!hooks.out_dir.empty()) {
    std::ofstream log(std::filesystem::path(hooks.out_dir) / "train_log.jsonl",
                      std::ios::binary | std::ios::trunc);
    for (const auto& line : res.log) log << line << '\n';
  }
  return res;
}

}  // namespace mfpam
