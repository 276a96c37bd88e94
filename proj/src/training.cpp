// SPDX-License-Identifier: Apache-2.0
#include "finsent/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "finsent/errors.hpp"
#include "finsent/evaluation.hpp"
#include "finsent/prng.hpp"

namespace finsent {

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(lr_start > 0.0) || !std::isfinite(lr_start)) fail("lr_start must be positive");
  if (!(lr_end >= 0.0) || !std::isfinite(lr_end)) fail("lr_end must be non-negative");
  if (lr_end > lr_start) fail("lr_end must not exceed lr_start");
  if (!(grad_clip_norm > 0.0)) fail("grad_clip_norm must be positive");
  if (micro_batch == 0) fail("micro_batch must be at least 1");
  if (max_seq_len < 4) fail("max_seq_len must be at least 4");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (eval_every == 0) fail("eval_every must be at least 1");
}

std::size_t total_steps(std::size_t items, const TrainConfig& cfg) {
  return cfg.epochs * ((items + cfg.micro_batch - 1) / cfg.micro_batch);
}

double lr_at_step(std::size_t step, std::size_t total, const TrainConfig& cfg) {
  if (total == 0 || step > total) {
    throw ConfigError("lr_at_step: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  if (step == 0) return cfg.lr_start;
  if (step == total) return cfg.lr_end;
  const double progress = static_cast<double>(step) / static_cast<double>(total);
  return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
double global_norm(const ParameterSet<T>& grads) {
  double sum = 0.0;
  for (const auto& t : grads) {
    for (T v : t.values) sum += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(sum);
}

template <class T>
double clip_gradients(ParameterSet<T>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm");
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& t : grads) {
      for (T& v : t.values) v = static_cast<T>(static_cast<double>(v) * scale);
    }
  }
  return norm;
}

template <class T>
Optimizer<T>::Optimizer(const TrainConfig& cfg, const ParameterSet<T>& like) : cfg_(cfg) {
  if (cfg_.optimizer == OptimizerKind::adamw) {
    state_.first_moment = like.zeros_like();
    state_.second_moment = like.zeros_like();
  }
}

template <class T>
void Optimizer<T>::step(ParameterSet<T>& params, const ParameterSet<T>& grads, double lr) {
  if (!params.same_layout(grads)) throw ShapeError("optimizer: gradient layout differs from parameters");
  ++state_.updates;
  if (cfg_.optimizer == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].values;
      const auto& g = grads[i].values;
      for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<T>(p[k] - lr * g[k]);
    }
    return;
  }
  const double t = static_cast<double>(state_.updates);
  const double c1 = 1.0 - std::pow(cfg_.beta1, t);
  const double c2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].values;
    const auto& g = grads[i].values;
    auto& m = state_.first_moment[i].values;
    auto& v = state_.second_moment[i].values;
    const double decay = params[i].rank() == 2 ? cfg_.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
      const double vk = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = (mk / c1) / (std::sqrt(vk / c2) + cfg_.eps) + decay * p[k];
      p[k] = static_cast<T>(p[k] - lr * update);
    }
  }
}

template <class T>
std::optional<OptimizerState<T>> Optimizer<T>::state() const {
  if (cfg_.optimizer == OptimizerKind::sgd) return std::nullopt;
  return state_;
}

std::string TrainLogEntry::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  if (lr) j["lr"] = *lr;
  if (loss) j["loss"] = *loss;
  if (val_accuracy) j["val_accuracy"] = *val_accuracy;
  return j.dump();
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : entries) out += e.to_json() + "\n";
  return out;
}

std::optional<double> TrainLog::final_val_accuracy() const {
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->val_accuracy) return it->val_accuracy;
  }
  return std::nullopt;
}

std::string TrainLog::summary() const {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "best_val_accuracy=%.4f at_step=%zu", best_val_accuracy.value_or(0.0), best_step);
  return buf;
}

namespace {

std::string diverged(std::size_t step, double lr, const std::string& what) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "training diverged at step %zu (lr %.6g): ", step, lr);
  return buf + what;
}

// Shared loop. Task provides:
//   size_t items() const
//   double weight(size_t item) const        -- loss terms contributed by item
//   LossValue accumulate(ckpt, item, scale, grads) const
//   optional<double> validate(ckpt) const
template <class T, class Task>
TrainResult<T> run_training(const Task& task, const ModelConfig& model_cfg, const TrainConfig& cfg,
                            const LogSink& sink) {
  cfg.validate();
  model_cfg.validate();
  if (task.items() == 0) throw DataError("training: empty train set");

  TrainResult<T> result;
  Checkpoint<T> ckpt = init<T>(model_cfg);
  Optimizer<T> optimizer(cfg, ckpt.params);
  const std::size_t total = total_steps(task.items(), cfg);

  auto emit = [&](TrainLogEntry entry) {
    if (sink) sink(entry);
    result.log.entries.push_back(std::move(entry));
  };
  auto evaluate = [&](std::size_t step) {
    const auto acc = task.validate(ckpt);
    if (!acc) return;
    TrainLogEntry entry;
    entry.step = step;
    entry.val_accuracy = acc;
    emit(entry);
    if (!result.log.best_val_accuracy || *acc > *result.log.best_val_accuracy) {
      result.log.best_val_accuracy = acc;
      result.log.best_step = step;
      result.checkpoint = ckpt;
      result.checkpoint.optimizer = optimizer.state();
      result.checkpoint.step = step;
    }
  };

  evaluate(0);

  std::vector<std::size_t> order(task.items());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(cfg.seed);
  std::vector<ParameterSet<T>> slots(std::min(cfg.micro_batch, task.items()), ckpt.params.zeros_like());
  ParameterSet<T> grads = ckpt.params.zeros_like();

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) shuffle(std::span<std::size_t>(order), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.micro_batch) {
      const std::size_t count = std::min(cfg.micro_batch, order.size() - begin);
      const double lr = lr_at_step(step, total, cfg);
      double weight = 0.0;
      for (std::size_t k = 0; k < count; ++k) weight += task.weight(order[begin + k]);
      if (!(weight > 0.0)) throw DataError("training: micro-batch has no supervised positions");
      const T scale = static_cast<T>(1.0 / weight);

      std::vector<double> losses(count, 0.0);
      std::string failure;
      bool failure_diverged = false;
#pragma omp parallel for schedule(dynamic)
      for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(count); ++k) {
        try {
          slots[k].fill(T{0});
          losses[k] = task.accumulate(ckpt, order[begin + k], scale, slots[k]).value;
        } catch (const std::exception& e) {
#pragma omp critical(finsent_train_failure)
          if (failure.empty()) {
            failure = e.what();
            failure_diverged = dynamic_cast<const DivergenceError*>(&e) != nullptr;
          }
        }
      }
      if (failure_diverged) throw DivergenceError(diverged(step + 1, lr, failure));
      if (!failure.empty()) throw DataError("training: " + failure);

      grads.fill(T{0});
      double loss_sum = 0.0;
      for (std::size_t k = 0; k < count; ++k) {
        loss_sum += losses[k];
        for (std::size_t i = 0; i < grads.size(); ++i) {
          auto& dst = grads[i].values;
          const auto& src = slots[k][i].values;
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
      }
      const double loss = loss_sum / weight;
      if (!std::isfinite(loss)) throw DivergenceError(diverged(step + 1, lr, "non-finite loss"));
      try {
        clip_gradients(grads, cfg.grad_clip_norm);
      } catch (const DivergenceError& e) {
        throw DivergenceError(diverged(step + 1, lr, e.what()));
      }
      optimizer.step(ckpt.params, grads, lr);
      ++step;
      ckpt.step = step;

      TrainLogEntry entry;
      entry.step = step;
      entry.lr = lr;
      entry.loss = loss;
      emit(entry);
      if (step % cfg.eval_every == 0 || step == total) evaluate(step);
    }
  }

  if (!result.log.best_val_accuracy) {
    // No validation data: keep the final weights.
    result.checkpoint = ckpt;
    result.checkpoint.optimizer = optimizer.state();
    result.log.best_step = step;
  }
  if (result.log.best_val_accuracy) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", *result.log.best_val_accuracy);
    result.checkpoint.metadata["val_accuracy"] = buf;
  }
  return result;
}

template <class T>
struct SftTask {
  const SftData& data;
  std::vector<AttentionMask> masks;
  std::vector<double> weights;

  explicit SftTask(const SftData& d) : data(d) {
    for (const auto& seq : data.train) {
      if (seq.labels.size() != seq.tokens.size()) throw DataError("training: packed labels length mismatch");
      masks.push_back(build_attention_mask(seq));
      weights.push_back(static_cast<double>(
          std::count_if(seq.labels.begin(), seq.labels.end(), [](TokenId l) { return l != kIgnoreLabel; })));
    }
  }
  std::size_t items() const { return data.train.size(); }
  double weight(std::size_t i) const { return weights[i]; }
  LossValue accumulate(const Checkpoint<T>& ckpt, std::size_t i, T scale, ParameterSet<T>& grads) const {
    const auto& seq = data.train[i];
    return accumulate_lm_gradients(ckpt, seq.tokens, masks[i], seq.labels, scale, grads);
  }
  std::optional<double> validate(const Checkpoint<T>& ckpt) const {
    if (data.val.empty()) return std::nullopt;
    return evaluate_generation_tokens(ckpt, data.val, data.specials, EvalMode::sft).accuracy;
  }
};

template <class T>
struct ClassTask {
  const ClassData& data;

  std::size_t items() const { return data.train.size(); }
  double weight(std::size_t) const { return 1.0; }
  LossValue accumulate(const Checkpoint<T>& ckpt, std::size_t i, T scale, ParameterSet<T>& grads) const {
    const auto& s = data.train[i];
    return {accumulate_cls_gradients(ckpt, s.tokens, s.class_id, scale, grads, data.specials), 1};
  }
  std::optional<double> validate(const Checkpoint<T>& ckpt) const {
    if (data.val.empty()) return std::nullopt;
    return evaluate_classhead_samples(ckpt, data.val, data.specials).accuracy;
  }
};

}  // namespace

template <class T>
TrainResult<T> train_sft(const SftData& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const LogSink& sink) {
  ModelConfig mc = model_cfg;
  mc.head_type = HeadType::lm;
  return run_training<T>(SftTask<T>(data), mc, cfg, sink);
}

template <class T>
TrainResult<T> train_classhead(const ClassData& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                               const LogSink& sink) {
  ModelConfig mc = model_cfg;
  mc.head_type = HeadType::classification;
  return run_training<T>(ClassTask<T>{data}, mc, cfg, sink);
}

#define FINSENT_INSTANTIATE_TRAINING(T)                                                                  \
  template double global_norm<T>(const ParameterSet<T>&);                                                \
  template double clip_gradients<T>(ParameterSet<T>&, double);                                           \
  template class Optimizer<T>;                                                                           \
  template TrainResult<T> train_sft<T>(const SftData&, const ModelConfig&, const TrainConfig&,           \
                                       const LogSink&);                                                  \
  template TrainResult<T> train_classhead<T>(const ClassData&, const ModelConfig&, const TrainConfig&, \
                                             const LogSink&);

FINSENT_INSTANTIATE_TRAINING(float)
FINSENT_INSTANTIATE_TRAINING(double)

}  // namespace finsent
