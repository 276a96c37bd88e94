// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "finsent/model.hpp"
#include "finsent/packing.hpp"

namespace finsent {

enum class OptimizerKind { adamw, sgd };

struct TrainConfig {
  std::size_t epochs = 5;
  double lr_start = 3e-5;
  double lr_end = 3e-6;
  double grad_clip_norm = 1.0;
  /// Packed sequences per update for SFT, single samples for the class head.
  std::size_t micro_batch = 4;
  std::size_t max_seq_len = 256;
  OptimizerKind optimizer = OptimizerKind::adamw;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  std::uint64_t seed = 7;
  std::size_t eval_every = 50;
  /// Reshuffle the order of training items every epoch.
  bool shuffle = true;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total_steps)) / 2.
/// Requires 0 <= step <= total_steps and total_steps >= 1.
double lr_at_step(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

template <class T>
double global_norm(const ParameterSet<T>& grads);

/// Rescales grads so their global L2 norm is at most max_norm. Returns the
/// norm before clipping. Throws DivergenceError on non-finite input.
template <class T>
double clip_gradients(ParameterSet<T>& grads, double max_norm);

/// AdamW with bias correction and decoupled weight decay on rank-2
/// tensors, or plain SGD.
template <class T>
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, const ParameterSet<T>& like);

  void step(ParameterSet<T>& params, const ParameterSet<T>& grads, double lr);
  std::optional<OptimizerState<T>> state() const;

 private:
  TrainConfig cfg_;
  OptimizerState<T> state_;
};

struct TrainLogEntry {
  std::size_t step = 0;
  std::optional<double> lr;
  std::optional<double> loss;
  std::optional<double> val_accuracy;

  /// {"step":..,"lr":..,"loss":..} or {"step":..,"val_accuracy":..}
  std::string to_json() const;
  bool operator==(const TrainLogEntry&) const = default;
};

struct TrainLog {
  std::vector<TrainLogEntry> entries;
  std::optional<double> best_val_accuracy;
  std::size_t best_step = 0;

  std::string to_jsonl() const;
  std::optional<double> final_val_accuracy() const;
  /// "best_val_accuracy=<x> at_step=<n>"
  std::string summary() const;
  bool operator==(const TrainLog&) const = default;
};

using LogSink = std::function<void(const TrainLogEntry&)>;

struct SftData {
  std::vector<PackedSequence> train;
  std::vector<TokenizedExample> val;
  SpecialTokens specials;
};

struct ClassData {
  std::vector<ClassSample> train;
  std::vector<ClassSample> val;
  SpecialTokens specials;
};

template <class T>
struct TrainResult {
  Checkpoint<T> checkpoint;
  TrainLog log;
};

/// Language-model fine-tuning on packed sequences. Each update averages
/// the cross-entropy over every counted answer position in micro_batch
/// sequences, clips, and applies the optimizer at lr_at_step. Validation
/// accuracy (constrained generation) is logged at step 0, every
/// eval_every updates and after the last update; the returned checkpoint
/// is the one with the best validation accuracy (earliest on ties).
template <class T>
TrainResult<T> train_sft(const SftData& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const LogSink& sink = {});

/// Classification-head training: gradients of micro_batch single samples
/// are averaged before each update.
template <class T>
TrainResult<T> train_classhead(const ClassData& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                               const LogSink& sink = {});

/// ceil(items / micro_batch) * epochs.
std::size_t total_steps(std::size_t items, const TrainConfig& cfg);

}  // namespace finsent
