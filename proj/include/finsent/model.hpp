// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "finsent/packing.hpp"
#include "finsent/tensor.hpp"
#include "finsent/tokenizer.hpp"

namespace finsent {

enum class HeadType { lm, classification };
enum class FloatWidth { f32 = 32, f64 = 64 };

/// Pre-norm decoder-only transformer with learned positional embeddings.
struct ModelConfig {
  std::size_t vocab_size = 2048;
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 256;
  HeadType head_type = HeadType::lm;
  FloatWidth float_width = FloatWidth::f32;
  std::uint64_t init_seed = 1234;
  bool tie_lm_head = false;
  /// When set, a position's embedding index is the number of keys its
  /// mask row allows minus one, i.e. its offset within its own segment.
  /// Otherwise positions are absolute within the sequence.
  bool segment_local_positions = true;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct OptimizerState {
  std::uint64_t updates = 0;
  ParameterSet<T> first_moment;
  ParameterSet<T> second_moment;

  bool operator==(const OptimizerState&) const = default;
};

template <class T>
struct Checkpoint {
  ModelConfig config;
  ParameterSet<T> params;
  std::optional<OptimizerState<T>> optimizer;
  std::uint64_t step = 0;
  /// Free-form provenance, serialized with the config block.
  std::map<std::string, std::string> metadata;

  bool operator==(const Checkpoint&) const = default;
};

/// Weights ~ N(0, 0.02) drawn from SplitMix64(init_seed) in parameter
/// order, with the attention and MLP output projections scaled by
/// 1/sqrt(2 * n_layers). Biases and norm offsets are zero, norm gains one.
template <class T>
Checkpoint<T> init(const ModelConfig& config);

/// T x V next-token logits. Row t depends only on the tokens its mask row
/// allows.
template <class T>
Matrix<T> forward_lm(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, const AttentionMask& mask);

/// Class logits from the final hidden state at the EOS position of a
/// BOS q EOS sequence.
template <class T>
std::array<T, 3> forward_cls(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                             const SpecialTokens& specials);

struct LossValue {
  double value = 0.0;
  std::size_t counted = 0;
};

/// Mean cross-entropy over positions whose label is not ignore_label.
/// Zero with counted == 0 when nothing is counted.
template <class T>
LossValue loss_lm(const Matrix<T>& logits, std::span<const TokenId> labels, TokenId ignore_label = kIgnoreLabel);

template <class T>
T loss_cls(const std::array<T, 3>& logits, int class_id);

template <class T>
std::array<T, 3> softmax(const std::array<T, 3>& logits);

template <class T>
struct Gradients {
  ParameterSet<T> values;
  double loss = 0.0;
  std::size_t counted = 0;
};

/// Exact gradient of loss_lm(forward_lm(tokens, mask), labels).
template <class T>
Gradients<T> backward_lm(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, const AttentionMask& mask,
                         std::span<const TokenId> labels);

/// Exact gradient of loss_cls(forward_cls(tokens), class_id).
template <class T>
Gradients<T> backward_cls(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, int class_id,
                          const SpecialTokens& specials);

/// Several classification samples in one packed sequence: the class logits
/// of sample s are read at pool_positions[s]; the loss is the mean over
/// samples.
template <class T>
Gradients<T> backward_cls_packed(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                                 const AttentionMask& mask, std::span<const std::size_t> pool_positions,
                                 std::span<const int> class_ids);

/// grads += scale * d(sum of counted cross-entropies)/dparams. Returns the
/// summed (unscaled) loss and the counted-position count.
template <class T>
LossValue accumulate_lm_gradients(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                                  const AttentionMask& mask, std::span<const TokenId> labels, T scale,
                                  ParameterSet<T>& grads);

/// grads += scale * d loss_cls / dparams. Returns the loss.
template <class T>
double accumulate_cls_gradients(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, int class_id,
                                T scale, ParameterSet<T>& grads, const SpecialTokens& specials);

/// Index into candidates of the largest logit; ties go to the smallest
/// token id.
template <class T>
TokenId constrained_argmax(std::span<const T> logits_row, std::span<const TokenId> candidates);

/// Greedy answer restricted to {A, B, C} at the position after EOS, for
/// the sequence BOS prompt EOS. Prompts longer than max_seq_len - 2 keep
/// their last max_seq_len - 2 tokens.
template <class T>
TokenId generate_answer(const Checkpoint<T>& ckpt, std::span<const TokenId> prompt_tokens,
                        const SpecialTokens& specials);

/// The three answer-letter logits at the position after EOS.
template <class T>
std::array<T, 3> answer_logits(const Checkpoint<T>& ckpt, std::span<const TokenId> prompt_tokens,
                               const SpecialTokens& specials);

/// BOS prompt EOS, keeping the last max_len - 2 prompt tokens.
std::vector<TokenId> frame_prompt(std::span<const TokenId> prompt_tokens, const SpecialTokens& specials,
                                  std::size_t max_len);

}  // namespace finsent
