// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finsent/dataset.hpp"
#include "finsent/prompting.hpp"
#include "finsent/tokenizer.hpp"

namespace finsent {

/// Tokenized question plus its single answer token.
struct TokenizedExample {
  std::vector<TokenId> prompt_tokens;
  TokenId answer_token = 0;
  std::size_t source_index = 0;

  bool operator==(const TokenizedExample&) const = default;
};

/// One classification sample: BOS q EOS and its class id.
struct ClassSample {
  std::vector<TokenId> tokens;
  int class_id = 0;
  std::size_t source_index = 0;

  bool operator==(const ClassSample&) const = default;
};

/// Frames a tokenized pair for the classification head; the class id is
/// the answer letter's index (A 0, B 1, C 2).
ClassSample frame_for_classification(const TokenizedExample& example, const SpecialTokens& specials);

/// Several question/answer pairs laid out as
///   BOS q_1 EOS a_1 BOS q_2 EOS a_2 ...
/// labels[t] is the next-token target for position t: the answer id at
/// each EOS position, kIgnoreLabel elsewhere.
struct PackedSequence {
  std::vector<TokenId> tokens;
  std::vector<TokenId> labels;
  std::vector<std::int32_t> segment_ids;
  std::size_t pair_count = 0;
  std::vector<std::size_t> source_indices;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const PackedSequence&) const = default;
};

/// Dense T x T boolean attention mask; allowed(i, j) means query i may
/// read key j.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t size) : size_(size), allowed_(size * size, 0) {}

  static AttentionMask causal(std::size_t size);

  std::size_t size() const { return size_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * size_ + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { allowed_[i * size_ + j] = value ? 1 : 0; }
  std::span<const std::uint8_t> data() const { return allowed_; }
  /// Number of keys row i may attend to.
  std::size_t row_count(std::size_t i) const;

  bool operator==(const AttentionMask&) const = default;

 private:
  std::size_t size_ = 0;
  std::vector<std::uint8_t> allowed_;
};

/// prompt_tokens = encode(build_prompt(title)), answer_token = id of the
/// label's letter. Throws ExampleTooLong when the prompt exceeds
/// max_seq_len - 3.
TokenizedExample tokenize_pair(const LabeledExample& example, std::size_t source_index, const Vocabulary& vocab,
                               const PromptTemplate& tpl, std::size_t max_seq_len,
                               PromptStyle style = PromptStyle::zero_shot);

/// Greedy packing in input order: a pair joins the current sequence when
/// its 1 + |q| + 1 + 1 tokens still fit, otherwise a new sequence starts.
/// Throws ExampleTooLong for a pair that cannot fit on its own.
std::vector<PackedSequence> pack(std::span<const TokenizedExample> examples, std::size_t max_seq_len,
                                 const SpecialTokens& specials);

/// Recomputes the next-token labels from the token layout. Throws
/// DataError if the layout is not BOS q EOS a repeated.
std::vector<TokenId> build_labels(const PackedSequence& packed, TokenId ignore_label,
                                  const SpecialTokens& specials);

/// allowed(i, j) iff segment_ids[i] == segment_ids[j] and j <= i.
AttentionMask build_attention_mask(std::span<const std::int32_t> segment_ids);
AttentionMask build_attention_mask(const PackedSequence& packed);

/// Pads sequences to a common length. Padding uses the PAD id, the
/// ignore label and segment id -1; a padded position attends only to
/// itself and no real position attends to it.
struct CollatedBatch {
  std::size_t length = 0;
  std::vector<PackedSequence> rows;
  std::vector<AttentionMask> masks;
};
CollatedBatch collate(std::span<const PackedSequence> sequences, const SpecialTokens& specials);

/// Debug dump:
///   finsent-pack v1
///   sequences <n>
///   seq <index> <length> <pair_count>
///   tokens <ints>
///   labels <ints>
///   segments <ints>
std::string write_pack_dump(std::span<const PackedSequence> sequences);
std::vector<PackedSequence> read_pack_dump(std::string_view text);

}  // namespace finsent
