// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace finsent {

using TokenId = std::int32_t;

/// Label value excluded from the loss. Negative, so never a vocabulary id.
inline constexpr TokenId kIgnoreLabel = -1;

/// Ids the packing, model and evaluation code need to know about.
struct SpecialTokens {
  TokenId bos = 0;
  TokenId eos = 0;
  TokenId pad = 0;
  std::array<TokenId, 3> answers{};  // "A", "B", "C"

  bool is_answer(TokenId id) const {
    return id == answers[0] || id == answers[1] || id == answers[2];
  }
  /// 0, 1, 2 for an answer id; -1 otherwise.
  int answer_index(TokenId id) const;
};

/// Byte-level BPE vocabulary.
///
/// Layout: ids 0..255 are the raw bytes, 256/257/258 are BOS/EOS/PAD,
/// and merged tokens follow in merge order. Merges never cross the
/// pre-tokenizer's chunk boundaries, so special token names can never be
/// produced from ordinary text. The answer letters are single bytes and
/// therefore always encode to exactly one id.
class Vocabulary {
 public:
  static constexpr TokenId kByteCount = 256;
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr TokenId kFirstMerged = 259;
  static constexpr std::size_t kMinSize = 259;

  /// Bytes plus specials, no merges.
  Vocabulary();

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const;
  std::optional<TokenId> find(std::string_view token) const;
  const std::vector<std::pair<TokenId, TokenId>>& merges() const { return merges_; }

  TokenId bos_id() const { return kBos; }
  TokenId eos_id() const { return kEos; }
  TokenId pad_id() const { return kPad; }
  bool is_special(TokenId id) const { return id == kBos || id == kEos || id == kPad; }
  SpecialTokens specials() const;

  std::vector<TokenId> encode(std::string_view text) const;
  /// Throws DataError on unknown or special ids.
  std::string decode(std::span<const TokenId> ids) const;

  /// Appends a merge of two existing ids. The result reuses an existing id
  /// when the concatenated bytes are already in the vocabulary.
  TokenId add_merge(TokenId left, TokenId right);

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && merges_ == other.merges_;
  }

 private:
  static std::uint64_t pair_key(TokenId left, TokenId right) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(left)) << 32) |
           static_cast<std::uint32_t>(right);
  }
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  // pair -> (rank, result id)
  std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> merge_table_;
};

/// Splits text into the chunks BPE merges are confined to: an optional
/// single leading space followed by a run of letters (including any byte
/// >= 0x80), a run of digits, or a run of other non-space characters; or
/// a run of whitespace. Concatenating the chunks gives back the input.
std::vector<std::string_view> pretokenize(std::string_view text);

/// Trains a byte-level BPE vocabulary of at most vocab_size ids.
///
/// Repeatedly merges the most frequent adjacent pair (ties: smallest
/// (left, right) ids) while some pair occurs at least twice and the
/// vocabulary has room. Deterministic for a fixed corpus order.
Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t vocab_size);

}  // namespace finsent
