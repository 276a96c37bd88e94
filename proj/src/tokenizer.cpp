// SPDX-License-Identifier: Apache-2.0
#include "finsent/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include "finsent/errors.hpp"

namespace finsent {

namespace {

constexpr std::string_view kVocabHeader = "finsent-vocab v1";
constexpr std::string_view kMergesSentinel = "#merges";
constexpr std::array<std::string_view, 3> kSpecialNames = {"<|bos|>", "<|eos|>", "<|pad|>"};

enum class CharClass { space, letter, digit, other };

CharClass classify(unsigned char c) {
  if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') return CharClass::space;
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c >= 0x80) return CharClass::letter;
  if (c >= '0' && c <= '9') return CharClass::digit;
  return CharClass::other;
}

std::string escape_token(const std::string& bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char c : bytes) {
    if (c == '\\') {
      out += "\\\\";
    } else if (c > 0x20 && c < 0x7F) {
      out += static_cast<char>(c);
    } else {
      out += "\\x";
      out += kHex[c >> 4];
      out += kHex[c & 0xF];
    }
  }
  return out;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::string unescape_token(std::string_view text) {
  std::string out;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] != '\\') {
      out += text[i];
      continue;
    }
    if (i + 1 < text.size() && text[i + 1] == '\\') {
      out += '\\';
      ++i;
    } else if (i + 3 < text.size() + 0 && text[i + 1] == 'x' && hex_value(text[i + 2]) >= 0 &&
               hex_value(text[i + 3]) >= 0) {
      out += static_cast<char>(hex_value(text[i + 2]) * 16 + hex_value(text[i + 3]));
      i += 3;
    } else {
      throw DataError("vocabulary: bad escape sequence in token '" + std::string(text) + "'");
    }
  }
  return out;
}

}  // namespace

int SpecialTokens::answer_index(TokenId id) const {
  for (int i = 0; i < 3; ++i) {
    if (answers[i] == id) return i;
  }
  return -1;
}

Vocabulary::Vocabulary() {
  tokens_.reserve(kMinSize);
  for (int b = 0; b < kByteCount; ++b) {
    tokens_.emplace_back(1, static_cast<char>(b));
  }
  for (auto name : kSpecialNames) tokens_.emplace_back(name);
  // Specials are looked up by id only; ids_ maps byte strings of
  // ordinary tokens.
  for (TokenId id = 0; id < kByteCount; ++id) ids_.emplace(tokens_[id], id);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("vocabulary: token id " + std::to_string(id) + " out of range");
  }
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  for (TokenId id = kBos; id <= kPad; ++id) {
    if (token == tokens_[id]) return id;
  }
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

SpecialTokens Vocabulary::specials() const {
  SpecialTokens s;
  s.bos = kBos;
  s.eos = kEos;
  s.pad = kPad;
  s.answers = {static_cast<TokenId>('A'), static_cast<TokenId>('B'), static_cast<TokenId>('C')};
  return s;
}

TokenId Vocabulary::add_merge(TokenId left, TokenId right) {
  if (is_special(left) || is_special(right)) {
    throw DataError("vocabulary: merges may not involve special tokens");
  }
  std::string joined = token(left) + token(right);
  TokenId result;
  if (auto it = ids_.find(joined); it != ids_.end()) {
    result = it->second;
  } else {
    result = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(joined);
    ids_.emplace(std::move(joined), result);
  }
  const auto key = pair_key(left, right);
  if (merge_table_.contains(key)) {
    throw DataError("vocabulary: duplicate merge " + std::to_string(left) + " " + std::to_string(right));
  }
  merge_table_.emplace(key, std::make_pair(merges_.size(), result));
  merges_.emplace_back(left, right);
  return result;
}

void Vocabulary::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) ids.push_back(c);
  while (ids.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    std::uint64_t best_key = 0;
    TokenId best_result = 0;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      const auto key = pair_key(ids[i], ids[i + 1]);
      auto it = merge_table_.find(key);
      if (it != merge_table_.end() && it->second.first < best_rank) {
        best_rank = it->second.first;
        best_key = key;
        best_result = it->second.second;
      }
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    std::size_t w = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i + 1 < ids.size() && pair_key(ids[i], ids[i + 1]) == best_key) {
        ids[w++] = best_result;
        ++i;
      } else {
        ids[w++] = ids[i];
      }
    }
    ids.resize(w);
  }
  out.insert(out.end(), ids.begin(), ids.end());
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (auto chunk : pretokenize(text)) encode_chunk(chunk, out);
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw DataError("decode: unknown token id " + std::to_string(id));
    }
    if (is_special(id)) {
      throw DataError("decode: special token id " + std::to_string(id) + " in stream");
    }
    out += tokens_[id];
  }
  return out;
}

std::string Vocabulary::serialize() const {
  std::string out;
  out += kVocabHeader;
  out += '\n';
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    out += std::to_string(id);
    out += '\t';
    out += is_special(static_cast<TokenId>(id)) ? tokens_[id] : escape_token(tokens_[id]);
    out += '\n';
  }
  out += kMergesSentinel;
  out += '\n';
  for (const auto& [left, right] : merges_) {
    out += std::to_string(left) + ' ' + std::to_string(right) + '\n';
  }
  return out;
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kVocabHeader) {
    throw DataError("vocabulary: missing header '" + std::string(kVocabHeader) + "'");
  }
  std::vector<std::string> listed;
  bool saw_sentinel = false;
  while (std::getline(in, line)) {
    if (line == kMergesSentinel) {
      saw_sentinel = true;
      break;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("vocabulary: malformed token line '" + line + "'");
    const auto id = std::stoul(line.substr(0, tab));
    if (id != listed.size()) throw DataError("vocabulary: token ids must be dense and ordered");
    const auto body = std::string_view(line).substr(tab + 1);
    listed.push_back((id == kBos || id == kEos || id == kPad) ? std::string(body) : unescape_token(body));
  }
  if (!saw_sentinel) throw DataError("vocabulary: missing '#merges' section");

  Vocabulary vocab;
  if (listed.size() < kMinSize) throw DataError("vocabulary: fewer than 259 tokens listed");
  for (std::size_t id = 0; id < kMinSize; ++id) {
    if (listed[id] != vocab.tokens_[id]) {
      throw DataError("vocabulary: reserved token " + std::to_string(id) + " does not match");
    }
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream pair(line);
    TokenId left = 0;
    TokenId right = 0;
    if (!(pair >> left >> right)) throw DataError("vocabulary: malformed merge line '" + line + "'");
    vocab.add_merge(left, right);
  }
  if (vocab.tokens_ != listed) {
    throw DataError("vocabulary: token list is inconsistent with the merge list");
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary file " + path.string());
  out << serialize();
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocabulary file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  const auto cls = [&](std::size_t k) { return classify(static_cast<unsigned char>(text[k])); };
  const auto run_end = [&](std::size_t j) {
    const CharClass run = cls(j);
    while (j < text.size() && cls(j) == run) ++j;
    return j;
  };
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t j;
    if (text[i] == ' ' && i + 1 < text.size() && cls(i + 1) != CharClass::space) {
      j = run_end(i + 1);
    } else if (cls(i) == CharClass::space) {
      j = run_end(i);
      // Leave one trailing ' ' to lead the next word.
      if (j < text.size() && j - i > 1 && text[j - 1] == ' ') --j;
    } else {
      j = run_end(i);
    }
    chunks.push_back(text.substr(i, j - i));
    i = j;
  }
  return chunks;
}

Vocabulary train_bpe(std::span<const std::string> corpus, std::size_t vocab_size) {
  if (corpus.empty()) throw ConfigError("train_bpe: corpus is empty");
  if (vocab_size < Vocabulary::kMinSize) {
    throw ConfigError("train_bpe: vocab_size " + std::to_string(vocab_size) + " is below the minimum " +
                      std::to_string(Vocabulary::kMinSize));
  }

  std::map<std::string, std::int64_t> chunk_counts;
  for (const auto& text : corpus) {
    for (auto chunk : pretokenize(text)) ++chunk_counts[std::string(chunk)];
  }
  struct Word {
    std::vector<TokenId> ids;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(chunk_counts.size());
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.ids.push_back(c);
    if (w.ids.size() > 1) words.push_back(std::move(w));
  }

  Vocabulary vocab;
  std::map<std::pair<TokenId, TokenId>, std::int64_t> pair_counts;
  while (vocab.size() < vocab_size) {
    pair_counts.clear();
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) pair_counts[{w.ids[i], w.ids[i + 1]}] += w.count;
    }
    std::pair<TokenId, TokenId> best{};
    std::int64_t best_count = 1;
    // std::map iterates in (left, right) order, so strict '>' keeps the
    // smallest pair among equal counts.
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count) {
        best = pair;
        best_count = count;
      }
    }
    if (best_count < 2) break;
    const TokenId merged = vocab.add_merge(best.first, best.second);
    for (auto& w : words) {
      std::size_t out = 0;
      for (std::size_t i = 0; i < w.ids.size(); ++i) {
        if (i + 1 < w.ids.size() && w.ids[i] == best.first && w.ids[i + 1] == best.second) {
          w.ids[out++] = merged;
          ++i;
        } else {
          w.ids[out++] = w.ids[i];
        }
      }
      w.ids.resize(out);
    }
    std::erase_if(words, [](const Word& w) { return w.ids.size() < 2; });
  }
  return vocab;
}

}  // namespace finsent
