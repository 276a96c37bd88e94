// SPDX-License-Identifier: Apache-2.0
#include "finsent/packing.hpp"

#include <algorithm>
#include <sstream>

#include "finsent/errors.hpp"

namespace finsent {

AttentionMask AttentionMask::causal(std::size_t size) {
  AttentionMask mask(size);
  for (std::size_t i = 0; i < size; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
  }
  return mask;
}

std::size_t AttentionMask::row_count(std::size_t i) const {
  const auto row = data().subspan(i * size_, size_);
  return static_cast<std::size_t>(std::count(row.begin(), row.end(), std::uint8_t{1}));
}

TokenizedExample tokenize_pair(const LabeledExample& example, std::size_t source_index, const Vocabulary& vocab,
                               const PromptTemplate& tpl, std::size_t max_seq_len, PromptStyle style) {
  TokenizedExample out;
  out.prompt_tokens = vocab.encode(build_prompt(tpl, example.sentence, style));
  const auto answer = vocab.encode(std::string(1, label_to_letter(example.label)));
  if (answer.size() != 1) throw DataError("answer letter did not encode to a single token");
  out.answer_token = answer.front();
  out.source_index = source_index;
  if (max_seq_len < 3 || out.prompt_tokens.size() > max_seq_len - 3) {
    throw ExampleTooLong("example " + std::to_string(source_index) + ": prompt of " +
                         std::to_string(out.prompt_tokens.size()) + " tokens does not fit max_seq_len " +
                         std::to_string(max_seq_len));
  }
  return out;
}

ClassSample frame_for_classification(const TokenizedExample& example, const SpecialTokens& specials) {
  const int class_id = specials.answer_index(example.answer_token);
  if (class_id < 0) throw DataError("example " + std::to_string(example.source_index) + " has no answer letter");
  ClassSample out;
  out.tokens.reserve(example.prompt_tokens.size() + 2);
  out.tokens.push_back(specials.bos);
  out.tokens.insert(out.tokens.end(), example.prompt_tokens.begin(), example.prompt_tokens.end());
  out.tokens.push_back(specials.eos);
  out.class_id = class_id;
  out.source_index = example.source_index;
  return out;
}

std::vector<PackedSequence> pack(std::span<const TokenizedExample> examples, std::size_t max_seq_len,
                                 const SpecialTokens& specials) {
  std::vector<PackedSequence> out;
  PackedSequence current;
  const auto flush = [&] {
    if (current.pair_count > 0) out.push_back(std::move(current));
    current = PackedSequence{};
  };
  for (const auto& ex : examples) {
    const std::size_t need = ex.prompt_tokens.size() + 3;
    if (ex.prompt_tokens.empty() || need > max_seq_len) {
      throw ExampleTooLong("example " + std::to_string(ex.source_index) + " cannot fit max_seq_len " +
                           std::to_string(max_seq_len));
    }
    if (current.size() + need > max_seq_len) flush();
    const auto segment = static_cast<std::int32_t>(current.pair_count);
    current.tokens.push_back(specials.bos);
    current.tokens.insert(current.tokens.end(), ex.prompt_tokens.begin(), ex.prompt_tokens.end());
    current.tokens.push_back(specials.eos);
    current.tokens.push_back(ex.answer_token);
    current.labels.insert(current.labels.end(), ex.prompt_tokens.size() + 1, kIgnoreLabel);
    current.labels.push_back(ex.answer_token);
    current.labels.push_back(kIgnoreLabel);
    current.segment_ids.insert(current.segment_ids.end(), need, segment);
    current.source_indices.push_back(ex.source_index);
    ++current.pair_count;
  }
  flush();
  return out;
}

std::vector<TokenId> build_labels(const PackedSequence& packed, TokenId ignore_label,
                                  const SpecialTokens& specials) {
  const auto& tok = packed.tokens;
  const std::size_t n = tok.size();
  if (packed.segment_ids.size() != n) throw DataError("packed layout: segment ids length mismatch");
  std::vector<TokenId> labels(n, ignore_label);
  std::size_t start = 0;
  std::size_t segments = 0;
  while (start < n) {
    std::size_t end = start;
    while (end < n && packed.segment_ids[end] == packed.segment_ids[start]) ++end;
    // [start, end) must be BOS q+ EOS a
    if (end - start < 4 || tok[start] != specials.bos || tok[end - 2] != specials.eos ||
        !specials.is_answer(tok[end - 1])) {
      throw DataError("packed layout: segment at position " + std::to_string(start) +
                      " is not BOS q EOS answer");
    }
    for (std::size_t t = start + 1; t < end - 2; ++t) {
      if (tok[t] == specials.bos || tok[t] == specials.eos || tok[t] == specials.pad) {
        throw DataError("packed layout: special token inside a prompt at position " + std::to_string(t));
      }
    }
    if (start > 0 && packed.segment_ids[start] <= packed.segment_ids[start - 1]) {
      throw DataError("packed layout: segment ids must increase");
    }
    labels[end - 2] = tok[end - 1];
    ++segments;
    start = end;
  }
  if (segments != packed.pair_count) throw DataError("packed layout: pair_count does not match segments");
  return labels;
}

AttentionMask build_attention_mask(std::span<const std::int32_t> segment_ids) {
  const std::size_t n = segment_ids.size();
  AttentionMask mask(n);
  // Segments are contiguous, so each row's allowed keys are the run from
  // its segment start up to itself.
  std::size_t seg_start = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && segment_ids[i] != segment_ids[i - 1]) seg_start = i;
    for (std::size_t j = seg_start; j <= i; ++j) mask.set(i, j, true);
  }
  return mask;
}

AttentionMask build_attention_mask(const PackedSequence& packed) { return build_attention_mask(packed.segment_ids); }

CollatedBatch collate(std::span<const PackedSequence> sequences, const SpecialTokens& specials) {
  CollatedBatch batch;
  for (const auto& s : sequences) batch.length = std::max(batch.length, s.size());
  for (const auto& s : sequences) {
    PackedSequence row = s;
    const std::size_t real = s.size();
    row.tokens.resize(batch.length, specials.pad);
    row.labels.resize(batch.length, kIgnoreLabel);
    row.segment_ids.resize(batch.length, -1);
    AttentionMask mask(batch.length);
    const auto inner = build_attention_mask(std::span<const std::int32_t>(s.segment_ids));
    for (std::size_t i = 0; i < real; ++i) {
      for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, inner.allowed(i, j));
    }
    for (std::size_t i = real; i < batch.length; ++i) mask.set(i, i, true);
    batch.rows.push_back(std::move(row));
    batch.masks.push_back(std::move(mask));
  }
  return batch;
}

namespace {

template <class Int>
void write_row(std::ostringstream& out, std::string_view tag, const std::vector<Int>& values) {
  out << tag;
  for (auto v : values) out << ' ' << v;
  out << '\n';
}

template <class Int>
std::vector<Int> read_row(std::istream& in, std::string_view tag, std::size_t count) {
  std::string word;
  if (!(in >> word) || word != tag) throw DataError("pack dump: expected '" + std::string(tag) + "'");
  std::vector<Int> values(count);
  for (auto& v : values) {
    if (!(in >> v)) throw DataError("pack dump: short '" + std::string(tag) + "' row");
  }
  return values;
}

}  // namespace

std::string write_pack_dump(std::span<const PackedSequence> sequences) {
  std::ostringstream out;
  out << "finsent-pack v1\n" << "sequences " << sequences.size() << '\n';
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& s = sequences[i];
    out << "seq " << i << ' ' << s.size() << ' ' << s.pair_count << '\n';
    write_row(out, "tokens", s.tokens);
    write_row(out, "labels", s.labels);
    write_row(out, "segments", s.segment_ids);
    write_row(out, "sources", s.source_indices);
  }
  return out.str();
}

std::vector<PackedSequence> read_pack_dump(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string header;
  std::getline(in, header);
  if (header != "finsent-pack v1") throw DataError("pack dump: missing header");
  std::string word;
  std::size_t count = 0;
  if (!(in >> word >> count) || word != "sequences") throw DataError("pack dump: missing sequence count");
  std::vector<PackedSequence> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t index = 0;
    std::size_t length = 0;
    auto& s = out[i];
    if (!(in >> word >> index >> length >> s.pair_count) || word != "seq" || index != i) {
      throw DataError("pack dump: bad record header");
    }
    s.tokens = read_row<TokenId>(in, "tokens", length);
    s.labels = read_row<TokenId>(in, "labels", length);
    s.segment_ids = read_row<std::int32_t>(in, "segments", length);
    s.source_indices = read_row<std::size_t>(in, "sources", s.pair_count);
  }
  return out;
}

}  // namespace finsent
