// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace finsent {

/// Class ids: positive 0, negative 1, neutral 2. Answer letters A, B, C.
enum class Sentiment : std::uint8_t { positive = 0, negative = 1, neutral = 2 };

inline constexpr std::size_t kNumClasses = 3;

int label_to_id(Sentiment label);
/// Throws ConfigError for ids outside {0, 1, 2}.
Sentiment id_to_label(int id);
char label_to_letter(Sentiment label);
/// Accepts A/B/C in either case. Throws ConfigError otherwise.
Sentiment letter_to_label(char letter);
std::string_view label_name(Sentiment label);
/// "positive" / "negative" / "neutral". Throws DataError otherwise.
Sentiment parse_label(std::string_view name);

struct LabeledExample {
  std::string sentence;
  Sentiment label = Sentiment::neutral;

  bool operator==(const LabeledExample&) const = default;
};

/// Parses PhraseBank text: one `sentence@label` per non-empty line, split
/// on the last '@'. Accepts LF or CRLF. `source` names the input in
/// error messages.
std::vector<LabeledExample> parse_phrasebank(std::string_view utf8_text, std::string_view source);

/// Reads a PhraseBank file. A UTF-8 BOM is stripped; input that is not
/// valid UTF-8 is decoded as Latin-1 (the encoding of the distributed
/// files). Errors name the path and the 1-based line number.
std::vector<LabeledExample> load_phrasebank(const std::filesystem::path& path);

/// UTF-8 with BOM stripped, or Latin-1 converted to UTF-8.
std::string normalize_encoding(std::string_view raw);

/// Writes examples back in `sentence@label` form, UTF-8, LF.
std::string format_phrasebank(const std::vector<LabeledExample>& examples);

struct SplitSpec {
  double test_fraction = 0.20;
  double val_fraction_of_rest = 0.10;
  std::uint64_t seed = 42;

  void validate() const;
  bool operator==(const SplitSpec&) const = default;
};

/// Example indices per split, each list ascending.
struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  bool operator==(const SplitIndices&) const = default;
};

/// Shuffles 0..n-1 with SplitMix64(seed) Fisher-Yates, then takes
/// round(test_fraction * n) for test, round(val_fraction_of_rest * rest)
/// for validation and the remainder for training. Rounding is half away
/// from zero.
SplitIndices split_indices(std::size_t n, const SplitSpec& spec);

struct DatasetSplits {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> val;
  std::vector<LabeledExample> test;
  SplitIndices indices;
};

DatasetSplits split(const std::vector<LabeledExample>& examples, const SplitSpec& spec);

/// Canonical splits.json text (stable key order, trailing newline).
std::string splits_manifest_json(const SplitIndices& indices, const SplitSpec& spec, std::size_t n);
/// Reads a manifest written by splits_manifest_json.
SplitIndices parse_splits_manifest(std::string_view json_text, std::size_t expected_n);

}  // namespace finsent
