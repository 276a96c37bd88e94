// SPDX-License-Identifier: Apache-2.0
#include "finsent/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "finsent/errors.hpp"
#include "finsent/prng.hpp"

namespace finsent {

int label_to_id(Sentiment label) { return static_cast<int>(label); }

Sentiment id_to_label(int id) {
  if (id < 0 || id > 2) throw ConfigError("class id " + std::to_string(id) + " out of range {0,1,2}");
  return static_cast<Sentiment>(id);
}

char label_to_letter(Sentiment label) { return static_cast<char>('A' + label_to_id(label)); }

Sentiment letter_to_label(char letter) {
  switch (letter) {
    case 'A':
    case 'a':
      return Sentiment::positive;
    case 'B':
    case 'b':
      return Sentiment::negative;
    case 'C':
    case 'c':
      return Sentiment::neutral;
    default:
      throw ConfigError(std::string("not an answer letter: '") + letter + "'");
  }
}

std::string_view label_name(Sentiment label) {
  switch (label) {
    case Sentiment::positive:
      return "positive";
    case Sentiment::negative:
      return "negative";
    case Sentiment::neutral:
      return "neutral";
  }
  return "neutral";
}

Sentiment parse_label(std::string_view name) {
  if (name == "positive") return Sentiment::positive;
  if (name == "negative") return Sentiment::negative;
  if (name == "neutral") return Sentiment::neutral;
  throw DataError("unknown label '" + std::string(name) + "'");
}

namespace {

bool is_valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra;
    if (c < 0x80) {
      extra = 0;
    } else if ((c & 0xE0) == 0xC0 && c >= 0xC2) {
      extra = 1;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
    } else if ((c & 0xF8) == 0xF0 && c <= 0xF4) {
      extra = 3;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += extra + 1;
  }
  return true;
}

std::string_view trim(std::string_view s) {
  const auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return s;
}

std::size_t round_half_away(double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); }

}  // namespace

std::string normalize_encoding(std::string_view raw) {
  if (raw.starts_with("\xEF\xBB\xBF")) raw.remove_prefix(3);
  if (is_valid_utf8(raw)) return std::string(raw);
  std::string out;
  out.reserve(raw.size() + raw.size() / 8);
  for (unsigned char c : raw) {
    if (c < 0x80) {
      out += static_cast<char>(c);
    } else {
      out += static_cast<char>(0xC0 | (c >> 6));
      out += static_cast<char>(0x80 | (c & 0x3F));
    }
  }
  return out;
}

std::vector<LabeledExample> parse_phrasebank(std::string_view text, std::string_view source) {
  std::vector<LabeledExample> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) continue;

    const auto where = [&] { return std::string(source) + ":" + std::to_string(line_no) + ": "; };
    const auto at = line.rfind('@');
    if (at == std::string_view::npos) throw DataError(where() + "missing '@' label separator");
    const auto label_text = trim(line.substr(at + 1));
    Sentiment label;
    try {
      label = parse_label(label_text);
    } catch (const DataError&) {
      throw DataError(where() + "unknown label '" + std::string(label_text) + "'");
    }
    const auto sentence = trim(line.substr(0, at));
    if (sentence.empty()) throw DataError(where() + "empty sentence");
    out.push_back({std::string(sentence), label});
  }
  return out;
}

std::vector<LabeledExample> load_phrasebank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read dataset file " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_phrasebank(normalize_encoding(buffer.str()), path.string());
}

std::string format_phrasebank(const std::vector<LabeledExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += ex.sentence;
    out += '@';
    out += label_name(ex.label);
    out += '\n';
  }
  return out;
}

void SplitSpec::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie in (0, 1)");
  }
  if (!(val_fraction_of_rest >= 0.0 && val_fraction_of_rest < 1.0)) {
    throw ConfigError("validation fraction must lie in [0, 1)");
  }
}

SplitIndices split_indices(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  if (n == 0) throw DataError("cannot split an empty dataset");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(spec.seed);
  shuffle(std::span<std::size_t>(order), rng);

  const std::size_t n_test = round_half_away(spec.test_fraction * static_cast<double>(n));
  const std::size_t rest = n - std::min(n_test, n);
  const std::size_t n_val = round_half_away(spec.val_fraction_of_rest * static_cast<double>(rest));
  if (n_test == 0 || n_test >= n) throw DataError("test split would be empty or take every example");
  if (spec.val_fraction_of_rest > 0.0 && n_val == 0) throw DataError("validation split would be empty");
  if (n_val >= rest) throw DataError("training split would be empty");

  SplitIndices out;
  out.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test),
                 order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val));
  out.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test + n_val), order.end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

DatasetSplits split(const std::vector<LabeledExample>& examples, const SplitSpec& spec) {
  DatasetSplits out;
  out.indices = split_indices(examples.size(), spec);
  const auto gather = [&](const std::vector<std::size_t>& idx, std::vector<LabeledExample>& dst) {
    dst.reserve(idx.size());
    for (auto i : idx) dst.push_back(examples[i]);
  };
  gather(out.indices.train, out.train);
  gather(out.indices.val, out.val);
  gather(out.indices.test, out.test);
  return out;
}

std::string splits_manifest_json(const SplitIndices& indices, const SplitSpec& spec, std::size_t n) {
  nlohmann::ordered_json j;
  j["format"] = "finsent-splits v1";
  j["n"] = n;
  j["seed"] = spec.seed;
  j["test_fraction"] = spec.test_fraction;
  j["val_fraction_of_rest"] = spec.val_fraction_of_rest;
  j["prng"] = "splitmix64";
  j["train"] = indices.train;
  j["val"] = indices.val;
  j["test"] = indices.test;
  return j.dump(1) + "\n";
}

SplitIndices parse_splits_manifest(std::string_view json_text, std::size_t expected_n) {
  SplitIndices out;
  try {
    const auto j = nlohmann::json::parse(json_text);
    if (j.at("n").get<std::size_t>() != expected_n) {
      throw DataError("splits.json was written for a dataset of a different size");
    }
    out.train = j.at("train").get<std::vector<std::size_t>>();
    out.val = j.at("val").get<std::vector<std::size_t>>();
    out.test = j.at("test").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed splits.json: ") + e.what());
  }
  std::vector<char> seen(expected_n, 0);
  for (const auto* part : {&out.train, &out.val, &out.test}) {
    for (auto i : *part) {
      if (i >= expected_n || seen[i]) throw DataError("splits.json is not a partition of the dataset");
      seen[i] = 1;
    }
  }
  return out;
}

}  // namespace finsent
