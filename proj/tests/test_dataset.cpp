// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "finsent/dataset.hpp"
#include "finsent/errors.hpp"
#include "finsent/synth.hpp"
#include "support.hpp"

using namespace finsent;

TEST_CASE("label ids follow the class-head convention") {
  CHECK(label_to_id(Sentiment::positive) == 0);
  CHECK(label_to_id(Sentiment::negative) == 1);
  CHECK(label_to_id(Sentiment::neutral) == 2);
  for (int id = 0; id < 3; ++id) CHECK(label_to_id(id_to_label(id)) == id);
  CHECK_THROWS(id_to_label(3));
  CHECK_THROWS(id_to_label(-1));
  CHECK(label_to_letter(Sentiment::positive) == 'A');
  CHECK(label_to_letter(Sentiment::negative) == 'B');
  CHECK(label_to_letter(Sentiment::neutral) == 'C');
  for (char c : {'A', 'B', 'C'}) CHECK(label_to_letter(letter_to_label(c)) == c);
  CHECK(parse_label("neutral") == Sentiment::neutral);
  CHECK_THROWS_AS(parse_label("mixed"), DataError);
}

TEST_CASE("phrasebank lines split on the last @") {
  const auto ex = parse_phrasebank("Profit rose to EUR 12 mn .@positive\n", "t");
  REQUIRE(ex.size() == 1);
  CHECK(ex[0].sentence == "Profit rose to EUR 12 mn .");
  CHECK(ex[0].label == Sentiment::positive);

  const auto at = parse_phrasebank("Mail info@example.com for details .@neutral\r\n\n", "t");
  REQUIRE(at.size() == 1);
  CHECK(at[0].sentence == "Mail info@example.com for details .");
  CHECK(at[0].label == Sentiment::neutral);
}

TEST_CASE("malformed lines are reported with their line number") {
  try {
    parse_phrasebank("Good line .@positive\nno label here\n", "bank.txt");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("bank.txt:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_phrasebank("Sentence .@bullish\n", "x"), DataError);
  CHECK_THROWS_AS(parse_phrasebank("   @negative\n", "x"), DataError);
}

TEST_CASE("missing file names the path") {
  try {
    load_phrasebank("/nonexistent/Sentences_50Agree.txt");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/Sentences_50Agree.txt") != std::string::npos);
  }
}

TEST_CASE("encoding normalization") {
  // Latin-1 "Pörssi" becomes UTF-8.
  CHECK(normalize_encoding("P\xF6rssi") == "P\xC3\xB6rssi");
  // Valid UTF-8 passes through, a BOM is dropped.
  CHECK(normalize_encoding("P\xC3\xB6rssi") == "P\xC3\xB6rssi");
  CHECK(normalize_encoding("\xEF\xBB\xBFok") == "ok");
  testing::TempDir dir("latin1");
  testing::spit(dir / "bank.txt", generate_toy_phrasebank(50, 4, true));
  const auto loaded = load_phrasebank(dir / "bank.txt");
  CHECK(loaded == generate_toy_examples(50, 4));
}

TEST_CASE("split sizes") {
  SplitSpec spec;
  auto s = split_indices(4845, spec);
  CHECK(s.test.size() == 969);
  CHECK(s.val.size() == 388);  // round(0.1 * 3876) = 388
  CHECK(s.train.size() == 4845 - 969 - 388);

  spec.val_fraction_of_rest = 0.0;
  s = split_indices(10, spec);
  CHECK(s.train.size() == 8);
  CHECK(s.val.empty());
  CHECK(s.test.size() == 2);
}

TEST_CASE("split halves round away from zero") {
  SplitSpec spec;
  spec.test_fraction = 0.25;
  spec.val_fraction_of_rest = 0.5;
  const auto s = split_indices(10, spec);  // 2.5 -> 3, then 3.5 -> 4
  CHECK(s.test.size() == 3);
  CHECK(s.val.size() == 4);
  CHECK(s.train.size() == 3);
}

TEST_CASE("splits partition the input and preserve labels") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.below(400);
    SplitSpec spec;
    spec.seed = rng.next();
    spec.test_fraction = 0.05 + 0.5 * rng.uniform();
    spec.val_fraction_of_rest = 0.4 * rng.uniform();
    const auto examples = generate_toy_examples(n, spec.seed);
    DatasetSplits parts;
    try {
      parts = split(examples, spec);
    } catch (const DataError&) {
      continue;  // a positive fraction rounded to an empty split
    }
    std::vector<std::size_t> all;
    for (const auto* list : {&parts.indices.train, &parts.indices.val, &parts.indices.test}) {
      CHECK(std::is_sorted(list->begin(), list->end()));
      all.insert(all.end(), list->begin(), list->end());
    }
    std::sort(all.begin(), all.end());
    REQUIRE(all.size() == n);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(all[i] == i);
    CHECK(parts.indices.test.size() == static_cast<std::size_t>(std::llround(spec.test_fraction * n)));

    std::map<Sentiment, int> before, after;
    for (const auto& e : examples) ++before[e.label];
    for (const auto* list : {&parts.train, &parts.val, &parts.test}) {
      for (const auto& e : *list) ++after[e.label];
    }
    CHECK(before == after);
    for (std::size_t k = 0; k < parts.test.size(); ++k) {
      CHECK(parts.test[k] == examples[parts.indices.test[k]]);
    }
  }
}

TEST_CASE("split is deterministic and seed-dependent") {
  SplitSpec spec;
  CHECK(split_indices(500, spec) == split_indices(500, spec));
  SplitSpec other = spec;
  other.seed = 43;
  CHECK_FALSE(split_indices(500, spec) == split_indices(500, other));
}

TEST_CASE("empty or invalid splits are errors") {
  std::vector<LabeledExample> none;
  CHECK_THROWS_AS(split(none, SplitSpec{}), DataError);
  SplitSpec bad;
  bad.test_fraction = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad.test_fraction = 0.2;
  bad.val_fraction_of_rest = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  // 2 examples with 20% test would round to an empty test split.
  CHECK_THROWS_AS(split_indices(2, SplitSpec{}), DataError);
}

TEST_CASE("splits manifest round-trips and is validated") {
  SplitSpec spec;
  const auto s = split_indices(100, spec);
  const auto json = splits_manifest_json(s, spec, 100);
  CHECK(json == splits_manifest_json(split_indices(100, spec), spec, 100));
  CHECK(parse_splits_manifest(json, 100) == s);
  CHECK_THROWS_AS(parse_splits_manifest(json, 101), DataError);
  CHECK_THROWS_AS(parse_splits_manifest("{not json", 100), DataError);
}

TEST_CASE("format_phrasebank inverts parse") {
  const auto examples = generate_toy_examples(60, 9);
  CHECK(parse_phrasebank(format_phrasebank(examples), "x") == examples);
}
