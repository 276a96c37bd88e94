// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "finsent/errors.hpp"
#include "finsent/packing.hpp"
#include "finsent/prng.hpp"
#include "finsent/tokenizer.hpp"
#include "support.hpp"

using namespace finsent;
using testing::tiny_specials;

namespace {

TokenizedExample pair_of(std::vector<TokenId> q, TokenId a, std::size_t src = 0) {
  return {std::move(q), a, src};
}

// Independent definition: same segment and not in the future.
bool oracle_allowed(const std::vector<std::int32_t>& seg, std::size_t i, std::size_t j) {
  return seg[i] == seg[j] && j <= i;
}

}  // namespace

TEST_CASE("two short pairs share one sequence") {
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> pairs = {pair_of({7, 8, 9}, s.answers[0], 0),
                                               pair_of({10, 11, 12, 13}, s.answers[2], 1)};
  const auto packed = pack(pairs, 16, s);
  REQUIRE(packed.size() == 1);
  const auto& p = packed[0];
  CHECK(p.size() == 13);
  CHECK(p.pair_count == 2);
  const std::vector<TokenId> tokens = {1, 7, 8, 9, 2, 4, 1, 10, 11, 12, 13, 2, 6};
  CHECK(p.tokens == tokens);
  const std::vector<TokenId> labels = {-1, -1, -1, -1, 4, -1, -1, -1, -1, -1, -1, 6, -1};
  CHECK(p.labels == labels);
  const std::vector<std::int32_t> segs = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1};
  CHECK(p.segment_ids == segs);
  CHECK(p.source_indices == std::vector<std::size_t>{0, 1});
}

TEST_CASE("single pair labels put the answer at EOS") {
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> pairs = {pair_of({9, 9}, s.answers[1])};
  const auto packed = pack(pairs, 8, s);
  REQUIRE(packed.size() == 1);
  CHECK(packed[0].labels == std::vector<TokenId>{-1, -1, -1, 5, -1});
  CHECK(build_labels(packed[0], kIgnoreLabel, s) == packed[0].labels);
  PackedSequence empty;
  CHECK(build_labels(empty, kIgnoreLabel, s).empty());
}

TEST_CASE("a pair that does not fit starts a new sequence") {
  const auto s = tiny_specials();
  // 1 + 1017 + 1 + 1 = 1020 tokens, leaving 4: too few for another pair of length 2.
  std::vector<TokenizedExample> pairs = {pair_of(std::vector<TokenId>(1017, 7), s.answers[0], 0),
                                         pair_of({8, 8}, s.answers[1], 1)};
  const auto packed = pack(pairs, 1024, s);
  REQUIRE(packed.size() == 2);
  CHECK(packed[0].size() == 1020);
  CHECK(packed[1].size() == 5);
  // Exactly filling the capacity is allowed.
  pairs[1].prompt_tokens = {8};
  CHECK(pack(pairs, 1024, s).size() == 1);
}

TEST_CASE("oversized pairs are rejected") {
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> pairs = {pair_of(std::vector<TokenId>(14, 7), s.answers[0])};
  CHECK_THROWS_AS(pack(pairs, 16, s), ExampleTooLong);

  const Vocabulary vocab;
  LabeledExample huge{std::string(5000, 'x'), Sentiment::neutral};
  CHECK_THROWS_AS(tokenize_pair(huge, 0, vocab, PromptTemplate::standard(), 1024), ExampleTooLong);
}

TEST_CASE("tokenize_pair maps labels to letter tokens") {
  const Vocabulary vocab;
  const auto tpl = PromptTemplate::standard();
  const auto neutral = tokenize_pair({"Shares were flat .", Sentiment::neutral}, 3, vocab, tpl, 1024);
  CHECK(neutral.answer_token == vocab.encode("C")[0]);
  CHECK(neutral.source_index == 3);
  CHECK(neutral.prompt_tokens == vocab.encode(build_sft_prompt(tpl, "Shares were flat .")));
  const auto positive = tokenize_pair({"Sales rose .", Sentiment::positive}, 0, vocab, tpl, 1024);
  CHECK(positive.answer_token == vocab.encode("A")[0]);
  const auto few = tokenize_pair({"Sales rose .", Sentiment::positive}, 0, vocab, tpl, 4096, PromptStyle::few_shot);
  CHECK(few.prompt_tokens.size() > positive.prompt_tokens.size());
}

TEST_CASE("random packings conserve pairs and satisfy the layout") {
  const auto s = tiny_specials();
  SplitMix64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t max_len = 8 + rng.below(120);
    const auto pairs = testing::random_pairs(rng, 1 + rng.below(40), 1, max_len - 3, s);
    const auto packed = pack(pairs, max_len, s);
    std::size_t total_pairs = 0, total_labels = 0, next_source = 0;
    for (const auto& p : packed) {
      CHECK(p.size() <= max_len);
      CHECK(p.labels.size() == p.size());
      CHECK(p.segment_ids.size() == p.size());
      total_pairs += p.pair_count;
      std::size_t counted = 0;
      for (std::size_t t = 0; t < p.size(); ++t) {
        if (p.labels[t] != kIgnoreLabel) {
          ++counted;
          CHECK(p.tokens[t] == s.eos);
          CHECK(p.labels[t] == p.tokens[t + 1]);
          CHECK(p.segment_ids[t] == p.segment_ids[t + 1]);
        }
        if (t > 0) CHECK(p.segment_ids[t] >= p.segment_ids[t - 1]);
      }
      CHECK(counted == p.pair_count);
      total_labels += counted;
      CHECK(build_labels(p, kIgnoreLabel, s) == p.labels);
      for (auto src : p.source_indices) CHECK(src == next_source++);
    }
    CHECK(total_pairs == pairs.size());
    CHECK(total_labels == pairs.size());
  }
}

TEST_CASE("build_labels rejects malformed layouts") {
  const auto s = tiny_specials();
  PackedSequence p;
  p.tokens = {7, 8, 2, 4};  // no BOS
  p.segment_ids = {0, 0, 0, 0};
  CHECK_THROWS_AS(build_labels(p, kIgnoreLabel, s), DataError);
  p.tokens = {1, 7, 2, 9};  // answer is not a letter
  CHECK_THROWS_AS(build_labels(p, kIgnoreLabel, s), DataError);
  p.tokens = {1, 7, 8, 9};  // no EOS
  CHECK_THROWS_AS(build_labels(p, kIgnoreLabel, s), DataError);
}

TEST_CASE("attention masks for simple layouts") {
  const auto one = build_attention_mask(std::vector<std::int32_t>{0, 0, 0, 0});
  CHECK(one == AttentionMask::causal(4));
  const auto two = build_attention_mask(std::vector<std::int32_t>{0, 0, 1, 1});
  CHECK(two.allowed(1, 0));
  CHECK_FALSE(two.allowed(2, 1));
  CHECK(two.allowed(3, 2));
  CHECK_FALSE(two.allowed(2, 3));
  CHECK(two.row_count(3) == 2);
}

TEST_CASE("attention mask equals the brute-force definition") {
  SplitMix64 rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t t = 1 + rng.below(60);
    std::vector<std::int32_t> seg(t);
    std::int32_t current = 0;
    for (auto& v : seg) {
      if (rng.below(5) == 0) ++current;
      v = current;
    }
    const auto mask = build_attention_mask(seg);
    REQUIRE(mask.size() == t);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < t; ++j) REQUIRE(mask.allowed(i, j) == oracle_allowed(seg, i, j));
    }
  }
}

TEST_CASE("answer positions see their whole segment and nothing before it") {
  const auto s = tiny_specials();
  SplitMix64 rng(31);
  const auto pairs = testing::random_pairs(rng, 6, 2, 6, s);
  const auto packed = pack(pairs, 64, s);
  for (const auto& p : packed) {
    const auto mask = build_attention_mask(p);
    for (std::size_t t = 0; t < p.size(); ++t) {
      if (p.labels[t] == kIgnoreLabel) continue;
      for (std::size_t j = 0; j <= t; ++j) CHECK(mask.allowed(t, j) == (p.segment_ids[j] == p.segment_ids[t]));
    }
  }
}

TEST_CASE("collate pads with PAD, ignored labels and isolated rows") {
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> a = {pair_of({7, 8}, s.answers[0])};
  const std::vector<TokenizedExample> b = {pair_of({7, 8, 9, 10}, s.answers[1]), pair_of({11}, s.answers[2])};
  std::vector<PackedSequence> seqs = {pack(a, 32, s)[0], pack(b, 32, s)[0]};
  const auto batch = collate(seqs, s);
  CHECK(batch.length == seqs[1].size());
  REQUIRE(batch.rows.size() == 2);
  const auto& row = batch.rows[0];
  CHECK(row.size() == batch.length);
  for (std::size_t t = seqs[0].size(); t < batch.length; ++t) {
    CHECK(row.tokens[t] == s.pad);
    CHECK(row.labels[t] == kIgnoreLabel);
    CHECK(row.segment_ids[t] == -1);
    for (std::size_t j = 0; j < batch.length; ++j) {
      CHECK(batch.masks[0].allowed(t, j) == (j == t));
      CHECK(batch.masks[0].allowed(j, t) == (j == t));
    }
  }
  CHECK(batch.rows[1] == seqs[1]);
  CHECK(batch.masks[1] == build_attention_mask(seqs[1]));
}

TEST_CASE("pack dump round-trips") {
  const auto s = tiny_specials();
  SplitMix64 rng(41);
  const auto packed = pack(testing::random_pairs(rng, 25, 1, 10, s), 40, s);
  const auto text = write_pack_dump(packed);
  CHECK(text.rfind("finsent-pack v1\n", 0) == 0);
  CHECK(read_pack_dump(text) == packed);
  CHECK_THROWS_AS(read_pack_dump("finsent-pack v1\nsequences 2\n"), DataError);
}

TEST_CASE("classification framing") {
  const auto s = tiny_specials();
  const auto sample = frame_for_classification(pair_of({7, 8, 9}, s.answers[2], 5), s);
  CHECK(sample.tokens == std::vector<TokenId>{1, 7, 8, 9, 2});
  CHECK(sample.class_id == 2);
  CHECK(sample.source_index == 5);
}
