// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "finsent/errors.hpp"
#include "finsent/model.hpp"
#include "finsent/packing.hpp"
#include "support.hpp"

using namespace finsent;
using testing::tiny_config;
using testing::tiny_specials;

namespace {

template <class T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

template <class T>
std::vector<T> row_of(const Matrix<T>& m, std::size_t r) {
  return {m.row(r).begin(), m.row(r).end()};
}

}  // namespace

TEST_CASE("init is deterministic and validated") {
  const auto cfg = tiny_config(HeadType::lm);
  CHECK(init<double>(cfg) == init<double>(cfg));
  auto other = cfg;
  other.init_seed = 100;
  CHECK_FALSE(init<double>(other) == init<double>(cfg));
  auto bad = cfg;
  bad.d_model = 8;
  bad.n_heads = 3;
  CHECK_THROWS_AS(init<double>(bad), ConfigError);
  CHECK_THROWS_AS(init<float>(cfg), ConfigError);  // float_width is 64
}

TEST_CASE("parameter layout") {
  auto cfg = tiny_config(HeadType::lm);
  const auto lm = init<double>(cfg);
  CHECK(lm.params.at("tok_emb").shape == std::vector<std::size_t>{16, 8});
  CHECK(lm.params.at("pos_emb").shape == std::vector<std::size_t>{64, 8});
  CHECK(lm.params.at("lm_head.w").shape == std::vector<std::size_t>{8, 16});
  CHECK(lm.params.find("cls_head.w") == nullptr);
  cfg.head_type = HeadType::classification;
  const auto cls = init<double>(cfg);
  CHECK(cls.params.at("cls_head.w").shape == std::vector<std::size_t>{8, 3});
  CHECK(cls.params.find("lm_head.w") == nullptr);
  for (double g : cls.params.at("layers.0.ln1.gain").values) CHECK(g == 1.0);
  for (double b : cls.params.at("layers.0.attn.bq").values) CHECK(b == 0.0);
}

TEST_CASE("untrained forward is finite and deterministic") {
  const auto ckpt = init<float>(tiny_config(HeadType::lm, FloatWidth::f32));
  SplitMix64 rng(1);
  const auto tokens = testing::random_plain_tokens(rng, 20, 0, 16);
  const auto a = forward_lm(ckpt, tokens, AttentionMask::causal(tokens.size()));
  const auto b = forward_lm(ckpt, tokens, AttentionMask::causal(tokens.size()));
  CHECK(a.values == b.values);
  for (float v : a.values) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(forward_lm(ckpt, tokens, AttentionMask::causal(3)), ShapeError);
  std::vector<TokenId> bad = {1, 16};
  CHECK_THROWS_AS(forward_lm(ckpt, bad, AttentionMask::causal(2)), ShapeError);
  std::vector<TokenId> too_long(65, 7);
  CHECK_THROWS_AS(forward_lm(ckpt, too_long, AttentionMask::causal(65)), ShapeError);
}

TEST_CASE("T = 1 and the identity mask reduce to single-token forwards") {
  auto ckpt = init<double>(tiny_config(HeadType::lm));
  testing::jitter(ckpt, 5);
  const std::vector<TokenId> tokens = {9, 3, 12, 7, 7};
  AttentionMask identity(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) identity.set(i, i, true);
  const auto all = forward_lm(ckpt, tokens, identity);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::vector<TokenId> one = {tokens[i]};
    const auto single = forward_lm(ckpt, one, AttentionMask::causal(1));
    CHECK(max_abs_diff<double>(all.row(i), single.row(0)) < 1e-12);
  }
}

TEST_CASE_TEMPLATE("packed answer logits equal isolated forwards", T, float, double) {
  const auto width = sizeof(T) == 8 ? FloatWidth::f64 : FloatWidth::f32;
  const double tol = sizeof(T) == 8 ? 1e-10 : 1e-5;
  auto ckpt = init<T>(tiny_config(HeadType::lm, width));
  testing::jitter(ckpt, 6);
  const auto s = tiny_specials();
  SplitMix64 rng(7);
  const auto pairs = testing::random_pairs(rng, 30, 1, 12, s);
  const auto packed = pack(pairs, 48, s);
  CHECK(packed.size() < pairs.size());
  std::size_t compared = 0;
  for (const auto& p : packed) {
    const auto logits = forward_lm(ckpt, p.tokens, build_attention_mask(p));
    std::size_t pair = 0;
    for (std::size_t t = 0; t < p.size(); ++t) {
      if (p.labels[t] == kIgnoreLabel) continue;
      const auto& ex = pairs[p.source_indices[pair++]];
      std::vector<TokenId> alone = {s.bos};
      alone.insert(alone.end(), ex.prompt_tokens.begin(), ex.prompt_tokens.end());
      alone.push_back(s.eos);
      const auto iso = forward_lm(ckpt, alone, AttentionMask::causal(alone.size()));
      CHECK(max_abs_diff<T>(logits.row(t), iso.row(alone.size() - 1)) < tol);
      ++compared;
    }
  }
  CHECK(compared == pairs.size());
}

TEST_CASE("segments are isolated from each other") {
  auto ckpt = init<double>(tiny_config(HeadType::lm));
  testing::jitter(ckpt, 8);
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> pairs = {{{7, 8, 9}, s.answers[0], 0}, {{10, 11}, s.answers[1], 1}};
  auto p = pack(pairs, 32, s)[0];
  const auto mask = build_attention_mask(p);
  const auto before = forward_lm(ckpt, p.tokens, mask);
  for (std::size_t t = 0; t < 6; ++t) p.tokens[t] = 13;  // overwrite segment 0
  const auto after = forward_lm(ckpt, p.tokens, mask);
  for (std::size_t t = 6; t < p.size(); ++t) CHECK(row_of(before, t) == row_of(after, t));
}

TEST_CASE("absolute positions break the packing equivalence") {
  auto cfg = tiny_config(HeadType::lm);
  cfg.segment_local_positions = false;
  auto ckpt = init<double>(cfg);
  testing::jitter(ckpt, 9);
  const auto s = tiny_specials();
  const std::vector<TokenizedExample> pairs = {{{7, 8, 9}, s.answers[0], 0}, {{10, 11}, s.answers[1], 1}};
  const auto p = pack(pairs, 32, s)[0];
  const auto packed = forward_lm(ckpt, p.tokens, build_attention_mask(p));
  const std::vector<TokenId> alone = {s.bos, 10, 11, s.eos};
  const auto iso = forward_lm(ckpt, alone, AttentionMask::causal(4));
  CHECK(max_abs_diff<double>(packed.row(p.size() - 2), iso.row(3)) > 1e-6);
}

TEST_CASE("loss_lm") {
  Matrix<double> uniform(3, 16);
  const std::vector<TokenId> none = {-1, -1, -1};
  const auto zero = loss_lm(uniform, none);
  CHECK(zero.value == 0.0);
  CHECK(zero.counted == 0);
  const std::vector<TokenId> one = {-1, 5, -1};
  const auto l = loss_lm(uniform, one);
  CHECK(l.counted == 1);
  CHECK(l.value == doctest::Approx(std::log(16.0)).epsilon(1e-14));
  const std::vector<TokenId> out_of_range = {-1, 16, -1};
  CHECK_THROWS_AS(loss_lm(uniform, out_of_range), ShapeError);
  const std::vector<TokenId> short_labels = {5};
  CHECK_THROWS_AS(loss_lm(uniform, short_labels), ShapeError);
}

TEST_CASE("loss_cls") {
  const std::array<double, 3> flat = {0.3, 0.3, 0.3};
  for (int c = 0; c < 3; ++c) CHECK(loss_cls(flat, c) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(loss_cls(std::array<double, 3>{10, -10, -10}, 0) < 1e-8);
  CHECK(loss_cls(std::array<double, 3>{-1000, 1000, 0}, 0) > 0);
  CHECK(std::isfinite(loss_cls(std::array<double, 3>{-1000, 1000, 0}, 0)));
  CHECK_THROWS(loss_cls(flat, 3));
}

TEST_CASE("classification forward") {
  auto ckpt = init<double>(tiny_config(HeadType::classification));
  testing::jitter(ckpt, 10);
  const auto s = tiny_specials();
  const std::vector<TokenId> tokens = {s.bos, 7, 8, 9, s.eos};
  const auto logits = forward_cls(ckpt, tokens, s);
  CHECK(forward_cls(ckpt, tokens, s) == logits);
  const auto p = softmax(logits);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : p) CHECK(v >= 0.0);
  const std::vector<TokenId> no_eos = {s.bos, 7, 8};
  CHECK_THROWS(forward_cls(ckpt, no_eos, s));
  const std::vector<TokenId> no_bos = {7, 8, s.eos};
  CHECK_THROWS(forward_cls(ckpt, no_bos, s));
  CHECK_THROWS(forward_lm(ckpt, tokens, AttentionMask::causal(tokens.size())));
}

TEST_CASE("gradients match finite differences") {
  const auto s = tiny_specials();
  const double step = 1e-5;
  const double floor = 1e-3;

  SUBCASE("lm head on a packed sequence") {
    auto ckpt = init<double>(tiny_config(HeadType::lm));
    testing::jitter(ckpt, 11);
    SplitMix64 rng(12);
    const auto p = pack(testing::random_pairs(rng, 3, 2, 4, s), 32, s)[0];
    const auto mask = build_attention_mask(p);
    const auto g = backward_lm(ckpt, p.tokens, mask, p.labels);
    CHECK(g.counted == 3);
    const auto check = testing::finite_difference_check(
        ckpt, g.values, [&](const Checkpoint<double>& c) { return loss_lm(forward_lm(c, p.tokens, mask), p.labels).value; },
        step, floor);
    INFO(check.worst);
    CHECK(check.max_rel_error < 1e-4);
  }
  SUBCASE("tied lm head") {
    auto cfg = tiny_config(HeadType::lm);
    cfg.tie_lm_head = true;
    auto ckpt = init<double>(cfg);
    testing::jitter(ckpt, 13);
    const std::vector<TokenId> tokens = {s.bos, 9, 10, s.eos, s.answers[2]};
    const std::vector<TokenId> labels = {-1, -1, -1, s.answers[2], -1};
    const auto mask = AttentionMask::causal(tokens.size());
    const auto g = backward_lm(ckpt, tokens, mask, labels);
    const auto check = testing::finite_difference_check(
        ckpt, g.values, [&](const Checkpoint<double>& c) { return loss_lm(forward_lm(c, tokens, mask), labels).value; },
        step, floor);
    INFO(check.worst);
    CHECK(check.max_rel_error < 1e-4);
  }
  SUBCASE("classification head") {
    auto ckpt = init<double>(tiny_config(HeadType::classification));
    testing::jitter(ckpt, 14);
    const std::vector<TokenId> tokens = {s.bos, 9, 10, 11, s.eos};
    const auto g = backward_cls(ckpt, tokens, 1, s);
    const auto check = testing::finite_difference_check(
        ckpt, g.values, [&](const Checkpoint<double>& c) { return loss_cls(forward_cls(c, tokens, s), 1); }, step,
        floor);
    INFO(check.worst);
    CHECK(check.max_rel_error < 1e-4);
  }
}

TEST_CASE("gradients without a path are exactly zero") {
  auto ckpt = init<double>(tiny_config(HeadType::lm));
  testing::jitter(ckpt, 15);
  const auto s = tiny_specials();
  const std::vector<TokenId> tokens = {s.bos, 9, 10, s.eos, s.answers[0]};
  const auto mask = AttentionMask::causal(tokens.size());
  const std::vector<TokenId> ignored(tokens.size(), kIgnoreLabel);
  const auto none = backward_lm(ckpt, tokens, mask, ignored);
  CHECK(none.counted == 0);
  CHECK(none.loss == 0.0);
  for (const auto& t : none.values) {
    for (double v : t.values) REQUIRE(v == 0.0);
  }
  const std::vector<TokenId> labels = {-1, -1, -1, s.answers[0], -1};
  const auto g = backward_lm(ckpt, tokens, mask, labels);
  const auto& emb = g.values.at("tok_emb");
  for (TokenId absent : {0, 7, 12, 15}) {
    for (std::size_t c = 0; c < 8; ++c) CHECK(emb.values[static_cast<std::size_t>(absent) * 8 + c] == 0.0);
  }
  // The answer token itself sits after the only counted position.
  for (std::size_t c = 0; c < 8; ++c) CHECK(emb.values[static_cast<std::size_t>(s.answers[0]) * 8 + c] == 0.0);
}

TEST_CASE("packed classification gradients equal the mean of single-sample gradients") {
  auto ckpt = init<double>(tiny_config(HeadType::classification));
  testing::jitter(ckpt, 16);
  const auto s = tiny_specials();
  SplitMix64 rng(17);
  const auto pairs = testing::random_pairs(rng, 4, 2, 6, s);
  std::vector<TokenId> tokens;
  std::vector<std::int32_t> segs;
  std::vector<std::size_t> pools;
  std::vector<int> classes;
  auto acc = ckpt.params.zeros_like();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto sample = frame_for_classification(pairs[i], s);
    accumulate_cls_gradients(ckpt, sample.tokens, sample.class_id, 0.25, acc, s);
    tokens.insert(tokens.end(), sample.tokens.begin(), sample.tokens.end());
    segs.insert(segs.end(), sample.tokens.size(), static_cast<std::int32_t>(i));
    pools.push_back(tokens.size() - 1);
    classes.push_back(sample.class_id);
  }
  const auto packed = backward_cls_packed(ckpt, tokens, build_attention_mask(segs), pools, classes);
  double worst = 0;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    worst = std::max(worst, max_abs_diff<double>(acc[i].values, packed.values[i].values));
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("constrained decoding") {
  const std::vector<double> row = {0, 9, 0, 0, 1.0, 2.0, 1.5, 0};
  const std::vector<TokenId> letters = {4, 5, 6};
  CHECK(constrained_argmax<double>(row, letters) == 5);  // id 1 is larger but not a letter
  const std::vector<double> tie = {0, 0, 0, 0, 3.0, 1.0, 3.0};
  CHECK(constrained_argmax<double>(tie, letters) == 4);
  const std::vector<TokenId> reversed = {6, 5, 4};
  CHECK(constrained_argmax<double>(tie, reversed) == 4);
  CHECK_THROWS(constrained_argmax<double>(tie, std::vector<TokenId>{}));
}

TEST_CASE("generate_answer picks the best letter of the EOS row") {
  auto ckpt = init<double>(tiny_config(HeadType::lm));
  testing::jitter(ckpt, 18);
  const auto s = tiny_specials();
  SplitMix64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    const auto prompt = testing::random_plain_tokens(rng, 1 + rng.below(10));
    std::vector<TokenId> framed = {s.bos};
    framed.insert(framed.end(), prompt.begin(), prompt.end());
    framed.push_back(s.eos);
    const auto logits = forward_lm(ckpt, framed, AttentionMask::causal(framed.size()));
    const auto row = logits.row(framed.size() - 1);
    const auto expected = constrained_argmax<double>(row, s.answers);
    CHECK(generate_answer(ckpt, prompt, s) == expected);
    const auto three = answer_logits(ckpt, prompt, s);
    for (std::size_t a = 0; a < 3; ++a) {
      CHECK(three[a] == doctest::Approx(row[static_cast<std::size_t>(s.answers[a])]).epsilon(1e-12));
    }
  }
}

TEST_CASE("over-long prompts keep their tail") {
  const auto s = tiny_specials();
  std::vector<TokenId> prompt(100);
  for (std::size_t i = 0; i < prompt.size(); ++i) prompt[i] = static_cast<TokenId>(7 + i % 9);
  const auto framed = frame_prompt(prompt, s, 64);
  CHECK(framed.size() == 64);
  CHECK(framed.front() == s.bos);
  CHECK(framed.back() == s.eos);
  CHECK(framed[1] == prompt[100 - 62]);
  auto ckpt = init<double>(tiny_config(HeadType::lm));
  CHECK_NOTHROW(generate_answer(ckpt, prompt, s));
}
