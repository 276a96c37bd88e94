// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "finsent/errors.hpp"
#include "finsent/evaluation.hpp"
#include "finsent/training.hpp"
#include "support.hpp"

using namespace finsent;
using testing::tiny_config;
using testing::tiny_specials;

namespace {

// The answer is fixed by the first prompt token; the rest is noise.
std::vector<TokenizedExample> keyed_pairs(std::size_t n, std::uint64_t seed) {
  const auto s = tiny_specials();
  SplitMix64 rng(seed);
  std::vector<TokenizedExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto cls = rng.below(3);
    out[i].prompt_tokens = {static_cast<TokenId>(7 + cls)};
    const auto noise = testing::random_plain_tokens(rng, 1 + rng.below(4), 10, 16);
    out[i].prompt_tokens.insert(out[i].prompt_tokens.end(), noise.begin(), noise.end());
    out[i].answer_token = s.answers[cls];
    out[i].source_index = i;
  }
  return out;
}

TrainConfig fast_config() {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr_start = 1e-2;
  cfg.lr_end = 1e-3;
  cfg.micro_batch = 2;
  cfg.max_seq_len = 32;
  cfg.eval_every = 10;
  cfg.weight_decay = 0.0;
  return cfg;
}

ModelConfig small_model() {
  auto m = tiny_config(HeadType::lm);
  m.d_model = 16;
  m.d_ff = 32;
  return m;
}

SftData sft_data(std::size_t n_train, std::size_t n_val) {
  const auto s = tiny_specials();
  return {pack(keyed_pairs(n_train, 1), 32, s), keyed_pairs(n_val, 2), s};
}

}  // namespace

TEST_CASE("cosine schedule endpoints and shape") {
  TrainConfig cfg;
  CHECK(lr_at_step(0, 100, cfg) == 3e-5);
  CHECK(lr_at_step(100, 100, cfg) == 3e-6);
  CHECK(lr_at_step(50, 100, cfg) == doctest::Approx(1.65e-5).epsilon(1e-12));
  const double expected = 3e-6 + 0.5 * (3e-5 - 3e-6) * (1 + std::cos(std::numbers::pi * 0.3));
  CHECK(lr_at_step(30, 100, cfg) == doctest::Approx(expected).epsilon(1e-14));
  for (std::size_t s = 1; s <= 100; ++s) CHECK(lr_at_step(s, 100, cfg) <= lr_at_step(s - 1, 100, cfg));
  CHECK_THROWS_AS(lr_at_step(101, 100, cfg), ConfigError);
  CHECK_THROWS_AS(lr_at_step(0, 0, cfg), ConfigError);
}

TEST_CASE("gradient clipping") {
  ParameterSet<double> g;
  g.add("a", {2}).values = {0.3, 0.4};
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(0.5));
  CHECK(g.at("a").values == std::vector<double>{0.3, 0.4});

  g.at("a").values = {2.4, 3.2};  // norm 4
  g.add("b", {1}).values = {0.0};
  CHECK(clip_gradients(g, 1.0) == doctest::Approx(4.0));
  CHECK(g.at("a").values[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(g.at("a").values[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(std::abs(global_norm(g) - 1.0) < 1e-9);

  g.fill(0.0);
  CHECK(clip_gradients(g, 1.0) == 0.0);
  CHECK(global_norm(g) == 0.0);

  g.at("b").values[0] = std::nan("");
  CHECK_THROWS_AS(clip_gradients(g, 1.0), DivergenceError);
}

TEST_CASE("AdamW first step follows the closed form") {
  ParameterSet<double> p;
  p.add("w", {1, 2}).values = {1.0, -2.0};
  p.add("b", {2}).values = {0.5, 0.5};
  auto g = p.zeros_like();
  g.at("w").values = {0.1, -0.3};
  g.at("b").values = {2.0, 0.0};
  TrainConfig cfg;
  Optimizer<double> opt(cfg, p);
  const double lr = 0.01;
  opt.step(p, g, lr);
  // After one step m_hat = g and v_hat = g^2.
  auto expect = [&](double p0, double g0, double decay) { return p0 - lr * (g0 / (std::abs(g0) + 1e-8) + decay * p0); };
  CHECK(p.at("w").values[0] == doctest::Approx(expect(1.0, 0.1, 0.1)).epsilon(1e-12));
  CHECK(p.at("w").values[1] == doctest::Approx(expect(-2.0, -0.3, 0.1)).epsilon(1e-12));
  CHECK(p.at("b").values[0] == doctest::Approx(expect(0.5, 2.0, 0.0)).epsilon(1e-12));
  CHECK(p.at("b").values[1] == 0.5);
  REQUIRE(opt.state().has_value());
  CHECK(opt.state()->updates == 1);

  cfg.optimizer = OptimizerKind::sgd;
  Optimizer<double> sgd(cfg, p);
  const double before = p.at("b").values[0];
  sgd.step(p, g, 0.1);
  CHECK(p.at("b").values[0] == doctest::Approx(before - 0.2));
  CHECK_FALSE(sgd.state().has_value());
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr_end = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.micro_batch = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = TrainConfig{};
  cfg.grad_clip_norm = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(total_steps(10, TrainConfig{}) == 5 * 3);
}

TEST_CASE("train log lines") {
  TrainLogEntry step{3, 1e-4, 0.5, std::nullopt};
  CHECK(step.to_json() == R"({"step":3,"lr":0.0001,"loss":0.5})");
  TrainLogEntry eval{4, std::nullopt, std::nullopt, 0.25};
  CHECK(eval.to_json() == R"({"step":4,"val_accuracy":0.25})");
  TrainLog log;
  log.entries = {step, eval};
  log.best_val_accuracy = 0.25;
  log.best_step = 4;
  CHECK(log.to_jsonl() == step.to_json() + "\n" + eval.to_json() + "\n");
  CHECK(log.summary() == "best_val_accuracy=0.2500 at_step=4");
  CHECK(log.final_val_accuracy() == 0.25);
}

TEST_CASE("zero epochs return the initial checkpoint") {
  auto cfg = fast_config();
  cfg.epochs = 0;
  const auto data = sft_data(12, 6);
  const auto result = train_sft<double>(data, small_model(), cfg);
  CHECK(result.checkpoint.params == init<double>(small_model()).params);
  CHECK(result.checkpoint.step == 0);
}

TEST_CASE("sft training learns a keyed task, deterministically") {
  const auto data = sft_data(24, 12);
  const auto cfg = fast_config();
  std::size_t sink_calls = 0;
  const auto a = train_sft<double>(data, small_model(), cfg, [&](const TrainLogEntry&) { ++sink_calls; });
  const auto b = train_sft<double>(data, small_model(), cfg);
  CHECK(a.log == b.log);
  CHECK(a.checkpoint == b.checkpoint);
  CHECK(sink_calls == a.log.entries.size());

  std::size_t steps = 0;
  double best = -1;
  for (const auto& e : a.log.entries) {
    if (e.loss) {
      ++steps;
      CHECK(std::isfinite(*e.loss));
      CHECK(e.step == steps);
    }
    if (e.val_accuracy) best = std::max(best, *e.val_accuracy);
  }
  CHECK(steps == total_steps(data.train.size(), cfg));
  CHECK(a.log.entries.front().step == 0);
  CHECK(a.log.entries.front().val_accuracy.has_value());
  REQUIRE(a.log.best_val_accuracy.has_value());
  CHECK(*a.log.best_val_accuracy == best);
  CHECK(std::stod(a.checkpoint.metadata.at("val_accuracy")) == best);
  CHECK(a.checkpoint.step == a.log.best_step);

  std::vector<TokenizedExample> train_pairs;
  for (const auto& ex : keyed_pairs(24, 1)) train_pairs.push_back(ex);
  const auto train_acc = evaluate_generation_tokens(a.checkpoint, train_pairs, data.specials, EvalMode::sft);
  CHECK(train_acc.accuracy == 1.0);
}

TEST_CASE("class-head training learns a keyed task") {
  const auto s = tiny_specials();
  ClassData data;
  data.specials = s;
  for (const auto& ex : keyed_pairs(24, 1)) data.train.push_back(frame_for_classification(ex, s));
  for (const auto& ex : keyed_pairs(12, 2)) data.val.push_back(frame_for_classification(ex, s));
  auto cfg = fast_config();
  cfg.epochs = 15;
  const auto r = train_classhead<double>(data, small_model(), cfg);
  CHECK(r.checkpoint.config.head_type == HeadType::classification);
  CHECK(evaluate_classhead_samples(r.checkpoint, data.train, s).accuracy == 1.0);
}

TEST_CASE("divergence is reported with step and learning rate") {
  auto cfg = fast_config();
  cfg.optimizer = OptimizerKind::sgd;
  cfg.lr_start = 1e300;
  cfg.lr_end = 1e300;
  cfg.grad_clip_norm = 1e300;
  try {
    train_sft<double>(sft_data(12, 0), small_model(), cfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step") != std::string::npos);
    CHECK(msg.find("lr 1e+300") != std::string::npos);
  }
}

TEST_CASE("empty training data is an error") {
  SftData empty;
  empty.specials = tiny_specials();
  CHECK_THROWS_AS(train_sft<double>(empty, small_model(), fast_config()), DataError);
}
