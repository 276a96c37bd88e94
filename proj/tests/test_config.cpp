// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "finsent/config.hpp"
#include "finsent/errors.hpp"
#include "support.hpp"

using namespace finsent;

#ifndef FINSENT_SOURCE_DIR
#error "FINSENT_SOURCE_DIR must point at the repository root"
#endif

TEST_CASE("key/value parsing") {
  const auto kv = KeyValueConfig::parse("# comment\n\n train.epochs = 3 \nmodel.d_model=64\ntrain.epochs = 4\n");
  CHECK(kv.values().size() == 2);
  CHECK(kv.values().at("train.epochs") == "4");
  CHECK(kv.values().at("model.d_model") == "64");
  CHECK_THROWS_AS(KeyValueConfig::parse("just words\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("= 3\n"), ConfigError);

  auto over = kv;
  over.set_assignment("train.epochs=9");
  CHECK(over.values().at("train.epochs") == "9");
  CHECK_THROWS_AS(over.set_assignment("no-equals"), ConfigError);
  auto merged = kv;
  merged.merge(over);
  CHECK(merged.values().at("train.epochs") == "9");
  CHECK_THROWS_AS(KeyValueConfig::load("/nonexistent/finsent.conf"), ConfigError);
}

TEST_CASE("resolve applies values and rejects bad ones") {
  KeyValueConfig kv;
  kv.set("train.lr_start", "0.001");
  kv.set("train.lr_end", "0.0001");
  kv.set("train.optimizer", "sgd");
  kv.set("prompt.train_style", "few_shot");
  kv.set("model.n_layers", "3");
  const auto rc = RunConfig::resolve(kv);
  CHECK(rc.train.lr_start == 0.001);
  CHECK(rc.train.optimizer == OptimizerKind::sgd);
  CHECK(rc.train_prompt == PromptStyle::few_shot);
  CHECK(rc.model.n_layers == 3);

  auto bad = [](const char* key, const char* value) {
    KeyValueConfig k;
    k.set(key, value);
    return k;
  };
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.nonsense", "1")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("model.nonsense", "1")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.epochs", "-1")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.lr_start", "fast")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.optimizer", "lion")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.lr_end", "1")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("model.vocab_size", "100")), ConfigError);
  CHECK_THROWS_AS(RunConfig::resolve(bad("train.max_seq_len", "999999")), ConfigError);
}

TEST_CASE("serialize and resolve are inverse") {
  RunConfig rc;
  rc.train.lr_start = 1.0 / 3.0;
  rc.train.lr_end = 1e-7;
  rc.split.seed = 1234567;
  rc.reference_rows = true;
  rc.prompt_template = "/tmp/some template.txt";
  const auto text = rc.serialize();
  const auto back = RunConfig::resolve(KeyValueConfig::parse(text));
  CHECK(back == rc);
  CHECK(back.serialize() == text);
}

TEST_CASE("shipped presets resolve") {
  const std::filesystem::path dir = std::filesystem::path(FINSENT_SOURCE_DIR) / "configs";
  for (const char* name : {"toy.conf", "full.conf"}) {
    CAPTURE(name);
    const auto rc = RunConfig::resolve(KeyValueConfig::load(dir / name));
    CHECK_NOTHROW(rc.validate());
  }
  const auto full = RunConfig::resolve(KeyValueConfig::load(dir / "full.conf"));
  CHECK(full.train.lr_start == 3e-5);
  CHECK(full.train.lr_end == 3e-6);
  CHECK(full.train.epochs == 5);
  CHECK(full.model.max_seq_len == 4096);
}
