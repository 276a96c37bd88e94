// SPDX-License-Identifier: Apache-2.0
#include "finsent/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "finsent/checkpoint.hpp"
#include "finsent/errors.hpp"

namespace finsent {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double to_double(std::string_view key, std::string_view value) {
  const std::string text(value);
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw ConfigError("config: " + std::string(key) + " expects a number, got '" + text + "'");
  }
  return v;
}

template <class U>
U to_unsigned(std::string_view key, std::string_view value) {
  U v{};
  const auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("config: " + std::string(key) + " expects a non-negative integer, got '" +
                      std::string(value) + "'");
  }
  return v;
}

bool to_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: " + std::string(key) + " expects true or false, got '" + std::string(value) + "'");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(std::string_view text, std::string_view source) {
  KeyValueConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty()) {
      throw ConfigError(std::string(source) + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    cfg.set(std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))));
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void KeyValueConfig::set_assignment(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || trim(assignment.substr(0, eq)).empty()) {
    throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  }
  set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

void KeyValueConfig::merge(const KeyValueConfig& other) {
  for (const auto& [k, v] : other.values_) values_[k] = v;
}

RunConfig RunConfig::resolve(const KeyValueConfig& kv) {
  RunConfig rc;
  auto& t = rc.train;
  for (const auto& [key, value] : kv.values()) {
    const std::string_view k = key;
    if (k.starts_with("model.")) {
      if (!set_model_field(rc.model, k.substr(6), value)) throw ConfigError("config: unknown key '" + key + "'");
    } else if (k == "train.epochs") {
      t.epochs = to_unsigned<std::size_t>(k, value);
    } else if (k == "train.lr_start") {
      t.lr_start = to_double(k, value);
    } else if (k == "train.lr_end") {
      t.lr_end = to_double(k, value);
    } else if (k == "train.grad_clip_norm") {
      t.grad_clip_norm = to_double(k, value);
    } else if (k == "train.micro_batch") {
      t.micro_batch = to_unsigned<std::size_t>(k, value);
    } else if (k == "train.max_seq_len") {
      t.max_seq_len = to_unsigned<std::size_t>(k, value);
    } else if (k == "train.optimizer") {
      if (value == "adamw") {
        t.optimizer = OptimizerKind::adamw;
      } else if (value == "sgd") {
        t.optimizer = OptimizerKind::sgd;
      } else {
        throw ConfigError("config: train.optimizer must be adamw or sgd");
      }
    } else if (k == "train.beta1") {
      t.beta1 = to_double(k, value);
    } else if (k == "train.beta2") {
      t.beta2 = to_double(k, value);
    } else if (k == "train.eps") {
      t.eps = to_double(k, value);
    } else if (k == "train.weight_decay") {
      t.weight_decay = to_double(k, value);
    } else if (k == "train.seed") {
      t.seed = to_unsigned<std::uint64_t>(k, value);
    } else if (k == "train.eval_every") {
      t.eval_every = to_unsigned<std::size_t>(k, value);
    } else if (k == "train.shuffle") {
      t.shuffle = to_bool(k, value);
    } else if (k == "split.test_fraction") {
      rc.split.test_fraction = to_double(k, value);
    } else if (k == "split.val_fraction_of_rest") {
      rc.split.val_fraction_of_rest = to_double(k, value);
    } else if (k == "split.seed") {
      rc.split.seed = to_unsigned<std::uint64_t>(k, value);
    } else if (k == "prompt.template") {
      rc.prompt_template = value;
    } else if (k == "prompt.train_style") {
      if (value == "zero_shot") {
        rc.train_prompt = PromptStyle::zero_shot;
      } else if (value == "few_shot") {
        rc.train_prompt = PromptStyle::few_shot;
      } else {
        throw ConfigError("config: prompt.train_style must be zero_shot or few_shot");
      }
    } else if (k == "eval.reference_rows") {
      rc.reference_rows = to_bool(k, value);
    } else {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  rc.validate();
  return rc;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  split.validate();
  if (train.max_seq_len > model.max_seq_len) {
    throw ConfigError("config: train.max_seq_len exceeds model.max_seq_len");
  }
  if (model.vocab_size < Vocabulary::kMinSize) {
    throw ConfigError("config: model.vocab_size must be at least 259 for a byte-level vocabulary");
  }
}

std::string RunConfig::serialize() const {
  std::string out;
  auto line = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  for (const auto& [k, v] : model_config_entries(model)) line(k, v);
  line("train.epochs", std::to_string(train.epochs));
  line("train.lr_start", fmt(train.lr_start));
  line("train.lr_end", fmt(train.lr_end));
  line("train.grad_clip_norm", fmt(train.grad_clip_norm));
  line("train.micro_batch", std::to_string(train.micro_batch));
  line("train.max_seq_len", std::to_string(train.max_seq_len));
  line("train.optimizer", train.optimizer == OptimizerKind::adamw ? "adamw" : "sgd");
  line("train.beta1", fmt(train.beta1));
  line("train.beta2", fmt(train.beta2));
  line("train.eps", fmt(train.eps));
  line("train.weight_decay", fmt(train.weight_decay));
  line("train.seed", std::to_string(train.seed));
  line("train.eval_every", std::to_string(train.eval_every));
  line("train.shuffle", train.shuffle ? "true" : "false");
  line("split.test_fraction", fmt(split.test_fraction));
  line("split.val_fraction_of_rest", fmt(split.val_fraction_of_rest));
  line("split.seed", std::to_string(split.seed));
  if (!prompt_template.empty()) line("prompt.template", prompt_template);
  line("prompt.train_style", train_prompt == PromptStyle::few_shot ? "few_shot" : "zero_shot");
  line("eval.reference_rows", reference_rows ? "true" : "false");
  return out;
}

}  // namespace finsent
