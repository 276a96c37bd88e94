// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "finsent/dataset.hpp"
#include "finsent/model.hpp"
#include "finsent/prompting.hpp"
#include "finsent/training.hpp"

namespace finsent {

/// Flat "key = value" file. '#' starts a comment line; blank lines are
/// ignored; later assignments override earlier ones.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text, std::string_view source = "<config>");
  static KeyValueConfig load(const std::filesystem::path& path);

  /// "key=value" as given on the command line.
  void set_assignment(std::string_view assignment);
  void set(std::string key, std::string value) { values_[std::move(key)] = std::move(value); }
  void merge(const KeyValueConfig& other);

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Everything a run depends on.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SplitSpec split;
  /// Empty means the built-in template.
  std::string prompt_template;
  PromptStyle train_prompt = PromptStyle::zero_shot;
  bool reference_rows = false;

  /// Defaults overridden by kv. Unknown keys and bad values throw
  /// ConfigError; the result is validated.
  static RunConfig resolve(const KeyValueConfig& kv);
  void validate() const;
  /// Every key in a fixed order; parse(serialize()) == *this.
  std::string serialize() const;

  bool operator==(const RunConfig&) const = default;
};

}  // namespace finsent
