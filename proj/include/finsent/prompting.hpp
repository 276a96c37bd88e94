// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "finsent/dataset.hpp"

namespace finsent {

struct Exemplar {
  std::string title;
  char answer = 'A';

  bool operator==(const Exemplar&) const = default;
};

/// Few-shot single-choice prompt. Exemplars answer A, B, C in that order.
struct PromptTemplate {
  std::string instruction;
  std::array<Exemplar, 3> exemplars;
  /// Question block; must contain exactly one `{{title}}` and end with
  /// "Answer:".
  std::string question_format;

  /// The shipped template (also stored as assets/prompt_template_v1.txt).
  static PromptTemplate standard();

  /// Text format:
  ///   finsent-template v1
  ///   %% instruction
  ///   ...
  ///   %% question
  ///   ...
  ///   %% exemplar A
  ///   ...            (likewise B and C)
  static PromptTemplate parse(std::string_view text);
  static PromptTemplate load(const std::filesystem::path& path);
  std::string serialize() const;

  void validate() const;
  /// question_format with the title substituted.
  std::string render_question(std::string_view title) const;

  bool operator==(const PromptTemplate&) const = default;
};

/// Which prompt form a training pair's question uses.
enum class PromptStyle { zero_shot, few_shot };

/// instruction, blank line, three answered exemplars separated by blank
/// lines, then the query block ending in "Answer:".
std::string build_fewshot_prompt(const PromptTemplate& tpl, std::string_view title);

/// instruction, blank line, query block ending in "Answer:".
std::string build_sft_prompt(const PromptTemplate& tpl, std::string_view title);

std::string build_prompt(const PromptTemplate& tpl, std::string_view title, PromptStyle style);

/// First standalone A/B/C (either case, not adjacent to another letter or
/// digit). Throws NoAnswerFound.
Sentiment parse_answer(std::string_view generated);
std::optional<Sentiment> try_parse_answer(std::string_view generated);

/// Text after the last "News Title: " up to the end of that line.
std::optional<std::string> extract_last_title(std::string_view prompt);

}  // namespace finsent
