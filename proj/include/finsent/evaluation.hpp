// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "finsent/dataset.hpp"
#include "finsent/model.hpp"
#include "finsent/packing.hpp"
#include "finsent/prompting.hpp"

namespace finsent {

enum class EvalMode { fewshot, sft, classhead };

std::string_view eval_mode_name(EvalMode mode);
EvalMode parse_eval_mode(std::string_view text);

struct PredictionRecord {
  std::size_t source_index = 0;
  Sentiment gold = Sentiment::neutral;
  std::optional<Sentiment> pred;  // empty when the answer could not be parsed
  std::optional<double> confidence;

  bool operator==(const PredictionRecord&) const = default;
};

struct EvalReport {
  EvalMode mode = EvalMode::sft;
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  /// rows = gold, cols = pred. Unparsed predictions have no column, so
  /// the entries sum to n - unparsed_count.
  std::array<std::array<std::size_t, 3>, 3> confusion{};
  std::vector<PredictionRecord> per_example;
  std::size_t unparsed_count = 0;

  std::string to_json() const;
  /// Inverse of to_json.
  static EvalReport from_json(std::string_view text);
  bool operator==(const EvalReport&) const = default;
};

/// Builds a report from per-example records, sorted by source_index.
EvalReport make_report(EvalMode mode, std::vector<PredictionRecord> records);

/// Examples to score plus their dataset indices.
struct EvalSet {
  std::vector<LabeledExample> examples;
  std::vector<std::size_t> source_indices;
};

/// Prompt (few-shot for fewshot mode, zero-shot for sft), constrained
/// decode, letter -> label, compare to gold. Parallel over examples;
/// records are merged in source_index order.
template <class T>
EvalReport evaluate_generation(const Checkpoint<T>& ckpt, const PromptTemplate& tpl, const EvalSet& testset,
                               const Vocabulary& vocab, EvalMode mode);

/// Same as evaluate_generation on already tokenized prompts.
template <class T>
EvalReport evaluate_generation_tokens(const Checkpoint<T>& ckpt, std::span<const TokenizedExample> examples,
                                      const SpecialTokens& specials, EvalMode mode);

/// pred = argmax of the class logits (lowest class id on ties),
/// confidence = the largest softmax probability.
template <class T>
EvalReport evaluate_classhead(const Checkpoint<T>& ckpt, const PromptTemplate& tpl, const EvalSet& testset,
                              const Vocabulary& vocab);

template <class T>
EvalReport evaluate_classhead_samples(const Checkpoint<T>& ckpt, std::span<const ClassSample> samples,
                                      const SpecialTokens& specials);

/// Scores free-form generated text with parse_answer. Text with no
/// answer letter counts as wrong and is tallied in unparsed_count.
EvalReport report_from_generations(EvalMode mode, std::span<const std::size_t> source_indices,
                                   std::span<const Sentiment> gold, std::span<const std::string> generations);

/// Lowest index among the maxima.
template <class T>
int argmax3(const std::array<T, 3>& values);

/// Fixed-width accuracy table, one row per report ordered Base, SFT,
/// ClassHead. With reference_rows, published baseline accuracies follow
/// in a separately labelled block.
std::string compare_report(std::span<const EvalReport> reports, bool reference_rows = false);

}  // namespace finsent
