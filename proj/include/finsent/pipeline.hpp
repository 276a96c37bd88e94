// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <exception>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "finsent/config.hpp"
#include "finsent/evaluation.hpp"
#include "finsent/packing.hpp"

namespace finsent {

// Run directory layout:
//   dataset.txt           normalized UTF-8 copy of the input
//   splits.json           train/val/test indices
//   vocab.txt             tokenizer
//   {train,val,test}.pack packed token caches (pairs that fit)
//   runconfig.txt         resolved configuration of the last command
//   checkpoint_base.fsnt  untrained LM (few-shot baseline)
//   checkpoint_{sft,classhead}.fsnt, trainlog_{sft,classhead}.jsonl
//   report_<mode>.json, report.json, report.txt

/// Holds <dir>/.finsent.lock for its lifetime.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct PrepareOptions {
  std::filesystem::path data;
  std::filesystem::path out;
  KeyValueConfig config;
};

struct TrainOptions {
  EvalMode mode = EvalMode::sft;  // sft or classhead
  std::filesystem::path out;
  KeyValueConfig config;
};

struct EvalOptions {
  EvalMode mode = EvalMode::sft;
  std::filesystem::path out;
  /// Defaults to the run directory's checkpoint for the mode.
  std::optional<std::filesystem::path> checkpoint;
  std::string split = "test";
  std::optional<double> min_accuracy;
};

/// Defaults, then <out>/runconfig.txt if present, then overrides.
RunConfig resolve_run_config(const std::filesystem::path& out, const KeyValueConfig& overrides);

PromptTemplate load_template(const RunConfig& rc);

void cmd_prepare(const PrepareOptions& opts, std::ostream& log);
/// Returns the training log; prints its summary line to log.
TrainLog cmd_train(const TrainOptions& opts, std::ostream& log);
/// Throws AccuracyGateFailed after writing the reports when accuracy is
/// below min_accuracy.
EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log);
std::string cmd_prompt(std::string_view title, bool fewshot, const std::optional<std::filesystem::path>& tpl);

/// Tokenized zero-shot (or few-shot) pairs for the given dataset indices.
/// Pairs longer than max_seq_len - 3 are skipped when skip_too_long is
/// set and counted in *skipped.
std::vector<TokenizedExample> tokenize_split(const std::vector<LabeledExample>& examples,
                                             const std::vector<std::size_t>& indices, const Vocabulary& vocab,
                                             const PromptTemplate& tpl, std::size_t max_seq_len, PromptStyle style,
                                             bool skip_too_long, std::size_t* skipped = nullptr);

/// BPE corpus: the few-shot prompt plus every training prompt.
std::vector<std::string> tokenizer_corpus(const PromptTemplate& tpl, const std::vector<LabeledExample>& examples,
                                          const std::vector<std::size_t>& train_indices);

/// 0 success, 2 config, 3 data, 4 divergence, 5 accuracy gate.
int exit_code_for(const std::exception& e);

/// Command-line front end; argv[0] is the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace finsent
