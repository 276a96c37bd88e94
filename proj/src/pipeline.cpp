// SPDX-License-Identifier: Apache-2.0
#include "finsent/pipeline.hpp"

#include <cerrno>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "finsent/checkpoint.hpp"
#include "finsent/errors.hpp"

namespace finsent {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::exists(path)) throw DataError(path.string() + " not found; " + what);
}

std::string checkpoint_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::fewshot:
      return "checkpoint_base.fsnt";
    case EvalMode::sft:
      return "checkpoint_sft.fsnt";
    case EvalMode::classhead:
      return "checkpoint_classhead.fsnt";
  }
  return "";
}

struct RunData {
  std::vector<LabeledExample> examples;
  SplitIndices splits;
  Vocabulary vocab;
};

RunData load_run(const fs::path& out) {
  require_file(out / "dataset.txt", "run 'prepare' first");
  require_file(out / "splits.json", "run 'prepare' first");
  require_file(out / "vocab.txt", "run 'prepare' first");
  RunData d;
  d.examples = parse_phrasebank(read_file(out / "dataset.txt"), (out / "dataset.txt").string());
  d.splits = parse_splits_manifest(read_file(out / "splits.json"), d.examples.size());
  d.vocab = Vocabulary::load(out / "vocab.txt");
  return d;
}

const std::vector<std::size_t>& split_by_name(const SplitIndices& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

void write_packs(const fs::path& out, const RunData& d, const RunConfig& rc, const PromptTemplate& tpl,
                 std::ostream& log) {
  const auto specials = d.vocab.specials();
  const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
      {"train", &d.splits.train}, {"val", &d.splits.val}, {"test", &d.splits.test}};
  for (const auto& [name, indices] : parts) {
    std::size_t skipped = 0;
    const auto tokenized =
        tokenize_split(d.examples, *indices, d.vocab, tpl, rc.train.max_seq_len, rc.train_prompt, true, &skipped);
    const auto packed = pack(tokenized, rc.train.max_seq_len, specials);
    write_file(out / (std::string(name) + ".pack"), write_pack_dump(packed));
    log << name << ": " << indices->size() << " examples, " << packed.size() << " packed sequences";
    if (skipped > 0) log << ", " << skipped << " too long to pack";
    log << "\n";
  }
}

template <class T>
void save_typed(const Checkpoint<T>& ckpt, const fs::path& path) {
  save_checkpoint(ckpt, path);
}

template <class T>
TrainLog train_typed(const TrainOptions& opts, const RunConfig& rc, const RunData& d, const PromptTemplate& tpl,
                     std::ostream& log) {
  const auto specials = d.vocab.specials();
  std::size_t skipped = 0;
  const auto train_tok = tokenize_split(d.examples, d.splits.train, d.vocab, tpl, rc.train.max_seq_len,
                                        rc.train_prompt, true, &skipped);
  if (skipped > 0) log << "skipped " << skipped << " training examples longer than max_seq_len\n";
  const auto val_tok = tokenize_split(d.examples, d.splits.val, d.vocab, tpl, rc.train.max_seq_len,
                                      PromptStyle::zero_shot, false);
  auto sink = [&](const TrainLogEntry& e) {
    if (e.val_accuracy) log << e.to_json() << "\n";
  };

  TrainResult<T> result;
  if (opts.mode == EvalMode::sft) {
    ModelConfig base = rc.model;
    base.head_type = HeadType::lm;
    save_typed(init<T>(base), opts.out / checkpoint_name(EvalMode::fewshot));
    SftData data{pack(train_tok, rc.train.max_seq_len, specials), val_tok, specials};
    result = train_sft<T>(data, rc.model, rc.train, sink);
  } else {
    ClassData data;
    data.specials = specials;
    for (const auto& ex : train_tok) data.train.push_back(frame_for_classification(ex, specials));
    for (const auto& ex : val_tok) {
      data.val.push_back({frame_prompt(ex.prompt_tokens, specials, rc.model.max_seq_len),
                          specials.answer_index(ex.answer_token), ex.source_index});
    }
    result = train_classhead<T>(data, rc.model, rc.train, sink);
  }
  const std::string tag(eval_mode_name(opts.mode));
  save_typed(result.checkpoint, opts.out / checkpoint_name(opts.mode));
  write_file(opts.out / ("trainlog_" + tag + ".jsonl"), result.log.to_jsonl());
  log << result.log.summary() << "\n";
  return result.log;
}

template <class T>
EvalReport eval_typed(const Checkpoint<T>& ckpt, const EvalOptions& opts, const RunData& d,
                      const PromptTemplate& tpl) {
  const auto& indices = split_by_name(d.splits, opts.split);
  EvalSet set;
  for (auto i : indices) {
    set.examples.push_back(d.examples[i]);
    set.source_indices.push_back(i);
  }
  if (opts.mode == EvalMode::classhead) return evaluate_classhead(ckpt, tpl, set, d.vocab);
  return evaluate_generation(ckpt, tpl, set, d.vocab, opts.mode);
}

void write_combined_reports(const fs::path& out, bool reference_rows) {
  auto combined = nlohmann::ordered_json::array();
  std::vector<EvalReport> reports;
  for (auto mode : {EvalMode::fewshot, EvalMode::sft, EvalMode::classhead}) {
    const auto path = out / ("report_" + std::string(eval_mode_name(mode)) + ".json");
    if (!fs::exists(path)) continue;
    const auto text = read_file(path);
    combined.push_back(nlohmann::ordered_json::parse(text));
    reports.push_back(EvalReport::from_json(text));
  }
  nlohmann::ordered_json j;
  j["reports"] = std::move(combined);
  write_file(out / "report.json", j.dump() + "\n");
  write_file(out / "report.txt", compare_report(reports, reference_rows));
}

}  // namespace

namespace {

void require_run_dir(const fs::path& out) {
  if (!fs::is_directory(out)) throw DataError("run directory " + out.string() + " not found; run 'prepare' first");
}

}  // namespace

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".finsent.lock") {
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (f == nullptr) {
    if (errno == EEXIST) {
      throw OutputLocked(dir.string() + " is locked by another command (remove " + path_.string() +
                         " if no command is running)");
    }
    throw DataError("cannot create lock file " + path_.string());
  }
  std::fclose(f);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

RunConfig resolve_run_config(const fs::path& out, const KeyValueConfig& overrides) {
  KeyValueConfig kv;
  if (fs::exists(out / "runconfig.txt")) kv = KeyValueConfig::load(out / "runconfig.txt");
  kv.merge(overrides);
  return RunConfig::resolve(kv);
}

PromptTemplate load_template(const RunConfig& rc) {
  if (rc.prompt_template.empty()) return PromptTemplate::standard();
  return PromptTemplate::load(rc.prompt_template);
}

std::vector<TokenizedExample> tokenize_split(const std::vector<LabeledExample>& examples,
                                             const std::vector<std::size_t>& indices, const Vocabulary& vocab,
                                             const PromptTemplate& tpl, std::size_t max_seq_len, PromptStyle style,
                                             bool skip_too_long, std::size_t* skipped) {
  std::vector<TokenizedExample> out;
  out.reserve(indices.size());
  const auto specials = vocab.specials();
  for (auto i : indices) {
    if (i >= examples.size()) throw DataError("split index out of range");
    if (!skip_too_long) {
      out.push_back({vocab.encode(build_prompt(tpl, examples[i].sentence, style)),
                     specials.answers[label_to_id(examples[i].label)], i});
      continue;
    }
    try {
      out.push_back(tokenize_pair(examples[i], i, vocab, tpl, max_seq_len, style));
    } catch (const ExampleTooLong&) {
      if (skipped != nullptr) ++*skipped;
    }
  }
  return out;
}

std::vector<std::string> tokenizer_corpus(const PromptTemplate& tpl, const std::vector<LabeledExample>& examples,
                                          const std::vector<std::size_t>& train_indices) {
  std::vector<std::string> corpus;
  corpus.push_back(build_fewshot_prompt(tpl, ""));
  for (auto i : train_indices) corpus.push_back(build_sft_prompt(tpl, examples.at(i).sentence));
  return corpus;
}

void cmd_prepare(const PrepareOptions& opts, std::ostream& log) {
  const RunConfig rc = resolve_run_config(opts.out, opts.config);
  const auto tpl = load_template(rc);
  if (!fs::exists(opts.data)) throw DataError("dataset file not found: " + opts.data.string());
  fs::create_directories(opts.out);
  OutputLock lock(opts.out);

  RunData d;
  d.examples = load_phrasebank(opts.data);
  if (d.examples.empty()) throw DataError(opts.data.string() + ": no examples");
  const auto splits = split(d.examples, rc.split);
  d.splits = splits.indices;
  d.vocab = train_bpe(tokenizer_corpus(tpl, d.examples, d.splits.train), rc.model.vocab_size);

  write_file(opts.out / "dataset.txt", format_phrasebank(d.examples));
  write_file(opts.out / "splits.json", splits_manifest_json(d.splits, rc.split, d.examples.size()));
  d.vocab.save(opts.out / "vocab.txt");
  write_file(opts.out / "runconfig.txt", rc.serialize());
  log << "loaded " << d.examples.size() << " examples from " << opts.data.string() << "\n";
  log << "split train=" << d.splits.train.size() << " val=" << d.splits.val.size()
      << " test=" << d.splits.test.size() << "\n";
  log << "vocabulary " << d.vocab.size() << " tokens\n";
  write_packs(opts.out, d, rc, tpl, log);
}

TrainLog cmd_train(const TrainOptions& opts, std::ostream& log) {
  if (opts.mode == EvalMode::fewshot) throw ConfigError("train: mode must be sft or classhead");
  require_run_dir(opts.out);
  const RunConfig rc = resolve_run_config(opts.out, opts.config);
  const auto tpl = load_template(rc);
  OutputLock lock(opts.out);
  const RunData d = load_run(opts.out);
  if (d.vocab.size() > rc.model.vocab_size) {
    throw ConfigError("model.vocab_size is smaller than the prepared vocabulary (" +
                      std::to_string(d.vocab.size()) + " tokens)");
  }
  write_file(opts.out / "runconfig.txt", rc.serialize());
  if (rc.model.float_width == FloatWidth::f64) return train_typed<double>(opts, rc, d, tpl, log);
  return train_typed<float>(opts, rc, d, tpl, log);
}

EvalReport cmd_eval(const EvalOptions& opts, std::ostream& log) {
  require_run_dir(opts.out);
  const RunConfig rc = resolve_run_config(opts.out, {});
  const auto tpl = load_template(rc);
  split_by_name({}, opts.split);
  if (opts.min_accuracy && !(*opts.min_accuracy >= 0.0 && *opts.min_accuracy <= 1.0)) {
    throw ConfigError("--min-accuracy must be in [0, 1]");
  }
  const auto ckpt_path = opts.checkpoint.value_or(opts.out / checkpoint_name(opts.mode));
  require_file(ckpt_path, "train a checkpoint first");
  OutputLock lock(opts.out);
  const RunData d = load_run(opts.out);
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto head = config_of(ckpt).head_type;
  const auto wanted = opts.mode == EvalMode::classhead ? HeadType::classification : HeadType::lm;
  if (head != wanted) {
    throw ConfigError("checkpoint " + ckpt_path.string() + " has a " + std::string(head_type_name(head)) +
                      " head; mode " + std::string(eval_mode_name(opts.mode)) + " needs " +
                      std::string(head_type_name(wanted)));
  }
  const EvalReport report = std::visit([&](const auto& c) { return eval_typed(c, opts, d, tpl); }, ckpt);
  write_file(opts.out / ("report_" + std::string(eval_mode_name(opts.mode)) + ".json"), report.to_json() + "\n");
  write_combined_reports(opts.out, rc.reference_rows);
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s accuracy=%.4f correct=%zu n=%zu\n", std::string(eval_mode_name(opts.mode)).c_str(),
                report.accuracy, report.correct, report.n);
  log << buf;
  if (opts.min_accuracy && report.accuracy < *opts.min_accuracy) {
    std::snprintf(buf, sizeof(buf), "accuracy %.4f is below the required %.4f", report.accuracy, *opts.min_accuracy);
    throw AccuracyGateFailed(buf);
  }
  return report;
}

std::string cmd_prompt(std::string_view title, bool fewshot, const std::optional<fs::path>& tpl) {
  const auto t = tpl ? PromptTemplate::load(*tpl) : PromptTemplate::standard();
  return build_prompt(t, title, fewshot ? PromptStyle::few_shot : PromptStyle::zero_shot);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const DivergenceError*>(&e) != nullptr) return 4;
  if (dynamic_cast<const AccuracyGateFailed*>(&e) != nullptr) return 5;
  return 3;
}

}  // namespace finsent
