// SPDX-License-Identifier: Apache-2.0
#include "finsent/evaluation.hpp"

#include <algorithm>
#include <cstdio>

#include <json.hpp>

#include "finsent/errors.hpp"

namespace finsent {

std::string_view eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::fewshot:
      return "fewshot";
    case EvalMode::sft:
      return "sft";
    case EvalMode::classhead:
      return "classhead";
  }
  return "sft";
}

EvalMode parse_eval_mode(std::string_view text) {
  if (text == "fewshot") return EvalMode::fewshot;
  if (text == "sft") return EvalMode::sft;
  if (text == "classhead") return EvalMode::classhead;
  throw ConfigError("unknown evaluation mode '" + std::string(text) + "'");
}

EvalReport make_report(EvalMode mode, std::vector<PredictionRecord> records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const auto& a, const auto& b) { return a.source_index < b.source_index; });
  EvalReport r;
  r.mode = mode;
  r.n = records.size();
  for (const auto& rec : records) {
    if (!rec.pred) {
      ++r.unparsed_count;
      continue;
    }
    ++r.confusion[label_to_id(rec.gold)][label_to_id(*rec.pred)];
    if (*rec.pred == rec.gold) ++r.correct;
  }
  r.accuracy = r.n == 0 ? 0.0 : static_cast<double>(r.correct) / static_cast<double>(r.n);
  r.per_example = std::move(records);
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = eval_mode_name(mode);
  j["n"] = n;
  j["correct"] = correct;
  j["accuracy"] = accuracy;
  j["unparsed_count"] = unparsed_count;
  j["confusion"] = confusion;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& rec : per_example) {
    nlohmann::ordered_json e;
    e["source_index"] = rec.source_index;
    e["gold"] = label_name(rec.gold);
    e["pred"] = rec.pred ? nlohmann::ordered_json(label_name(*rec.pred)) : nlohmann::ordered_json(nullptr);
    if (rec.confidence) e["confidence"] = *rec.confidence;
    rows.push_back(std::move(e));
  }
  j["per_example"] = std::move(rows);
  return j.dump();
}

EvalReport EvalReport::from_json(std::string_view text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.mode = parse_eval_mode(j.at("mode").get<std::string>());
    r.n = j.at("n").get<std::size_t>();
    r.correct = j.at("correct").get<std::size_t>();
    r.accuracy = j.at("accuracy").get<double>();
    r.unparsed_count = j.at("unparsed_count").get<std::size_t>();
    r.confusion = j.at("confusion").get<std::array<std::array<std::size_t, 3>, 3>>();
    for (const auto& e : j.at("per_example")) {
      PredictionRecord rec;
      rec.source_index = e.at("source_index").get<std::size_t>();
      rec.gold = parse_label(e.at("gold").get<std::string>());
      if (!e.at("pred").is_null()) rec.pred = parse_label(e.at("pred").get<std::string>());
      if (e.contains("confidence")) rec.confidence = e.at("confidence").get<double>();
      r.per_example.push_back(rec);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("report: ") + e.what());
  }
  return r;
}

template <class T>
int argmax3(const std::array<T, 3>& values) {
  int best = 0;
  for (int c = 1; c < 3; ++c) {
    if (values[c] > values[best]) best = c;
  }
  return best;
}

template <class T>
EvalReport evaluate_generation_tokens(const Checkpoint<T>& ckpt, std::span<const TokenizedExample> examples,
                                      const SpecialTokens& specials, EvalMode mode) {
  if (examples.empty()) throw DataError("evaluation: empty test set");
  if (mode == EvalMode::classhead) throw ConfigError("evaluate_generation: classhead mode needs a class head");
  std::vector<PredictionRecord> records(examples.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(examples.size()); ++i) {
    const auto& ex = examples[i];
    auto& rec = records[i];
    rec.source_index = ex.source_index;
    try {
      const int gold = specials.answer_index(ex.answer_token);
      if (gold < 0) throw DataError("evaluation: example without an answer letter");
      rec.gold = id_to_label(gold);
      const TokenId answer = generate_answer(ckpt, ex.prompt_tokens, specials);
      rec.pred = id_to_label(specials.answer_index(answer));
    } catch (const std::exception& e) {
#pragma omp critical(finsent_eval_failure)
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw DataError("evaluation failed: " + failure);
  return make_report(mode, std::move(records));
}

template <class T>
EvalReport evaluate_generation(const Checkpoint<T>& ckpt, const PromptTemplate& tpl, const EvalSet& testset,
                               const Vocabulary& vocab, EvalMode mode) {
  if (testset.examples.empty()) throw DataError("evaluation: empty test set");
  const auto style = mode == EvalMode::fewshot ? PromptStyle::few_shot : PromptStyle::zero_shot;
  const auto specials = vocab.specials();
  std::vector<TokenizedExample> tokenized(testset.examples.size());
  for (std::size_t i = 0; i < testset.examples.size(); ++i) {
    const auto& ex = testset.examples[i];
    tokenized[i].prompt_tokens = vocab.encode(build_prompt(tpl, ex.sentence, style));
    tokenized[i].answer_token = specials.answers[label_to_id(ex.label)];
    tokenized[i].source_index = testset.source_indices.at(i);
  }
  return evaluate_generation_tokens(ckpt, tokenized, specials, mode);
}

template <class T>
EvalReport evaluate_classhead_samples(const Checkpoint<T>& ckpt, std::span<const ClassSample> samples,
                                      const SpecialTokens& specials) {
  if (samples.empty()) throw DataError("evaluation: empty test set");
  std::vector<PredictionRecord> records(samples.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(samples.size()); ++i) {
    const auto& s = samples[i];
    auto& rec = records[i];
    rec.source_index = s.source_index;
    try {
      rec.gold = id_to_label(s.class_id);
      const auto logits = forward_cls(ckpt, s.tokens, specials);
      const auto probs = softmax(logits);
      const int pred = argmax3(logits);
      rec.pred = id_to_label(pred);
      rec.confidence = static_cast<double>(*std::max_element(probs.begin(), probs.end()));
    } catch (const std::exception& e) {
#pragma omp critical(finsent_eval_failure)
      if (failure.empty()) failure = e.what();
    }
  }
  if (!failure.empty()) throw DataError("evaluation failed: " + failure);
  return make_report(EvalMode::classhead, std::move(records));
}

template <class T>
EvalReport evaluate_classhead(const Checkpoint<T>& ckpt, const PromptTemplate& tpl, const EvalSet& testset,
                              const Vocabulary& vocab) {
  if (testset.examples.empty()) throw DataError("evaluation: empty test set");
  const auto specials = vocab.specials();
  std::vector<ClassSample> samples(testset.examples.size());
  for (std::size_t i = 0; i < testset.examples.size(); ++i) {
    const auto& ex = testset.examples[i];
    const auto prompt = vocab.encode(build_sft_prompt(tpl, ex.sentence));
    samples[i].tokens = frame_prompt(prompt, specials, ckpt.config.max_seq_len);
    samples[i].class_id = label_to_id(ex.label);
    samples[i].source_index = testset.source_indices.at(i);
  }
  return evaluate_classhead_samples(ckpt, samples, specials);
}

EvalReport report_from_generations(EvalMode mode, std::span<const std::size_t> source_indices,
                                   std::span<const Sentiment> gold, std::span<const std::string> generations) {
  if (gold.empty()) throw DataError("evaluation: empty test set");
  if (gold.size() != generations.size() || gold.size() != source_indices.size()) {
    throw ShapeError("report_from_generations: input lengths differ");
  }
  std::vector<PredictionRecord> records(gold.size());
  for (std::size_t i = 0; i < gold.size(); ++i) {
    records[i].source_index = source_indices[i];
    records[i].gold = gold[i];
    records[i].pred = try_parse_answer(generations[i]);
  }
  return make_report(mode, std::move(records));
}

namespace {

std::string display_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::fewshot:
      return "Base (few-shot)";
    case EvalMode::sft:
      return "SFT";
    case EvalMode::classhead:
      return "ClassHead";
  }
  return "";
}

struct ReferenceRow {
  const char* method;
  const char* accuracy;
};

// Published accuracies on Financial PhraseBank, shown for comparison only.
constexpr ReferenceRow kReferenceRows[] = {
    {"LSTM", "0.71"}, {"LSTM with ELMo", "0.75"}, {"ULMFit", "0.83"},
    {"LPS", "0.71"},  {"HSC", "0.71"},            {"FinBERT", "0.86"},
};

std::string table_row(const std::string& method, const std::string& accuracy, const std::string& n) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "| %-24s | %8s | %6s |\n", method.c_str(), accuracy.c_str(), n.c_str());
  return buf;
}

}  // namespace

std::string compare_report(std::span<const EvalReport> reports, bool reference_rows) {
  const std::string rule = "+--------------------------+----------+--------+\n";
  std::string out = rule + table_row("Methods", "Accuracy", "N") + rule;
  std::vector<const EvalReport*> ordered;
  for (const auto& r : reports) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const auto* a, const auto* b) { return static_cast<int>(a->mode) < static_cast<int>(b->mode); });
  for (const auto* r : ordered) {
    char acc[32];
    std::snprintf(acc, sizeof(acc), "%.4f", r->accuracy);
    out += table_row(display_name(r->mode), acc, std::to_string(r->n));
  }
  out += rule;
  if (reference_rows) {
    out += "| published reference, not reproduced here     |\n" + rule;
    for (const auto& row : kReferenceRows) out += table_row(row.method, row.accuracy, "-");
    out += rule;
  }
  return out;
}

#define FINSENT_INSTANTIATE_EVAL(T)                                                                          \
  template int argmax3<T>(const std::array<T, 3>&);                                                          \
  template EvalReport evaluate_generation<T>(const Checkpoint<T>&, const PromptTemplate&, const EvalSet&,    \
                                             const Vocabulary&, EvalMode);                                   \
  template EvalReport evaluate_generation_tokens<T>(const Checkpoint<T>&, std::span<const TokenizedExample>, \
                                                    const SpecialTokens&, EvalMode);                         \
  template EvalReport evaluate_classhead<T>(const Checkpoint<T>&, const PromptTemplate&, const EvalSet&,     \
                                            const Vocabulary&);                                              \
  template EvalReport evaluate_classhead_samples<T>(const Checkpoint<T>&, std::span<const ClassSample>,      \
                                                    const SpecialTokens&);

FINSENT_INSTANTIATE_EVAL(float)
FINSENT_INSTANTIATE_EVAL(double)

}  // namespace finsent
