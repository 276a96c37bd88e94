// SPDX-License-Identifier: Apache-2.0
#include "finsent/prompting.hpp"

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "finsent/errors.hpp"

namespace finsent {

namespace {

constexpr std::string_view kHeader = "finsent-template v1";
constexpr std::string_view kTitlePlaceholder = "{{title}}";
constexpr std::string_view kAnswerSuffix = "Answer:";
constexpr std::string_view kTitlePrefix = "News Title: ";

}  // namespace

PromptTemplate PromptTemplate::standard() {
  PromptTemplate t;
  t.instruction =
      "We want to perform the sentiment analsysis for financial news according to their titles.\n"
      "You are asked to choose the most suitable sentiment from (\"postive\", \"negative\", \"neutral\") "
      "with signle-choice questions.\n"
      "Please follow these examples to answer the question.";
  t.question_format =
      "News Title: {{title}}\n"
      "Choices: A) positive. B) negative. C) neutral.\n"
      "Answer:";
  t.exemplars = {{
      {"About Nokia Nokia is a pioneer in mobile telecommunications and the world's leading maker of "
       "mobile devices.",
       'A'},
      {"Most of the permanent layoffs will be in the plywood and sawn timber sectors of the Finnish "
       "company's operations at several domestic mills, where earlier this year it temporarily laid off "
       "some 1,200 workers to save costs.",
       'B'},
      {"The transaction is planned to be financed with a EUR40m market-based loan granted by Standard "
       "Chartered Bank Hong Kong.",
       'C'},
  }};
  return t;
}

void PromptTemplate::validate() const {
  if (instruction.empty()) throw ConfigError("prompt template: empty instruction");
  const auto first = question_format.find(kTitlePlaceholder);
  if (first == std::string::npos ||
      question_format.find(kTitlePlaceholder, first + 1) != std::string::npos) {
    throw ConfigError("prompt template: question must contain exactly one {{title}}");
  }
  if (!question_format.ends_with(kAnswerSuffix)) {
    throw ConfigError("prompt template: question must end with \"Answer:\"");
  }
  for (std::size_t i = 0; i < exemplars.size(); ++i) {
    if (exemplars[i].answer != static_cast<char>('A' + i)) {
      throw ConfigError("prompt template: exemplars must answer A, B, C in order");
    }
    if (exemplars[i].title.empty()) throw ConfigError("prompt template: empty exemplar title");
  }
}

std::string PromptTemplate::render_question(std::string_view title) const {
  std::string out = question_format;
  const auto at = out.find(kTitlePlaceholder);
  out.replace(at, kTitlePlaceholder.size(), title);
  return out;
}

PromptTemplate PromptTemplate::parse(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw ConfigError("prompt template: missing header '" + std::string(kHeader) + "'");
  }
  std::map<std::string, std::string> sections;
  std::string* current = nullptr;
  while (std::getline(in, line)) {
    if (line.starts_with("%% ")) {
      const auto name = line.substr(3);
      if (sections.contains(name)) throw ConfigError("prompt template: duplicate section '" + name + "'");
      current = &sections[name];
      continue;
    }
    if (current == nullptr) throw ConfigError("prompt template: text before the first section");
    if (!current->empty() || !line.empty()) {
      if (!current->empty()) *current += '\n';
      *current += line;
    }
  }
  const auto take = [&](const std::string& name) {
    auto it = sections.find(name);
    if (it == sections.end()) throw ConfigError("prompt template: missing section '" + name + "'");
    std::string body = it->second;
    while (body.ends_with('\n')) body.pop_back();
    return body;
  };
  PromptTemplate t;
  t.instruction = take("instruction");
  t.question_format = take("question");
  for (int i = 0; i < 3; ++i) {
    const char letter = static_cast<char>('A' + i);
    t.exemplars[i] = {take(std::string("exemplar ") + letter), letter};
  }
  if (sections.size() != 5) throw ConfigError("prompt template: unexpected extra section");
  t.validate();
  return t;
}

PromptTemplate PromptTemplate::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read prompt template " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

std::string PromptTemplate::serialize() const {
  std::string out(kHeader);
  out += "\n%% instruction\n" + instruction + "\n%% question\n" + question_format + "\n";
  for (const auto& ex : exemplars) {
    out += std::string("%% exemplar ") + ex.answer + "\n" + ex.title + "\n";
  }
  return out;
}

std::string build_fewshot_prompt(const PromptTemplate& tpl, std::string_view title) {
  std::string out = tpl.instruction;
  out += "\n\n";
  for (const auto& ex : tpl.exemplars) {
    out += tpl.render_question(ex.title);
    out += ex.answer;
    out += "\n\n";
  }
  out += tpl.render_question(title);
  return out;
}

std::string build_sft_prompt(const PromptTemplate& tpl, std::string_view title) {
  return tpl.instruction + "\n\n" + tpl.render_question(title);
}

std::string build_prompt(const PromptTemplate& tpl, std::string_view title, PromptStyle style) {
  return style == PromptStyle::few_shot ? build_fewshot_prompt(tpl, title) : build_sft_prompt(tpl, title);
}

std::optional<Sentiment> try_parse_answer(std::string_view text) {
  const auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(text[i])));
    if (c != 'A' && c != 'B' && c != 'C') continue;
    const bool left_ok = i == 0 || !alnum(text[i - 1]);
    const bool right_ok = i + 1 == text.size() || !alnum(text[i + 1]);
    if (left_ok && right_ok) return letter_to_label(c);
  }
  return std::nullopt;
}

Sentiment parse_answer(std::string_view generated) {
  if (auto label = try_parse_answer(generated)) return *label;
  throw NoAnswerFound("no A/B/C answer in generated text '" + std::string(generated) + "'");
}

std::optional<std::string> extract_last_title(std::string_view prompt) {
  const auto at = prompt.rfind(kTitlePrefix);
  if (at == std::string_view::npos) return std::nullopt;
  const auto start = at + kTitlePrefix.size();
  auto end = prompt.find('\n', start);
  if (end == std::string_view::npos) end = prompt.size();
  return std::string(prompt.substr(start, end - start));
}

}  // namespace finsent
