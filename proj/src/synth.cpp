// SPDX-License-Identifier: Apache-2.0
#include "finsent/synth.hpp"

#include <array>
#include <cstdio>

#include "finsent/errors.hpp"
#include "finsent/prng.hpp"

namespace finsent {

namespace {

constexpr std::array kCompanies = {
    "Aspo",          "Componenta",      "Kesko",    "Nokian Tyres", "Raisio",   "Stockmann", "Talvivaara",
    "Tecnomen",      "Elisa",           "Ramirent", "Wärtsilä",     "Fiskars",  "Okmetic",   "Cargotec",
    "Stora Enso",    "Metso",           "Sanoma",   "Teleste",      "Pöyry",    "Lännen",    "Vaisala",
    "Uponor",        "Outokumpu",       "Finnair",  "Ahlstrom",     "Efore",    "Glaston",   "Citycon",
    "Münchener Re",  "Société Générale",
};

constexpr std::array kMetrics = {
    "net sales", "operating profit", "net profit", "order intake", "revenue", "earnings per share",
};

constexpr std::array kPositive = {"rose", "increased", "grew", "improved", "climbed"};
constexpr std::array kNegative = {"fell", "decreased", "dropped", "declined", "slumped"};

constexpr std::array kNeutral = {
    "{c} is headquartered in Helsinki , Finland .",
    "{c} will publish its interim report on {d} April .",
    "The {m} of {c} is reported in euro .",
    "{c} operates in {d} countries .",
    "{c} has appointed a new chief financial officer .",
    "The annual general meeting of {c} will be held in Espoo .",
};

std::string fill(std::string text, const std::string& company, const std::string& metric, unsigned number) {
  auto replace = [&](const std::string& key, const std::string& value) {
    for (auto pos = text.find(key); pos != std::string::npos; pos = text.find(key, pos + value.size())) {
      text.replace(pos, key.size(), value);
    }
  };
  replace("{c}", company);
  replace("{m}", metric);
  replace("{d}", std::to_string(number));
  return text;
}

template <class A>
const char* pick(const A& options, SplitMix64& rng) {
  return options[rng.below(options.size())];
}

std::string money(SplitMix64& rng) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%u.%u", static_cast<unsigned>(1 + rng.below(99)),
                static_cast<unsigned>(rng.below(10)));
  return buf;
}

}  // namespace

std::vector<LabeledExample> generate_toy_examples(std::size_t n, std::uint64_t seed) {
  std::vector<Sentiment> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = id_to_label(static_cast<int>(i % 3));
  SplitMix64 rng(seed);
  shuffle(std::span<Sentiment>(labels), rng);

  std::vector<LabeledExample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::string company = pick(kCompanies, rng);
    const std::string metric = pick(kMetrics, rng);
    std::string sentence;
    switch (labels[i]) {
      case Sentiment::positive:
      case Sentiment::negative: {
        const char* verb = labels[i] == Sentiment::positive ? pick(kPositive, rng) : pick(kNegative, rng);
        sentence = "The " + metric + " of " + company + " " + verb + " to EUR " + money(rng) + " mn from EUR " +
                   money(rng) + " mn .";
        break;
      }
      case Sentiment::neutral:
        sentence = fill(pick(kNeutral, rng), company, metric, static_cast<unsigned>(2 + rng.below(27)));
        break;
    }
    out[i] = {std::move(sentence), labels[i]};
  }
  return out;
}

std::string utf8_to_latin1(const std::string& utf8) {
  std::string out;
  out.reserve(utf8.size());
  for (std::size_t i = 0; i < utf8.size(); ++i) {
    const auto c = static_cast<unsigned char>(utf8[i]);
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if ((c == 0xC2 || c == 0xC3) && i + 1 < utf8.size()) {
      const auto next = static_cast<unsigned char>(utf8[++i]);
      out.push_back(static_cast<char>(((c & 0x03) << 6) | (next & 0x3F)));
    } else {
      throw DataError("utf8_to_latin1: character outside ISO-8859-1");
    }
  }
  return out;
}

std::string generate_toy_phrasebank(std::size_t n, std::uint64_t seed, bool latin1) {
  const auto text = format_phrasebank(generate_toy_examples(n, seed));
  return latin1 ? utf8_to_latin1(text) : text;
}

}  // namespace finsent
