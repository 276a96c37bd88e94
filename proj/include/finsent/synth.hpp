// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "finsent/dataset.hpp"

namespace finsent {

/// Deterministic toy corpus of short financial news sentences whose label
/// follows from the verb. Labels cycle positive/negative/neutral before a
/// seeded shuffle, so classes are balanced to within one example.
std::vector<LabeledExample> generate_toy_examples(std::size_t n, std::uint64_t seed);

/// The same corpus as a PhraseBank-style file ("sentence@label" lines).
/// With latin1 set the bytes are ISO-8859-1 like the original release,
/// otherwise UTF-8. Some company names carry accented letters.
std::string generate_toy_phrasebank(std::size_t n, std::uint64_t seed, bool latin1 = false);

/// Re-encodes UTF-8 as ISO-8859-1. Throws DataError for code points
/// above U+00FF.
std::string utf8_to_latin1(const std::string& utf8);

}  // namespace finsent
