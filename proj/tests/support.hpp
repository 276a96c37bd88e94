// SPDX-License-Identifier: Apache-2.0
// Helpers shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "finsent/model.hpp"
#include "finsent/packing.hpp"
#include "finsent/prng.hpp"

namespace finsent::testing {

/// Small ids so a 16-token vocabulary can host the specials.
inline SpecialTokens tiny_specials() {
  SpecialTokens s;
  s.bos = 1;
  s.eos = 2;
  s.pad = 3;
  s.answers = {4, 5, 6};
  return s;
}

inline ModelConfig tiny_config(HeadType head, FloatWidth width = FloatWidth::f64) {
  ModelConfig c;
  c.vocab_size = 16;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_seq_len = 64;
  c.head_type = head;
  c.float_width = width;
  c.init_seed = 99;
  return c;
}

/// Ordinary (non-special, non-answer) token ids of the tiny vocabulary.
inline std::vector<TokenId> random_plain_tokens(SplitMix64& rng, std::size_t n, TokenId lo = 7, TokenId hi = 16) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = lo + static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(hi - lo)));
  return out;
}

/// Random tokenized pairs with prompt lengths in [min_len, max_len].
inline std::vector<TokenizedExample> random_pairs(SplitMix64& rng, std::size_t count, std::size_t min_len,
                                                  std::size_t max_len, const SpecialTokens& specials,
                                                  TokenId vocab_hi = 16) {
  std::vector<TokenizedExample> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    out[i].prompt_tokens = random_plain_tokens(rng, len, 7, vocab_hi);
    out[i].answer_token = specials.answers[rng.below(3)];
    out[i].source_index = i;
  }
  return out;
}

/// Perturbs every parameter so that no gradient is accidentally zero
/// because of the symmetric initialisation (unit gains, zero biases).
template <class T>
void jitter(Checkpoint<T>& ckpt, std::uint64_t seed, double scale = 0.1) {
  SplitMix64 rng(seed);
  for (auto& t : ckpt.params) {
    for (auto& v : t.values) v = static_cast<T>(v + scale * rng.normal());
  }
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    const auto base = std::filesystem::temp_directory_path();
    SplitMix64 rng(reinterpret_cast<std::uintptr_t>(this) ^ static_cast<std::uint64_t>(std::rand()));
    path_ = base / ("finsent_" + tag + "_" + std::to_string(rng.next() % 1000000007ULL));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares analytic gradients with central differences of loss_fn over
/// every parameter element. Relative error is |a - n| / max(|a|, |n|, floor).
template <class LossFn>
GradCheck finite_difference_check(Checkpoint<double> ckpt, const ParameterSet<double>& analytic, LossFn loss_fn,
                                  double step, double floor) {
  GradCheck out;
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    auto& values = ckpt.params[i].values;
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double saved = values[k];
      values[k] = saved + step;
      const double up = loss_fn(ckpt);
      values[k] = saved - step;
      const double down = loss_fn(ckpt);
      values[k] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[i].values[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = ckpt.params[i].name + "[" + std::to_string(k) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace finsent::testing
