// SPDX-License-Identifier: Apache-2.0
#include "finsent/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "finsent/errors.hpp"
#include "finsent/kernels.hpp"
#include "finsent/prng.hpp"

namespace finsent {

void ModelConfig::validate() const {
  const auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(vocab_size > 0, "vocab_size must be positive");
  require(d_model > 0, "d_model must be positive");
  require(n_layers > 0, "n_layers must be positive");
  require(n_heads > 0, "n_heads must be positive");
  require(d_ff > 0, "d_ff must be positive");
  require(max_seq_len > 0, "max_seq_len must be positive");
  require(d_model % n_heads == 0,
          "d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  require(float_width == FloatWidth::f32 || float_width == FloatWidth::f64, "float_width must be 32 or 64");
}

namespace {

struct LayerSlots {
  std::size_t ln1_gain, ln1_offset, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_offset, w1, b1, w2, b2;
};

struct Layout {
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<LayerSlots> layers;
  std::size_t lnf_gain = 0;
  std::size_t lnf_offset = 0;
  std::size_t lm_head = 0;   // untied lm only
  std::size_t cls_w = 0;     // classification only
  std::size_t cls_b = 0;
};

std::string layer_name(std::size_t l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }

template <class T>
Layout resolve(const ParameterSet<T>& params, const ModelConfig& cfg) {
  Layout L;
  L.tok_emb = params.index_of("tok_emb");
  L.pos_emb = params.index_of("pos_emb");
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto at = [&](const char* leaf) { return params.index_of(layer_name(l, leaf)); };
    L.layers.push_back({at("ln1.gain"), at("ln1.offset"), at("attn.wq"), at("attn.bq"), at("attn.wk"),
                        at("attn.bk"), at("attn.wv"), at("attn.bv"), at("attn.wo"), at("attn.bo"),
                        at("ln2.gain"), at("ln2.offset"), at("mlp.w1"), at("mlp.b1"), at("mlp.w2"),
                        at("mlp.b2")});
  }
  L.lnf_gain = params.index_of("lnf.gain");
  L.lnf_offset = params.index_of("lnf.offset");
  if (cfg.head_type == HeadType::lm) {
    if (!cfg.tie_lm_head) L.lm_head = params.index_of("lm_head.w");
  } else {
    L.cls_w = params.index_of("cls_head.w");
    L.cls_b = params.index_of("cls_head.b");
  }
  return L;
}

template <class T>
struct LayerCache {
  std::vector<T> x_in, h1, mean1, rstd1, q, k, v, probs, att, x_mid, h2, mean2, rstd2, u, g;
};

template <class T>
struct TrunkCache {
  std::size_t t = 0;
  std::vector<TokenId> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::uint8_t> mask;
  std::vector<LayerCache<T>> layers;
  std::vector<T> x_final, mean_f, rstd_f, hf;
};

template <class T>
std::span<const T> cview(const std::vector<T>& v) {
  return std::span<const T>(v);
}

/// Runs embeddings, all blocks and the final norm; fills cache.hf (t x d).
template <class T>
void forward_trunk(const Checkpoint<T>& ckpt, const Layout& L, std::span<const TokenId> tokens,
                   std::span<const std::uint8_t> mask, TrunkCache<T>& cache) {
  const auto& cfg = ckpt.config;
  const auto& P = ckpt.params;
  const std::size_t t = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ff;
  if (t == 0) throw ShapeError("forward: empty token sequence");
  if (t > cfg.max_seq_len) {
    throw ShapeError("forward: sequence of " + std::to_string(t) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (mask.size() != t * t) throw ShapeError("forward: mask is not T x T");

  cache.t = t;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.mask.assign(mask.begin(), mask.end());
  cache.positions.resize(t);
  for (std::size_t i = 0; i < t; ++i) {
    std::size_t allowed = 0;
    for (std::size_t j = 0; j < t; ++j) allowed += mask[i * t + j] ? 1 : 0;
    if (allowed == 0) throw ShapeError("forward: mask row " + std::to_string(i) + " allows no key");
    cache.positions[i] = cfg.segment_local_positions ? allowed - 1 : i;
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= cfg.vocab_size) {
      throw ShapeError("forward: token id " + std::to_string(tokens[i]) + " out of range");
    }
  }

  std::vector<T> x(t * d);
  const auto& tok = P[L.tok_emb].values;
  const auto& pos = P[L.pos_emb].values;
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t id = static_cast<std::size_t>(tokens[i]);
    for (std::size_t c = 0; c < d; ++c) x[i * d + c] = tok[id * d + c] + pos[cache.positions[i] * d + c];
  }

  cache.layers.resize(cfg.n_layers);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const auto& S = L.layers[l];
    auto& C = cache.layers[l];
    C.x_in = x;
    C.h1.resize(t * d);
    C.mean1.resize(t);
    C.rstd1.resize(t);
    kernels::layernorm_forward<T>(cview(C.x_in), P[S.ln1_gain].span(), P[S.ln1_offset].span(), C.h1, C.mean1,
                                  C.rstd1, t, d);
    C.q.resize(t * d);
    C.k.resize(t * d);
    C.v.resize(t * d);
    kernels::matmul<T>(cview(C.h1), P[S.wq].span(), P[S.bq].span(), C.q, t, d, d);
    kernels::matmul<T>(cview(C.h1), P[S.wk].span(), P[S.bk].span(), C.k, t, d, d);
    kernels::matmul<T>(cview(C.h1), P[S.wv].span(), P[S.bv].span(), C.v, t, d, d);
    C.probs.resize(cfg.n_heads * t * t);
    C.att.resize(t * d);
    kernels::attention_forward<T>(cview(C.q), cview(C.k), cview(C.v), mask, C.probs, C.att, t, d, cfg.n_heads);
    std::vector<T> proj(t * d);
    kernels::matmul<T>(cview(C.att), P[S.wo].span(), P[S.bo].span(), proj, t, d, d);
    for (std::size_t i = 0; i < t * d; ++i) x[i] += proj[i];
    C.x_mid = x;

    C.h2.resize(t * d);
    C.mean2.resize(t);
    C.rstd2.resize(t);
    kernels::layernorm_forward<T>(cview(C.x_mid), P[S.ln2_gain].span(), P[S.ln2_offset].span(), C.h2, C.mean2,
                                  C.rstd2, t, d);
    C.u.resize(t * f);
    C.g.resize(t * f);
    kernels::matmul<T>(cview(C.h2), P[S.w1].span(), P[S.b1].span(), C.u, t, d, f);
    kernels::gelu_forward<T>(cview(C.u), C.g);
    kernels::matmul<T>(cview(C.g), P[S.w2].span(), P[S.b2].span(), proj, t, f, d);
    for (std::size_t i = 0; i < t * d; ++i) x[i] += proj[i];
  }

  cache.x_final = std::move(x);
  cache.hf.resize(t * d);
  cache.mean_f.resize(t);
  cache.rstd_f.resize(t);
  kernels::layernorm_forward<T>(cview(cache.x_final), P[L.lnf_gain].span(), P[L.lnf_offset].span(), cache.hf,
                                cache.mean_f, cache.rstd_f, t, d);
}

/// Propagates dhf (t x d, gradient w.r.t. the final-norm output) back to
/// every trunk parameter, accumulating into grads.
template <class T>
void backward_trunk(const Checkpoint<T>& ckpt, const Layout& L, const TrunkCache<T>& cache, std::span<const T> dhf,
                    ParameterSet<T>& G) {
  const auto& cfg = ckpt.config;
  const auto& P = ckpt.params;
  const std::size_t t = cache.t;
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ff;
  const std::span<const std::uint8_t> mask(cache.mask);

  std::vector<T> dx(t * d, T{0});
  kernels::layernorm_backward<T>(dhf, cview(cache.x_final), P[L.lnf_gain].span(), cview(cache.mean_f),
                                 cview(cache.rstd_f), dx, G[L.lnf_gain].span(), G[L.lnf_offset].span(), t, d);

  std::vector<T> dg(t * f);
  std::vector<T> du(t * f);
  std::vector<T> dh(t * d);
  std::vector<T> datt(t * d);
  std::vector<T> dq(t * d);
  std::vector<T> dk(t * d);
  std::vector<T> dv(t * d);
  for (std::size_t li = cfg.n_layers; li-- > 0;) {
    const auto& S = L.layers[li];
    const auto& C = cache.layers[li];

    // MLP branch: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
    kernels::matmul_backward_weight<T>(cview(C.g), cview(dx), G[S.w2].span(), G[S.b2].span(), t, f, d);
    std::fill(dg.begin(), dg.end(), T{0});
    kernels::matmul_backward_input<T>(cview(dx), P[S.w2].span(), dg, t, f, d);
    kernels::gelu_backward<T>(cview(C.u), cview(dg), du);
    kernels::matmul_backward_weight<T>(cview(C.h2), cview(du), G[S.w1].span(), G[S.b1].span(), t, d, f);
    std::fill(dh.begin(), dh.end(), T{0});
    kernels::matmul_backward_input<T>(cview(du), P[S.w1].span(), dh, t, d, f);
    kernels::layernorm_backward<T>(cview(dh), cview(C.x_mid), P[S.ln2_gain].span(), cview(C.mean2),
                                   cview(C.rstd2), dx, G[S.ln2_gain].span(), G[S.ln2_offset].span(), t, d);

    // Attention branch: x_mid = x_in + attn(h1) Wo + bo
    kernels::matmul_backward_weight<T>(cview(C.att), cview(dx), G[S.wo].span(), G[S.bo].span(), t, d, d);
    std::fill(datt.begin(), datt.end(), T{0});
    kernels::matmul_backward_input<T>(cview(dx), P[S.wo].span(), datt, t, d, d);
    kernels::attention_backward<T>(cview(C.q), cview(C.k), cview(C.v), cview(C.probs), mask, cview(datt), dq, dk,
                                   dv, t, d, cfg.n_heads);
    kernels::matmul_backward_weight<T>(cview(C.h1), cview(dq), G[S.wq].span(), G[S.bq].span(), t, d, d);
    kernels::matmul_backward_weight<T>(cview(C.h1), cview(dk), G[S.wk].span(), G[S.bk].span(), t, d, d);
    kernels::matmul_backward_weight<T>(cview(C.h1), cview(dv), G[S.wv].span(), G[S.bv].span(), t, d, d);
    std::fill(dh.begin(), dh.end(), T{0});
    kernels::matmul_backward_input<T>(cview(dq), P[S.wq].span(), dh, t, d, d);
    kernels::matmul_backward_input<T>(cview(dk), P[S.wk].span(), dh, t, d, d);
    kernels::matmul_backward_input<T>(cview(dv), P[S.wv].span(), dh, t, d, d);
    kernels::layernorm_backward<T>(cview(dh), cview(C.x_in), P[S.ln1_gain].span(), cview(C.mean1),
                                   cview(C.rstd1), dx, G[S.ln1_gain].span(), G[S.ln1_offset].span(), t, d);
  }

  auto& dtok = G[L.tok_emb].values;
  auto& dpos = G[L.pos_emb].values;
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t id = static_cast<std::size_t>(cache.tokens[i]);
    const std::size_t p = cache.positions[i];
    for (std::size_t c = 0; c < d; ++c) {
      dtok[id * d + c] += dx[i * d + c];
      dpos[p * d + c] += dx[i * d + c];
    }
  }
}

template <class T>
void require_head(const ModelConfig& cfg, HeadType head) {
  if (cfg.head_type != head) {
    throw ConfigError(head == HeadType::lm ? "operation needs a language-model head"
                                           : "operation needs a classification head");
  }
}

/// logits (rows x V) for the given rows of hf.
template <class T>
void lm_logits(const Checkpoint<T>& ckpt, const Layout& L, std::span<const T> rows_hf, std::size_t rows,
               std::span<T> logits) {
  const auto& cfg = ckpt.config;
  const std::size_t d = cfg.d_model;
  const std::size_t V = cfg.vocab_size;
  if (cfg.tie_lm_head) {
    std::fill(logits.begin(), logits.end(), T{0});
    kernels::matmul_backward_input<T>(rows_hf, ckpt.params[L.tok_emb].span(), logits, rows, V, d);
  } else {
    kernels::matmul<T>(rows_hf, ckpt.params[L.lm_head].span(), {}, logits, rows, d, V);
  }
}

/// Softmax cross-entropy of one row. Overwrites row with softmax
/// probabilities and returns -log p[target].
template <class T>
double softmax_xent_inplace(std::span<T> row, std::size_t target) {
  T max_logit = -std::numeric_limits<T>::infinity();
  for (auto v : row) max_logit = std::max(max_logit, v);
  const T shifted_target = row[target] - max_logit;
  T sum{0};
  for (auto& v : row) {
    v = std::exp(v - max_logit);
    sum += v;
  }
  const double loss = std::log(static_cast<double>(sum)) - static_cast<double>(shifted_target);
  for (auto& v : row) v /= sum;
  return loss;
}

template <class T>
void check_cls_frame(std::span<const TokenId> tokens, const SpecialTokens& specials) {
  if (tokens.size() < 2 || tokens.front() != specials.bos || tokens.back() != specials.eos) {
    throw ShapeError("classification input must be framed as BOS q EOS");
  }
  for (std::size_t i = 1; i + 1 < tokens.size(); ++i) {
    if (tokens[i] == specials.bos || tokens[i] == specials.eos) {
      throw ShapeError("classification input holds more than one BOS/EOS frame");
    }
  }
}

template <class T>
std::array<T, 3> cls_logits_at(const Checkpoint<T>& ckpt, const Layout& L, std::span<const T> hidden) {
  const auto& W = ckpt.params[L.cls_w].values;
  const auto& b = ckpt.params[L.cls_b].values;
  const std::size_t d = ckpt.config.d_model;
  std::array<T, 3> out{};
  for (std::size_t c = 0; c < 3; ++c) {
    T s = b[c];
    for (std::size_t i = 0; i < d; ++i) s += hidden[i] * W[i * 3 + c];
    out[c] = s;
  }
  return out;
}

/// Adds dlogits * scale through the class head at hf row `pool`.
template <class T>
void cls_head_backward(const Checkpoint<T>& ckpt, const Layout& L, std::span<const T> hidden,
                       const std::array<T, 3>& dlogits, std::span<T> dhidden, ParameterSet<T>& G) {
  const std::size_t d = ckpt.config.d_model;
  const auto& W = ckpt.params[L.cls_w].values;
  auto& dW = G[L.cls_w].values;
  auto& db = G[L.cls_b].values;
  for (std::size_t c = 0; c < 3; ++c) db[c] += dlogits[c];
  for (std::size_t i = 0; i < d; ++i) {
    T s{0};
    for (std::size_t c = 0; c < 3; ++c) {
      dW[i * 3 + c] += hidden[i] * dlogits[c];
      s += dlogits[c] * W[i * 3 + c];
    }
    dhidden[i] += s;
  }
}

template <class T>
void check_finite(double loss) {
  if (!std::isfinite(loss)) throw DivergenceError("non-finite loss in backward pass");
}

}  // namespace

template <class T>
Checkpoint<T> init(const ModelConfig& config) {
  config.validate();
  if (static_cast<std::size_t>(config.float_width) != 8 * sizeof(T)) {
    throw ConfigError("model config: float_width " + std::to_string(static_cast<int>(config.float_width)) +
                      " does not match the requested precision");
  }
  Checkpoint<T> ckpt;
  ckpt.config = config;
  auto& P = ckpt.params;
  const std::size_t d = config.d_model;
  const std::size_t f = config.d_ff;
  P.add("tok_emb", {config.vocab_size, d});
  P.add("pos_emb", {config.max_seq_len, d});
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    P.add(layer_name(l, "ln1.gain"), {d});
    P.add(layer_name(l, "ln1.offset"), {d});
    for (const char* proj : {"q", "k", "v", "o"}) {
      P.add(layer_name(l, ("attn.w" + std::string(proj)).c_str()), {d, d});
      P.add(layer_name(l, ("attn.b" + std::string(proj)).c_str()), {d});
    }
    P.add(layer_name(l, "ln2.gain"), {d});
    P.add(layer_name(l, "ln2.offset"), {d});
    P.add(layer_name(l, "mlp.w1"), {d, f});
    P.add(layer_name(l, "mlp.b1"), {f});
    P.add(layer_name(l, "mlp.w2"), {f, d});
    P.add(layer_name(l, "mlp.b2"), {d});
  }
  P.add("lnf.gain", {d});
  P.add("lnf.offset", {d});
  if (config.head_type == HeadType::lm) {
    if (!config.tie_lm_head) P.add("lm_head.w", {d, config.vocab_size});
  } else {
    P.add("cls_head.w", {d, 3});
    P.add("cls_head.b", {3});
  }

  constexpr double kStd = 0.02;
  const double residual_std = kStd / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  SplitMix64 rng(config.init_seed);
  for (auto& tensor : P) {
    const auto& name = tensor.name;
    if (name.ends_with(".gain")) {
      std::fill(tensor.values.begin(), tensor.values.end(), T{1});
    } else if (tensor.rank() == 2) {
      const bool residual = name.ends_with("attn.wo") || name.ends_with("mlp.w2");
      const double std = residual ? residual_std : kStd;
      for (auto& v : tensor.values) v = static_cast<T>(std * rng.normal());
    }
  }
  return ckpt;
}

template <class T>
Matrix<T> forward_lm(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, const AttentionMask& mask) {
  require_head<T>(ckpt.config, HeadType::lm);
  if (mask.size() != tokens.size()) throw ShapeError("forward_lm: mask size does not match token count");
  const auto L = resolve(ckpt.params, ckpt.config);
  TrunkCache<T> cache;
  forward_trunk(ckpt, L, tokens, mask.data(), cache);
  Matrix<T> logits(tokens.size(), ckpt.config.vocab_size);
  lm_logits(ckpt, L, cview(cache.hf), tokens.size(), std::span<T>(logits.values));
  return logits;
}

template <class T>
std::array<T, 3> forward_cls(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                             const SpecialTokens& specials) {
  require_head<T>(ckpt.config, HeadType::classification);
  check_cls_frame<T>(tokens, specials);
  const auto L = resolve(ckpt.params, ckpt.config);
  TrunkCache<T> cache;
  const auto mask = AttentionMask::causal(tokens.size());
  forward_trunk(ckpt, L, tokens, mask.data(), cache);
  const std::size_t d = ckpt.config.d_model;
  return cls_logits_at(ckpt, L, cview(cache.hf).subspan((tokens.size() - 1) * d, d));
}

template <class T>
LossValue loss_lm(const Matrix<T>& logits, std::span<const TokenId> labels, TokenId ignore_label) {
  if (labels.size() != logits.rows) throw ShapeError("loss_lm: labels length does not match logits rows");
  LossValue out;
  double total = 0.0;
  std::vector<T> row(logits.cols);
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] == ignore_label) continue;
    if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= logits.cols) {
      throw ShapeError("loss_lm: label " + std::to_string(labels[t]) + " out of range");
    }
    std::copy(logits.row(t).begin(), logits.row(t).end(), row.begin());
    total += softmax_xent_inplace<T>(row, static_cast<std::size_t>(labels[t]));
    ++out.counted;
  }
  out.value = out.counted == 0 ? 0.0 : total / static_cast<double>(out.counted);
  return out;
}

template <class T>
std::array<T, 3> softmax(const std::array<T, 3>& logits) {
  std::array<T, 3> p = logits;
  softmax_xent_inplace<T>(p, 0);
  return p;
}

template <class T>
T loss_cls(const std::array<T, 3>& logits, int class_id) {
  if (class_id < 0 || class_id > 2) throw ShapeError("loss_cls: class id out of range");
  std::array<T, 3> row = logits;
  return static_cast<T>(softmax_xent_inplace<T>(row, static_cast<std::size_t>(class_id)));
}

template <class T>
LossValue accumulate_lm_gradients(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                                  const AttentionMask& mask, std::span<const TokenId> labels, T scale,
                                  ParameterSet<T>& grads) {
  require_head<T>(ckpt.config, HeadType::lm);
  if (labels.size() != tokens.size() || mask.size() != tokens.size()) {
    throw ShapeError("backward_lm: tokens, labels and mask sizes differ");
  }
  if (!grads.same_layout(ckpt.params)) throw ShapeError("backward_lm: gradient layout mismatch");
  const auto& cfg = ckpt.config;
  const std::size_t d = cfg.d_model;
  const std::size_t V = cfg.vocab_size;

  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    if (labels[t] == kIgnoreLabel) continue;
    if (labels[t] < 0 || static_cast<std::size_t>(labels[t]) >= V) {
      throw ShapeError("backward_lm: label " + std::to_string(labels[t]) + " out of range");
    }
    rows.push_back(t);
  }
  LossValue out;
  out.counted = rows.size();
  if (rows.empty()) return out;

  const auto L = resolve(ckpt.params, cfg);
  TrunkCache<T> cache;
  forward_trunk(ckpt, L, tokens, mask.data(), cache);

  // Only counted rows reach the loss, so only they need the head.
  const std::size_t R = rows.size();
  std::vector<T> hr(R * d);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(cache.hf.begin() + static_cast<std::ptrdiff_t>(rows[r] * d), d,
                hr.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<T> dlogits(R * V);
  lm_logits(ckpt, L, cview(hr), R, std::span<T>(dlogits));
  double total = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    auto row = std::span<T>(dlogits).subspan(r * V, V);
    const auto target = static_cast<std::size_t>(labels[rows[r]]);
    total += softmax_xent_inplace<T>(row, target);
    row[target] -= T{1};
    for (auto& v : row) v *= scale;
  }
  check_finite<T>(total);
  out.value = total;

  std::vector<T> dhr(R * d, T{0});
  if (cfg.tie_lm_head) {
    kernels::matmul_backward_weight<T>(cview(dlogits), cview(hr), grads[L.tok_emb].span(), {}, R, V, d);
    kernels::matmul<T>(cview(dlogits), ckpt.params[L.tok_emb].span(), {}, dhr, R, V, d);
  } else {
    kernels::matmul_backward_weight<T>(cview(hr), cview(dlogits), grads[L.lm_head].span(), {}, R, d, V);
    kernels::matmul_backward_input<T>(cview(dlogits), ckpt.params[L.lm_head].span(), dhr, R, d, V);
  }
  std::vector<T> dhf(tokens.size() * d, T{0});
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(dhr.begin() + static_cast<std::ptrdiff_t>(r * d), d,
                dhf.begin() + static_cast<std::ptrdiff_t>(rows[r] * d));
  }
  backward_trunk(ckpt, L, cache, cview(dhf), grads);
  return out;
}

template <class T>
Gradients<T> backward_lm(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, const AttentionMask& mask,
                         std::span<const TokenId> labels) {
  Gradients<T> g;
  g.values = ckpt.params.zeros_like();
  std::size_t counted = 0;
  for (auto label : labels) counted += label == kIgnoreLabel ? 0 : 1;
  const T scale = counted == 0 ? T{0} : T{1} / static_cast<T>(counted);
  const auto sum = accumulate_lm_gradients(ckpt, tokens, mask, labels, scale, g.values);
  g.counted = sum.counted;
  g.loss = counted == 0 ? 0.0 : sum.value / static_cast<double>(counted);
  return g;
}

template <class T>
double accumulate_cls_gradients(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, int class_id,
                                T scale, ParameterSet<T>& grads, const SpecialTokens& specials) {
  require_head<T>(ckpt.config, HeadType::classification);
  check_cls_frame<T>(tokens, specials);
  if (class_id < 0 || class_id > 2) throw ShapeError("backward_cls: class id out of range");
  if (!grads.same_layout(ckpt.params)) throw ShapeError("backward_cls: gradient layout mismatch");
  const auto L = resolve(ckpt.params, ckpt.config);
  const std::size_t d = ckpt.config.d_model;
  const std::size_t t = tokens.size();
  TrunkCache<T> cache;
  const auto mask = AttentionMask::causal(t);
  forward_trunk(ckpt, L, tokens, mask.data(), cache);
  const auto hidden = cview(cache.hf).subspan((t - 1) * d, d);
  auto p = cls_logits_at(ckpt, L, hidden);
  const double loss = softmax_xent_inplace<T>(p, static_cast<std::size_t>(class_id));
  check_finite<T>(loss);
  p[static_cast<std::size_t>(class_id)] -= T{1};
  for (auto& v : p) v *= scale;
  std::vector<T> dhf(t * d, T{0});
  cls_head_backward(ckpt, L, hidden, p, std::span<T>(dhf).subspan((t - 1) * d, d), grads);
  backward_trunk(ckpt, L, cache, cview(dhf), grads);
  return loss;
}

template <class T>
Gradients<T> backward_cls(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens, int class_id,
                          const SpecialTokens& specials) {
  Gradients<T> g;
  g.values = ckpt.params.zeros_like();
  g.loss = accumulate_cls_gradients(ckpt, tokens, class_id, T{1}, g.values, specials);
  g.counted = 1;
  return g;
}

template <class T>
Gradients<T> backward_cls_packed(const Checkpoint<T>& ckpt, std::span<const TokenId> tokens,
                                 const AttentionMask& mask, std::span<const std::size_t> pool_positions,
                                 std::span<const int> class_ids) {
  require_head<T>(ckpt.config, HeadType::classification);
  if (pool_positions.size() != class_ids.size() || pool_positions.empty()) {
    throw ShapeError("backward_cls_packed: need one class id per pooled position");
  }
  if (mask.size() != tokens.size()) throw ShapeError("backward_cls_packed: mask size mismatch");
  const auto L = resolve(ckpt.params, ckpt.config);
  const std::size_t d = ckpt.config.d_model;
  TrunkCache<T> cache;
  forward_trunk(ckpt, L, tokens, mask.data(), cache);

  Gradients<T> g;
  g.values = ckpt.params.zeros_like();
  const T scale = T{1} / static_cast<T>(pool_positions.size());
  std::vector<T> dhf(tokens.size() * d, T{0});
  double total = 0.0;
  for (std::size_t s = 0; s < pool_positions.size(); ++s) {
    const std::size_t at = pool_positions[s];
    if (at >= tokens.size() || class_ids[s] < 0 || class_ids[s] > 2) {
      throw ShapeError("backward_cls_packed: bad pool position or class id");
    }
    const auto hidden = cview(cache.hf).subspan(at * d, d);
    auto p = cls_logits_at(ckpt, L, hidden);
    total += softmax_xent_inplace<T>(p, static_cast<std::size_t>(class_ids[s]));
    p[static_cast<std::size_t>(class_ids[s])] -= T{1};
    for (auto& v : p) v *= scale;
    cls_head_backward(ckpt, L, hidden, p, std::span<T>(dhf).subspan(at * d, d), g.values);
  }
  check_finite<T>(total);
  backward_trunk(ckpt, L, cache, cview(dhf), g.values);
  g.loss = total / static_cast<double>(pool_positions.size());
  g.counted = pool_positions.size();
  return g;
}

template <class T>
TokenId constrained_argmax(std::span<const T> logits_row, std::span<const TokenId> candidates) {
  if (candidates.empty()) throw ShapeError("constrained_argmax: no candidates");
  TokenId best = candidates[0];
  for (auto id : candidates) {
    if (id < 0 || static_cast<std::size_t>(id) >= logits_row.size()) {
      throw ShapeError("constrained_argmax: candidate id out of range");
    }
    const T v = logits_row[static_cast<std::size_t>(id)];
    const T b = logits_row[static_cast<std::size_t>(best)];
    if (v > b || (v == b && id < best)) best = id;
  }
  return best;
}

std::vector<TokenId> frame_prompt(std::span<const TokenId> prompt_tokens, const SpecialTokens& specials,
                                  std::size_t max_len) {
  if (max_len < 3) throw ShapeError("frame_prompt: max_seq_len too small");
  const std::size_t keep = std::min(prompt_tokens.size(), max_len - 2);
  std::vector<TokenId> framed;
  framed.reserve(keep + 2);
  framed.push_back(specials.bos);
  framed.insert(framed.end(), prompt_tokens.end() - static_cast<std::ptrdiff_t>(keep), prompt_tokens.end());
  framed.push_back(specials.eos);
  return framed;
}

template <class T>
std::array<T, 3> answer_logits(const Checkpoint<T>& ckpt, std::span<const TokenId> prompt_tokens,
                               const SpecialTokens& specials) {
  require_head<T>(ckpt.config, HeadType::lm);
  const auto framed = frame_prompt(prompt_tokens, specials, ckpt.config.max_seq_len);
  const auto L = resolve(ckpt.params, ckpt.config);
  TrunkCache<T> cache;
  const auto mask = AttentionMask::causal(framed.size());
  forward_trunk(ckpt, L, framed, mask.data(), cache);
  const std::size_t d = ckpt.config.d_model;
  const std::size_t V = ckpt.config.vocab_size;
  const auto hidden = cview(cache.hf).subspan((framed.size() - 1) * d, d);
  std::array<T, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    const auto id = static_cast<std::size_t>(specials.answers[a]);
    T s{0};
    if (ckpt.config.tie_lm_head) {
      const auto& E = ckpt.params[L.tok_emb].values;
      for (std::size_t c = 0; c < d; ++c) s += hidden[c] * E[id * d + c];
    } else {
      const auto& W = ckpt.params[L.lm_head].values;
      for (std::size_t c = 0; c < d; ++c) s += hidden[c] * W[c * V + id];
    }
    out[a] = s;
  }
  return out;
}

template <class T>
TokenId generate_answer(const Checkpoint<T>& ckpt, std::span<const TokenId> prompt_tokens,
                        const SpecialTokens& specials) {
  const auto logits = answer_logits(ckpt, prompt_tokens, specials);
  // Scatter into a sparse row so the documented tie-break is shared.
  TokenId max_id = *std::max_element(specials.answers.begin(), specials.answers.end());
  std::vector<T> row(static_cast<std::size_t>(max_id) + 1, T{0});
  for (std::size_t a = 0; a < 3; ++a) row[static_cast<std::size_t>(specials.answers[a])] = logits[a];
  return constrained_argmax<T>(row, specials.answers);
}

#define FINSENT_INSTANTIATE_MODEL(T)                                                                         \
  template Checkpoint<T> init<T>(const ModelConfig&);                                                       \
  template Matrix<T> forward_lm<T>(const Checkpoint<T>&, std::span<const TokenId>, const AttentionMask&);   \
  template std::array<T, 3> forward_cls<T>(const Checkpoint<T>&, std::span<const TokenId>,                  \
                                           const SpecialTokens&);                                           \
  template LossValue loss_lm<T>(const Matrix<T>&, std::span<const TokenId>, TokenId);                       \
  template T loss_cls<T>(const std::array<T, 3>&, int);                                                     \
  template std::array<T, 3> softmax<T>(const std::array<T, 3>&);                                            \
  template Gradients<T> backward_lm<T>(const Checkpoint<T>&, std::span<const TokenId>, const AttentionMask&, \
                                       std::span<const TokenId>);                                           \
  template Gradients<T> backward_cls<T>(const Checkpoint<T>&, std::span<const TokenId>, int,                \
                                        const SpecialTokens&);                                              \
  template Gradients<T> backward_cls_packed<T>(const Checkpoint<T>&, std::span<const TokenId>,              \
                                               const AttentionMask&, std::span<const std::size_t>,          \
                                               std::span<const int>);                                       \
  template LossValue accumulate_lm_gradients<T>(const Checkpoint<T>&, std::span<const TokenId>,             \
                                                const AttentionMask&, std::span<const TokenId>, T,          \
                                                ParameterSet<T>&);                                          \
  template double accumulate_cls_gradients<T>(const Checkpoint<T>&, std::span<const TokenId>, int, T,       \
                                              ParameterSet<T>&, const SpecialTokens&);                      \
  template TokenId constrained_argmax<T>(std::span<const T>, std::span<const TokenId>);                     \
  template TokenId generate_answer<T>(const Checkpoint<T>&, std::span<const TokenId>, const SpecialTokens&); \
  template std::array<T, 3> answer_logits<T>(const Checkpoint<T>&, std::span<const TokenId>,                \
                                             const SpecialTokens&);

FINSENT_INSTANTIATE_MODEL(float)
FINSENT_INSTANTIATE_MODEL(double)

}  // namespace finsent
