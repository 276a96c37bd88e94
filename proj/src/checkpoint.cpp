// SPDX-License-Identifier: Apache-2.0
#include "finsent/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "finsent/errors.hpp"

namespace finsent {

namespace {

constexpr std::string_view kMagic = "FSNT";
constexpr std::string_view kMomentPrefix1 = "optim.m/";
constexpr std::string_view kMomentPrefix2 = "optim.v/";

template <class U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out += static_cast<char>((value >> (8 * i)) & 0xFF);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class U>
  U le() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError("checkpoint: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <class N>
N parse_number(std::string_view key, std::string_view text) {
  N value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("cannot parse value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("expected true/false for " + std::string(key) + ", got '" + std::string(text) + "'");
}

template <class T>
void write_tensor(std::string& out, const std::string& name, const Tensor<T>& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (auto dim : t.shape) put_le<std::uint64_t>(out, dim);
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.values) {
    if (!std::isfinite(v)) throw DataError("checkpoint: parameter " + name + " is not finite");
    put_le<Bits>(out, std::bit_cast<Bits>(v));
  }
}

template <class T>
Checkpoint<T> read_body(Reader& in, const ModelConfig& config, std::uint64_t step,
                        std::map<std::string, std::string> metadata, std::optional<std::uint64_t> updates) {
  Checkpoint<T> ckpt;
  ckpt.config = config;
  ckpt.step = step;
  ckpt.metadata = std::move(metadata);
  const auto expected = init<T>(config).params.zeros_like();

  std::map<std::string, Tensor<T>> loaded;
  const auto count = in.le<std::uint64_t>();
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (std::uint64_t i = 0; i < count; ++i) {
    Tensor<T> t;
    t.name = std::string(in.take(in.le<std::uint32_t>()));
    const auto rank = in.le<std::uint32_t>();
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(in.le<std::uint64_t>()));
      n *= t.shape.back();
    }
    t.values.resize(n);
    for (auto& v : t.values) {
      v = std::bit_cast<T>(in.le<Bits>());
      if (!std::isfinite(v)) throw DataError("checkpoint: tensor " + t.name + " holds a non-finite value");
    }
    const auto name = t.name;
    if (!loaded.emplace(name, std::move(t)).second) throw DataError("checkpoint: duplicate tensor " + name);
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes after last tensor");

  const auto take = [&](const std::string& name, const Tensor<T>& like) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw DataError("checkpoint: missing tensor " + name);
    if (it->second.shape != like.shape) throw DataError("checkpoint: tensor " + name + " has the wrong shape");
    Tensor<T> out = std::move(it->second);
    loaded.erase(it);
    return out;
  };
  ckpt.params = expected.zeros_like();
  for (std::size_t i = 0; i < expected.size(); ++i) ckpt.params[i] = take(expected[i].name, expected[i]);
  if (updates) {
    OptimizerState<T> state;
    state.updates = *updates;
    state.first_moment = expected.zeros_like();
    state.second_moment = expected.zeros_like();
    for (std::size_t i = 0; i < expected.size(); ++i) {
      auto m = take(std::string(kMomentPrefix1) + expected[i].name, expected[i]);
      auto v = take(std::string(kMomentPrefix2) + expected[i].name, expected[i]);
      state.first_moment[i].values = std::move(m.values);
      state.second_moment[i].values = std::move(v.values);
    }
    ckpt.optimizer = std::move(state);
  }
  if (!loaded.empty()) throw DataError("checkpoint: unexpected tensor " + loaded.begin()->first);
  return ckpt;
}

}  // namespace

std::string_view head_type_name(HeadType head) { return head == HeadType::lm ? "lm" : "classification"; }

HeadType parse_head_type(std::string_view text) {
  if (text == "lm") return HeadType::lm;
  if (text == "classification") return HeadType::classification;
  throw ConfigError("unknown head type '" + std::string(text) + "'");
}

std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& c) {
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  return {
      {"model.vocab_size", std::to_string(c.vocab_size)},
      {"model.d_model", std::to_string(c.d_model)},
      {"model.n_layers", std::to_string(c.n_layers)},
      {"model.n_heads", std::to_string(c.n_heads)},
      {"model.d_ff", std::to_string(c.d_ff)},
      {"model.max_seq_len", std::to_string(c.max_seq_len)},
      {"model.head_type", std::string(head_type_name(c.head_type))},
      {"model.float_width", std::to_string(static_cast<int>(c.float_width))},
      {"model.init_seed", std::to_string(c.init_seed)},
      {"model.tie_lm_head", b(c.tie_lm_head)},
      {"model.segment_local_positions", b(c.segment_local_positions)},
  };
}

bool set_model_field(ModelConfig& c, std::string_view key, std::string_view value) {
  if (key == "vocab_size") {
    c.vocab_size = parse_number<std::size_t>(key, value);
  } else if (key == "d_model") {
    c.d_model = parse_number<std::size_t>(key, value);
  } else if (key == "n_layers") {
    c.n_layers = parse_number<std::size_t>(key, value);
  } else if (key == "n_heads") {
    c.n_heads = parse_number<std::size_t>(key, value);
  } else if (key == "d_ff") {
    c.d_ff = parse_number<std::size_t>(key, value);
  } else if (key == "max_seq_len") {
    c.max_seq_len = parse_number<std::size_t>(key, value);
  } else if (key == "head_type") {
    c.head_type = parse_head_type(value);
  } else if (key == "float_width") {
    const auto width = parse_number<int>(key, value);
    if (width != 32 && width != 64) throw ConfigError("model.float_width must be 32 or 64");
    c.float_width = static_cast<FloatWidth>(width);
  } else if (key == "init_seed") {
    c.init_seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "tie_lm_head") {
    c.tie_lm_head = parse_bool(key, value);
  } else if (key == "segment_local_positions") {
    c.segment_local_positions = parse_bool(key, value);
  } else {
    return false;
  }
  return true;
}

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ckpt) {
  if (static_cast<std::size_t>(ckpt.config.float_width) != sizeof(T) * 8) {
    throw ConfigError("checkpoint: float_width does not match the stored scalar type");
  }
  std::string block;
  for (const auto& [k, v] : model_config_entries(ckpt.config)) block += k + "=" + v + "\n";
  block += "checkpoint.step=" + std::to_string(ckpt.step) + "\n";
  if (ckpt.optimizer) block += "optimizer.updates=" + std::to_string(ckpt.optimizer->updates) + "\n";
  for (const auto& [k, v] : ckpt.metadata) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw ConfigError("checkpoint: metadata keys and values must be single-line");
    }
    block += "meta." + k + "=" + v + "\n";
  }

  std::string out(kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(block.size()));
  out += block;
  std::uint64_t count = ckpt.params.size();
  if (ckpt.optimizer) count += 2 * ckpt.params.size();
  put_le<std::uint64_t>(out, count);
  for (const auto& t : ckpt.params) write_tensor(out, t.name, t);
  if (ckpt.optimizer) {
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      write_tensor(out, std::string(kMomentPrefix1) + ckpt.params[i].name, ckpt.optimizer->first_moment[i]);
      write_tensor(out, std::string(kMomentPrefix2) + ckpt.params[i].name, ckpt.optimizer->second_moment[i]);
    }
  }
  return out;
}

AnyCheckpoint parse_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw DataError("checkpoint: bad magic (expected FSNT)");
  const auto version = in.le<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto block = in.take(in.le<std::uint32_t>());

  ModelConfig config;
  std::uint64_t step = 0;
  std::optional<std::uint64_t> updates;
  std::map<std::string, std::string> metadata;
  std::istringstream lines{std::string(block)};
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint: malformed config line '" + line + "'");
    const std::string_view key(line.data(), eq);
    const std::string_view value(line.data() + eq + 1, line.size() - eq - 1);
    if (key.starts_with("model.")) {
      if (!set_model_field(config, key.substr(6), value)) {
        throw DataError("checkpoint: unknown config key '" + std::string(key) + "'");
      }
    } else if (key == "checkpoint.step") {
      step = parse_number<std::uint64_t>(key, value);
    } else if (key == "optimizer.updates") {
      updates = parse_number<std::uint64_t>(key, value);
    } else if (key.starts_with("meta.")) {
      metadata.emplace(std::string(key.substr(5)), std::string(value));
    } else {
      throw DataError("checkpoint: unknown config key '" + std::string(key) + "'");
    }
  }
  config.validate();
  if (config.float_width == FloatWidth::f64) {
    return read_body<double>(in, config, step, std::move(metadata), updates);
  }
  return read_body<float>(in, config, step, std::move(metadata), updates);
}

template <class T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

AnyCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_checkpoint(buffer.str());
}

const ModelConfig& config_of(const AnyCheckpoint& ckpt) {
  return std::visit([](const auto& c) -> const ModelConfig& { return c.config; }, ckpt);
}

template std::string serialize_checkpoint<float>(const Checkpoint<float>&);
template std::string serialize_checkpoint<double>(const Checkpoint<double>&);
template void save_checkpoint<float>(const Checkpoint<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Checkpoint<double>&, const std::filesystem::path&);

}  // namespace finsent
