// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "finsent/model.hpp"

namespace finsent {

// Checkpoint file layout (all integers little-endian):
//
//   "FSNT"                magic
//   u32                   format version (1)
//   u32 n, n bytes        config block: UTF-8 "key=value\n" lines
//   u64                   tensor count
//   per tensor:
//     u32 n, n bytes      name
//     u32                 rank
//     u64 * rank          dims
//     values              row-major, 4 or 8 bytes each (model.float_width)
//
// Optimizer moments are stored as tensors named "optim.m/<param>" and
// "optim.v/<param>".

inline constexpr std::uint32_t kCheckpointVersion = 1;

using AnyCheckpoint = std::variant<Checkpoint<float>, Checkpoint<double>>;

/// "model.d_model" = "128", ... in a fixed order.
std::vector<std::pair<std::string, std::string>> model_config_entries(const ModelConfig& config);
/// Sets one field from a key without the "model." prefix. Returns false
/// for an unknown key; throws ConfigError for an unparsable value.
bool set_model_field(ModelConfig& config, std::string_view key, std::string_view value);

std::string_view head_type_name(HeadType head);
HeadType parse_head_type(std::string_view text);

template <class T>
std::string serialize_checkpoint(const Checkpoint<T>& ckpt);
AnyCheckpoint parse_checkpoint(std::string_view bytes);

template <class T>
void save_checkpoint(const Checkpoint<T>& ckpt, const std::filesystem::path& path);
AnyCheckpoint load_checkpoint(const std::filesystem::path& path);

const ModelConfig& config_of(const AnyCheckpoint& ckpt);

}  // namespace finsent
