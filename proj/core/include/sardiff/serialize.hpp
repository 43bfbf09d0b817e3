// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <string>
#include <string_view>

#include <json.hpp>

#include "sardiff/params.hpp"
#include "sardiff/tensor.hpp"

// `TNSR` binary container, little-endian throughout.
//
// Tensor record:
//   "TNSR" | u32 rank | u64 extent[rank] | u8 dtype (0 = f64, 1 = f32) | raw data
//
// Checkpoint file:
//   "TNSR" | u32 version (=1) | u64 header length | header JSON (UTF-8)
//   | u64 entry count | { u32 name length | name | u64 absolute offset } ...
//   | tensor records at the listed offsets
namespace sardiff {

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

void write_tensor(std::ostream& os, const Tensor& t, DType dtype = DType::f64);
Tensor read_tensor(std::istream& is);

struct Checkpoint {
  nlohmann::json header = nlohmann::json::object();
  ParamSet tensors;
};

/// Writes to a sibling temp file and renames into place, so an interrupted
/// write never leaves a partial checkpoint at `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, DType dtype = DType::f64);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Atomic text write (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

inline constexpr int kConfigVersion = 1;

/// User-facing JSON configs carry `"version": 1` and may only contain the
/// listed fields (plus `version`). Throws std::invalid_argument otherwise.
void check_config_fields(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view what);

}  // namespace sardiff
