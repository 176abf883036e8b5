#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cnnp/model.hpp"

// Checkpoint layout (all integers little-endian):
//   "CNPM" | u32 version (1) | u64 descriptor length L | L bytes UTF-8 JSON
//   { input_shape, layers, class_names, seed } | per parametric layer in
//   declaration order: f32 weights (row-major) then f32 bias.
namespace cnnp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::string& bytes);

/// Returns the number of bytes written.
std::uintmax_t save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace cnnp
