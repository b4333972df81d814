#pragma once

// Checkpoint file layout (all integers little-endian):
//   "MCAT" | u8 version (1) | u64 manifest length | UTF-8 JSON manifest | payload
// The manifest lists every tensor as {name, shape, dtype, offset}, offsets
// relative to the payload start; tensors tile the payload exactly. It also
// carries the training config echo and the optimizer step counter.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "medicat/tensor.hpp"

namespace medicat {

enum class DType { f32, f64 };

std::string_view dtype_name(DType dtype);
std::size_t dtype_size(DType dtype);

// Values are held as double; f32 checkpoints round-trip exactly because every
// float is representable as a double.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr std::uint8_t kVersion = 1;

  DType dtype = DType::f64;
  std::vector<NamedArray> tensors;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t optimizer_step = 0;

  const NamedArray* find(std::string_view name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws CheckpointError (bad_magic, bad_version, bad_offset, malformed).
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace medicat
