#include "medicat/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "medicat/error.hpp"

namespace medicat {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'C', 'A', 'T'};
constexpr std::size_t kHeader = 4 + 1 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

DType parse_dtype(const std::string& s) {
  if (s == "f64") return DType::f64;
  if (s == "f32") return DType::f32;
  throw CheckpointError(CheckpointErrorKind::malformed, "unknown dtype '" + s + "'");
}

}  // namespace

std::string_view dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }
std::size_t dtype_size(DType dtype) { return dtype == DType::f32 ? 4 : 8; }

const NamedArray* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (shape_numel(t.shape) != t.values.size())
      throw ContractError("checkpoint tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                          " values for shape " + shape_str(t.shape));
    entries.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", dtype_name(ckpt.dtype)}, {"offset", offset}});
    offset += t.values.size() * dtype_size(ckpt.dtype);
  }
  const json manifest = {{"tensors", entries},
                         {"config", ckpt.config},
                         {"optimizer", {{"step", ckpt.optimizer_step}}}};
  const std::string text = manifest.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(Checkpoint::kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& t : ckpt.tensors)
    for (double v : t.values) {
      if (ckpt.dtype == DType::f64)
        put_le<double>(out, v);
      else
        put_le<float>(out, static_cast<float>(v));
    }
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin()))
    throw CheckpointError(CheckpointErrorKind::bad_magic, "not a checkpoint: magic tag is not 'MCAT'");
  if (bytes.size() < kHeader)
    throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint header truncated");
  if (bytes[4] != Checkpoint::kVersion)
    throw CheckpointError(CheckpointErrorKind::bad_version,
                          "unsupported checkpoint version " + std::to_string(bytes[4]) +
                              " (expected " + std::to_string(Checkpoint::kVersion) + ")");
  const auto manifest_len = get_le<std::uint64_t>(bytes.data() + 5);
  if (manifest_len > bytes.size() - kHeader)
    throw CheckpointError(CheckpointErrorKind::malformed, "manifest length exceeds file size");
  const std::size_t payload_start = kHeader + manifest_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  Checkpoint ckpt;
  struct Extent {
    std::uint64_t begin, end;
    std::size_t index;
  };
  std::vector<Extent> extents;
  std::vector<std::uint64_t> offsets;
  try {
    const json manifest = json::parse(bytes.begin() + kHeader, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
    ckpt.config = manifest.at("config");
    ckpt.optimizer_step = manifest.at("optimizer").at("step").get<std::uint64_t>();
    bool first = true;
    for (const auto& e : manifest.at("tensors")) {
      NamedArray t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const DType dtype = parse_dtype(e.at("dtype").get<std::string>());
      if (!first && dtype != ckpt.dtype)
        throw CheckpointError(CheckpointErrorKind::malformed, "mixed tensor dtypes");
      ckpt.dtype = dtype;
      first = false;
      const auto offset = e.at("offset").get<std::uint64_t>();
      const std::uint64_t size = shape_numel(t.shape) * dtype_size(dtype);
      extents.push_back({offset, offset + size, ckpt.tensors.size()});
      ckpt.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("checkpoint manifest: ") + e.what());
  }

  // Extents must tile [0, payload_size) exactly.
  auto sorted = extents;
  std::sort(sorted.begin(), sorted.end(), [](const Extent& a, const Extent& b) { return a.begin < b.begin; });
  std::uint64_t cursor = 0;
  for (const auto& ex : sorted) {
    const auto& name = ckpt.tensors[ex.index].name;
    if (ex.begin != cursor || ex.end < ex.begin || ex.end > payload_size)
      throw CheckpointError(CheckpointErrorKind::bad_offset,
                            "tensor '" + name + "' spans bytes [" + std::to_string(ex.begin) + ", " +
                                std::to_string(ex.end) + ") but the payload has " +
                                std::to_string(payload_size) + " bytes (next free offset " +
                                std::to_string(cursor) + ")");
    cursor = ex.end;
  }
  if (cursor != payload_size)
    throw CheckpointError(CheckpointErrorKind::bad_offset,
                          "manifest covers " + std::to_string(cursor) + " of " +
                              std::to_string(payload_size) + " payload bytes");

  const std::uint8_t* payload = bytes.data() + payload_start;
  for (const auto& ex : extents) {
    auto& t = ckpt.tensors[ex.index];
    const std::size_t n = shape_numel(t.shape);
    t.values.resize(n);
    const std::uint8_t* p = payload + ex.begin;
    for (std::size_t i = 0; i < n; ++i)
      t.values[i] = ckpt.dtype == DType::f64 ? get_le<double>(p + 8 * i)
                                             : static_cast<double>(get_le<float>(p + 4 * i));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(e.kind(), path.string() + ": " + e.what());
  }
}

}  // namespace medicat
