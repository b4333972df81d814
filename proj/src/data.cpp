#include "medicat/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "json.hpp"

#include "medicat/error.hpp"
#include "medicat/random.hpp"

namespace medicat {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val" || name == "validation") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("split", "unknown split '" + std::string(name) + "' (train, val, test)");
}

const SplitData& Dataset::split(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return test;
}

SplitData& Dataset::split(Split s) {
  return const_cast<SplitData&>(static_cast<const Dataset&>(*this).split(s));
}

void Dataset::validate() const {
  if (num_classes < 2 || num_classes > 256)
    throw DataError(DataErrorKind::malformed_descriptor,
                    "num_classes must be in [2, 256], got " + std::to_string(num_classes));
  if (height == 0 || width == 0 || channels == 0)
    throw DataError(DataErrorKind::malformed_descriptor, "image shape must be positive");
  if (mean.size() != channels || std.size() != channels)
    throw DataError(DataErrorKind::malformed_descriptor,
                    "normalisation needs one mean/std per channel");
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto& sd = split(s);
    const std::size_t expected = sd.count() * image_bytes();
    if (sd.images.size() != expected)
      throw DataError(DataErrorKind::size_mismatch,
                      std::string(split_name(s)) + " images: expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(sd.images.size()));
    for (std::size_t i = 0; i < sd.count(); ++i)
      if (sd.labels[i] >= num_classes)
        throw DataError(DataErrorKind::label_range,
                        std::string(split_name(s)) + " label " + std::to_string(sd.labels[i]) +
                            " at index " + std::to_string(i) + " is not below num_classes " +
                            std::to_string(num_classes));
  }
}

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::missing_file, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw DataError(DataErrorKind::missing_file, "missing " + meta_path.string());

  Dataset ds;
  std::size_t counts[3] = {};
  try {
    std::ifstream in(meta_path);
    const json meta = json::parse(in);
    ds.name = meta.at("name").get<std::string>();
    ds.num_classes = meta.at("num_classes").get<std::size_t>();
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw std::invalid_argument("shape must be [H, W, C]");
    ds.height = shape[0];
    ds.width = shape[1];
    ds.channels = shape[2];
    const auto& c = meta.at("counts");
    counts[0] = c.at("train").get<std::size_t>();
    counts[1] = c.at("val").get<std::size_t>();
    counts[2] = c.at("test").get<std::size_t>();
    ds.mean = meta.contains("mean") ? meta["mean"].get<std::vector<double>>()
                                    : std::vector<double>(ds.channels, 0.5);
    ds.std = meta.contains("std") ? meta["std"].get<std::vector<double>>()
                                  : std::vector<double>(ds.channels, 0.5);
  } catch (const json::exception& e) {
    throw DataError(DataErrorKind::malformed_descriptor, meta_path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(DataErrorKind::malformed_descriptor, meta_path.string() + ": " + e.what());
  }
  if (ds.num_classes < 2 || ds.num_classes > 256 || ds.height == 0 || ds.width == 0 ||
      ds.channels == 0 || ds.mean.size() != ds.channels || ds.std.size() != ds.channels)
    throw DataError(DataErrorKind::malformed_descriptor,
                    meta_path.string() + ": inconsistent num_classes, shape or normalisation");

  const Split splits[3] = {Split::train, Split::val, Split::test};
  for (int i = 0; i < 3; ++i) {
    const std::string name(split_name(splits[i]));
    const fs::path img_path = dir / (name + "_images.bin");
    const fs::path lbl_path = dir / (name + "_labels.bin");
    auto images = read_bytes(img_path);
    auto labels = read_bytes(lbl_path);
    const std::size_t expected = counts[i] * ds.image_bytes();
    if (images.size() != expected)
      throw DataError(DataErrorKind::size_mismatch,
                      img_path.string() + ": expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(images.size()));
    if (labels.size() != counts[i])
      throw DataError(DataErrorKind::count_mismatch,
                      lbl_path.string() + ": expected " + std::to_string(counts[i]) +
                          " labels, got " + std::to_string(labels.size()));
    auto& sd = ds.split(splits[i]);
    sd.images = std::move(images);
    sd.labels = std::move(labels);
  }
  ds.validate();
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  ds.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json meta = {
      {"name", ds.name},
      {"num_classes", ds.num_classes},
      {"shape", {ds.height, ds.width, ds.channels}},
      {"counts", {{"train", ds.train.count()}, {"val", ds.val.count()}, {"test", ds.test.count()}}},
      {"mean", ds.mean},
      {"std", ds.std},
  };
  {
    std::ofstream out(dir / "meta.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "meta.json").string());
    out << meta.dump(2) << '\n';
  }
  for (Split s : {Split::train, Split::val, Split::test}) {
    const std::string name(split_name(s));
    write_bytes(dir / (name + "_images.bin"), ds.split(s).images);
    write_bytes(dir / (name + "_labels.bin"), ds.split(s).labels);
  }
}

namespace {

void check_normalization(std::size_t channels, std::span<const double> mean,
                         std::span<const double> std) {
  if (mean.size() != channels || std.size() != channels)
    throw ConfigError("normalization", "need one mean and std per channel");
  for (double s : std)
    if (!(s != 0.0) || !std::isfinite(s)) throw ConfigError("std", "normalisation std must be nonzero");
}

}  // namespace

std::vector<double> normalize(std::span<const std::uint8_t> pixels, std::size_t count,
                              std::size_t height, std::size_t width, std::size_t channels,
                              std::span<const double> mean, std::span<const double> std) {
  check_normalization(channels, mean, std);
  const std::size_t plane = height * width, per = plane * channels;
  if (pixels.size() != count * per)
    throw DimensionError("normalize: " + std::to_string(pixels.size()) + " bytes for " +
                         std::to_string(count) + " images of " + std::to_string(per));
  std::vector<double> out(pixels.size());
  for (std::size_t n = 0; n < count; ++n)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        for (std::size_t c = 0; c < channels; ++c) {
          const double v = pixels[n * per + (y * width + x) * channels + c] / 255.0;
          out[n * per + c * plane + y * width + x] = (v - mean[c]) / std[c];
        }
  return out;
}

std::vector<double> denormalize(std::span<const double> chw, std::size_t count,
                                std::size_t height, std::size_t width, std::size_t channels,
                                std::span<const double> mean, std::span<const double> std) {
  check_normalization(channels, mean, std);
  const std::size_t plane = height * width, per = plane * channels;
  if (chw.size() != count * per) throw DimensionError("denormalize: size mismatch");
  std::vector<double> out(chw.size());
  for (std::size_t n = 0; n < count; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        out[n * per + i * channels + c] = (chw[n * per + c * plane + i] * std[c] + mean[c]) * 255.0;
  return out;
}

std::vector<double> resize(std::span<const double> chw, std::size_t channels, std::size_t height,
                           std::size_t width, std::size_t target_side) {
  if (target_side == 0) throw ConfigError("target_side", "must be at least 1");
  if (chw.size() != channels * height * width) throw DimensionError("resize: size mismatch");
  if (height == target_side && width == target_side) return {chw.begin(), chw.end()};

  struct Tap {
    std::size_t lo, hi;
    double t;
  };
  auto taps = [target_side](std::size_t in) {
    std::vector<Tap> out(target_side);
    const double ratio = static_cast<double>(in) / static_cast<double>(target_side);
    for (std::size_t o = 0; o < target_side; ++o) {
      double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      out[o] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return out;
  };
  const auto ty = taps(height), tx = taps(width);
  std::vector<double> out(channels * target_side * target_side);
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = chw.data() + c * height * width;
    for (std::size_t y = 0; y < target_side; ++y)
      for (std::size_t x = 0; x < target_side; ++x) {
        const auto& [y0, y1, wy] = ty[y];
        const auto& [x0, x1, wx] = tx[x];
        const double a = plane[y0 * width + x0], b = plane[y0 * width + x1];
        const double cc = plane[y1 * width + x0], d = plane[y1 * width + x1];
        const double top = a + wx * (b - a);
        const double bottom = cc + wx * (d - cc);
        out[(c * target_side + y) * target_side + x] = top + wy * (bottom - top);
      }
  }
  return out;
}

PreparedSplit prepare_split(const Dataset& ds, Split split, std::size_t target_side) {
  if (ds.height != ds.width)
    throw ConfigError("data", "only square images are supported, got " + std::to_string(ds.height) +
                                  "x" + std::to_string(ds.width));
  const auto& sd = ds.split(split);
  PreparedSplit out;
  out.count = sd.count();
  out.channels = ds.channels;
  out.side = target_side;
  auto pixels = normalize(sd.images, sd.count(), ds.height, ds.width, ds.channels, ds.mean, ds.std);
  if (target_side == ds.height) {
    out.pixels = std::move(pixels);
  } else {
    const std::size_t per = ds.image_bytes();
    out.pixels.reserve(out.count * out.image_size());
    for (std::size_t n = 0; n < out.count; ++n) {
      auto r = resize(std::span<const double>(pixels).subspan(n * per, per), ds.channels,
                      ds.height, ds.width, target_side);
      out.pixels.insert(out.pixels.end(), r.begin(), r.end());
    }
  }
  out.labels.assign(sd.labels.begin(), sd.labels.end());
  return out;
}

template <typename Real>
Batch<Real> make_batch(const PreparedSplit& split, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty index list");
  const std::size_t per = split.image_size();
  std::vector<Real> values(indices.size() * per);
  Batch<Real> batch;
  batch.labels.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    if (src >= split.count) throw ContractError("make_batch: index " + std::to_string(src) + " out of range");
    for (std::size_t k = 0; k < per; ++k) values[i * per + k] = static_cast<Real>(split.pixels[src * per + k]);
    batch.labels.push_back(split.labels[src]);
  }
  batch.images = Tensor<Real>::from({indices.size(), split.channels, split.side, split.side},
                                    std::move(values));
  return batch;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed, bool shuffle) {
  if (batch_size == 0) throw ConfigError("batch_size", "must be at least 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const std::size_t end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template <typename Real>
std::vector<Batch<Real>> batch_iter(const PreparedSplit& split, std::size_t batch_size,
                                    std::uint64_t seed, bool shuffle) {
  std::vector<Batch<Real>> out;
  for (const auto& idx : batch_indices(split.count, batch_size, seed, shuffle))
    out.push_back(make_batch<Real>(split, idx));
  return out;
}

Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > 256)
    throw ConfigError("classes", "need between 2 and 256 classes, got " + std::to_string(cfg.num_classes));
  if (cfg.image_side == 0) throw ConfigError("side", "must be positive");
  if (cfg.channels == 0) throw ConfigError("channels", "must be positive");
  const std::size_t n_train = cfg.per_class * 70 / 100;
  const std::size_t n_val = cfg.per_class * 10 / 100;
  const std::size_t n_test = cfg.per_class - n_train - n_val;
  if (n_train == 0 || n_val == 0 || n_test == 0)
    throw ConfigError("per_class", std::to_string(cfg.per_class) +
                                       " examples per class cannot fill a 70/10/20 split "
                                       "(need at least 10)");
  const auto grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.num_classes))));
  const std::size_t block = cfg.image_side / grid;
  if (block == 0)
    throw ConfigError("side", "image side " + std::to_string(cfg.image_side) + " too small for " +
                                  std::to_string(cfg.num_classes) + " class blocks");

  Dataset ds;
  ds.name = cfg.name;
  ds.num_classes = cfg.num_classes;
  ds.height = ds.width = cfg.image_side;
  ds.channels = cfg.channels;
  ds.mean.assign(cfg.channels, 0.5);
  ds.std.assign(cfg.channels, 0.5);

  Rng rng(cfg.seed);
  const std::size_t side = cfg.image_side, bytes = ds.image_bytes();
  auto draw = [&](std::size_t label, SplitData& out) {
    const std::size_t by = (label / grid) * block, bx = (label % grid) * block;
    for (std::size_t y = 0; y < side; ++y)
      for (std::size_t x = 0; x < side; ++x) {
        const bool lit = y >= by && y < by + block && x >= bx && x < bx + block;
        for (std::size_t c = 0; c < cfg.channels; ++c) {
          const double v = 70.0 + (lit ? 90.0 : 0.0) + 20.0 * rng.normal();
          out.images.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)));
        }
      }
    out.labels.push_back(static_cast<std::uint8_t>(label));
  };
  for (std::size_t k = 0; k < cfg.num_classes; ++k) {
    for (std::size_t i = 0; i < n_train; ++i) draw(k, ds.train);
    for (std::size_t i = 0; i < n_val; ++i) draw(k, ds.val);
    for (std::size_t i = 0; i < n_test; ++i) draw(k, ds.test);
  }
  // Interleave classes so unshuffled passes do not see sorted labels.
  for (Split s : {Split::train, Split::val, Split::test}) {
    auto& sd = ds.split(s);
    std::vector<std::size_t> order(sd.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    SplitData shuffled;
    shuffled.images.reserve(sd.images.size());
    for (auto i : order) {
      shuffled.images.insert(shuffled.images.end(), sd.images.begin() + static_cast<std::ptrdiff_t>(i * bytes),
                             sd.images.begin() + static_cast<std::ptrdiff_t>((i + 1) * bytes));
      shuffled.labels.push_back(sd.labels[i]);
    }
    sd = std::move(shuffled);
  }
  return ds;
}

template Batch<float> make_batch<float>(const PreparedSplit&, std::span<const std::size_t>);
template Batch<double> make_batch<double>(const PreparedSplit&, std::span<const std::size_t>);
template std::vector<Batch<float>> batch_iter<float>(const PreparedSplit&, std::size_t, std::uint64_t, bool);
template std::vector<Batch<double>> batch_iter<double>(const PreparedSplit&, std::size_t, std::uint64_t, bool);

}  // namespace medicat
