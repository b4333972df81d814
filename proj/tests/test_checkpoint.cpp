#include <cstring>

#include "doctest.h"
#include "helpers.hpp"
#include "medicat/checkpoint.hpp"
#include "medicat/error.hpp"
#include "medicat/harness.hpp"

using namespace medicat;
using nlohmann::json;

namespace {

Checkpoint sample(DType dtype) {
  Checkpoint ck;
  ck.dtype = dtype;
  ck.config = {{"note", "sample"}};
  ck.optimizer_step = 17;
  ck.tensors.push_back({"a", {2, 3}, testutil::randn(6, 1)});
  ck.tensors.push_back({"b", {4}, {0.0, -0.0, 1e-310, -3.5}});
  if (dtype == DType::f32)
    for (auto& t : ck.tensors)
      for (auto& v : t.values) v = static_cast<float>(v);
  return ck;
}

// Rewrites the manifest of an encoded checkpoint, keeping the payload.
std::vector<std::uint8_t> edit_manifest(const std::vector<std::uint8_t>& bytes, const std::function<void(json&)>& fn) {
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 5, 8);
  json manifest = json::parse(bytes.begin() + 13, bytes.begin() + 13 + static_cast<std::ptrdiff_t>(len));
  fn(manifest);
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 5);
  const std::uint64_t n = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 13 + static_cast<std::ptrdiff_t>(len), bytes.end());
  return out;
}

CheckpointErrorKind decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  FAIL("expected CheckpointError");
  return CheckpointErrorKind::malformed;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("header layout") {
  const auto bytes = encode_checkpoint(sample(DType::f64));
  CHECK(std::memcmp(bytes.data(), "MCAT", 4) == 0);
  CHECK(bytes[4] == 1);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(bytes[5 + i]) << (8 * i);
  CHECK(bytes.size() == 13 + len + 10 * 8);
  const auto manifest = json::parse(bytes.begin() + 13, bytes.begin() + 13 + static_cast<std::ptrdiff_t>(len));
  CHECK(manifest["tensors"][1]["offset"] == 48);
  CHECK(manifest["tensors"][0]["dtype"] == "f64");
  CHECK(manifest["optimizer"]["step"] == 17);
}

TEST_CASE("round trip is bitwise in both precisions") {
  for (auto dtype : {DType::f64, DType::f32}) {
    const auto ck = sample(dtype);
    const auto dir = testutil::scratch("ckpt_roundtrip");
    save_checkpoint(ck, dir / "x.mcat");
    const auto back = load_checkpoint(dir / "x.mcat");
    CHECK(back.dtype == dtype);
    CHECK(back.optimizer_step == 17);
    CHECK(back.config == ck.config);
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      CHECK(back.tensors[i].name == ck.tensors[i].name);
      CHECK(back.tensors[i].shape == ck.tensors[i].shape);
      CHECK(std::memcmp(back.tensors[i].values.data(), ck.tensors[i].values.data(),
                        ck.tensors[i].values.size() * sizeof(double)) == 0);
    }
  }
}

TEST_CASE("corruptions are rejected with distinct errors") {
  const auto good = encode_checkpoint(sample(DType::f64));

  auto magic = good;
  magic[0] = 'X';
  CHECK(decode_error(magic) == CheckpointErrorKind::bad_magic);

  auto version = good;
  version[4] = 2;
  CHECK(decode_error(version) == CheckpointErrorKind::bad_version);

  const auto grown = edit_manifest(good, [](json& m) { m["tensors"][0]["shape"] = {3, 3}; });
  CHECK(decode_error(grown) == CheckpointErrorKind::bad_offset);

  const auto shrunk = edit_manifest(good, [](json& m) { m["tensors"][1]["shape"] = {3}; });
  CHECK(decode_error(shrunk) == CheckpointErrorKind::bad_offset);

  const auto overlap = edit_manifest(good, [](json& m) { m["tensors"][1]["offset"] = 40; });
  CHECK(decode_error(overlap) == CheckpointErrorKind::bad_offset);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  CHECK(decode_error(truncated) == CheckpointErrorKind::bad_offset);

  auto garbage = good;
  garbage[13] = '!';
  CHECK(decode_error(garbage) == CheckpointErrorKind::malformed);

  CHECK_THROWS_AS(load_checkpoint(testutil::scratch("ckpt_missing") / "none.mcat"), IoError);
}

TEST_CASE("model weights survive a checkpoint") {
  ViTConfig cfg;
  cfg.image_side = 8;
  cfg.patch_side = 4;
  cfg.hidden_dim = 8;
  cfg.num_heads = 2;
  VisionTransformer<double> model(cfg, 5), other(cfg, 6);
  AdamW<double> opt(AdamWConfig{}, model.parameters());
  TrainConfig tc;
  tc.vit = cfg;
  const auto ck = decode_checkpoint(encode_checkpoint(make_checkpoint(model, &opt, tc, 3)));
  CHECK(ck.find("adam.m/head.weight") != nullptr);
  CHECK(config_from_json(ck.config["train"]).vit == cfg);
  load_parameters(other, ck);
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    CHECK(testutil::bitwise_equal(model.parameters()[i].tensor.values(), other.parameters()[i].tensor.values()));

  ViTConfig wider = cfg;
  wider.hidden_dim = 12;
  VisionTransformer<double> mismatched(wider, 1);
  CHECK_THROWS_AS(load_parameters(mismatched, ck), CheckpointError);
}

}  // TEST_SUITE
