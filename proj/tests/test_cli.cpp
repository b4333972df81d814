#include <algorithm>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "medicat/cli.hpp"
#include "medicat/data.hpp"
#include "medicat/error.hpp"

using namespace medicat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path synth_dir() {
  static const fs::path dir = [] {
    const auto d = testutil::scratch("cli_data");
    const auto r = invoke({"synth", "--per-class", "20", "--out", d.string()});
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

std::size_t count_lines(const std::string& text) {
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("exit codes follow the error class") {
  CHECK(cli::exit_code_for(DataError(DataErrorKind::label_range, "x")) == cli::kData);
  CHECK(cli::exit_code_for(CheckpointError(CheckpointErrorKind::bad_magic, "x")) == cli::kData);
  CHECK(cli::exit_code_for(NumericDivergence("x")) == cli::kNumeric);
  CHECK(cli::exit_code_for(ConfigError("alpha", "x")) == cli::kUsage);
}

TEST_CASE("synth writes a loadable dataset") {
  const auto ds = load_dataset(synth_dir());
  CHECK(ds.train.count() == 56);
  CHECK(ds.num_classes == 4);
}

TEST_CASE("train, eval and attack") {
  const auto run_dir = testutil::scratch("cli_train");
  const auto r = invoke({"train", "--data", synth_dir().string(), "--out", run_dir.string(), "--mode", "baseline",
                         "--epochs", "2", "--batch-size", "16"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("test accuracy") != std::string::npos);
  CHECK(count_lines(testutil::slurp(run_dir / "metrics.csv")) == 1 + 2 * 2);

  const auto ckpt = (run_dir / "final.mcat").string();
  const auto e = invoke({"eval", "--checkpoint", ckpt, "--data", synth_dir().string(), "--split", "val"});
  CHECK(e.code == 0);
  CHECK(e.out.find("val accuracy") != std::string::npos);

  const auto adv_dir = testutil::scratch("cli_attack") / "fgsm";
  const auto a = invoke({"attack", "--checkpoint", ckpt, "--data", synth_dir().string(), "--out", adv_dir.string(),
                         "--epsilon", "0.05"});
  CHECK(a.code == 0);
  const auto adv = load_dataset(adv_dir);
  CHECK(adv.name == "synthetic-fgsm");
  CHECK(adv.test.labels == load_dataset(synth_dir()).test.labels);

  const auto bad = invoke({"eval", "--checkpoint", (run_dir / "nope.mcat").string(), "--data", synth_dir().string()});
  CHECK(bad.code == cli::kData);
}

TEST_CASE("out-of-range alpha names the flag and the range") {
  const auto r = invoke({"train", "--data", "/nonexistent", "--alpha", "1.5"});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("--alpha") != std::string::npos);
  CHECK(r.err.find("[0, 1]") != std::string::npos);
}

TEST_CASE("usage and data errors") {
  CHECK(invoke({"train", "--data", synth_dir().string(), "--bogus"}).code == cli::kUsage);
  CHECK(invoke({}).code == cli::kUsage);
  CHECK(invoke({"train", "--data", synth_dir().string(), "--mode", "adv"}).code == cli::kUsage);
  const auto missing = invoke({"train", "--data", (synth_dir() / "absent").string()});
  CHECK(missing.code == cli::kData);
  CHECK(missing.err.find("error:") != std::string::npos);
}

TEST_CASE("help lists defaults") {
  const auto r = invoke({"train", "--help"});
  CHECK(r.code == 0);
  const std::string text = r.out + r.err;
  CHECK(text.find("--alpha") != std::string::npos);
  CHECK(text.find("0.1") != std::string::npos);
  CHECK(text.find("--epsilon") != std::string::npos);
  CHECK(text.find("0.001") != std::string::npos);
}

TEST_CASE("gradcheck subcommand") {
  const auto r = invoke({"gradcheck", "--seeds", "2"});
  CHECK(r.code == 0);
  CHECK(r.out.find("barlow_twins_loss") != std::string::npos);
}

}  // TEST_SUITE
