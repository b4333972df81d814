// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "medicat/cli.hpp"
#include "medicat/error.hpp"
#include "medicat/gradcheck.hpp"
#include "medicat/harness.hpp"

using namespace medicat;
namespace fs = std::filesystem;
using T = Tensor<double>;

namespace {

struct Verdict {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (cond) return;
    ok = false;
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  const auto dir = fs::current_path() / "acceptance_work" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int invoke(const std::vector<std::string>& args, std::string* out_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (code != 0) std::fprintf(stderr, "medicat %s failed (%d): %s\n", args[0].c_str(), code, err.str().c_str());
  return code;
}

const Dataset& full_synth() {
  static const Dataset ds = synth_generate(SynthConfig{});
  return ds;
}

Batch<double> sample_batch(std::size_t n, std::uint64_t seed) {
  static const auto split = prepare_split(full_synth(), Split::train, 28);
  Rng rng(seed);
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform() * double(split.count));
  return make_batch<double>(split, idx);
}

// ---- criteria ------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckOptions opt;
  opt.seeds = 20;
  opt.tolerance = 1e-4;
  const auto reports = run_gradcheck_suite(opt);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::set<std::string> names;
  for (const auto& r : reports) {
    names.insert(r.op);
    worst = std::max(worst, r.max_error);
    v.require(r.passed && r.seeds == 20, r.op + " error " + fmt("%.3g", r.max_error));
  }
  for (const char* op : {"matmul", "softmax", "layer_norm", "gelu", "mean", "encoder", "cross_entropy",
                         "barlow_twins_loss", "combined_loss"})
    v.require(names.count(op) == 1, std::string("missing op ") + op);
  v.require(secs < 60.0, "took " + fmt("%.1f", secs) + " s");
  v.detail = std::to_string(reports.size()) + " ops x 20 seeds, worst " + fmt("%.2e", worst) + ", " +
             fmt("%.1f", secs) + " s" + (v.detail.empty() ? "" : "; " + v.detail);
  return v;
}

Verdict loss_identities() {
  Verdict v;
  const auto uniform = T::zeros({3, 11});
  const std::vector<int> labels = {0, 5, 10};
  const double ce = cross_entropy(uniform, labels).item();
  v.require(std::abs(ce - std::log(11.0)) <= 1e-6, "uniform CE " + fmt("%.9f", ce));
  v.require(std::abs(ce - 2.397895) <= 1e-6, "uniform CE vs 2.397895");

  // Columns made orthonormal by Gram-Schmidt.
  Rng rng(7);
  const std::size_t b = 8, d = 5;
  std::vector<double> e(b * d);
  for (auto& x : e) x = rng.normal();
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0;
      for (std::size_t i = 0; i < b; ++i) dot += e[i * d + j] * e[i * d + k];
      for (std::size_t i = 0; i < b; ++i) e[i * d + j] -= dot * e[i * d + k];
    }
    double norm = 0;
    for (std::size_t i = 0; i < b; ++i) norm += e[i * d + j] * e[i * d + j];
    for (std::size_t i = 0; i < b; ++i) e[i * d + j] /= std::sqrt(norm);
  }
  const auto emb = T::from({b, d}, e);
  const double bt = barlow_twins_loss<double>({emb, emb}, ContrastiveConfig{}).item();
  v.require(std::abs(bt) <= 1e-10, "orthonormal Barlow loss " + fmt("%.3g", bt));

  const auto c1 = T::scalar(0.8), c2 = T::scalar(1.3), ctr = T::scalar(2.7);
  const double at0 = combined_loss(c1, c2, ctr, 0.0).item(), at1 = combined_loss(c1, c2, ctr, 1.0).item();
  v.require(at0 == (0.8 + 1.3) / 2, "alpha 0 gives " + fmt("%.17g", at0));
  v.require(at1 == 2.7, "alpha 1 gives " + fmt("%.17g", at1));
  v.require(combined_loss_value(0.8, 1.3, 2.7, 0.0) == at0 && combined_loss_value(0.8, 1.3, 2.7, 1.0) == at1,
            "scalar bookkeeping disagrees with the tape");
  if (v.ok) v.detail = "ln 11 = " + fmt("%.7f", ce) + ", Barlow " + fmt("%.1e", bt) + ", endpoints exact";
  return v;
}

Verdict fgsm_contract() {
  Verdict v;
  ViTConfig vit;
  std::size_t coords = 0, zero_coords = 0;
  double min_gain = 1e300;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const VisionTransformer<double> model(vit, 1000 + s);
    const auto batch = sample_batch(8, s);
    const auto xv = batch.images.values();
    auto images = T::from(batch.images.shape(), {xv.begin(), xv.end()}, true);
    const auto ce_clean = cross_entropy(model.encode(images).logits, batch.labels);
    const T targets[] = {images};
    backward(ce_clean, std::span<const T>(targets));
    const std::vector<double> grad(images.grad().begin(), images.grad().end());

    AttackConfig atk;
    atk.epsilon = 1e-4;
    atk.direction = AttackDirection::ascend;
    const auto eta = fgsm_from_gradient<double>(grad, atk);
    double inf = 0;
    bool any_grad = false;
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (grad[i] != 0.0) {
        any_grad = true;
        ++coords;
        inf = std::max(inf, std::abs(eta[i]));
        if (std::abs(eta[i]) != atk.epsilon || (eta[i] > 0) != (grad[i] > 0)) {
          v.require(false, "seed " + std::to_string(s) + ": eta is not +eps*sign(grad)");
          break;
        }
      } else {
        ++zero_coords;
        if (eta[i] != 0.0) v.require(false, "seed " + std::to_string(s) + ": eta nonzero at zero gradient");
      }
    }
    if (any_grad) v.require(inf == atk.epsilon, "seed " + std::to_string(s) + ": ||eta||_inf != eps");

    const auto adv = make_adversarial_batch<double>(batch, eta, atk);
    const double ce_adv = cross_entropy(model.encode(adv.images).logits, adv.labels).item();
    const double gain = ce_adv - ce_clean.item();
    min_gain = std::min(min_gain, gain);
    if (any_grad)
      v.require(gain > 0.0, "seed " + std::to_string(s) + ": perturbed CE did not rise (" + fmt("%.3g", gain) + ")");
    else
      v.require(gain == 0.0, "seed " + std::to_string(s) + ": zero gradient but loss moved");

    AttackConfig none;
    none.epsilon = 0.0;
    const auto zero_eta = fgsm_from_gradient<double>(grad, none);
    v.require(std::all_of(zero_eta.begin(), zero_eta.end(), [](double x) { return x == 0.0 && !std::signbit(x); }),
              "eps 0 gives a nonzero eta");
    const auto same = make_adversarial_batch<double>(batch, zero_eta, none);
    v.require(std::memcmp(same.images.values().data(), batch.images.values().data(),
                          batch.images.numel() * sizeof(double)) == 0 &&
                  same.labels == batch.labels,
              "eps 0 batch differs");
  }
  if (v.ok)
    v.detail = "20 seeds, " + std::to_string(coords) + " nonzero-gradient coords at |eta| = eps (" +
               std::to_string(zero_coords) + " zero), min CE gain " + fmt("%.3g", min_gain);
  return v;
}

Verdict correlation_oracle() {
  Verdict v;
  Rng rng(2024);
  double worst = 0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t b = 2 + static_cast<std::size_t>(rng.uniform() * 15);  // 2..16
    const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform() * 8);   // 1..8
    std::vector<double> cv(b * d), pv(b * d);
    for (auto& x : cv) x = rng.normal();
    for (auto& x : pv) x = rng.normal();
    const auto x = cross_correlation<double>({T::from({b, d}, cv), T::from({b, d}, pv)});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        double num = 0, nc = 0, np = 0;
        for (std::size_t r = 0; r < b; ++r) {
          num += cv[r * d + i] * pv[r * d + j];
          nc += cv[r * d + i] * cv[r * d + i];
          np += pv[r * d + j] * pv[r * d + j];
        }
        const double expect = num / (std::sqrt(nc) * std::sqrt(np));
        const double got = x.values()[i * d + j];
        worst = std::max(worst, std::abs(got - expect));
        v.require(got >= -1.0 && got <= 1.0, "entry outside [-1, 1]");
      }
  }
  v.require(worst <= 1e-12, "max deviation " + fmt("%.3g", worst));
  if (v.ok) v.detail = "100 cases, max deviation " + fmt("%.2e", worst);
  return v;
}

Verdict mode_degeneration() {
  Verdict v;
  TrainConfig med;
  med.alpha = 0.0;
  med.epsilon = 0.0;
  med.epochs = 3;
  med = fit_to_dataset(med, full_synth());
  TrainConfig base = med;
  base.mode = TrainMode::baseline;

  const auto train = prepare_split(full_synth(), Split::train, med.vit.image_side);
  VisionTransformer<double> m1(med.vit, med.seed), m2(base.vit, base.seed);
  AdamW<double> o1(med.adamw(), m1.parameters()), o2(base.adamw(), m2.parameters());
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= med.epochs && v.ok; ++epoch) {
    const auto batches = batch_iter<double>(train, med.batch_size, derive_seed(med.seed, epoch), true);
    for (std::size_t i = 0; i < batches.size() && v.ok; ++i) {
      train_step(batches[i], m1, o1, med, i);
      train_step(batches[i], m2, o2, base, i);
      ++steps;
      for (std::size_t p = 0; p < m1.parameters().size(); ++p) {
        const auto a = m1.parameters()[p].tensor.values(), b = m2.parameters()[p].tensor.values();
        if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) {
          v.require(false, "epoch " + std::to_string(epoch) + " step " + std::to_string(i) + ": " +
                               m1.parameters()[p].name + " diverged");
          break;
        }
      }
    }
  }
  if (v.ok) v.detail = "3 epochs, " + std::to_string(steps) + " steps, every parameter bitwise equal after each";
  return v;
}

Verdict determinism(const fs::path& data_dir) {
  Verdict v;
  const auto a = work_dir("determinism_a"), b = work_dir("determinism_b");
  const std::vector<std::string> common = {"--data", data_dir.string(), "--epochs", "3"};
  auto args_for = [&](const fs::path& out) {
    std::vector<std::string> args = {"train", "--out", out.string()};
    args.insert(args.end(), common.begin(), common.end());
    return args;
  };
  v.require(invoke(args_for(a)) == 0, "first train failed");
  v.require(invoke(args_for(b)) == 0, "second train failed");
  for (const char* f : {"metrics.csv", "best.mcat", "final.mcat"}) {
    const auto x = slurp(a / f), y = slurp(b / f);
    v.require(!x.empty() && x == y, std::string(f) + " differs");
  }
  if (v.ok) v.detail = "metrics.csv, best.mcat, final.mcat byte-identical across two 3-epoch runs";
  return v;
}

struct AblationOutcome {
  Verdict convergence;
  Verdict bookkeeping;
};

AblationOutcome ablation(const fs::path& out_dir) {
  AblationOutcome res;
  auto& v = res.convergence;
  TrainConfig cfg;  // defaults: 50 epochs, tiny ViT
  cfg.out_dir = out_dir;
  const auto log = [](const std::string& line) { std::fprintf(stderr, "  %s\n", line.c_str()); };
  const auto rows = run_ablation(full_synth(), cfg, {42}, log);
  const auto table = ablation_table(rows);
  std::ofstream(out_dir / "ablation.txt") << table;
  std::fprintf(stderr, "%s", table.c_str());

  std::ostringstream summary;
  for (const auto& r : rows) {
    const double acc = r.runs.test_accuracies.at(0), secs = r.runs.seconds.at(0);
    v.require(acc >= 0.95, r.label + " test acc " + fmt("%.4f", acc));
    v.require(secs < 300.0, r.label + " took " + fmt("%.1f", secs) + " s");
    summary << r.label << " " << fmt("%.4f", acc) << " in " << fmt("%.0f", secs) << " s, ";
  }
  for (auto label : {kBaselineLabel, kAtOnlyLabel, kProposedLabel})
    v.require(table.find(label) != std::string::npos, "table lacks " + std::string(label));
  const bool ordered = rows.size() == 3 && rows[2].runs.mean >= rows[1].runs.mean && rows[1].runs.mean >= rows[0].runs.mean;
  summary << "ordering proposed >= AT-only >= baseline " << (ordered ? "holds" : "does not hold") << " (not asserted)";
  v.detail = summary.str() + (v.detail.empty() ? "" : "; " + v.detail);

  auto& b = res.bookkeeping;
  std::size_t checked = 0;
  double worst = 0;
  for (const auto& r : rows) {
    const double alpha = r.mode == TrainMode::medicat ? cfg.alpha : 0.0;
    const auto csv = read_csv(out_dir / std::string(mode_name(r.mode)) / "seed_42" / "metrics.csv");
    b.require(csv.size() == 2 * cfg.epochs, std::string(mode_name(r.mode)) + " has " + std::to_string(csv.size()) + " rows");
    for (const auto& row : csv) {
      const double l1 = std::stod(row.at(2)), l2 = std::stod(row.at(3)), ctr = std::stod(row.at(4)),
                   total = std::stod(row.at(5));
      const double err = std::abs(total - ((1 - alpha) / 2 * (l1 + l2) + alpha * ctr));
      worst = std::max(worst, err);
      ++checked;
    }
  }
  b.require(worst <= 1e-9, "max deviation " + fmt("%.3g", worst));
  if (b.ok) b.detail = std::to_string(checked) + " rows over three full runs, max deviation " + fmt("%.2e", worst);
  return res;
}

Verdict grid_protocol(const fs::path& data_dir) {
  Verdict v;
  const auto out = work_dir("grid");
  std::string text;
  v.require(invoke({"grid", "--data", data_dir.string(), "--out", out.string(), "--epochs", "5"}, &text) == 0,
            "grid command failed");
  const auto rows = read_csv(out / "grid.csv");
  v.require(rows.size() == 27, std::to_string(rows.size()) + " cells");

  struct Row {
    double alpha, eps, val, test;
  };
  std::vector<Row> parsed;
  std::set<std::pair<double, double>> pairs;
  for (const auto& r : rows) {
    parsed.push_back({std::stod(r.at(0)), std::stod(r.at(1)), std::stod(r.at(2)), std::stod(r.at(3))});
    pairs.insert({parsed.back().alpha, parsed.back().eps});
  }
  std::set<std::pair<double, double>> expect;
  for (int a = 1; a <= 9; ++a)
    for (double e : {1e-4, 5e-4, 1e-3}) expect.insert({std::stod("0." + std::to_string(a)), e});
  v.require(pairs == expect, "cells are not the 9 x 3 default grid");

  auto sorted = parsed;
  std::sort(sorted.begin(), sorted.end(), [](const Row& a, const Row& b) {
    return std::make_tuple(-a.val, a.alpha, a.eps) < std::make_tuple(-b.val, b.alpha, b.eps);
  });
  bool same = sorted.size() == parsed.size();
  for (std::size_t i = 0; same && i < sorted.size(); ++i)
    same = sorted[i].alpha == parsed[i].alpha && sorted[i].eps == parsed[i].eps;
  v.require(same, "CSV order disagrees with the external sort");

  if (!parsed.empty()) {
    const double best_val =
        std::max_element(parsed.begin(), parsed.end(), [](const Row& a, const Row& b) { return a.val < b.val; })->val;
    v.require(parsed[0].val == best_val, "first row is not the best validation cell");
    char expect_line[96];
    std::snprintf(expect_line, sizeof expect_line, ">>> test acc %.6g <<<", parsed[0].test);
    v.require(text.find(expect_line) != std::string::npos, "reported test accuracy is not the winner's");
    if (v.ok)
      v.detail = "27 cells, winner alpha=" + fmt("%g", parsed[0].alpha) + " eps=" + fmt("%g", parsed[0].eps) +
                 " val " + fmt("%.4f", parsed[0].val) + " -> test " + fmt("%.4f", parsed[0].test) +
                 ", CSV order matches external sort";
  }
  return v;
}

Verdict round_trips() {
  Verdict v;
  SynthConfig sc;
  sc.per_class = 20;
  const auto ds = synth_generate(sc);
  const auto dir = work_dir("roundtrip");
  save_dataset(ds, dir / "data");
  const auto back = load_dataset(dir / "data");
  for (Split s : {Split::train, Split::val, Split::test})
    v.require(back.split(s).images == ds.split(s).images && back.split(s).labels == ds.split(s).labels,
              std::string(split_name(s)) + " split changed");

  VisionTransformer<double> model(ViTConfig{}, 9);
  AdamW<double> opt(AdamWConfig{}, model.parameters());
  const auto ckpt = make_checkpoint(model, &opt, TrainConfig{}, 1);
  save_checkpoint(ckpt, dir / "m.mcat");
  const auto bytes = slurp(dir / "m.mcat");
  const auto loaded = load_checkpoint(dir / "m.mcat");
  v.require(loaded.tensors.size() == ckpt.tensors.size(), "tensor count changed");
  for (std::size_t i = 0; i < std::min(loaded.tensors.size(), ckpt.tensors.size()); ++i)
    v.require(loaded.tensors[i].shape == ckpt.tensors[i].shape &&
                  std::memcmp(loaded.tensors[i].values.data(), ckpt.tensors[i].values.data(),
                              ckpt.tensors[i].values.size() * sizeof(double)) == 0,
              loaded.tensors[i].name + " changed");
  save_checkpoint(loaded, dir / "m2.mcat");
  v.require(slurp(dir / "m2.mcat") == bytes, "re-encoded checkpoint bytes differ");

  const auto expect_ckpt_error = [&](std::vector<std::uint8_t> raw, CheckpointErrorKind kind, const char* what) {
    try {
      decode_checkpoint(raw);
      v.require(false, std::string(what) + " accepted");
    } catch (const CheckpointError& e) {
      v.require(e.kind() == kind, std::string(what) + " gave the wrong error kind");
    }
  };
  const std::vector<std::uint8_t> raw(bytes.begin(), bytes.end());
  auto magic = raw;
  magic[1] = 'X';
  expect_ckpt_error(magic, CheckpointErrorKind::bad_magic, "bad magic");
  auto truncated = raw;
  truncated.resize(raw.size() - 8);
  expect_ckpt_error(truncated, CheckpointErrorKind::bad_offset, "truncated payload");

  auto labels = ds.train.labels;
  labels[0] = static_cast<std::uint8_t>(ds.num_classes);
  std::ofstream(dir / "data" / "train_labels.bin", std::ios::binary | std::ios::trunc)
      .write(reinterpret_cast<const char*>(labels.data()), static_cast<std::streamsize>(labels.size()));
  try {
    load_dataset(dir / "data");
    v.require(false, "label >= C accepted");
  } catch (const DataError& e) {
    v.require(e.kind() == DataErrorKind::label_range, "label >= C gave the wrong error kind");
  }
  if (v.ok) v.detail = "dataset and checkpoint bitwise; bad magic, bad offsets, label >= C rejected";
  return v;
}

}  // namespace

int main() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto data_dir = work_dir("synth");
  const auto small_dir = work_dir("synth_small");
  if (invoke({"synth", "--out", data_dir.string()}) != 0 ||
      invoke({"synth", "--per-class", "100", "--out", small_dir.string()}) != 0)
    return 1;

  std::vector<std::pair<std::string, std::function<Verdict()>>> checks;
  AblationOutcome abl;
  bool abl_done = false;
  const auto run_abl = [&] {
    if (!abl_done) abl = ablation(work_dir("ablation"));
    abl_done = true;
  };
  checks.push_back({"gradient suite", gradient_suite});
  checks.push_back({"loss identities", loss_identities});
  checks.push_back({"FGSM contract", fgsm_contract});
  checks.push_back({"cross-correlation oracle", correlation_oracle});
  checks.push_back({"mode degeneration", mode_degeneration});
  checks.push_back({"determinism", [&] { return determinism(data_dir); }});
  checks.push_back({"end-to-end convergence", [&] { run_abl(); return abl.convergence; }});
  checks.push_back({"grid protocol", [&] { return grid_protocol(small_dir); }});
  checks.push_back({"bookkeeping", [&] { run_abl(); return abl.bookkeeping; }});
  checks.push_back({"format round-trips", round_trips});

  int failed = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = checks[i].second();
    } catch (const std::exception& e) {
      v.ok = false;
      v.detail = std::string("threw: ") + e.what();
    }
    failed += !v.ok;
    std::printf("criterion %zu: %s  %s (%s) [%.1f s]\n", i + 1, v.ok ? "PASS" : "FAIL", checks[i].first.c_str(),
                v.detail.c_str(), seconds_since(start));
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed in %.0f s\n", static_cast<int>(checks.size()) - failed, checks.size(),
              seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
