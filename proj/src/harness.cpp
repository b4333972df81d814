#include "medicat/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "medicat/error.hpp"

namespace medicat {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- names ------------------------------------------------------------------

std::string_view mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::baseline: return "baseline";
    case TrainMode::at_only: return "at_only";
    case TrainMode::medicat: return "medicat";
  }
  return "?";
}

TrainMode parse_mode(std::string_view name) {
  if (name == "baseline") return TrainMode::baseline;
  if (name == "at_only") return TrainMode::at_only;
  if (name == "medicat") return TrainMode::medicat;
  throw ConfigError("mode", "unknown mode '" + std::string(name) + "' (baseline, at_only, medicat)");
}

std::string_view precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

Precision parse_precision(std::string_view name) {
  if (name == "f64") return Precision::f64;
  if (name == "f32") return Precision::f32;
  throw ConfigError("precision", "unknown precision '" + std::string(name) + "' (f64, f32)");
}

std::string_view direction_name(AttackDirection d) {
  return d == AttackDirection::ascend ? "ascend" : "descend";
}

AttackDirection parse_direction(std::string_view name) {
  if (name == "descend") return AttackDirection::descend;
  if (name == "ascend") return AttackDirection::ascend;
  throw ConfigError("direction", "unknown direction '" + std::string(name) + "' (ascend, descend)");
}

std::string_view correlation_name(CorrelationVariant v) {
  return v == CorrelationVariant::printed_diagonal ? "printed" : "cross";
}

CorrelationVariant parse_correlation(std::string_view name) {
  if (name == "cross") return CorrelationVariant::cross;
  if (name == "printed") return CorrelationVariant::printed_diagonal;
  throw ConfigError("correlation", "unknown correlation '" + std::string(name) + "' (cross, printed)");
}

// ---- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0))
    throw ConfigError("alpha", "must lie in [0, 1], got " + std::to_string(alpha));
  if (epochs < 1) throw ConfigError("epochs", "must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be at least 1");
  attack().validate();
  adamw().validate();
  contrastive().validate();
  vit.validate();
}

TrainConfig TrainConfig::resolved() const {
  TrainConfig r = *this;
  r.alpha = effective_alpha();
  return r;
}

AttackConfig TrainConfig::attack() const {
  AttackConfig a;
  a.epsilon = epsilon;
  a.direction = direction;
  a.clamp = clamp;
  return a;
}

AdamWConfig TrainConfig::adamw() const {
  return {.lr = lr, .beta1 = beta1, .beta2 = beta2, .eps = adam_eps, .weight_decay = weight_decay};
}

ContrastiveConfig TrainConfig::contrastive() const {
  ContrastiveConfig c;
  c.lambda = lambda;
  c.variant = correlation;
  return c;
}

json config_to_json(const TrainConfig& cfg) {
  const auto& v = cfg.vit;
  return {
      {"alpha", cfg.alpha},
      {"epsilon", cfg.epsilon},
      {"lambda", cfg.lambda},
      {"epochs", cfg.epochs},
      {"batch_size", cfg.batch_size},
      {"lr", cfg.lr},
      {"beta1", cfg.beta1},
      {"beta2", cfg.beta2},
      {"adam_eps", cfg.adam_eps},
      {"weight_decay", cfg.weight_decay},
      {"seed", cfg.seed},
      {"mode", mode_name(cfg.mode)},
      {"direction", direction_name(cfg.direction)},
      {"clamp", cfg.clamp},
      {"correlation", correlation_name(cfg.correlation)},
      {"precision", precision_name(cfg.precision)},
      {"vit",
       {{"image_side", v.image_side},
        {"channels", v.channels},
        {"patch_side", v.patch_side},
        {"hidden_dim", v.hidden_dim},
        {"num_layers", v.num_layers},
        {"num_heads", v.num_heads},
        {"mlp_ratio", v.mlp_ratio},
        {"num_classes", v.num_classes},
        {"layer_norm_eps", v.layer_norm_eps}}},
  };
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.alpha = j.at("alpha").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.lambda = j.at("lambda").get<double>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.mode = parse_mode(j.at("mode").get<std::string>());
    c.direction = parse_direction(j.at("direction").get<std::string>());
    c.clamp = j.at("clamp").get<bool>();
    c.correlation = parse_correlation(j.at("correlation").get<std::string>());
    c.precision = parse_precision(j.at("precision").get<std::string>());
    const auto& v = j.at("vit");
    c.vit.image_side = v.at("image_side").get<std::size_t>();
    c.vit.channels = v.at("channels").get<std::size_t>();
    c.vit.patch_side = v.at("patch_side").get<std::size_t>();
    c.vit.hidden_dim = v.at("hidden_dim").get<std::size_t>();
    c.vit.num_layers = v.at("num_layers").get<std::size_t>();
    c.vit.num_heads = v.at("num_heads").get<std::size_t>();
    c.vit.mlp_ratio = v.at("mlp_ratio").get<std::size_t>();
    c.vit.num_classes = v.at("num_classes").get<std::size_t>();
    c.vit.layer_norm_eps = v.at("layer_norm_eps").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError("config", std::string("incomplete training config: ") + e.what());
  }
  return c;
}

std::string metrics_csv_line(const MetricsRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g", r.epoch,
                std::string(split_name(r.split)).c_str(), r.loss_ce_clean, r.loss_ce_adv, r.loss_ctr,
                r.loss_total, r.accuracy);
  return buf;
}

// ---- steps ------------------------------------------------------------------

namespace {

template <typename Real>
std::size_t count_correct(const Tensor<Real>& logits, std::span<const int> labels) {
  const std::size_t classes = logits.dim(1);
  const auto v = logits.values();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = v.subspan(i * classes, classes);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += static_cast<int>(best) == labels[i];
  }
  return hits;
}

template <typename Real>
struct Objective {
  Tensor<Real> total;
  StepStats stats;
};

template <typename Real>
Objective<Real> build_objective(const Batch<Real>& batch, const VisionTransformer<Real>& model,
                                const TrainConfig& cfg, std::size_t batch_index) {
  const AttackConfig atk = cfg.attack();
  const double alpha = cfg.effective_alpha();
  const bool need_eta = cfg.adversarial() && atk.epsilon > 0.0;
  const auto x = batch.images.values();
  auto images = Tensor<Real>::from(batch.images.shape(), {x.begin(), x.end()}, need_eta);

  const auto clean = model.encode(images);
  const auto ce_clean = cross_entropy(clean.logits, batch.labels);

  Objective<Real> out;
  out.stats.count = batch.size();
  out.stats.correct = count_correct(clean.logits, batch.labels);
  out.stats.ce_clean = static_cast<double>(ce_clean.item());

  if (!cfg.adversarial()) {
    out.total = ce_clean;
    out.stats.ce_adv = out.stats.ce_clean;
    out.stats.total = combined_loss_value(out.stats.ce_clean, out.stats.ce_adv, 0.0, 0.0);
    return out;
  }

  std::vector<Real> eta(images.numel(), Real(0));
  if (need_eta) {
    const Tensor<Real> targets[] = {images};
    backward(ce_clean, std::span<const Tensor<Real>>(targets));
    eta = fgsm_from_gradient<Real>(images.grad(), atk);
  }
  const auto adv = make_adversarial_batch<Real>(batch, eta, atk);
  const auto perturbed = model.encode(adv.images);
  const auto ce_adv = cross_entropy(perturbed.logits, adv.labels);

  Tensor<Real> ctr = Tensor<Real>::scalar(Real(0));
  if (cfg.mode == TrainMode::medicat) {
    try {
      ctr = barlow_twins_loss<Real>({mean_pool_patches(clean.patch_embeddings),
                                     mean_pool_patches(perturbed.patch_embeddings)},
                                    cfg.contrastive());
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("batch " + std::to_string(batch_index) + ": " + e.what());
    }
    // Logged but kept off the tape, so alpha = 0 reduces to the CE-only step exactly.
    if (alpha == 0.0) ctr = ctr.detach();
  }

  out.total = combined_loss(ce_clean, ce_adv, ctr, alpha);
  out.stats.ce_adv = static_cast<double>(ce_adv.item());
  out.stats.ctr = static_cast<double>(ctr.item());
  out.stats.total = combined_loss_value(out.stats.ce_clean, out.stats.ce_adv, out.stats.ctr, alpha);
  return out;
}

}  // namespace

template <typename Real>
StepStats train_step(const Batch<Real>& batch, VisionTransformer<Real>& model, AdamW<Real>& opt,
                     const TrainConfig& cfg, std::size_t batch_index) {
  const std::span<const NamedParameter<Real>> params = model.parameters();
  zero_grads(params);
  auto obj = build_objective(batch, model, cfg, batch_index);
  // The FGSM backward only reaches the pixels, but clear anyway so nothing
  // from it can leak into the parameter update.
  zero_grads(params);
  const double total = static_cast<double>(obj.total.item());
  if (!std::isfinite(total) || !std::isfinite(obj.stats.total))
    throw NumericDivergence("batch " + std::to_string(batch_index) + ": loss became " +
                            std::to_string(total));
  backward(obj.total);
  opt.step(params);
  return obj.stats;
}

template <typename Real>
StepStats objective_step(const Batch<Real>& batch, const VisionTransformer<Real>& model,
                         const TrainConfig& cfg, std::size_t batch_index) {
  return build_objective(batch, model, cfg, batch_index).stats;
}

std::size_t argmax(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

double accuracy(std::span<const double> logits, std::size_t classes, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  if (logits.size() != labels.size() * classes)
    throw DimensionError("accuracy: " + std::to_string(logits.size()) + " logits for " +
                         std::to_string(labels.size()) + " labels of " + std::to_string(classes) +
                         " classes");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    hits += static_cast<int>(argmax(logits.subspan(i * classes, classes))) == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

template <typename Real>
std::vector<int> predict(const VisionTransformer<Real>& model, const PreparedSplit& split,
                         std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(split.count);
  for (const auto& idx : batch_indices(split.count, batch_size, 0, false)) {
    const auto batch = make_batch<Real>(split, idx);
    const auto enc = model.encode(batch.images);
    const std::size_t classes = enc.logits.dim(1);
    const auto v = enc.logits.values();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = v.subspan(i * classes, classes);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

template <typename Real>
double evaluate(const VisionTransformer<Real>& model, const PreparedSplit& split, std::size_t batch_size) {
  if (split.count == 0) return 0.0;
  const auto pred = predict(model, split, batch_size);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == split.labels[i];
  return static_cast<double>(hits) / static_cast<double>(split.count);
}

// ---- checkpoints ------------------------------------------------------------

template <typename Real>
Checkpoint make_checkpoint(const VisionTransformer<Real>& model, const AdamW<Real>* opt,
                           const TrainConfig& cfg, std::size_t epoch) {
  Checkpoint ck;
  ck.dtype = std::is_same_v<Real, float> ? DType::f32 : DType::f64;
  ck.config = {{"train", config_to_json(cfg)}, {"epoch", epoch}};
  const auto& params = model.parameters();
  auto push = [&](std::string name, const Shape& shape, std::span<const Real> values) {
    ck.tensors.push_back({std::move(name), shape, {values.begin(), values.end()}});
  };
  for (const auto& p : params) push(p.name, p.tensor.shape(), p.tensor.values());
  if (opt) {
    ck.optimizer_step = opt->step_count();
    for (std::size_t k = 0; k < params.size(); ++k) {
      push("adam.m/" + params[k].name, params[k].tensor.shape(), opt->first_moments()[k]);
      push("adam.v/" + params[k].name, params[k].tensor.shape(), opt->second_moments()[k]);
    }
  }
  return ck;
}

template <typename Real>
void load_parameters(VisionTransformer<Real>& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    const auto* t = ckpt.find(p.name);
    if (!t) throw CheckpointError(CheckpointErrorKind::malformed, "checkpoint lacks tensor '" + p.name + "'");
    if (t->shape != p.tensor.shape())
      throw CheckpointError(CheckpointErrorKind::malformed,
                            "tensor '" + p.name + "' has shape " + shape_str(t->shape) +
                                ", model expects " + shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<Real>(t->values[i]);
  }
}

// ---- run_training -------------------------------------------------------------

TrainConfig fit_to_dataset(TrainConfig cfg, const Dataset& dataset) {
  cfg.vit.num_classes = dataset.num_classes;
  cfg.vit.channels = dataset.channels;
  return cfg;
}

json run_manifest(const TrainConfig& cfg, const Dataset& dataset) {
  return {{"config", config_to_json(cfg)},
          {"out_dir", cfg.out_dir.string()},
          {"dataset",
           {{"name", dataset.name},
            {"num_classes", dataset.num_classes},
            {"shape", {dataset.height, dataset.width, dataset.channels}},
            {"counts", {{"train", dataset.train.count()}, {"val", dataset.val.count()}, {"test", dataset.test.count()}}}}}};
}

namespace {

void write_text(const fs::path& path, const std::string& text, bool append = false) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("short write to " + path.string());
}

MetricsRow make_row(std::size_t epoch, Split split, const std::vector<StepStats>& steps, double alpha) {
  double n = 0, ce1 = 0, ce2 = 0, ctr = 0, hits = 0;
  for (const auto& s : steps) {
    const auto w = static_cast<double>(s.count);
    n += w;
    ce1 += w * s.ce_clean;
    ce2 += w * s.ce_adv;
    ctr += w * s.ctr;
    hits += static_cast<double>(s.correct);
  }
  MetricsRow row;
  row.epoch = epoch;
  row.split = split;
  if (n > 0) {
    row.loss_ce_clean = ce1 / n;
    row.loss_ce_adv = ce2 / n;
    row.loss_ctr = ctr / n;
    row.accuracy = hits / n;
  }
  row.loss_total = combined_loss_value(row.loss_ce_clean, row.loss_ce_adv, row.loss_ctr, alpha);
  return row;
}

template <typename Real>
RunResult run_typed(const TrainConfig& cfg, const Dataset& dataset, const LogFn& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t side = cfg.vit.image_side;
  const auto train = prepare_split(dataset, Split::train, side);
  const auto val = prepare_split(dataset, Split::val, side);
  const auto test = prepare_split(dataset, Split::test, side);
  if (train.count == 0) throw DataError(DataErrorKind::count_mismatch, "training split is empty");

  VisionTransformer<Real> model(cfg.vit, cfg.seed);
  AdamW<Real> opt(cfg.adamw(), model.parameters());
  const double alpha = cfg.effective_alpha();

  const bool write = !cfg.out_dir.empty();
  const fs::path metrics_path = cfg.out_dir / "metrics.csv";
  if (write) write_text(metrics_path, std::string(kMetricsHeader) + "\n");

  RunResult res;
  res.config = cfg;
  std::vector<std::vector<Real>> best;
  bool have_best = false;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<StepStats> train_steps, val_steps;
    try {
      const auto batches = batch_iter<Real>(train, cfg.batch_size, derive_seed(cfg.seed, epoch), true);
      for (std::size_t i = 0; i < batches.size(); ++i)
        train_steps.push_back(train_step(batches[i], model, opt, cfg, i));
      if (val.count > 0) {
        const auto vb = batch_iter<Real>(val, cfg.batch_size, 0, false);
        for (std::size_t i = 0; i < vb.size(); ++i) val_steps.push_back(objective_step(vb[i], model, cfg, i));
      }
    } catch (const NumericDivergence& e) {
      throw NumericDivergence("epoch " + std::to_string(epoch) + ", " + e.what());
    } catch (const DegenerateInputError& e) {
      throw DegenerateInputError("epoch " + std::to_string(epoch) + ", " + e.what());
    }

    const auto tr = make_row(epoch, Split::train, train_steps, alpha);
    const auto va = make_row(epoch, Split::val, val_steps, alpha);
    res.metrics.push_back(tr);
    res.metrics.push_back(va);
    if (write) write_text(metrics_path, metrics_csv_line(tr) + "\n" + metrics_csv_line(va) + "\n", true);

    const bool improved = !have_best || va.accuracy > res.best_val_accuracy;
    if (improved) {
      have_best = true;
      res.best_epoch = epoch;
      res.best_val_accuracy = va.accuracy;
      best.clear();
      for (const auto& p : model.parameters()) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
      if (write) save_checkpoint(make_checkpoint(model, &opt, cfg, epoch), cfg.out_dir / "best.mcat");
    }
    if (log) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "epoch %zu/%zu  train loss %.4f acc %.4f  val loss %.4f acc %.4f%s",
                    epoch, cfg.epochs, tr.loss_total, tr.accuracy, va.loss_total, va.accuracy,
                    improved ? "  *" : "");
      log(buf);
    }
  }

  res.final_checkpoint = make_checkpoint(model, &opt, cfg, cfg.epochs);
  if (write) save_checkpoint(res.final_checkpoint, cfg.out_dir / "final.mcat");

  auto& params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) std::ranges::copy(best[k], params[k].tensor.mutable_values().begin());
  res.test_accuracy = evaluate(model, test);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "best epoch %zu  val acc %.4f  test acc %.4f  (%.1fs)", res.best_epoch,
                  res.best_val_accuracy, res.test_accuracy, res.seconds);
    log(buf);
  }
  return res;
}

}  // namespace

RunResult run_training(const TrainConfig& cfg_in, const Dataset& dataset, const LogFn& log) {
  dataset.validate();
  const TrainConfig cfg = fit_to_dataset(cfg_in, dataset).resolved();
  cfg.validate();
  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create run directory " + cfg.out_dir.string() + ": " + ec.message());
    write_text(cfg.out_dir / "run_manifest.json", run_manifest(cfg, dataset).dump(2) + "\n");
  }
  return cfg.precision == Precision::f32 ? run_typed<float>(cfg, dataset, log)
                                         : run_typed<double>(cfg, dataset, log);
}

// ---- seeds, grid, ablation ------------------------------------------------------

double mean_of(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

SeedAverage run_seed_average(const TrainConfig& cfg, const Dataset& dataset,
                             const std::vector<std::uint64_t>& seeds, const LogFn& log) {
  if (seeds.empty()) throw ConfigError("seeds", "need at least one seed");
  SeedAverage avg;
  for (const auto seed : seeds) {
    TrainConfig c = cfg;
    c.seed = seed;
    if (!cfg.out_dir.empty()) c.out_dir = cfg.out_dir / ("seed_" + std::to_string(seed));
    if (log) log("seed " + std::to_string(seed));
    const auto r = run_training(c, dataset, log);
    avg.seeds.push_back(seed);
    avg.test_accuracies.push_back(r.test_accuracy);
    avg.seconds.push_back(r.seconds);
  }
  avg.mean = mean_of(avg.test_accuracies);
  return avg;
}

std::vector<double> default_alphas() { return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}; }

std::vector<double> default_epsilons() { return dedupe({0.0001, 0.001, 0.0005, 0.001}); }

std::vector<double> dedupe(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  return values;
}

bool grid_rank_less(const GridCell& a, const GridCell& b) {
  if (a.best_val_accuracy != b.best_val_accuracy) return a.best_val_accuracy > b.best_val_accuracy;
  if (a.alpha != b.alpha) return a.alpha < b.alpha;
  return a.epsilon < b.epsilon;
}

GridResult grid_search(const Dataset& dataset, std::vector<double> alphas, std::vector<double> epsilons,
                       const TrainConfig& base, std::size_t parallel, const LogFn& log) {
  alphas = dedupe(std::move(alphas));
  epsilons = dedupe(std::move(epsilons));
  if (alphas.empty()) throw ConfigError("alphas", "grid needs at least one alpha");
  if (epsilons.empty()) throw ConfigError("epsilons", "grid needs at least one epsilon");

  std::vector<GridCell> cells;
  for (double a : alphas)
    for (double e : epsilons) cells.push_back({.alpha = a, .epsilon = e, .seed = base.seed, .error = {}});

  std::mutex log_mutex;
  auto run_cell = [&](GridCell& cell) {
    TrainConfig c = base;
    c.mode = TrainMode::medicat;
    c.alpha = cell.alpha;
    c.epsilon = cell.epsilon;
    if (!base.out_dir.empty()) {
      char name[64];
      std::snprintf(name, sizeof name, "%g_%g", cell.alpha, cell.epsilon);
      c.out_dir = base.out_dir / "cells" / name;
    }
    try {
      const auto r = run_training(c, dataset);
      cell.best_val_accuracy = r.best_val_accuracy;
      cell.test_accuracy = r.test_accuracy;
      cell.best_epoch = r.best_epoch;
    } catch (const std::exception& e) {
      cell.error = e.what();
      if (cell.error.empty()) cell.error = "unknown failure";
    }
    if (log) {
      char buf[256];
      if (cell.ok())
        std::snprintf(buf, sizeof buf, "cell alpha=%g epsilon=%g  val acc %.4f  test acc %.4f", cell.alpha,
                      cell.epsilon, cell.best_val_accuracy, cell.test_accuracy);
      else
        std::snprintf(buf, sizeof buf, "cell alpha=%g epsilon=%g  FAILED: %s", cell.alpha, cell.epsilon,
                      cell.error.c_str());
      std::lock_guard lock(log_mutex);
      log(buf);
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(parallel, 1, cells.size());
  if (workers == 1) {
    for (auto& cell : cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        omp_set_num_threads(1);
        for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) run_cell(cells[i]);
      });
    for (auto& t : pool) t.join();
  }

  GridResult res;
  res.cells = cells.size();
  for (auto& cell : cells) (cell.ok() ? res.ranked : res.failures).push_back(cell);
  std::sort(res.ranked.begin(), res.ranked.end(), grid_rank_less);
  return res;
}

std::string grid_csv(const GridResult& result) {
  std::string out = std::string(kGridHeader) + "\n";
  char buf[160];
  for (const auto& c : result.ranked) {
    std::snprintf(buf, sizeof buf, "%g,%g,%.10g,%.10g,%llu\n", c.alpha, c.epsilon, c.best_val_accuracy,
                  c.test_accuracy, static_cast<unsigned long long>(c.seed));
    out += buf;
  }
  return out;
}

std::vector<AblationRow> run_ablation(const Dataset& dataset, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds, const LogFn& log) {
  const std::pair<std::string_view, TrainMode> modes[] = {
      {kBaselineLabel, TrainMode::baseline},
      {kAtOnlyLabel, TrainMode::at_only},
      {kProposedLabel, TrainMode::medicat},
  };
  std::vector<AblationRow> rows;
  for (const auto& [label, mode] : modes) {
    TrainConfig c = base;
    c.mode = mode;
    if (!base.out_dir.empty()) c.out_dir = base.out_dir / std::string(mode_name(mode));
    if (log) log(std::string(label));
    rows.push_back({std::string(label), mode, run_seed_average(c, dataset, seeds, log)});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "model,mode,mean_test_accuracy";
  if (!rows.empty())
    for (const auto s : rows.front().runs.seeds) out << ",seed_" << s;
  out << "\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g", r.runs.mean);
    out << '"' << r.label << "\"," << mode_name(r.mode) << ',' << buf;
    for (const double a : r.runs.test_accuracies) {
      std::snprintf(buf, sizeof buf, "%.6g", a);
      out << ',' << buf;
    }
    out << "\n";
  }
  return out.str();
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-30s %10s\n", "Model", "Accuracy");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-30s %10.4f\n", r.label.c_str(), r.runs.mean);
    out << buf;
  }
  return out.str();
}

// ---- attack -------------------------------------------------------------------

template <typename Real>
SplitData perturb_split(const VisionTransformer<Real>& model, const Dataset& dataset, Split split,
                        const AttackConfig& atk, std::size_t batch_size) {
  const auto& vit = model.config();
  if (dataset.height != vit.image_side || dataset.width != vit.image_side || dataset.channels != vit.channels)
    throw ConfigError("data", "dataset images are " + std::to_string(dataset.height) + "x" +
                                  std::to_string(dataset.width) + "x" + std::to_string(dataset.channels) +
                                  " but the model expects " + std::to_string(vit.image_side) + "x" +
                                  std::to_string(vit.image_side) + "x" + std::to_string(vit.channels));
  const auto prepared = prepare_split(dataset, split, vit.image_side);
  SplitData out;
  out.labels = dataset.split(split).labels;
  out.images.reserve(dataset.split(split).images.size());
  for (const auto& idx : batch_indices(prepared.count, batch_size, 0, false)) {
    const auto batch = make_batch<Real>(prepared, idx);
    const auto eta = fgsm_perturbation(batch, model, atk);
    const auto adv = make_adversarial_batch<Real>(batch, eta.values(), atk);
    const auto av = adv.images.values();
    const std::vector<double> chw(av.begin(), av.end());
    const auto hwc = denormalize(chw, batch.size(), dataset.height, dataset.width, dataset.channels,
                                 dataset.mean, dataset.std);
    for (const double v : hwc) out.images.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)));
  }
  return out;
}

#define MEDICAT_INSTANTIATE(R)                                                                          \
  template StepStats train_step<R>(const Batch<R>&, VisionTransformer<R>&, AdamW<R>&, const TrainConfig&, \
                                   std::size_t);                                                        \
  template StepStats objective_step<R>(const Batch<R>&, const VisionTransformer<R>&, const TrainConfig&, \
                                       std::size_t);                                                    \
  template std::vector<int> predict<R>(const VisionTransformer<R>&, const PreparedSplit&, std::size_t); \
  template double evaluate<R>(const VisionTransformer<R>&, const PreparedSplit&, std::size_t);          \
  template Checkpoint make_checkpoint<R>(const VisionTransformer<R>&, const AdamW<R>*, const TrainConfig&, \
                                         std::size_t);                                                  \
  template void load_parameters<R>(VisionTransformer<R>&, const Checkpoint&);                           \
  template SplitData perturb_split<R>(const VisionTransformer<R>&, const Dataset&, Split,              \
                                      const AttackConfig&, std::size_t);

MEDICAT_INSTANTIATE(float)
MEDICAT_INSTANTIATE(double)

#undef MEDICAT_INSTANTIATE

}  // namespace medicat
