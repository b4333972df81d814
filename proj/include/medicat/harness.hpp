#pragma once

// Training loop, evaluation, seed averaging, grid search and ablation.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "medicat/adversarial.hpp"
#include "medicat/checkpoint.hpp"
#include "medicat/data.hpp"
#include "medicat/objectives.hpp"
#include "medicat/optimizer.hpp"
#include "medicat/vit.hpp"

namespace medicat {

enum class TrainMode {
  baseline,  // clean cross-entropy only
  at_only,   // clean + adversarial cross-entropy, no contrastive term
  medicat,   // clean + adversarial cross-entropy + contrastive term
};

enum class Precision { f64, f32 };

std::string_view mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);
std::string_view precision_name(Precision p);
Precision parse_precision(std::string_view name);
std::string_view direction_name(AttackDirection d);
AttackDirection parse_direction(std::string_view name);
std::string_view correlation_name(CorrelationVariant v);
CorrelationVariant parse_correlation(std::string_view name);

struct TrainConfig {
  double alpha = 0.1;
  double epsilon = 0.001;
  double lambda = 0.005;
  std::size_t epochs = 50;
  std::size_t batch_size = 48;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 42;
  TrainMode mode = TrainMode::medicat;
  AttackDirection direction = AttackDirection::descend;
  bool clamp = false;
  CorrelationVariant correlation = CorrelationVariant::cross;
  Precision precision = Precision::f64;
  ViTConfig vit;
  // Run directory for manifest, metrics and checkpoints; empty writes nothing.
  std::filesystem::path out_dir;

  void validate() const;
  // Copy with the mode's forced values applied (alpha = 0 outside medicat).
  TrainConfig resolved() const;
  double effective_alpha() const { return mode == TrainMode::medicat ? alpha : 0.0; }
  bool adversarial() const { return mode != TrainMode::baseline; }
  AttackConfig attack() const;
  AdamWConfig adamw() const;
  ContrastiveConfig contrastive() const;
};

// Every field except out_dir, which must not leak into checkpoint bytes.
nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

struct MetricsRow {
  std::size_t epoch = 0;
  Split split = Split::train;
  double loss_ce_clean = 0;
  double loss_ce_adv = 0;
  double loss_ctr = 0;
  double loss_total = 0;
  double accuracy = 0;
};

inline constexpr std::string_view kMetricsHeader =
    "epoch,split,loss_ce_clean,loss_ce_adv,loss_ctr,loss_total,accuracy";
std::string metrics_csv_line(const MetricsRow& row);

// Per-batch losses (batch means) and clean-prediction hits.
struct StepStats {
  double ce_clean = 0;
  double ce_adv = 0;
  double ctr = 0;
  double total = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

// One optimisation step: clean pass, FGSM from the clean loss, perturbed pass
// through the same parameters, contrastive term on the mean-pooled patch
// states, combined loss, backward, AdamW. `batch_index` only labels errors.
template <typename Real>
StepStats train_step(const Batch<Real>& batch, VisionTransformer<Real>& model, AdamW<Real>& opt,
                     const TrainConfig& cfg, std::size_t batch_index = 0);

// The same objective without a parameter update.
template <typename Real>
StepStats objective_step(const Batch<Real>& batch, const VisionTransformer<Real>& model,
                         const TrainConfig& cfg, std::size_t batch_index = 0);

std::size_t argmax(std::span<const double> row);
// Fraction of rows whose argmax equals the label.
double accuracy(std::span<const double> logits, std::size_t classes, std::span<const int> labels);

template <typename Real>
std::vector<int> predict(const VisionTransformer<Real>& model, const PreparedSplit& split,
                         std::size_t batch_size = 256);
// Clean-image accuracy of `model` on a prepared split.
template <typename Real>
double evaluate(const VisionTransformer<Real>& model, const PreparedSplit& split,
                std::size_t batch_size = 256);

template <typename Real>
Checkpoint make_checkpoint(const VisionTransformer<Real>& model, const AdamW<Real>* opt,
                           const TrainConfig& cfg, std::size_t epoch);
// Copies checkpointed values into the model's parameters by name.
template <typename Real>
void load_parameters(VisionTransformer<Real>& model, const Checkpoint& ckpt);

struct RunResult {
  TrainConfig config;  // resolved
  std::vector<MetricsRow> metrics;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  double test_accuracy = 0;
  double seconds = 0;
  Checkpoint final_checkpoint;
};

using LogFn = std::function<void(const std::string&)>;

// Trains cfg.epochs epochs, logging a train and a val row per epoch, keeps the
// parameters with the best validation accuracy (earliest on ties) and reports
// their test accuracy. With out_dir set, writes run_manifest.json before the
// first step, metrics.csv as epochs finish, best.mcat on each improvement and
// final.mcat at the end.
RunResult run_training(const TrainConfig& cfg, const Dataset& dataset, const LogFn& log = {});

// Geometry and class count taken from the dataset.
TrainConfig fit_to_dataset(TrainConfig cfg, const Dataset& dataset);

nlohmann::json run_manifest(const TrainConfig& cfg, const Dataset& dataset);

struct SeedAverage {
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_accuracies;  // aligned with seeds
  std::vector<double> seconds;
  double mean = 0;
};

inline const std::vector<std::uint64_t> kDefaultSeeds = {42, 44};

// Per-seed runs go to out_dir/seed_<n> when out_dir is set.
SeedAverage run_seed_average(const TrainConfig& cfg, const Dataset& dataset,
                             const std::vector<std::uint64_t>& seeds = kDefaultSeeds,
                             const LogFn& log = {});
// Order-independent mean (values are summed in sorted order).
double mean_of(std::vector<double> values);

struct GridCell {
  double alpha = 0;
  double epsilon = 0;
  std::uint64_t seed = 0;
  double best_val_accuracy = 0;
  double test_accuracy = 0;
  std::size_t best_epoch = 0;
  std::string error;  // nonempty when the cell failed
  bool ok() const { return error.empty(); }
};

struct GridResult {
  std::vector<GridCell> ranked;    // successful cells, best first
  std::vector<GridCell> failures;  // in grid order
  std::size_t cells = 0;
  const GridCell* winner() const { return ranked.empty() ? nullptr : &ranked.front(); }
};

std::vector<double> default_alphas();
// Sweep {1e-4, 1e-3, 5e-4, 1e-3} with the repeat removed.
std::vector<double> default_epsilons();
// Sorted, duplicates removed.
std::vector<double> dedupe(std::vector<double> values);

// Validation accuracy descending, then alpha, then epsilon ascending.
bool grid_rank_less(const GridCell& a, const GridCell& b);

// One medicat run per (alpha, epsilon) pair after deduplication. Up to
// `parallel` cells train concurrently, each single-threaded. Per-cell output
// goes to out_dir/cells/<alpha>_<epsilon> when out_dir is set.
GridResult grid_search(const Dataset& dataset, std::vector<double> alphas,
                       std::vector<double> epsilons, const TrainConfig& base,
                       std::size_t parallel = 1, const LogFn& log = {});

inline constexpr std::string_view kGridHeader = "alpha,epsilon,best_val_accuracy,test_accuracy,seed";
std::string grid_csv(const GridResult& result);

struct AblationRow {
  std::string label;
  TrainMode mode = TrainMode::baseline;
  SeedAverage runs;
};

inline constexpr std::string_view kBaselineLabel = "ViT (Baseline)";
inline constexpr std::string_view kAtOnlyLabel = "AT Only";
inline constexpr std::string_view kProposedLabel = "AT + Contrastive (Proposed)";

// Baseline, AT-only and medicat over a shared seed set; per-mode output goes
// to out_dir/<mode> when out_dir is set.
std::vector<AblationRow> run_ablation(const Dataset& dataset, const TrainConfig& base,
                                      const std::vector<std::uint64_t>& seeds = kDefaultSeeds,
                                      const LogFn& log = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

// FGSM-perturbs every image of one split with `model`, returning the split
// re-encoded as u8 pixels. The dataset's geometry must match the model's.
template <typename Real>
SplitData perturb_split(const VisionTransformer<Real>& model, const Dataset& dataset, Split split,
                        const AttackConfig& atk, std::size_t batch_size = 64);

}  // namespace medicat
