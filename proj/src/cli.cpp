#include "medicat/cli.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "medicat/error.hpp"
#include "medicat/gradcheck.hpp"
#include "medicat/harness.hpp"

namespace medicat::cli {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const CheckpointError*>(&e) ||
      dynamic_cast<const IoError*>(&e))
    return kData;
  if (dynamic_cast<const NumericDivergence*>(&e) || dynamic_cast<const DegenerateInputError*>(&e))
    return kNumeric;
  return kUsage;
}

namespace {

// String-valued knobs are parsed after CLI11 so that bad values surface as
// ConfigError with the same message shape as numeric range errors.
struct TrainFlags {
  TrainConfig cfg;
  std::string mode = "medicat";
  std::string direction = "descend";
  std::string correlation = "cross";
  std::string precision = "f64";
  std::string data;
  std::string out;
  int threads = 0;

  TrainConfig resolve() {
    cfg.mode = parse_mode(mode);
    cfg.direction = parse_direction(direction);
    cfg.correlation = parse_correlation(correlation);
    cfg.precision = parse_precision(precision);
    cfg.out_dir = out;
    if (threads > 0) omp_set_num_threads(threads);
    // Reject bad knobs before touching the dataset.
    cfg.validate();
    return cfg;
  }
};

void add_train_flags(CLI::App* app, TrainFlags& f, bool with_mode, const std::string& default_out) {
  auto& c = f.cfg;
  f.out = default_out;
  app->add_option("--data", f.data, "Dataset directory")->required();
  app->add_option("--out", f.out, "Run output directory");
  app->add_option("--alpha", c.alpha, "Weight of the contrastive term, in [0, 1]");
  app->add_option("--epsilon", c.epsilon, "FGSM step in normalized pixel units");
  app->add_option("--lambda", c.lambda, "Off-diagonal weight of the contrastive loss");
  app->add_option("--epochs", c.epochs, "Training epochs");
  app->add_option("--batch-size", c.batch_size, "Minibatch size");
  app->add_option("--lr", c.lr, "AdamW learning rate");
  app->add_option("--beta1", c.beta1, "AdamW first-moment decay");
  app->add_option("--beta2", c.beta2, "AdamW second-moment decay");
  app->add_option("--adam-eps", c.adam_eps, "AdamW denominator epsilon");
  app->add_option("--weight-decay", c.weight_decay, "Decoupled weight decay");
  app->add_option("--seed", c.seed, "Seed for initialization and shuffling");
  if (with_mode) app->add_option("--mode", f.mode, "baseline | at_only | medicat");
  app->add_option("--direction", f.direction, "FGSM sign: descend (-eps) | ascend (+eps)");
  app->add_flag("--clamp", c.clamp, "Clamp perturbed pixels to the normalized range");
  app->add_option("--correlation", f.correlation, "Contrastive pairing: cross | printed");
  app->add_option("--precision", f.precision, "Floating point: f64 | f32");
  app->add_option("--image-side", c.vit.image_side, "Model input side (images are resized)");
  app->add_option("--patch-side", c.vit.patch_side, "Patch side in pixels");
  app->add_option("--hidden-dim", c.vit.hidden_dim, "Encoder width d");
  app->add_option("--num-layers", c.vit.num_layers, "Transformer blocks");
  app->add_option("--num-heads", c.vit.num_heads, "Attention heads");
  app->add_option("--mlp-ratio", c.vit.mlp_ratio, "MLP width as a multiple of d");
  app->add_option("--threads", f.threads, "OpenMP threads (0 keeps the runtime default)");
}

// Names the flag behind a ConfigError field when the subcommand has one.
std::string describe(const ConfigError& e, const CLI::App* sub) {
  std::string flag = e.field();
  std::replace(flag.begin(), flag.end(), '_', '-');
  const std::string what = e.what();
  const auto colon = what.find(": ");
  const std::string detail = colon == std::string::npos ? what : what.substr(colon + 2);
  if (sub && !flag.empty() && sub->get_option_no_throw("--" + flag)) return "--" + flag + ": " + detail;
  return what;
}

LogFn printer(std::ostream& out) {
  return [&out](const std::string& line) { out << line << std::endl; };
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("short write to " + path.string());
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// Model rebuilt from a checkpoint's config echo and weights.
template <typename Real>
VisionTransformer<Real> model_from(const Checkpoint& ckpt, TrainConfig& cfg) {
  try {
    cfg = config_from_json(ckpt.config.at("train"));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("config echo: ") + e.what());
  }
  VisionTransformer<Real> model(cfg.vit, cfg.seed);
  load_parameters(model, ckpt);
  return model;
}

template <typename Real>
int do_eval(const Checkpoint& ckpt, const Dataset& ds, Split split, std::size_t batch_size, std::ostream& out) {
  TrainConfig cfg;
  const auto model = model_from<Real>(ckpt, cfg);
  if (ds.num_classes != cfg.vit.num_classes || ds.channels != cfg.vit.channels)
    throw DataError(DataErrorKind::malformed_descriptor,
                    "dataset has " + std::to_string(ds.num_classes) + " classes and " +
                        std::to_string(ds.channels) + " channels, checkpoint expects " +
                        std::to_string(cfg.vit.num_classes) + " and " + std::to_string(cfg.vit.channels));
  const auto prepared = prepare_split(ds, split, cfg.vit.image_side);
  const double acc = evaluate(model, prepared, batch_size);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s accuracy %.6g (%zu examples)\n", std::string(split_name(split)).c_str(), acc,
                prepared.count);
  out << buf;
  return kOk;
}

template <typename Real>
int do_attack(const Checkpoint& ckpt, Dataset ds, Split split, const AttackConfig& atk, std::size_t batch_size,
              const fs::path& out_dir, std::ostream& out) {
  TrainConfig cfg;
  const auto model = model_from<Real>(ckpt, cfg);
  const double clean = evaluate(model, prepare_split(ds, split, cfg.vit.image_side), batch_size);
  ds.split(split) = perturb_split(model, ds, split, atk, batch_size);
  ds.name += "-fgsm";
  const double attacked = evaluate(model, prepare_split(ds, split, cfg.vit.image_side), batch_size);
  save_dataset(ds, out_dir);
  char buf[192];
  std::snprintf(buf, sizeof buf, "%s accuracy clean %.6g, perturbed %.6g; wrote %s\n",
                std::string(split_name(split)).c_str(), clean, attacked, out_dir.string().c_str());
  out << buf;
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive adversarial training of a Vision Transformer", "medicat"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  TrainFlags train_flags, grid_flags, abl_flags;
  auto* train = app.add_subcommand("train", "Train one model");
  add_train_flags(train, train_flags, true, "runs/train");

  std::vector<double> alphas = default_alphas(), epsilons = default_epsilons();
  std::size_t parallel = 1;
  auto* grid = app.add_subcommand("grid", "Grid search over alpha x epsilon (medicat mode)");
  add_train_flags(grid, grid_flags, false, "runs/grid");
  grid->add_option("--alphas", alphas, "Alpha values")->delimiter(',');
  grid->add_option("--epsilons", epsilons, "Epsilon values (duplicates dropped)")->delimiter(',');
  grid->add_option("--parallel", parallel, "Cells trained concurrently");

  std::vector<std::uint64_t> seeds = kDefaultSeeds;
  auto* ablation = app.add_subcommand("ablation", "Baseline vs AT-only vs proposed, averaged over seeds");
  add_train_flags(ablation, abl_flags, false, "runs/ablation");
  ablation->add_option("--seeds", seeds, "Seeds to average over")->delimiter(',');

  std::string ckpt_path, data_dir, split_text = "test", out_dir;
  std::size_t eval_batch = 256;
  auto* eval = app.add_subcommand("eval", "Clean accuracy of a checkpoint on one split");
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--split", split_text, "train | val | test");
  eval->add_option("--batch-size", eval_batch, "Evaluation batch size");

  AttackConfig atk;
  atk.direction = AttackDirection::ascend;
  std::string atk_direction = "ascend";
  auto* attack = app.add_subcommand("attack", "Write an FGSM-perturbed copy of a dataset");
  attack->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  attack->add_option("--data", data_dir, "Source dataset directory")->required();
  attack->add_option("--out", out_dir, "Output dataset directory")->required();
  attack->add_option("--epsilon", atk.epsilon, "FGSM step in normalized pixel units");
  attack->add_option("--direction", atk_direction, "ascend (+eps) | descend (-eps)");
  attack->add_option("--split", split_text, "Split to perturb");
  attack->add_flag("--clamp", atk.clamp, "Clamp to the normalized pixel range");
  attack->add_option("--batch-size", eval_batch, "Attack batch size");

  SynthConfig synth_cfg;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic block dataset");
  synth->add_option("--classes", synth_cfg.num_classes, "Number of classes");
  synth->add_option("--per-class", synth_cfg.per_class, "Examples per class (split 70/10/20)");
  synth->add_option("--side", synth_cfg.image_side, "Image side in pixels");
  synth->add_option("--channels", synth_cfg.channels, "Image channels");
  synth->add_option("--seed", synth_cfg.seed, "Generator seed");
  synth->add_option("--out", out_dir, "Output dataset directory")->required();

  GradcheckOptions gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seeds", gc.seeds, "Random cases per op");
  gradcheck->add_option("--step", gc.step, "Central-difference step");
  gradcheck->add_option("--tolerance", gc.tolerance, "Max relative error");

  std::vector<std::string> argv_store{"medicat"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  const CLI::App* active = app.get_subcommands().front();
  try {
    if (*train) {
      auto cfg = train_flags.resolve();
      const auto ds = load_dataset(train_flags.data);
      const auto r = run_training(cfg, ds, printer(out));
      out << "test accuracy " << r.test_accuracy << " (best epoch " << r.best_epoch << ")\n";
      return kOk;
    }
    if (*grid) {
      auto cfg = grid_flags.resolve();
      cfg.mode = TrainMode::medicat;
      const auto ds = load_dataset(grid_flags.data);
      make_dir(cfg.out_dir);
      const auto res = grid_search(ds, alphas, epsilons, cfg, parallel, printer(out));
      write_file(cfg.out_dir / "grid.csv", grid_csv(res));
      out << grid_csv(res);
      for (const auto& f : res.failures)
        err << "cell alpha=" << f.alpha << " epsilon=" << f.epsilon << " failed: " << f.error << "\n";
      if (const auto* w = res.winner()) {
        char buf[192];
        std::snprintf(buf, sizeof buf, "best cell: alpha=%g epsilon=%g  val acc %.6g  >>> test acc %.6g <<<\n",
                      w->alpha, w->epsilon, w->best_val_accuracy, w->test_accuracy);
        out << buf;
        return kOk;
      }
      return kNumeric;
    }
    if (*ablation) {
      auto cfg = abl_flags.resolve();
      const auto ds = load_dataset(abl_flags.data);
      make_dir(cfg.out_dir);
      const auto rows = run_ablation(ds, cfg, seeds, printer(out));
      write_file(cfg.out_dir / "ablation.csv", ablation_csv(rows));
      out << ablation_table(rows);
      return kOk;
    }
    if (*eval) {
      const auto split = parse_split(split_text);
      const auto ckpt = load_checkpoint(ckpt_path);
      const auto ds = load_dataset(data_dir);
      return ckpt.dtype == DType::f32 ? do_eval<float>(ckpt, ds, split, eval_batch, out)
                                      : do_eval<double>(ckpt, ds, split, eval_batch, out);
    }
    if (*attack) {
      atk.direction = parse_direction(atk_direction);
      atk.validate();
      const auto split = parse_split(split_text);
      const auto ckpt = load_checkpoint(ckpt_path);
      auto ds = load_dataset(data_dir);
      return ckpt.dtype == DType::f32 ? do_attack<float>(ckpt, std::move(ds), split, atk, eval_batch, out_dir, out)
                                      : do_attack<double>(ckpt, std::move(ds), split, atk, eval_batch, out_dir, out);
    }
    if (*synth) {
      const auto ds = synth_generate(synth_cfg);
      save_dataset(ds, out_dir);
      out << "wrote " << ds.train.count() << "/" << ds.val.count() << "/" << ds.test.count()
          << " train/val/test examples to " << out_dir << "\n";
      return kOk;
    }
    if (*gradcheck) {
      const auto reports = run_gradcheck_suite(gc);
      out << format_gradcheck(reports);
      const bool ok = std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
      return ok ? kOk : kNumeric;
    }
  } catch (const ConfigError& e) {
    err << "error: " << describe(e, active) << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kUsage;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace medicat::cli
