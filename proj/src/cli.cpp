#include "clinfuse/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <ostream>

#include "clinfuse/config.hpp"
#include "clinfuse/error.hpp"
#include "clinfuse/evaluation.hpp"
#include "clinfuse/model_check.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-5;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::string> variant;
  std::optional<int> folds;
  std::optional<int> jobs;
  std::optional<std::string> aggregation;
  std::optional<std::string> data;
  std::string checkpoint;
  bool resume = false;
};

RunConfig resolve_config(const Flags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = config_from_key_values(read_config_file(f.config));
  if (f.seed) cfg.seed = *f.seed;
  if (f.variant) cfg.model.variant = parse_variant(*f.variant);
  if (f.folds) cfg.folds = *f.folds;
  if (f.jobs) cfg.jobs = *f.jobs;
  if (f.aggregation) cfg.aggregation = parse_aggregation(*f.aggregation);
  if (f.data) cfg.data = *f.data;
  cfg.train.seed = cfg.seed;
  cfg.synth.seed = derive_seed(cfg.seed, "synth");
  return cfg;
}

Dataset acquire_data(RunConfig& cfg) {
  Dataset ds;
  if (cfg.data) {
    ds = load_dataset(*cfg.data / "clinical.csv", *cfg.data / "images");
  } else {
    cfg.synth.validate();
    ds = synth_generate(cfg.synth);
  }
  cfg.model.clinical_dim = ds.clinical_dim;
  return ds;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string log_line(const EpochRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%d loss=%.10f accuracy=%.6f step=%lld wall_time=%.3f", r.epoch, r.mean_loss,
                r.train_accuracy, static_cast<long long>(r.step), r.wall_seconds);
  return buf;
}

int cmd_synth(RunConfig cfg, const Flags& f, std::ostream& out) {
  cfg.synth.validate();
  const Dataset ds = synth_generate(cfg.synth);
  const fs::path dir = fs::path(f.out) / "dataset";
  save_dataset(ds, dir);
  out << "wrote " << ds.patients.size() << " patients (" << ds.slice_count() << " slices) to " << dir.string() << '\n';
  return 0;
}

int cmd_train(RunConfig cfg, const Flags& f, std::ostream& out) {
  const Dataset raw = acquire_data(cfg);
  cfg.validate();
  const fs::path ckpt = fs::path(f.out) / "model.ckpt";
  TrainingState state;
  if (f.resume && fs::exists(ckpt)) {
    state = checkpoint_load(ckpt, cfg.model);
    if (!state.stats) throw FormatError("checkpoint " + ckpt.string() + " lacks normalization stats");
  } else {
    state = make_training_state(cfg.model, cfg.train);
    state.stats = compute_stats(raw);
  }
  const Dataset data = preprocess(raw, *state.stats, cfg.model.image_size);

  fs::create_directories(f.out);
  std::ofstream log(fs::path(f.out) / "train.log");
  for (const auto& r : state.log) log << log_line(r) << '\n';
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log << log_line(r) << '\n';
    log.flush();
    out << log_line(r) << '\n';
  };
  hooks.on_checkpoint = [&](const TrainingState& s) { checkpoint_save(s, ckpt); };
  train(state, data, cfg.train, hooks);
  out << "checkpoint: " << ckpt.string() << '\n';
  return 0;
}

std::string single_report_csv(ModelVariant v, const std::string& fold, const MetricsReport& r) {
  std::string s = "variant,fold,acc,sens,spec,ppv,npv\n" + std::string(variant_name(v)) + ',' + fold;
  for (const auto& m : r.values()) s += ',' + format_fraction(m);
  return s + '\n';
}

int cmd_eval(RunConfig cfg, const Flags& f, std::ostream& out) {
  const Dataset raw = acquire_data(cfg);
  cfg.validate();
  const fs::path ckpt = f.checkpoint.empty() ? fs::path(f.out) / "model.ckpt" : fs::path(f.checkpoint);
  TrainingState state = checkpoint_load(ckpt, cfg.model);
  if (!state.stats) throw FormatError("checkpoint " + ckpt.string() + " lacks normalization stats");
  const Dataset data = preprocess(raw, *state.stats, state.model.image_size);
  const auto result = evaluate_model(state.model, state.params, data, cfg.aggregation);
  out << render_table({{std::string(variant_name(state.model.variant)), result.report.values()}});
  out << "tp=" << result.counts.tp << " fp=" << result.counts.fp << " tn=" << result.counts.tn
      << " fn=" << result.counts.fn << '\n';
  fs::create_directories(f.out);
  write_text(fs::path(f.out) / "report.csv", single_report_csv(state.model.variant, "all", result.report));
  return 0;
}

FoldAssignment make_folds(const RunConfig& cfg, const Dataset& raw) {
  return kfold_split(raw, cfg.folds, derive_seed(cfg.seed, "folds"));
}

int cmd_cv(RunConfig cfg, const Flags& f, std::ostream& out) {
  const Dataset raw = acquire_data(cfg);
  cfg.validate();
  const FoldAssignment folds = make_folds(cfg, raw);
  const auto cv = cross_validate(raw, folds, cfg.model, cfg.train, {cfg.aggregation, cfg.jobs});
  std::vector<std::pair<std::string, std::array<std::optional<double>, 5>>> rows;
  for (const auto& fr : cv.folds) rows.emplace_back("fold " + std::to_string(fr.fold), fr.evaluation.report.values());
  std::array<std::optional<double>, 5> mean, sd;
  for (std::size_t m = 0; m < 5; ++m) {
    mean[m] = cv.summary[m].mean;
    sd[m] = cv.summary[m].stddev;
  }
  rows.emplace_back("mean", mean);
  rows.emplace_back("std", sd);
  out << render_table(rows);
  fs::create_directories(f.out);
  write_text(fs::path(f.out) / "report.csv", render_csv({{cfg.model.variant, cv}}));
  return 0;
}

int cmd_ablate(RunConfig cfg, const Flags& f, std::ostream& out) {
  const Dataset raw = acquire_data(cfg);
  cfg.validate();
  const FoldAssignment folds = make_folds(cfg, raw);
  const auto rows = ablation_run(raw, folds, cfg.model, cfg.train, {cfg.aggregation, cfg.jobs});
  out << render_summary_table(rows);
  fs::create_directories(f.out);
  write_text(fs::path(f.out) / "ablation.csv", render_csv(rows));
  return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const Flags& f, std::ostream& out) {
  const ModelConfig tiny = tiny_model_config(f.variant ? cfg.model.variant : ModelVariant::FullModel);
  ModelCheckOptions opts;
  opts.seed = cfg.seed;
  double worst = 0.0;
  for (const auto& g : model_gradient_check(tiny, opts)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-40s %6lld coords  max rel err %.3e\n", g.name.c_str(),
                  static_cast<long long>(g.result.coordinates), g.result.max_relative_error);
    out << buf;
    worst = std::max(worst, g.result.max_relative_error);
  }
  char buf[80];
  std::snprintf(buf, sizeof buf, "max relative error: %.3e\n", worst);
  out << buf;
  return worst < kGradTolerance ? 0 : 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Clinical-guided multimodal fusion: synthetic data, training and evaluation", "clinfuse"};
  app.require_subcommand(1, 1);
  Flags flags;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "Flat key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "Global seed; all randomness derives from it");
    sub->add_option("--out", flags.out, "Output directory");
  };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", flags.data, "Dataset directory (clinical.csv + images/); synthesized when absent");
    sub->add_option("--variant", flags.variant, "image-only | image-clinical | full");
  };
  auto add_cv = [&](CLI::App* sub) {
    sub->add_option("--folds", flags.folds, "Number of cross-validation folds");
    sub->add_option("--jobs", flags.jobs, "Folds trained concurrently");
    sub->add_option("--aggregation", flags.aggregation, "slice | patient");
  };
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset under OUT/dataset");
  add_common(synth);
  auto* trn = app.add_subcommand("train", "Train one model; writes OUT/model.ckpt and OUT/train.log");
  add_common(trn);
  add_data(trn);
  trn->add_flag("--resume", flags.resume, "Continue from OUT/model.ckpt when present");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint; writes OUT/report.csv");
  add_common(ev);
  add_data(ev);
  ev->add_option("--aggregation", flags.aggregation, "slice | patient");
  ev->add_option("--checkpoint", flags.checkpoint, "Checkpoint directory (default OUT/model.ckpt)");
  auto* cv = app.add_subcommand("cv", "K-fold cross-validation; writes OUT/report.csv");
  add_common(cv);
  add_data(cv);
  add_cv(cv);
  auto* abl = app.add_subcommand("ablate", "Cross-validate all three variants; writes OUT/ablation.csv");
  add_common(abl);
  add_cv(abl);
  abl->add_option("--data", flags.data, "Dataset directory (clinical.csv + images/); synthesized when absent");
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite on a tiny model");
  add_common(gc);
  gc->add_option("--variant", flags.variant, "image-only | image-clinical | full");

  if (args.empty()) {
    err << app.help();
    return 1;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  RunConfig cfg;
  try {
    cfg = resolve_config(flags);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  try {
    if (synth->parsed()) return cmd_synth(cfg, flags, out);
    if (trn->parsed()) return cmd_train(cfg, flags, out);
    if (ev->parsed()) return cmd_eval(cfg, flags, out);
    if (cv->parsed()) return cmd_cv(cfg, flags, out);
    if (abl->parsed()) return cmd_ablate(cfg, flags, out);
    if (gc->parsed()) return cmd_gradcheck(cfg, flags, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

}  // namespace clinfuse
