// sacc: train, evaluate, visualize, benchmark and ablate saccadic classifiers.

#include <sacc/checkpoint.hpp>
#include <sacc/experiments.hpp>
#include <sacc/image_io.hpp>
#include <sacc/run_config.hpp>
#include <sacc/seeding.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace sacc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by every command that builds a run configuration.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, n_train, n_test;
  std::optional<double> nms_sigma, nms_strength, temperature;
  bool disable_position_bias = false;
  std::vector<std::string> sets;

  void add_to(CLI::App& app, bool training) {
    app.add_option("--seed", seed, "Run seed");
    app.add_option("--n-test", n_test, "Fixations at test time");
    app.add_option("--nms-sigma", nms_sigma, "Suppression kernel width (pixels at side 512)");
    app.add_option("--nms-strength", nms_strength, "Suppression strength in [0, 1)");
    app.add_option("--temperature", temperature, "Sampler temperature");
    app.add_option("--set", sets, "Extra key=value config overrides");
    if (training) {
      app.add_option("--epochs", epochs, "Training epochs");
      app.add_option("--n-train", n_train, "Fixations during training");
      app.add_flag("--disable-position-bias", disable_position_bias, "Zero and freeze the part position bias");
    }
  }

  void apply(RunConfig& c) const {
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) c.seed = *seed;
    if (epochs) c.train.epochs = *epochs;
    if (n_train) c.train.n_train = *n_train;
    if (n_test) c.train.n_test = *n_test;
    if (nms_sigma) c.train.sampler_params.nms_sigma = *nms_sigma;
    if (nms_strength) c.train.sampler_params.nms_strength = *nms_strength;
    if (temperature) c.train.sampler_params.temperature = *temperature;
    if (disable_position_bias) c.model.mpsa.disable_position_bias = true;
  }
};

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void append_jsonl(const fs::path& path, const nlohmann::json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  out << record.dump() << '\n';
}

RunConfig config_for_checkpoint(const fs::path& checkpoint, const std::string& config_path) {
  if (!config_path.empty()) return load_run_config(config_path);
  const std::string text = read_checkpoint_config(checkpoint);
  if (text.empty()) throw UsageError("checkpoint carries no config; pass --config");
  return parse_run_config(text);
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out = "run";
  Overrides ov;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  a.ov.apply(cfg);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());

  const DatasetBundle data = load_datasets(cfg);
  Model model(cfg.model_config());
  const TrainConfig tc = cfg.train_config();
  std::string csv = "epoch,loss_per,loss_fix,alpha_mean,top1\n";
  write_text(out / "metrics.csv", csv);
  TrainState state;
  train(model, *data.train, data.val.get(), tc, &state, [&](const EpochRecord& r) {
    const std::string line = std::to_string(r.epoch) + "," + fmt(r.loss_per) + "," + fmt(r.loss_fix) + "," +
                             fmt(r.alpha_mean) + "," + fmt(r.top1) + "\n";
    std::ofstream(out / "metrics.csv", std::ios::app) << line;
    std::cout << "epoch " << r.epoch << "  loss_per " << r.loss_per << "  loss_fix " << r.loss_fix << "  alpha "
              << r.alpha_mean << "  top1 " << r.top1 << std::endl;
  });
  save_checkpoint(model, out / "checkpoint.sacc", &state, cfg.to_text());
  const EvalReport rep = evaluate(model, *data.test, eval_options_for(tc, derive_seed(tc.seed, {0x54455354u})));
  std::cout << "test top1 " << rep.accuracy << '\n';
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string config;
  std::string data;
  std::string mode = "saccadic";
  std::string log;
  Overrides ov;
};

int cmd_eval(const EvalArgs& a) {
  const EvalMode mode = [&] {
    try {
      return parse_eval_mode(a.mode);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }();
  RunConfig cfg = config_for_checkpoint(a.checkpoint, a.config);
  a.ov.apply(cfg);
  if (!a.data.empty()) {
    cfg.dataset_source = "folder";
    cfg.dataset_path = a.data;
  }
  Model model(cfg.model_config());
  load_checkpoint(model, a.checkpoint);
  const DatasetBundle data = load_datasets(cfg);
  const TrainConfig tc = cfg.train_config();
  EvalOptions eo = eval_options_for(tc, derive_seed(tc.seed, {0x54455354u}));
  eo.mode = mode;
  if (mode == EvalMode::Random) eo.force_uniform_beta = true;
  const EvalReport rep = evaluate(model, *data.test, eo);
  const int n_test = mode == EvalMode::Peripheral ? 0 : eo.n_test;
  std::cout << "top1 " << rep.accuracy << "  (" << to_string(mode) << ", n_test " << n_test << ", " << rep.samples
            << " samples)\n";

  nlohmann::json rec{{"command", "eval"},        {"checkpoint", a.checkpoint}, {"mode", to_string(mode)},
                     {"n_test", n_test},         {"seed", cfg.seed},           {"top1", rep.accuracy},
                     {"samples", rep.samples},   {"mean_alpha", rep.mean_alpha},
                     {"per_class_correct", rep.per_class_correct}, {"per_class_total", rep.per_class_total}};
  const fs::path log = a.log.empty() ? fs::path(a.checkpoint).parent_path() / "eval.jsonl" : fs::path(a.log);
  append_jsonl(log, rec);
  return kExitOk;
}

// --- visualize -------------------------------------------------------------

struct VisualizeArgs {
  std::string checkpoint;
  std::string config;
  std::string image;
  std::string out = "vis";
  Overrides ov;
};

void outline(ImageF& img, Point center, GridShape window) {
  const int top = static_cast<int>(std::lround(center.row - window.rows / 2.0));
  const int left = static_cast<int>(std::lround(center.col - window.cols / 2.0));
  auto plot = [&](int y, int x) {
    if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) return;
    img.channels[0](y, x) = 1.0f;
    img.channels[1](y, x) = 1.0f;
    img.channels[2](y, x) = 0.0f;
  };
  for (int k = 0; k < window.cols; ++k) {
    plot(top, left + k);
    plot(top + window.rows - 1, left + k);
  }
  for (int k = 0; k < window.rows; ++k) {
    plot(top + k, left);
    plot(top + k, left + window.cols - 1);
  }
}

int cmd_visualize(const VisualizeArgs& a) {
  RunConfig cfg = config_for_checkpoint(a.checkpoint, a.config);
  a.ov.apply(cfg);
  Model model(cfg.model_config());
  load_checkpoint(model, a.checkpoint);
  ImageF img = read_pnm(a.image);
  if (img.num_channels() != 3) throw ImageIoError("expected an RGB (P6) image: " + a.image);
  const int side = model.config().source_side;
  if (img.height() != side || img.width() != side) img = resize_image(img, side);

  const TrainConfig tc = cfg.train_config();
  ForwardOptions fo;
  fo.policy = FixationPolicy::Saccadic;
  fo.sampler = tc.sampler_params;
  fo.sampler.count = std::max(1, tc.n_test);
  fo.sampler.record_provenance = true;
  std::mt19937_64 rng(derive_seed(tc.seed, {0x564953u}));
  Tape<float> tape;
  const ForwardPass<float> fp = model.forward(tape, img, fo, rng);

  const fs::path out(a.out);
  fs::create_directories(out);
  write_normalized_map(out / "priority.pgm", fp.priority);
  write_normalized_map(out / "priority_refined.pgm", fp.pooled.field);
  const auto frames = render_priority_progression(fp.fixations.snapshots);
  for (std::size_t k = 1; k < frames.size(); ++k)
    write_normalized_map(out / ("progression_" + std::to_string(k) + ".pgm"), frames[k]);
  ImageF overlay = img;
  for (const Point& p : fp.fixations.points) outline(overlay, p, model.config().window());
  write_pnm(out / "fixations.ppm", overlay);
  write_text(out / "config.txt", cfg.to_text());
  for (const Point& p : fp.fixations.points) std::cout << "fixation " << p.row << ' ' << p.col << '\n';
  return kExitOk;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  std::string config;
  std::vector<int> ns{1, 2, 4, 8, 16};
  int batches = 32;
  int batch_size = 8;
  bool sampler_only = false;
  std::string log;
  Overrides ov;
};

int cmd_bench(const BenchArgs& a) {
  RunConfig cfg = config_for_checkpoint(a.checkpoint, a.config);
  a.ov.apply(cfg);
  Model model(cfg.model_config());
  load_checkpoint(model, a.checkpoint);
  const DatasetBundle data = load_datasets(cfg);
  const TrainConfig tc = cfg.train_config();
  std::vector<BenchRow> rows;
  if (a.sampler_only) {
    Tape<float> tape;
    ForwardOptions fo;
    fo.policy = FixationPolicy::None;
    std::mt19937_64 rng(tc.seed);
    ImageF img = data.test->image(0);
    if (img.height() != model.config().source_side) img = resize_image(img, model.config().source_side);
    const ForwardPass<float> fp = model.forward(tape, img, fo, rng);
    const PriorityMap pooled =
        refine_priority({fp.priority, MapResolution::FeatureGrid}, model.config().source(), model.config().window());
    rows = sampler_bench(pooled, model.config().window(), tc.sampler_params, a.ns, a.batches);
  } else {
    rows = runtime_bench(model, *data.test, a.ns, a.batches, a.batch_size, tc.seed);
  }
  std::cout << format_bench(rows);
  if (!a.log.empty())
    for (const auto& r : rows)
      append_jsonl(a.log, {{"command", "bench"}, {"sampler_only", a.sampler_only}, {"n", r.n},
                           {"mean_s", r.seconds.mean}, {"ci95_s", r.seconds.ci95}, {"batches", r.batches}});
  return kExitOk;
}

// --- ablate / compare ------------------------------------------------------

struct AblateArgs {
  std::string config;
  std::vector<int> n_train{2, 4};
  std::vector<int> n_test{2, 4};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out = "ablation";
  Overrides ov;
};

int cmd_ablate(const AblateArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  a.ov.apply(cfg);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());
  const AblationResult r = fixation_grid_ablation(cfg, a.n_train, a.n_test, a.seeds,
                                                  [](const std::string& s) { std::cerr << s << std::endl; });
  const std::string table = format_ablation(r);
  std::cout << table;
  write_text(out / "ablation.txt", table);
  for (const auto& c : r.cells)
    append_jsonl(out / "ablation.jsonl",
                 {{"n_train", c.n_train}, {"n_test", c.n_test}, {"accuracy", c.accuracy}, {"mean", c.mean()}});
  return kExitOk;
}

struct CompareArgs {
  std::string config;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out = "compare";
  Overrides ov;
};

int cmd_compare(const CompareArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  a.ov.apply(cfg);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "config.txt", cfg.to_text());
  const Comparison c = compare_variants(cfg, a.seeds, {Variant::Vanilla, Variant::RandomAvg, Variant::Saccadic},
                                        [](const std::string& s) { std::cerr << s << std::endl; });
  for (const auto& v : c.variants) {
    std::cout << to_string(v.variant) << "  mean top1 " << v.mean() << '\n';
    append_jsonl(out / "compare.jsonl", {{"variant", to_string(v.variant)}, {"seeds", c.seeds},
                                         {"accuracy", v.accuracy}, {"mean", v.mean()}});
  }
  std::cout << "walltime " << c.seconds << " s\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saccadic fine-grained classification"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, metrics and config");
  train_cmd->add_option("--config", train_args.config, "Run config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_args.out, "Output directory");
  train_args.ov.add_to(*train_cmd, true);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--config", eval_args.config, "Config file (default: the one stored in the checkpoint)")
      ->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_args.data, "Folder dataset root with train/ and test/ subdirectories");
  eval_cmd->add_option("--mode", eval_args.mode, "saccadic | peripheral | random");
  eval_cmd->add_option("--log", eval_args.log, "JSON-lines log (default: eval.jsonl next to the checkpoint)");
  eval_cmd->add_option("--out", eval_args.log, "Alias for --log");
  eval_args.ov.add_to(*eval_cmd, false);

  VisualizeArgs vis_args;
  auto* vis_cmd = app.add_subcommand("visualize", "Write priority maps, progression frames and fixation overlay");
  vis_cmd->add_option("--checkpoint", vis_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  vis_cmd->add_option("--config", vis_args.config, "Config file (default: stored in the checkpoint)")
      ->check(CLI::ExistingFile);
  vis_cmd->add_option("--image", vis_args.image, "Input P6 image")->required();
  vis_cmd->add_option("--out", vis_args.out, "Output directory");
  vis_args.ov.add_to(*vis_cmd, false);

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "Inference walltime per fixation count");
  bench_cmd->add_option("--checkpoint", bench_args.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--config", bench_args.config, "Config file (default: stored in the checkpoint)")
      ->check(CLI::ExistingFile);
  bench_cmd->add_option("--n", bench_args.ns, "Fixation counts")->delimiter(',');
  bench_cmd->add_option("--batches", bench_args.batches, "Timed batches per count")->check(CLI::Range(32, 1 << 20));
  bench_cmd->add_option("--batch-size", bench_args.batch_size, "Images per batch")->check(CLI::PositiveNumber);
  bench_cmd->add_flag("--sampler-only", bench_args.sampler_only, "Time the fixation sampler alone");
  bench_cmd->add_option("--out", bench_args.log, "JSON-lines log");
  bench_args.ov.add_to(*bench_cmd, false);

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "Accuracy over a grid of training and test fixation counts");
  ablate_cmd->add_option("--config", ablate_args.config, "Run config file")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--train-grid", ablate_args.n_train, "Training fixation counts (>= 2)")->delimiter(',');
  ablate_cmd->add_option("--test-grid", ablate_args.n_test, "Test fixation counts")->delimiter(',');
  ablate_cmd->add_option("--seeds", ablate_args.seeds, "Seeds")->delimiter(',');
  ablate_cmd->add_option("--out", ablate_args.out, "Output directory");
  ablate_args.ov.add_to(*ablate_cmd, true);

  CompareArgs compare_args;
  auto* compare_cmd = app.add_subcommand("compare", "Peripheral-only vs random fixations vs saccadic, over seeds");
  compare_cmd->add_option("--config", compare_args.config, "Run config file")->required()->check(CLI::ExistingFile);
  compare_cmd->add_option("--seeds", compare_args.seeds, "Seeds")->delimiter(',');
  compare_cmd->add_option("--out", compare_args.out, "Output directory");
  compare_args.ov.add_to(*compare_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args);
    if (eval_cmd->parsed()) return cmd_eval(eval_args);
    if (vis_cmd->parsed()) return cmd_visualize(vis_args);
    if (bench_cmd->parsed()) return cmd_bench(bench_args);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_args);
    if (compare_cmd->parsed()) return cmd_compare(compare_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}
