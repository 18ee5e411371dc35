#include <sacc/experiments.hpp>
#include <sacc/seeding.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace sacc {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double accuracy_for(const RunConfig& cfg, const DatasetBundle& data) {
  Model model(cfg.model_config());
  const TrainConfig tc = cfg.train_config();
  train(model, *data.train, data.val.get(), tc);
  return evaluate(model, *data.test, eval_options_for(tc, derive_seed(tc.seed, {0x54455354u}))).accuracy;
}

}  // namespace

MeanCi mean_ci(const std::vector<double>& xs) {
  MeanCi r;
  if (xs.empty()) return r;
  const double n = static_cast<double>(xs.size());
  r.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1)) / std::sqrt(n);
  }
  return r;
}

LinearFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw std::invalid_argument("fit_line: need two or more paired points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx == 0) throw std::invalid_argument("fit_line: x values are all equal");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0 ? sxy * sxy / (sxx * syy) : 1.0;
  return f;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::RandomAvg: return "random-avg";
    default: return "saccadic";
  }
}

RunConfig variant_config(const RunConfig& base, Variant v) {
  RunConfig c = base;
  switch (v) {
    case Variant::Vanilla:
      c.train.sampler = FixationPolicy::None;
      c.train.n_train = 0;
      c.train.n_test = 0;
      c.train.loss.lambda_per += c.train.loss.lambda_fix;  // same total loss weight
      c.train.loss.lambda_fix = 0;
      break;
    case Variant::RandomAvg:
      c.train.sampler = FixationPolicy::Random;
      c.train.uniform_beta = true;
      break;
    case Variant::Saccadic:
      c.train.sampler = FixationPolicy::Saccadic;
      c.train.uniform_beta = false;
      break;
  }
  return c;
}

double VariantResult::mean() const { return mean_ci(accuracy).mean; }
double AblationCell::mean() const { return mean_ci(accuracy).mean; }

Comparison compare_variants(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            const std::vector<Variant>& variants, const ProgressFn& progress) {
  const auto t0 = Clock::now();
  const DatasetBundle data = load_datasets(base);
  Comparison out;
  out.seeds = seeds;
  for (Variant v : variants) {
    VariantResult r;
    r.variant = v;
    for (std::uint64_t seed : seeds) {
      RunConfig c = variant_config(base, v);
      c.seed = seed;
      r.accuracy.push_back(accuracy_for(c, data));
      if (progress) {
        std::ostringstream os;
        os << to_string(v) << " seed=" << seed << " acc=" << r.accuracy.back() << " t=" << seconds_since(t0) << "s";
        progress(os.str());
      }
    }
    out.variants.push_back(std::move(r));
  }
  out.seconds = seconds_since(t0);
  return out;
}

AblationResult fixation_grid_ablation(const RunConfig& base, const std::vector<int>& n_train,
                                      const std::vector<int>& n_test, const std::vector<std::uint64_t>& seeds,
                                      const ProgressFn& progress) {
  for (int n : n_train)
    if (n < 2) throw std::invalid_argument("fixation_grid_ablation: N_train must be at least 2");
  for (int n : n_test)
    if (n < 1) throw std::invalid_argument("fixation_grid_ablation: N_test must be at least 1");
  if (seeds.empty()) throw std::invalid_argument("fixation_grid_ablation: need at least one seed");

  const DatasetBundle data = load_datasets(base);
  AblationResult r;
  r.n_train = n_train;
  r.n_test = n_test;
  for (int a : n_train)
    for (int b : n_test) r.cells.push_back({a, b, {}});

  for (std::size_t i = 0; i < n_train.size(); ++i)
    for (std::uint64_t seed : seeds) {
      RunConfig c = variant_config(base, Variant::Saccadic);
      c.seed = seed;
      c.train.n_train = n_train[i];
      Model model(c.model_config());
      const TrainConfig tc = c.train_config();
      train(model, *data.train, data.val.get(), tc);
      for (std::size_t j = 0; j < n_test.size(); ++j) {
        EvalOptions eo = eval_options_for(tc, derive_seed(tc.seed, {0x54455354u}));
        eo.n_test = n_test[j];
        const double acc = evaluate(model, *data.test, eo).accuracy;
        r.cells[i * n_test.size() + j].accuracy.push_back(acc);
        if (progress) {
          std::ostringstream os;
          os << "n_train=" << n_train[i] << " n_test=" << n_test[j] << " seed=" << seed << " acc=" << acc;
          progress(os.str());
        }
      }
    }
  return r;
}

std::string format_ablation(const AblationResult& r) {
  std::ostringstream os;
  char buf[32];
  os << "N_train\\N_test";
  for (int b : r.n_test) {
    std::snprintf(buf, sizeof buf, "%10d", b);
    os << buf;
  }
  os << '\n';
  for (std::size_t i = 0; i < r.n_train.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%14d", r.n_train[i]);
    os << buf;
    for (std::size_t j = 0; j < r.n_test.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%10.4f", r.at(i, j).mean());
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::vector<BenchRow> runtime_bench(const Model& model, const Dataset& data, const std::vector<int>& ns, int batches,
                                    int batch_size, std::uint64_t seed) {
  if (data.size() == 0) throw std::invalid_argument("runtime_bench: empty dataset");
  if (batches < 1 || batch_size < 1) throw std::invalid_argument("runtime_bench: batches and batch size must be >= 1");
  const int side = model.config().source_side;
  auto run_batch = [&](int n, int b) {
    for (int k = 0; k < batch_size; ++k) {
      const std::size_t i = static_cast<std::size_t>(b * batch_size + k) % data.size();
      ImageF img = data.image(i);
      if (img.height() != side) img = resize_image(img, side);
      std::mt19937_64 rng(derive_seed(seed, {static_cast<std::uint64_t>(n), i}));
      Tape<float> tape;
      ForwardOptions fo;
      fo.policy = n > 0 ? FixationPolicy::Saccadic : FixationPolicy::None;
      fo.sampler.count = n;
      model.forward(tape, img, fo, rng);
    }
  };
  run_batch(ns.empty() ? 0 : ns.front(), 0);  // warm-up

  std::vector<BenchRow> rows;
  for (int n : ns) {
    if (n < 0) throw std::invalid_argument("runtime_bench: fixation counts must be >= 0");
    std::vector<double> times;
    for (int b = 0; b < batches; ++b) {
      const auto t0 = Clock::now();
      run_batch(n, b);
      times.push_back(seconds_since(t0));
    }
    rows.push_back({n, mean_ci(times), batches});
  }
  return rows;
}

std::vector<BenchRow> sampler_bench(const PriorityMap& pooled, GridShape window, const SamplerParams& params,
                                    const std::vector<int>& ns, int repetitions) {
  if (repetitions < 1) throw std::invalid_argument("sampler_bench: repetitions must be >= 1");
  std::vector<BenchRow> rows;
  SamplerParams p = params;
  p.record_provenance = false;
  {
    std::mt19937_64 rng(params.seed);
    p.count = 1;
    sample_fixations(pooled, window, p, rng);  // warm-up
  }
  for (int n : ns) {
    p.count = n;
    std::vector<double> times;
    for (int k = 0; k < repetitions; ++k) {
      std::mt19937_64 rng(derive_seed(params.seed, {static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(k)}));
      const auto t0 = Clock::now();
      sample_fixations(pooled, window, p, rng);
      times.push_back(seconds_since(t0));
    }
    rows.push_back({n, mean_ci(times), repetitions});
  }
  return rows;
}

std::string format_bench(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  char buf[96];
  os << "       N    mean_s     ci95_s  batches\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%8d %9.6f %10.6f %8d\n", r.n, r.seconds.mean, r.seconds.ci95, r.batches);
    os << buf;
  }
  return os.str();
}

}  // namespace sacc
