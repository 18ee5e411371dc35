#pragma once

// Multi-run experiments: baseline comparison, fixation-count ablation and
// walltime benchmarks.

#include <sacc/pipeline.hpp>
#include <sacc/run_config.hpp>

#include <functional>
#include <string>
#include <vector>

namespace sacc {

struct MeanCi {
  double mean = 0;
  double ci95 = 0;  // half-width, normal approximation
};

MeanCi mean_ci(const std::vector<double>& xs);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

LinearFit fit_line(const std::vector<double>& xs, const std::vector<double>& ys);

/// Progress lines ("variant seed=.. acc=..") for long runs; may be empty.
using ProgressFn = std::function<void(const std::string&)>;

enum class Variant { Vanilla, RandomAvg, Saccadic };
std::string to_string(Variant v);

/// Applies a variant to a base run config: vanilla trains and tests on the
/// peripheral view only, the random variant places fixations uniformly and
/// averages them, the saccadic variant is the full model.
RunConfig variant_config(const RunConfig& base, Variant v);

struct VariantResult {
  Variant variant = Variant::Vanilla;
  std::vector<double> accuracy;  // one per seed
  double mean() const;
};

struct Comparison {
  std::vector<std::uint64_t> seeds;
  std::vector<VariantResult> variants;
  double seconds = 0;
};

/// Trains and tests every variant for every seed on the datasets of `base`.
Comparison compare_variants(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                            const std::vector<Variant>& variants, const ProgressFn& progress = {});

struct AblationCell {
  int n_train = 0;
  int n_test = 0;
  std::vector<double> accuracy;  // one per seed
  double mean() const;
};

struct AblationResult {
  std::vector<int> n_train;
  std::vector<int> n_test;
  std::vector<AblationCell> cells;  // row-major over (n_train, n_test)
  const AblationCell& at(std::size_t i, std::size_t j) const { return cells.at(i * n_test.size() + j); }
};

/// One model per (N_train, seed), evaluated at every N_test.
AblationResult fixation_grid_ablation(const RunConfig& base, const std::vector<int>& n_train,
                                      const std::vector<int>& n_test, const std::vector<std::uint64_t>& seeds,
                                      const ProgressFn& progress = {});

/// Fixed-width text matrix, rows N_train, columns N_test.
std::string format_ablation(const AblationResult& r);

struct BenchRow {
  int n = 0;
  MeanCi seconds;
  int batches = 0;
};

/// Inference walltime per batch of `batch_size` images for each fixation
/// count (0 = peripheral only), after one warm-up batch.
std::vector<BenchRow> runtime_bench(const Model& model, const Dataset& data, const std::vector<int>& ns,
                                    int batches = 32, int batch_size = 8, std::uint64_t seed = 0);

/// Walltime of the fixation sampler alone on a pooled map, per fixation count.
std::vector<BenchRow> sampler_bench(const PriorityMap& pooled, GridShape window, const SamplerParams& params,
                                    const std::vector<int>& ns, int repetitions = 32);

std::string format_bench(const std::vector<BenchRow>& rows);

}  // namespace sacc
