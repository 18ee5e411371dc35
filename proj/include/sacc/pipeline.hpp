#pragma once

// Training and evaluation of the saccadic model on a Dataset.

#include <sacc/dataset.hpp>
#include <sacc/model.hpp>

#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

namespace sacc {

using Model = SaccadicModel<float>;

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::Sgd;  // SGD with momentum, or Adam with decoupled decay
  int epochs = 30;
  int batch_size = 16;
  double learning_rate = 0.05;
  double warmup_epochs = 2;
  double weight_decay = 1e-3;
  double momentum = 0.9;  // SGD momentum, or Adam beta1
  double adam_beta2 = 0.999;
  int n_train = 4;
  int n_test = 4;
  FixationPolicy sampler = FixationPolicy::Saccadic;
  SamplerParams sampler_params;
  bool uniform_beta = false;  // average fixations instead of learned weights
  /// When set, supplies the training fixations for sample i instead of the policy.
  std::function<std::vector<Point>(std::size_t)> point_source;
  LossConfig loss;
  int patience = 10;  // epochs without validation improvement; 0 disables
  std::uint64_t seed = 0;
  int threads = 0;  // 0: hardware concurrency; SACC_THREADS caps either

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double loss_per = 0;
  double loss_fix = 0;
  double alpha_mean = 0;
  double top1 = 0;  // validation top-1 when a validation set is given, else training
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool stopped_early = false;
};

/// Optimizer state carried across calls and stored in checkpoints.
struct TrainState {
  std::uint64_t step = 0;
  std::vector<MatF> momentum;       // aligned with the parameter set; empty = zero
  std::vector<MatF> second_moment;  // Adam only
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Worker count: `requested` (0 = hardware threads), capped by SACC_THREADS.
int resolve_threads(int requested);

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

/// Learning rate at optimizer step `step` (linear warm-up, cosine decay).
double scheduled_learning_rate(const TrainConfig& cfg, std::uint64_t step, std::uint64_t steps_per_epoch);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch SGD with momentum on lambda_1 NLL(z_per) + lambda_2 Conf-NLL(z_fix).
/// Fixations are sampled from detached priority maps; every view passes
/// through the model's single encoder. With a validation set the best
/// epoch's weights are restored at the end.
TrainHistory train(Model& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                   TrainState* state = nullptr, const EpochCallback& on_epoch = {});

enum class EvalMode { Saccadic, Peripheral, Random };

EvalMode parse_eval_mode(const std::string& s);
std::string to_string(EvalMode m);

struct EvalOptions {
  EvalMode mode = EvalMode::Saccadic;
  int n_test = 4;
  SamplerParams sampler;
  std::uint64_t seed = 0;
  bool force_uniform_beta = false;
  std::optional<double> fixed_alpha;
  /// When set, supplies the fixation points for sample i instead of the sampler.
  std::function<std::vector<Point>(std::size_t)> point_source;
  int threads = 0;
};

struct EvalReport {
  double accuracy = 0;
  std::size_t samples = 0;
  std::vector<int> per_class_correct;
  std::vector<int> per_class_total;
  double mean_alpha = 0;
};

EvalReport evaluate(const Model& model, const Dataset& data, const EvalOptions& opt);

/// Evaluation options matching how a model was trained.
EvalOptions eval_options_for(const TrainConfig& cfg, std::uint64_t seed);

}  // namespace sacc
