#include <sacc/pipeline.hpp>
#include <sacc/seeding.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace sacc {

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate >= 0)) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
  if (warmup_epochs < 0) throw std::invalid_argument("TrainConfig: warmup_epochs must be >= 0");
  if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
  if (adam_beta2 < 0 || adam_beta2 >= 1) throw std::invalid_argument("TrainConfig: adam_beta2 must be in [0, 1)");
  if (n_train < 0 || n_test < 0) throw std::invalid_argument("TrainConfig: fixation counts must be >= 0");
  if (patience < 0) throw std::invalid_argument("TrainConfig: patience must be >= 0");
  sampler_params.validate();
  loss.validate();
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("SACC_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return n;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

double scheduled_learning_rate(const TrainConfig& cfg, std::uint64_t step, std::uint64_t steps_per_epoch) {
  const double warmup = cfg.warmup_epochs * static_cast<double>(steps_per_epoch);
  const double total = static_cast<double>(cfg.epochs) * static_cast<double>(steps_per_epoch);
  const double s = static_cast<double>(step);
  if (s < warmup) return cfg.learning_rate * (s + 1) / warmup;
  if (total <= warmup) return cfg.learning_rate;
  const double progress = std::min(1.0, (s - warmup) / (total - warmup));
  return cfg.learning_rate * 0.5 * (1 + std::cos(M_PI * progress));
}

namespace {

struct SampleResult {
  Gradients<float> grads;
  double loss_per = 0;
  double loss_fix = 0;
  double alpha = 0;
  bool has_fix = false;
  bool correct = false;
};

ImageF source_image(const Model& model, const Dataset& data, std::size_t i) {
  ImageF img = data.image(i);
  const int side = model.config().source_side;
  return img.height() == side ? img : resize_image(img, side);
}

SampleResult train_sample(const Model& model, const Dataset& data, std::size_t i, const TrainConfig& cfg,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tape<float> tape;
  ForwardOptions opt;
  opt.policy = cfg.n_train > 0 ? cfg.sampler : FixationPolicy::None;
  opt.sampler = cfg.sampler_params;
  opt.sampler.count = cfg.n_train;
  opt.uniform_beta = cfg.uniform_beta;
  std::vector<Point> points;
  if (cfg.point_source && cfg.n_train > 0) {
    points = cfg.point_source(i);
    opt.forced_points = &points;
  }
  const int label = data.label(i);
  ForwardPass<float> fp = model.forward(tape, source_image(model, data, i), opt, rng);
  const Var<float>* z_fix = fp.z_fix ? &*fp.z_fix : nullptr;
  const Var<float>* alpha = fp.alpha ? &*fp.alpha : nullptr;
  LossTerms<float> terms = loss_terms(fp.logits_per, z_fix, label, alpha, cfg.loss);

  SampleResult r;
  r.grads = Gradients<float>(model.parameters().size());
  tape.backward(terms.total, r.grads);
  r.loss_per = terms.peripheral.scalar();
  if (terms.fixation) {
    r.loss_fix = terms.fixation->scalar();
    r.has_fix = true;
  }
  if (fp.alpha) r.alpha = fp.alpha->scalar();
  Eigen::Index pred;
  fp.prediction.value().row(0).maxCoeff(&pred);
  r.correct = pred == label;
  return r;
}

std::string describe_failure(int epoch, std::uint64_t step, std::size_t sample, const std::string& what) {
  std::ostringstream os;
  os << "training diverged at epoch " << epoch << ", step " << step << ", sample " << sample << ": " << what;
  return os.str();
}

}  // namespace

TrainHistory train(Model& model, const Dataset& train_set, const Dataset* val_set, const TrainConfig& cfg,
                   TrainState* state, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  if (train_set.num_classes() != model.config().mpsa.num_classes)
    throw std::invalid_argument("train: dataset and model disagree on the number of classes");

  ParameterSet<float>& params = model.parameters();
  TrainState local;
  TrainState& st = state ? *state : local;
  if (st.momentum.size() != params.size()) st.momentum.assign(params.size(), MatF());
  if (st.second_moment.size() != params.size()) st.second_moment.assign(params.size(), MatF());

  const int threads = resolve_threads(cfg.threads);
  const std::size_t n = train_set.size();
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const std::uint64_t steps_per_epoch = (n + batch - 1) / batch;

  TrainHistory history;
  std::vector<MatF> best;
  double best_score = -1;
  int since_best = 0;
  std::vector<std::size_t> order(n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, {0x5348u, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t k = n; k > 1; --k) std::swap(order[k - 1], order[static_cast<std::size_t>(shuffle_rng() % k)]);

    double sum_per = 0, sum_fix = 0, sum_alpha = 0;
    std::size_t fix_count = 0, correct = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += batch) {
      const std::size_t count = std::min(batch, n - b0);
      std::vector<SampleResult> results(count);
      try {
        parallel_for(count, threads, [&](std::size_t j) {
          const std::size_t idx = order[b0 + j];
          results[j] = train_sample(model, train_set, idx, cfg,
                                    derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), idx}));
        });
      } catch (const NumericError& e) {
        throw TrainingDiverged(describe_failure(epoch, st.step, b0, e.what()));
      }

      // Reduce in sample order so the sum never depends on thread timing.
      Gradients<float> total(params.size());
      for (std::size_t j = 0; j < count; ++j) {
        total += results[j].grads;
        sum_per += results[j].loss_per;
        if (results[j].has_fix) {
          sum_fix += results[j].loss_fix;
          sum_alpha += results[j].alpha;
          ++fix_count;
        }
        correct += results[j].correct;
      }
      if (!std::isfinite(total.squared_norm()))
        throw TrainingDiverged(describe_failure(epoch, st.step, b0, "non-finite gradient"));

      const auto lr = static_cast<float>(scheduled_learning_rate(cfg, st.step, steps_per_epoch));
      const float inv = 1.0f / static_cast<float>(count);
      const auto b1 = static_cast<float>(cfg.momentum), b2 = static_cast<float>(cfg.adam_beta2);
      const auto t = static_cast<double>(st.step + 1);
      const auto bias1 = static_cast<float>(1 - std::pow(cfg.momentum, t));
      const auto bias2 = static_cast<float>(1 - std::pow(cfg.adam_beta2, t));
      for (std::size_t p = 0; p < params.size(); ++p) {
        Parameter<float>& param = params[p];
        if (!param.trainable) continue;
        const bool decay = cfg.weight_decay > 0 && param.value.rows() > 1;  // matrices only, not biases or norms
        MatF g = total.has(p) ? MatF(total[p] * inv) : MatF::Zero(param.value.rows(), param.value.cols());
        MatF& m = st.momentum[p];
        if (m.size() == 0) m = MatF::Zero(param.value.rows(), param.value.cols());
        if (cfg.optimizer == Optimizer::Sgd) {
          if (decay) g += static_cast<float>(cfg.weight_decay) * param.value;
          m = b1 * m + g;
          param.value -= lr * m;
        } else {
          MatF& v = st.second_moment[p];
          if (v.size() == 0) v = MatF::Zero(param.value.rows(), param.value.cols());
          m = b1 * m + (1 - b1) * g;
          v = b2 * v + (1 - b2) * g.cwiseAbs2();
          if (decay) param.value *= 1 - lr * static_cast<float>(cfg.weight_decay);
          param.value.array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + 1e-8f);
        }
      }
      ++st.step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_per = sum_per / static_cast<double>(n);
    rec.loss_fix = fix_count ? sum_fix / static_cast<double>(fix_count) : 0.0;
    rec.alpha_mean = fix_count ? sum_alpha / static_cast<double>(fix_count) : 0.0;
    if (!std::isfinite(rec.loss_per) || !std::isfinite(rec.loss_fix))
      throw TrainingDiverged(describe_failure(epoch, st.step, n, "non-finite epoch loss"));
    if (val_set && val_set->size() > 0) {
      EvalOptions eo = eval_options_for(cfg, derive_seed(cfg.seed, {0x56414cu}));
      eo.threads = threads;
      rec.top1 = evaluate(model, *val_set, eo).accuracy;
    } else {
      rec.top1 = static_cast<double>(correct) / static_cast<double>(n);
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.top1 > best_score) {
      best_score = rec.top1;
      history.best_epoch = epoch;
      since_best = 0;
      if (val_set) {
        best.clear();
        for (std::size_t p = 0; p < params.size(); ++p) best.push_back(params[p].value);
      }
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      history.stopped_early = true;
      break;
    }
  }
  if (!best.empty())
    for (std::size_t p = 0; p < params.size(); ++p) params[p].value = best[p];
  return history;
}

}  // namespace sacc
