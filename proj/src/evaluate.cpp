#include <sacc/pipeline.hpp>
#include <sacc/seeding.hpp>

namespace sacc {

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "saccadic") return EvalMode::Saccadic;
  if (s == "peripheral") return EvalMode::Peripheral;
  if (s == "random") return EvalMode::Random;
  throw std::invalid_argument("unknown evaluation mode '" + s + "' (saccadic, peripheral, random)");
}

std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::Saccadic: return "saccadic";
    case EvalMode::Peripheral: return "peripheral";
    default: return "random";
  }
}

EvalOptions eval_options_for(const TrainConfig& cfg, std::uint64_t seed) {
  EvalOptions eo;
  eo.mode = cfg.n_test == 0 || cfg.sampler == FixationPolicy::None ? EvalMode::Peripheral
            : cfg.sampler == FixationPolicy::Random                 ? EvalMode::Random
                                                                    : EvalMode::Saccadic;
  eo.n_test = cfg.n_test;
  eo.sampler = cfg.sampler_params;
  eo.seed = seed;
  eo.force_uniform_beta = cfg.uniform_beta;
  eo.threads = cfg.threads;
  return eo;
}

EvalReport evaluate(const Model& model, const Dataset& data, const EvalOptions& opt) {
  if (data.num_classes() != model.config().mpsa.num_classes)
    throw std::invalid_argument("evaluate: dataset and model disagree on the number of classes");
  const std::size_t n = data.size();
  std::vector<int> pred(n, -1);
  std::vector<double> alpha(n, 0.0);
  const int side = model.config().source_side;

  parallel_for(n, resolve_threads(opt.threads), [&](std::size_t i) {
    std::mt19937_64 rng(derive_seed(opt.seed, {i}));
    Tape<float> tape;
    ForwardOptions fo;
    fo.policy = opt.mode == EvalMode::Saccadic ? FixationPolicy::Saccadic
                : opt.mode == EvalMode::Random ? FixationPolicy::Random
                                               : FixationPolicy::None;
    fo.sampler = opt.sampler;
    fo.sampler.count = opt.mode == EvalMode::Peripheral ? 0 : opt.n_test;
    fo.uniform_beta = opt.force_uniform_beta;
    fo.fixed_alpha = opt.fixed_alpha;
    std::vector<Point> points;
    if (opt.point_source && opt.mode != EvalMode::Peripheral) {
      points = opt.point_source(i);
      fo.forced_points = &points;
    }
    ImageF img = data.image(i);
    if (img.height() != side) img = resize_image(img, side);
    ForwardPass<float> fp = model.forward(tape, img, fo, rng);
    Eigen::Index k;
    fp.prediction.value().row(0).maxCoeff(&k);
    pred[i] = static_cast<int>(k);
    if (fp.alpha) alpha[i] = fp.alpha->scalar();
  });

  EvalReport r;
  r.samples = n;
  r.per_class_correct.assign(static_cast<std::size_t>(data.num_classes()), 0);
  r.per_class_total.assign(static_cast<std::size_t>(data.num_classes()), 0);
  std::size_t correct = 0;
  double alpha_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(data.label(i));
    ++r.per_class_total[y];
    if (pred[i] == data.label(i)) {
      ++r.per_class_correct[y];
      ++correct;
    }
    alpha_sum += alpha[i];
  }
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  r.mean_alpha = n ? alpha_sum / static_cast<double>(n) : 0.0;
  return r;
}

}  // namespace sacc
