#pragma once

// The saccadic classifier: one encoder and one part-attention block serve
// the peripheral view and every fixation patch.

#include <sacc/autodiff.hpp>
#include <sacc/backbone.hpp>
#include <sacc/fusion.hpp>
#include <sacc/mpsa.hpp>
#include <sacc/saccade.hpp>

#include <memory>
#include <optional>
#include <random>
#include <vector>

namespace sacc {

struct ModelConfig {
  BackboneConfig backbone;
  MpsaConfig mpsa;
  int source_side = 512;
  int window_side = 0;  // 0: the encoder input side
  double beta_temperature = 0.1;
  double mask_sigma = 0;  // 0: a quarter window, in final-grid cells
  std::uint64_t seed = 0;

  GridShape source() const { return {source_side, source_side}; }
  GridShape window() const {
    const int w = window_side > 0 ? window_side : backbone.input_side;
    return {w, w};
  }

  void validate() const {
    backbone.validate();
    if (window().rows > source_side) throw std::invalid_argument("ModelConfig: window larger than source");
    if (mpsa.num_classes < 2) throw std::invalid_argument("ModelConfig: need at least two classes");
  }
};

enum class FixationPolicy { None, Saccadic, Random };

struct ForwardOptions {
  FixationPolicy policy = FixationPolicy::Saccadic;
  SamplerParams sampler;              // count = number of fixations
  bool uniform_beta = false;          // average-pool fixations
  std::optional<double> fixed_alpha;  // replace the learned impact
  const std::vector<Point>* forced_points = nullptr;
};

template <typename T>
struct ViewEncoding {
  std::vector<StageFeatures<T>> features;
  MpsaOutput<T> psa;
};

template <typename T>
struct ForwardPass {
  ViewEncoding<T> peripheral;
  Var<T> logits_per;
  std::vector<Var<T>> logits_fix;  // one per fixation
  std::optional<Var<T>> alpha;
  std::optional<Var<T>> beta;
  std::optional<Var<T>> z_fix;  // aggregated fixation logits
  Var<T> prediction;            // final fused logits
  MatD priority;                // fused S on the final grid
  PriorityMap pooled;           // refined map the sampler drew from
  FixationSet fixations;
  std::vector<const Parameter<T>*> peripheral_params;
  std::vector<const Parameter<T>*> fixation_params;
};

template <typename T>
Image<T> resize_image(const Image<T>& x, int side) {
  if (x.height() == side && x.width() == side) return x;
  Image<T> out;
  for (const auto& ch : x.channels) out.channels.push_back(bilinear_resize(ch, side, side));
  return out;
}

template <typename T>
class SaccadicModel {
 public:
  explicit SaccadicModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg.seed);
    backbone_ = std::make_unique<Backbone<T>>(cfg.backbone, params_, rng);
    mpsa_ = std::make_unique<Mpsa<T>>(cfg.mpsa, backbone_->stage_grids(), backbone_->stage_channels(), params_, rng);
    impact_ = ImpactHead<T>::create(backbone_->stage_channels().back(), params_, rng);
    impact_.beta_temperature = cfg.beta_temperature;
    const GridShape last = backbone_->stage_grids().back();
    impact_.mask_sigma = cfg.mask_sigma > 0 ? cfg.mask_sigma
                                            : 0.25 * cfg.window().rows * static_cast<double>(last.rows) / cfg.source_side;
    const int k = cfg.mpsa.num_classes;
    proj_w_ = &params_.add("fuse/proj_w", Mat<T>::Identity(k, k));
    proj_b_ = &params_.add("fuse/proj_b", Mat<T>::Zero(1, k));
  }

  SaccadicModel(const SaccadicModel&) = delete;
  SaccadicModel& operator=(const SaccadicModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  const Encoder<T>& encoder() const { return *backbone_; }
  Backbone<T>& backbone() { return *backbone_; }
  const Mpsa<T>& psa() const { return *mpsa_; }
  const ImpactHead<T>& impact_head() const { return impact_; }
  GridShape final_grid() const { return backbone_->stage_grids().back(); }

  /// Encoder + part attention for one view at the encoder input side.
  ViewEncoding<T> encode_view(Tape<T>& tape, const Image<T>& view) const {
    ViewEncoding<T> e;
    e.features = backbone_->encode(tape, view);
    e.psa = mpsa_->forward(e.features);
    return e;
  }

  Image<T> peripheral_view(const Image<T>& source) const { return resize_image(source, backbone_->input_side()); }

  /// Full two-pass forward on one source image. Fixation sampling reads
  /// plain values of the priority map; patches enter the tape as constants.
  ForwardPass<T> forward(Tape<T>& tape, const Image<T>& source, const ForwardOptions& opt, std::mt19937_64& rng) const {
    if (source.height() != cfg_.source_side || source.width() != cfg_.source_side)
      throw ShapeError("SaccadicModel::forward: source side differs from configuration");
    ForwardPass<T> fp;
    const std::size_t uses0 = tape.parameter_uses().size();
    fp.peripheral = encode_view(tape, peripheral_view(source));
    fp.logits_per = fp.peripheral.psa.logits;
    const auto& uses = tape.parameter_uses();
    fp.peripheral_params.assign(uses.begin() + static_cast<std::ptrdiff_t>(uses0), uses.end());

    const GridShape last = final_grid();
    const Mat<T>& s = fp.peripheral.psa.priority.value();
    fp.priority = Eigen::Map<const Mat<T>>(s.data(), last.rows, last.cols).template cast<double>();

    const int n = opt.policy == FixationPolicy::None ? 0 : opt.sampler.count;
    if (opt.forced_points) {
      fp.fixations.points = *opt.forced_points;
    } else if (opt.policy == FixationPolicy::Saccadic && n > 0) {
      fp.pooled = refine_priority({fp.priority, MapResolution::FeatureGrid}, cfg_.source(), cfg_.window());
      fp.fixations = sample_fixations(fp.pooled, cfg_.window(), opt.sampler, rng);
    } else if (opt.policy == FixationPolicy::Random && n > 0) {
      fp.fixations = random_fixations(cfg_.source(), cfg_.window(), n, rng);
    }

    Var<T> proj_w = tape.parameter(*proj_w_), proj_b = tape.parameter(*proj_b_);
    if (fp.fixations.points.empty()) {
      fp.prediction = linear(fp.logits_per, proj_w, proj_b);
      return fp;
    }

    const Var<T> last_tokens = fp.peripheral.features.back().tokens;
    fp.alpha = opt.fixed_alpha ? tape.constant(Mat<T>::Constant(1, 1, static_cast<T>(*opt.fixed_alpha)))
                               : global_impact(last_tokens, impact_);
    const std::size_t uses1 = tape.parameter_uses().size();
    for (const Point& o : fp.fixations.points) {
      Image<T> patch = extract_patch(source, o, cfg_.window());
      patch = resize_image(patch, backbone_->input_side());
      fp.logits_fix.push_back(encode_view(tape, patch).psa.logits);
    }
    fp.fixation_params.assign(tape.parameter_uses().begin() + static_cast<std::ptrdiff_t>(uses1),
                              tape.parameter_uses().end());
    const auto count = static_cast<Eigen::Index>(fp.fixations.points.size());
    fp.beta = opt.uniform_beta
                  ? tape.constant(Mat<T>::Constant(1, count, T(1) / static_cast<T>(count)))
                  : fixation_weights(last_tokens, last, fp.fixations.points, cfg_.source(), impact_);
    const FusedLogits<T> fused = fuse(fp.logits_per, fp.logits_fix, *fp.alpha, *fp.beta, proj_w, proj_b);
    fp.z_fix = fused.fixation;
    fp.prediction = fused.fused;
    return fp;
  }

 private:
  ModelConfig cfg_;
  ParameterSet<T> params_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::unique_ptr<Mpsa<T>> mpsa_;
  ImpactHead<T> impact_;
  Parameter<T>* proj_w_ = nullptr;
  Parameter<T>* proj_b_ = nullptr;
};

}  // namespace sacc
