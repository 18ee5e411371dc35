#pragma once

#include <sacc/autodiff.hpp>
#include <sacc/tensor.hpp>

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace sacc {

struct BackboneConfig {
  int input_side = 224;
  int in_channels = 3;
  int patch = 4;
  std::vector<int> channels{32, 64, 128, 256};

  int stages() const { return static_cast<int>(channels.size()); }

  void validate() const {
    if (channels.empty()) throw std::invalid_argument("BackboneConfig: at least one stage required");
    for (int c : channels)
      if (c < 1) throw std::invalid_argument("BackboneConfig: channel counts must be >= 1");
    if (patch < 1 || in_channels < 1) throw std::invalid_argument("BackboneConfig: patch and in_channels must be >= 1");
    if (input_side < patch) throw std::invalid_argument("BackboneConfig: input side smaller than patch");
    for (const auto& g : stage_grids())
      if (g.rows < 1) throw std::invalid_argument("BackboneConfig: too many stages for input side");
  }

  /// Patchify then floor-halve once per later stage.
  std::vector<GridShape> stage_grids() const {
    std::vector<GridShape> g;
    int side = input_side / patch;
    for (int s = 0; s < stages(); ++s) {
      if (s > 0) side /= 2;
      g.push_back({side, side});
    }
    return g;
  }
};

/// Stage-s token matrix (H_s*W_s x C_s) on a tape.
template <typename T>
struct StageFeatures {
  Var<T> tokens;
  GridShape grid;
  int stage = 0;
};

/// Anything that maps a view to a stack of stage features. The saccadic
/// model calls the same encoder object for peripheral and fixation views.
template <typename T>
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::vector<StageFeatures<T>> encode(Tape<T>& tape, const Image<T>& view) const = 0;
  virtual std::vector<GridShape> stage_grids() const = 0;
  virtual std::vector<int> stage_channels() const = 0;
  virtual int input_side() const = 0;
};

namespace detail {

template <typename T>
Mat<T> he_normal(int fan_in, int fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  Mat<T> w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
  return w;
}

// Selector picking token (2i+dy, 2j+dx) of the input grid for every output
// token (i, j).
template <typename T>
std::shared_ptr<const SparseOp<T>> merge_selector(GridShape in, GridShape out, int dy, int dx) {
  std::vector<Eigen::Triplet<T>> trip;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) trip.emplace_back(i * out.cols + j, (2 * i + dy) * in.cols + 2 * j + dx, T(1));
  auto op = std::make_shared<SparseOp<T>>(out.size(), in.size());
  op->setFromTriplets(trip.begin(), trip.end());
  return op;
}

}  // namespace detail

/// Row (i*g + j) holds the patch at grid cell (i, j), laid out channel,
/// then row, then column.
template <typename T>
Mat<T> patchify(const Image<T>& img, int patch) {
  const int g_rows = img.height() / patch, g_cols = img.width() / patch;
  const int c = img.num_channels();
  Mat<T> tokens(g_rows * g_cols, c * patch * patch);
  for (int i = 0; i < g_rows; ++i)
    for (int j = 0; j < g_cols; ++j) {
      auto row = tokens.row(i * g_cols + j);
      int k = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x) row(k++) = img.channels[ch](i * patch + y, j * patch + x);
    }
  return tokens;
}

/// Patchify stem with a linear patch embedding, then one block per stage
/// (2x2 token merge from the second stage on) of layer_norm -> linear -> gelu.
/// Embedding before the first norm keeps flat patches of different colours
/// apart and their normalized variance away from zero.
template <typename T>
class Backbone final : public Encoder<T> {
 public:
  Backbone(const BackboneConfig& cfg, ParameterSet<T>& params, std::mt19937_64& rng, const std::string& prefix = "backbone")
      : cfg_(cfg), grids_(cfg.stage_grids()) {
    cfg_.validate();
    const int patch_width = cfg.in_channels * cfg.patch * cfg.patch;
    embed_weight_ = &params.add(prefix + "/embed/weight", detail::he_normal<T>(patch_width, cfg.channels[0], rng));
    embed_bias_ = &params.add(prefix + "/embed/bias", Mat<T>::Zero(1, cfg.channels[0]));
    int in_width = cfg.channels[0];
    for (int s = 0; s < cfg.stages(); ++s) {
      if (s > 0) in_width = 4 * cfg.channels[s - 1];
      const int out = cfg.channels[s];
      const std::string p = prefix + "/stage" + std::to_string(s) + "/";
      Stage st;
      st.ln_scale = &params.add(p + "ln_scale", Mat<T>::Ones(1, in_width));
      st.ln_shift = &params.add(p + "ln_shift", Mat<T>::Zero(1, in_width));
      st.weight = &params.add(p + "weight", detail::he_normal<T>(in_width, out, rng));
      st.bias = &params.add(p + "bias", Mat<T>::Zero(1, out));
      if (s > 0)
        for (int k = 0; k < 4; ++k) st.merge[k] = detail::merge_selector<T>(grids_[s - 1], grids_[s], k / 2, k % 2);
      stages_.push_back(std::move(st));
    }
  }

  std::vector<StageFeatures<T>> encode(Tape<T>& tape, const Image<T>& view) const override {
    if (view.num_channels() != cfg_.in_channels || view.height() != cfg_.input_side || view.width() != cfg_.input_side)
      throw ShapeError("Backbone::encode: view must be " + std::to_string(cfg_.in_channels) + "x" +
                       std::to_string(cfg_.input_side) + "x" + std::to_string(cfg_.input_side));
    std::vector<StageFeatures<T>> out;
    Var<T> x = linear(tape.constant(patchify(view, cfg_.patch)), tape.parameter(*embed_weight_),
                      tape.parameter(*embed_bias_));
    for (int s = 0; s < cfg_.stages(); ++s) {
      const Stage& st = stages_[static_cast<std::size_t>(s)];
      if (s > 0) {
        std::vector<Var<T>> quads;
        for (int k = 0; k < 4; ++k) quads.push_back(apply(st.merge[k], x));
        x = concat_cols(quads);
      }
      x = layer_norm(x, tape.parameter(*st.ln_scale), tape.parameter(*st.ln_shift));
      x = gelu(linear(x, tape.parameter(*st.weight), tape.parameter(*st.bias)));
      out.push_back({x, grids_[static_cast<std::size_t>(s)], s});
    }
    return out;
  }

  std::vector<GridShape> stage_grids() const override { return grids_; }
  std::vector<int> stage_channels() const override { return cfg_.channels; }
  int input_side() const override { return cfg_.input_side; }
  const BackboneConfig& config() const { return cfg_; }

  /// Final projection, exposed for tests that zero it.
  Parameter<T>& final_weight() { return *stages_.back().weight; }
  Parameter<T>& final_bias() { return *stages_.back().bias; }

 private:
  struct Stage {
    Parameter<T>* ln_scale = nullptr;
    Parameter<T>* ln_shift = nullptr;
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
    std::shared_ptr<const SparseOp<T>> merge[4];
  };

  BackboneConfig cfg_;
  std::vector<GridShape> grids_;
  Parameter<T>* embed_weight_ = nullptr;
  Parameter<T>* embed_bias_ = nullptr;
  std::vector<Stage> stages_;
};

/// Seeded stand-alone encoder weights.
template <typename T>
struct BackboneWeights {
  ParameterSet<T> params;
  std::unique_ptr<Backbone<T>> net;

  std::size_t parameter_count() const { return params.scalar_count(); }
};

template <typename T>
BackboneWeights<T> reference_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  BackboneWeights<T> w;
  std::mt19937_64 rng(seed);
  w.net = std::make_unique<Backbone<T>>(cfg, w.params, rng);
  return w;
}

}  // namespace sacc
