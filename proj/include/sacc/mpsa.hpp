#pragma once

// Multi-granularity part-sampling attention: per-stage parts, cross
// attention against last-stage queries, saliency fields, refined features,
// the fused priority map and peripheral logits.

#include <sacc/autodiff.hpp>
#include <sacc/backbone.hpp>

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace sacc {

struct MpsaConfig {
  int parts = 8;                     // P_s at every stage unless overridden
  std::vector<int> parts_per_stage;  // optional per-stage override
  double importance_damping = 0.1;   // alpha_s, fixed
  bool disable_position_bias = false;
  int num_classes = 10;

  int parts_at(int stage) const {
    return parts_per_stage.empty() ? parts : parts_per_stage.at(static_cast<std::size_t>(stage));
  }
};

template <typename T>
struct PsaStageWeights {
  GridShape grid;
  int channels = 0;  // C_s
  int parts = 0;     // P_s
  double damping = 0.1;
  Parameter<T>* ln_scale = nullptr;
  Parameter<T>* ln_shift = nullptr;
  Parameter<T>* compress_w = nullptr;  // C_s x P_s
  Parameter<T>* compress_b = nullptr;
  Parameter<T>* spatial_bias = nullptr;  // B_s, HW x P_s
  Parameter<T>* query_w = nullptr;       // C_S x C_s
  Parameter<T>* key_w = nullptr;         // C_s x C_s
  Parameter<T>* value_w = nullptr;       // C_s x C_s
  Parameter<T>* attn_bias = nullptr;     // HW x P_s
  Parameter<T>* se_w1 = nullptr;         // P_s x P_s/2
  Parameter<T>* se_b1 = nullptr;
  Parameter<T>* se_w2 = nullptr;  // P_s/2 x P_s
  Parameter<T>* se_b2 = nullptr;
  Parameter<T>* refine_w = nullptr;  // C_s x C_s
  Parameter<T>* refine_b = nullptr;
};

template <typename T>
struct FusionWeights {
  Parameter<T>* gamma = nullptr;   // 1 x S stage scales
  Parameter<T>* head_w = nullptr;  // sum(C_s) x K
  Parameter<T>* head_b = nullptr;  // 1 x K
};

/// Part matrix P_s x C_s and the spatial part weights H_sW_s x P_s behind it.
template <typename T>
struct PartSample {
  Var<T> parts;
  Var<T> weights;
};

/// parts = softmax_{H,W}(sigma_s(F_s) + B_s)^T F_s.
template <typename T>
PartSample<T> part_sampling(Var<T> features, const PsaStageWeights<T>& w) {
  Tape<T>& t = *features.tape;
  if (features.rows() != w.grid.size() || features.cols() != w.channels)
    throw ShapeError("part_sampling: features do not match stage geometry");
  Var<T> logits = layer_norm(features, t.parameter(*w.ln_scale), t.parameter(*w.ln_shift));
  logits = gelu(linear(logits, t.parameter(*w.compress_w), t.parameter(*w.compress_b)));
  logits = add(logits, t.parameter(*w.spatial_bias));
  Var<T> weights = softmax(logits, AxisSet{0});
  return {matmul(transpose(weights), features), weights};
}

template <typename T>
struct CrossAttention {
  Var<T> scores;  // A_s, H_sW_s x P_s (single head)
  Var<T> attended;  // F-bar_s, H_sW_s x C_s
};

/// `queries_src` is the last-stage map already resampled to stage-s
/// geometry (H_sW_s x C_S).
template <typename T>
CrossAttention<T> cross_attention(Var<T> queries_src, Var<T> parts, const PsaStageWeights<T>& w) {
  Tape<T>& t = *parts.tape;
  if (queries_src.rows() != w.grid.size()) throw ShapeError("cross_attention: query rows differ from stage tokens");
  if (queries_src.cols() != w.query_w->value.rows())
    throw ShapeError("cross_attention: query width differs from projection input");
  if (parts.rows() != w.parts || parts.cols() != w.channels) throw ShapeError("cross_attention: part matrix shape");
  Var<T> q = matmul(queries_src, t.parameter(*w.query_w));
  Var<T> k = matmul(parts, t.parameter(*w.key_w));
  Var<T> v = matmul(parts, t.parameter(*w.value_w));
  Var<T> a = scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(w.channels)));
  a = add(a, t.parameter(*w.attn_bias));
  Var<T> attended = matmul(softmax(a, AxisSet{1}), v);
  return {a, attended};
}

/// Squeeze-excite gate over parts: channel mean -> linear -> gelu ->
/// linear -> sigmoid, giving a 1 x P_s vector in [0, 1].
template <typename T>
Var<T> part_importance(Var<T> parts, const PsaStageWeights<T>& w) {
  Tape<T>& t = *parts.tape;
  Var<T> squeezed = transpose(mean_cols(parts));
  Var<T> h = gelu(linear(squeezed, t.parameter(*w.se_w1), t.parameter(*w.se_b1)));
  return sigmoid(linear(h, t.parameter(*w.se_w2), t.parameter(*w.se_b2)));
}

/// S_s = softmax_{H,W}(A_s) p_s(parts), an H_sW_s x 1 nonnegative field.
/// The head-average is the identity for a single head.
template <typename T>
Var<T> scalar_field(Var<T> scores, Var<T> parts, const PsaStageWeights<T>& w) {
  Var<T> importance = part_importance(parts, w);
  return matmul(softmax(scores, AxisSet{0}), transpose(importance));
}

/// F-hat_s = linear(F-bar_s + alpha_s S_s), S_s broadcast over channels.
template <typename T>
Var<T> refine_features(Var<T> attended, Var<T> field, const PsaStageWeights<T>& w) {
  Tape<T>& t = *attended.tape;
  Var<T> biased = add_col(attended, scale(field, static_cast<T>(w.damping)));
  return linear(biased, t.parameter(*w.refine_w), t.parameter(*w.refine_b));
}

template <typename T>
struct FusedField {
  Var<T> field;  // H_SW_S x 1, unit mass
  bool degenerate = false;
};

/// S = sum_s gamma_s S_s (fields already on the common grid), negative
/// entries clamped to zero, normalized to unit mass. A non-positive total
/// returns the uniform field with `degenerate` set.
template <typename T>
FusedField<T> fuse_scalar_fields(const std::vector<Var<T>>& fields, Var<T> gamma) {
  if (fields.empty()) throw std::invalid_argument("fuse_scalar_fields: no fields");
  if (gamma.rows() != 1 || gamma.cols() != static_cast<Eigen::Index>(fields.size()))
    throw ShapeError("fuse_scalar_fields: one gamma per stage required");
  Var<T> acc = mul_scalar(fields[0], pick(gamma, 0, 0));
  for (std::size_t s = 1; s < fields.size(); ++s) {
    if (fields[s].rows() != fields[0].rows()) throw ShapeError("fuse_scalar_fields: fields not on a common grid");
    acc = add(acc, mul_scalar(fields[s], pick(gamma, 0, static_cast<Eigen::Index>(s))));
  }
  acc = relu(acc);
  if (!(acc.value().sum() > T(0))) {
    const auto n = acc.rows();
    return {acc.tape->constant(Mat<T>::Constant(n, 1, T(1) / static_cast<T>(n))), true};
  }
  return {normalize_mass(acc), false};
}

/// z = head(gelu(concat_s F-hat_s)^T S), features already on the common grid.
template <typename T>
Var<T> fuse_logits(const std::vector<Var<T>>& refined, Var<T> field, const FusionWeights<T>& w) {
  Tape<T>& t = *field.tape;
  Var<T> stacked = gelu(concat_cols(refined));
  if (stacked.cols() != w.head_w->value.rows()) throw ShapeError("fuse_logits: head input width mismatch");
  Var<T> pooled = matmul(transpose(field), stacked);
  return linear(pooled, t.parameter(*w.head_w), t.parameter(*w.head_b));
}

template <typename T>
struct MpsaOutput {
  std::vector<Var<T>> stage_fields;  // S_s on each stage grid
  std::vector<Var<T>> refined;       // F-hat_s on each stage grid
  Var<T> priority;                   // fused S on the final grid, H_SW_S x 1
  Var<T> logits;                     // 1 x K
  bool degenerate = false;
};

template <typename T>
class Mpsa {
 public:
  Mpsa(const MpsaConfig& cfg, const std::vector<GridShape>& grids, const std::vector<int>& channels,
       ParameterSet<T>& params, std::mt19937_64& rng, const std::string& prefix = "psa")
      : cfg_(cfg), grids_(grids) {
    const int stages = static_cast<int>(grids.size());
    const GridShape last = grids.back();
    const int c_last = channels.back();
    int total_c = 0;
    for (int s = 0; s < stages; ++s) {
      const int c = channels[static_cast<std::size_t>(s)];
      const int p = cfg.parts_at(s);
      const int hw = grids[static_cast<std::size_t>(s)].size();
      if (p >= c) throw std::invalid_argument("Mpsa: part count must be smaller than stage channels");
      if (p < 1) throw std::invalid_argument("Mpsa: part count must be >= 1");
      const int hidden = std::max(1, p / 2);
      const std::string pre = prefix + "/stage" + std::to_string(s) + "/";
      PsaStageWeights<T> w;
      w.grid = grids[static_cast<std::size_t>(s)];
      w.channels = c;
      w.parts = p;
      w.damping = cfg.importance_damping;
      w.ln_scale = &params.add(pre + "compress_ln_scale", Mat<T>::Ones(1, c));
      w.ln_shift = &params.add(pre + "compress_ln_shift", Mat<T>::Zero(1, c));
      w.compress_w = &params.add(pre + "compress_w", detail::he_normal<T>(c, p, rng));
      w.compress_b = &params.add(pre + "compress_b", Mat<T>::Zero(1, p));
      w.spatial_bias = &params.add(pre + "spatial_bias", Mat<T>::Zero(hw, p), !cfg.disable_position_bias);
      w.query_w = &params.add(pre + "query_w", scaled_normal(c_last, c, rng));
      w.key_w = &params.add(pre + "key_w", scaled_normal(c, c, rng));
      w.value_w = &params.add(pre + "value_w", scaled_normal(c, c, rng));
      w.attn_bias = &params.add(pre + "attn_bias", Mat<T>::Zero(hw, p));
      w.se_w1 = &params.add(pre + "se_w1", detail::he_normal<T>(p, hidden, rng));
      w.se_b1 = &params.add(pre + "se_b1", Mat<T>::Zero(1, hidden));
      w.se_w2 = &params.add(pre + "se_w2", scaled_normal(hidden, p, rng));
      w.se_b2 = &params.add(pre + "se_b2", Mat<T>::Zero(1, p));
      w.refine_w = &params.add(pre + "refine_w", scaled_normal(c, c, rng));
      w.refine_b = &params.add(pre + "refine_b", Mat<T>::Zero(1, c));
      stages_.push_back(w);
      to_stage_.push_back(std::make_shared<const SparseOp<T>>(resize_operator<T>(last, w.grid)));
      const bool even = w.grid.rows % last.rows == 0 && w.grid.cols % last.cols == 0;
      to_last_.push_back(std::make_shared<const SparseOp<T>>(even ? area_downsample_operator<T>(w.grid, last)
                                                                  : resize_operator<T>(w.grid, last)));
      total_c += c;
    }
    fusion_.gamma = &params.add(prefix + "/fusion/gamma", Mat<T>::Ones(1, stages));
    fusion_.head_w = &params.add(prefix + "/head/weight", scaled_normal(total_c, cfg.num_classes, rng));
    fusion_.head_b = &params.add(prefix + "/head/bias", Mat<T>::Zero(1, cfg.num_classes));
  }

  MpsaOutput<T> forward(const std::vector<StageFeatures<T>>& features) const {
    if (features.size() != stages_.size()) throw ShapeError("Mpsa: stage count mismatch");
    Tape<T>& t = *features[0].tokens.tape;
    const Var<T> last = features.back().tokens;
    MpsaOutput<T> out;
    std::vector<Var<T>> fields_common, refined_common;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const auto& w = stages_[s];
      const PartSample<T> ps = part_sampling(features[s].tokens, w);
      const Var<T> queries = s + 1 == stages_.size() ? last : apply(to_stage_[s], last);
      const CrossAttention<T> ca = cross_attention(queries, ps.parts, w);
      const Var<T> field = scalar_field(ca.scores, ps.parts, w);
      const Var<T> refined = refine_features(ca.attended, field, w);
      out.stage_fields.push_back(field);
      out.refined.push_back(refined);
      const bool is_last = s + 1 == stages_.size();
      fields_common.push_back(is_last ? field : apply(to_last_[s], field));
      refined_common.push_back(is_last ? refined : apply(to_last_[s], refined));
    }
    const FusedField<T> fused = fuse_scalar_fields(fields_common, t.parameter(*fusion_.gamma));
    out.priority = fused.field;
    out.degenerate = fused.degenerate;
    out.logits = fuse_logits(refined_common, fused.field, fusion_);
    return out;
  }

  const std::vector<PsaStageWeights<T>>& stage_weights() const { return stages_; }
  const FusionWeights<T>& fusion_weights() const { return fusion_; }
  GridShape final_grid() const { return grids_.back(); }

 private:
  static Mat<T> scaled_normal(int fan_in, int fan_out, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    Mat<T> w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(dist(rng));
    return w;
  }

  MpsaConfig cfg_;
  std::vector<GridShape> grids_;
  std::vector<PsaStageWeights<T>> stages_;
  std::vector<std::shared_ptr<const SparseOp<T>>> to_stage_;
  std::vector<std::shared_ptr<const SparseOp<T>>> to_last_;
  FusionWeights<T> fusion_;
};

}  // namespace sacc
