#pragma once

// Global impact, per-fixation Boltzmann weights, peripheral/fixation fusion
// and the training losses.

#include <sacc/autodiff.hpp>
#include <sacc/backbone.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sacc {

/// Shared scoring network C -> C/4 -> 1 with a sigmoid output, used for
/// both the global impact and the fixation scores.
template <typename T>
struct ImpactHead {
  Parameter<T>* w1 = nullptr;
  Parameter<T>* b1 = nullptr;
  Parameter<T>* w2 = nullptr;
  Parameter<T>* b2 = nullptr;
  double beta_temperature = 0.1;
  double mask_sigma = 1.0;  // in final-grid cells

  static ImpactHead create(int channels, ParameterSet<T>& params, std::mt19937_64& rng,
                           const std::string& prefix = "impact") {
    const int hidden = std::max(1, channels / 4);
    ImpactHead h;
    h.w1 = &params.add(prefix + "/w1", detail::he_normal<T>(channels, hidden, rng));
    h.b1 = &params.add(prefix + "/b1", Mat<T>::Zero(1, hidden));
    h.w2 = &params.add(prefix + "/w2", Mat<T>::Zero(hidden, 1));
    h.b2 = &params.add(prefix + "/b2", Mat<T>::Zero(1, 1));
    return h;
  }

  /// 1 x C pooled vector -> 1 x 1 score in (0, 1).
  Var<T> score(Var<T> pooled) const {
    Tape<T>& t = *pooled.tape;
    Var<T> h = gelu(linear(pooled, t.parameter(*w1), t.parameter(*b1)));
    return sigmoid(linear(h, t.parameter(*w2), t.parameter(*b2)));
  }
};

enum class PenaltySign {
  Negative,  // -lambda log(alpha): shrinks as confidence grows
  AsPrinted  // +lambda log(alpha)
};

struct LossConfig {
  double lambda_per = 0.5;
  double lambda_fix = 0.5;
  double confidence_penalty = 0.1;
  PenaltySign penalty_sign = PenaltySign::Negative;
  double label_smoothing = 0.0;
  int num_classes = 10;

  void validate() const {
    if (lambda_per < 0 || lambda_fix < 0 || confidence_penalty < 0)
      throw std::invalid_argument("LossConfig: weights must be nonnegative");
    if (label_smoothing < 0 || label_smoothing >= 1) throw std::invalid_argument("LossConfig: label smoothing in [0, 1)");
  }
};

/// alpha = phi(GAP(F_S)) from the peripheral last-stage tokens.
template <typename T>
Var<T> global_impact(Var<T> last_tokens, const ImpactHead<T>& head) {
  return head.score(mean_rows(last_tokens));
}

/// Source coordinate -> continuous cell index on a feature grid whose cells
/// tile the source evenly.
inline Point to_feature_grid(Point source_point, GridShape source, GridShape grid) {
  return {source_point.row * grid.rows / source.rows - 0.5, source_point.col * grid.cols / source.cols - 0.5};
}

/// Fixed-variance Gaussian mask M(o) on the feature grid, flattened H_SW_S x 1.
template <typename T>
Mat<T> fixation_mask(Point source_point, GridShape source, GridShape grid, double sigma) {
  const Mat<T> g = gaussian_field<T>(to_feature_grid(source_point, source, grid), grid, sigma, true);
  return Eigen::Map<const Mat<T>>(g.data(), grid.size(), 1);
}

/// beta = softmax_n(phi(GAP(M(o_n) * F_S)) / tau), returned as 1 x N.
template <typename T>
Var<T> fixation_weights(Var<T> last_tokens, GridShape grid, const std::vector<Point>& points, GridShape source,
                        const ImpactHead<T>& head) {
  if (points.empty()) throw std::invalid_argument("fixation_weights: no fixations");
  if (last_tokens.rows() != grid.size()) throw ShapeError("fixation_weights: token count differs from grid");
  Tape<T>& t = *last_tokens.tape;
  std::vector<Var<T>> scores;
  for (const Point& o : points) {
    Var<T> mask = t.constant(fixation_mask<T>(o, source, grid, head.mask_sigma));
    scores.push_back(head.score(mean_rows(mul_col(last_tokens, mask))));
  }
  return softmax(concat_cols(scores), AxisSet{1}, static_cast<T>(head.beta_temperature));
}

template <typename T>
struct FusedLogits {
  Var<T> fixation;  // z_fix = (1/N) sum_n beta_n z_fix^n
  Var<T> fused;     // proj(z_per + alpha z_fix)
};

/// Final-logit fusion. `proj_w` is K x K and `proj_b` 1 x K.
template <typename T>
FusedLogits<T> fuse(Var<T> z_per, const std::vector<Var<T>>& z_fix, Var<T> alpha, Var<T> beta, Var<T> proj_w,
                    Var<T> proj_b) {
  if (z_fix.empty()) throw std::invalid_argument("fuse: no fixation logits");
  if (beta.cols() != static_cast<Eigen::Index>(z_fix.size()) || beta.rows() != 1)
    throw ShapeError("fuse: one beta weight per fixation required");
  for (const auto& z : z_fix)
    if (z.rows() != 1 || z.cols() != z_per.cols()) throw ShapeError("fuse: logit length mismatch");
  Var<T> agg = mul_scalar(z_fix[0], pick(beta, 0, 0));
  for (std::size_t n = 1; n < z_fix.size(); ++n)
    agg = add(agg, mul_scalar(z_fix[n], pick(beta, 0, static_cast<Eigen::Index>(n))));
  agg = scale(agg, T(1) / static_cast<T>(z_fix.size()));
  return {agg, linear(add(z_per, mul_scalar(agg, alpha)), proj_w, proj_b)};
}

namespace detail {
template <typename T>
void check_label(Var<T> logits, int label) {
  if (logits.rows() != 1) throw ShapeError("loss: logits must be a single row");
  if (label < 0 || label >= logits.cols()) throw std::out_of_range("loss: label out of range");
}

// -(1 - eps) logp[y] - eps mean(logp)
template <typename T>
Var<T> smoothed_target_nll(Var<T> log_probs, int label, double smoothing) {
  Var<T> loss = scale(pick(log_probs, 0, label), T(-1));
  if (smoothing > 0) {
    const T k = static_cast<T>(log_probs.cols());
    Var<T> uniform_term = scale(sum(log_probs), static_cast<T>(-smoothing) / k);
    loss = add(scale(loss, static_cast<T>(1 - smoothing)), uniform_term);
  }
  return loss;
}
}  // namespace detail

/// -log softmax(logits)[label], optionally label-smoothed.
template <typename T>
Var<T> nll(Var<T> logits, int label, double smoothing = 0.0) {
  detail::check_label(logits, label);
  return detail::smoothed_target_nll(log_softmax_rows(logits), label, smoothing);
}

/// NLL of the mixture alpha softmax(z) + (1 - alpha)/K plus the confidence
/// penalty -lambda log(alpha) (or +lambda log(alpha) when configured).
template <typename T>
Var<T> conf_nll(Var<T> logits_fix, int label, Var<T> alpha, const LossConfig& cfg) {
  detail::check_label(logits_fix, label);
  const T a = alpha.scalar();
  if (!(a > T(0) && a <= T(1))) throw NumericError("conf_nll: alpha must lie in (0, 1]");
  const T inv_k = T(1) / static_cast<T>(logits_fix.cols());
  Var<T> probs = softmax(logits_fix, AxisSet{1});
  Var<T> mixture = add_scalar(mul_scalar(add_scalar(probs, -inv_k), alpha), inv_k);
  Var<T> loss = detail::smoothed_target_nll(log(mixture), label, cfg.label_smoothing);
  if (cfg.confidence_penalty > 0) {
    const T sign = cfg.penalty_sign == PenaltySign::Negative ? T(-1) : T(1);
    loss = add(loss, scale(log(alpha), sign * static_cast<T>(cfg.confidence_penalty)));
  }
  return loss;
}

template <typename T>
struct LossTerms {
  Var<T> peripheral;               // unweighted nll(z_per)
  std::optional<Var<T>> fixation;  // unweighted conf_nll(z_fix)
  Var<T> total;
};

/// Both loss terms and their weighted sum. The fixation term is skipped
/// when its weight is zero or no fixation logits exist.
template <typename T>
LossTerms<T> loss_terms(Var<T> z_per, const Var<T>* z_fix, int label, const Var<T>* alpha, const LossConfig& cfg) {
  cfg.validate();
  LossTerms<T> out;
  out.peripheral = nll(z_per, label, cfg.label_smoothing);
  out.total = scale(out.peripheral, static_cast<T>(cfg.lambda_per));
  if (cfg.lambda_fix > 0 && z_fix && alpha) {
    out.fixation = conf_nll(*z_fix, label, *alpha, cfg);
    out.total = add(out.total, scale(*out.fixation, static_cast<T>(cfg.lambda_fix)));
  }
  return out;
}

/// lambda_1 nll(z_per) + lambda_2 conf_nll(z_fix); weight decay is left to
/// the optimizer.
template <typename T>
Var<T> total_loss(Var<T> z_per, const Var<T>* z_fix, int label, const Var<T>* alpha, const LossConfig& cfg) {
  return loss_terms(z_per, z_fix, label, alpha, cfg).total;
}

}  // namespace sacc
