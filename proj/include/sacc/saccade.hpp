#pragma once

// Priority-map refinement, sequential fixation sampling with Gaussian
// penalty suppression, and fixed-size window extraction. Nothing here is
// recorded on a tape: fixation coordinates and patches are constants to the
// rest of the model.

#include <sacc/ops.hpp>
#include <sacc/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

namespace sacc {

enum class MapResolution { FeatureGrid, SourceGrid, PooledGrid };

struct PriorityMap {
  MatD field;
  MapResolution resolution = MapResolution::FeatureGrid;
};

/// How the draw distribution is built from the (unit-mass) pooled map.
enum class SamplerLogits {
  Log,     // p ~ S^(1/tau): softmax(log S / tau)
  Linear,  // p ~ softmax(S / tau)
};

struct SamplerParams {
  double temperature = 0.1;
  double nms_sigma = 50.0;  // source pixels at the reference side
  double nms_strength = 0.95;
  bool squared_kernel = false;
  int count = 4;
  std::uint64_t seed = 0;
  SamplerLogits logits = SamplerLogits::Log;
  double sigma_reference_side = 512.0;
  bool record_provenance = false;

  void validate() const {
    if (!(temperature > 0)) throw std::invalid_argument("SamplerParams: temperature must be positive");
    if (!(nms_sigma > 0)) throw std::invalid_argument("SamplerParams: nms_sigma must be positive");
    if (!(nms_strength >= 0 && nms_strength < 1)) throw std::invalid_argument("SamplerParams: nms_strength must be in [0, 1)");
    if (count < 0) throw std::invalid_argument("SamplerParams: count must be >= 0");
  }

  /// Kernel width in pixels of a source whose mean side is `source_side`.
  double effective_sigma(double source_side) const { return nms_sigma * source_side / sigma_reference_side; }
};

struct FixationSet {
  std::vector<Point> points;      // window centers in source coordinates
  std::vector<MatD> snapshots;    // pooled map before sampling and after each suppression
  bool fallback_used = false;     // an all-zero map forced uniform sampling
};

/// Uniform double in [0, 1) from the top 53 bits; identical on every platform.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Upsample to the source grid, average-pool with the window at stride one,
/// renormalize. The result lives on (H - H' + 1) x (W - W' + 1).
inline PriorityMap refine_priority(const PriorityMap& s, GridShape source, GridShape window) {
  if (window.rows < 1 || window.cols < 1 || window.rows > source.rows || window.cols > source.cols)
    throw std::invalid_argument("refine_priority: window exceeds source");
  MatD up = bilinear_resize(s.field, source.rows, source.cols);
  MatD pooled = avg_pool_stride1(up, window.rows, window.cols);
  pooled = pooled.cwiseMax(0.0);
  const double mass = pooled.sum();
  if (mass > 0)
    pooled /= mass;
  else
    pooled.setConstant(1.0 / static_cast<double>(pooled.size()));
  return {std::move(pooled), MapResolution::PooledGrid};
}

/// Draw distribution over the flattened pooled map.
inline MatD sampling_distribution(const MatD& map, double temperature, SamplerLogits mode) {
  MatD p(map.rows(), map.cols());
  if (mode == SamplerLogits::Linear) return softmax_over(map, AxisSet{0, 1}, temperature);
  const double mx = map.maxCoeff();
  if (!(mx > 0)) return MatD::Zero(map.rows(), map.cols());
  const double inv_t = 1.0 / temperature;
  const double rounded = std::round(inv_t);
  if (rounded == inv_t && rounded >= 1 && rounded <= 64) {
    // Integer exponent: repeated squaring, no transcendental calls.
    const auto e = static_cast<unsigned>(rounded);
    for (Eigen::Index i = 0; i < map.size(); ++i) {
      double base = map.data()[i] > 0 ? map.data()[i] / mx : 0.0, acc = 1.0;
      for (unsigned k = e; k; k >>= 1, base *= base)
        if (k & 1u) acc *= base;
      p.data()[i] = acc;
    }
  } else {
    const double log_mx = std::log(mx);
    for (Eigen::Index i = 0; i < map.size(); ++i) {
      const double v = map.data()[i];
      p.data()[i] = v > 0 ? std::exp((std::log(v) - log_mx) * inv_t) : 0.0;
    }
  }
  return p / p.sum();
}

/// One suppression step: s <- s * (1 - strength K), with `kernel` the
/// Gaussian tabulated by offset from the drawn cell.
inline void suppress_at(MatD& s, const MatD& kernel, int row, int col, double strength) {
  for (Eigen::Index i = 0; i < s.rows(); ++i)
    for (Eigen::Index j = 0; j < s.cols(); ++j)
      s(i, j) *= 1.0 - strength * kernel(std::abs(i - row), std::abs(j - col));
}

namespace detail {
inline Eigen::Index draw_index(const MatD& p, std::mt19937_64& rng) {
  const double u = uniform01(rng) * p.sum();
  double acc = 0;
  Eigen::Index last_positive = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double v = p.data()[i];
    if (v <= 0) continue;
    acc += v;
    last_positive = i;
    if (u < acc) return i;
  }
  return last_positive;
}
}  // namespace detail

/// Sequential draw of `params.count` fixations from a pooled-grid map.
/// After each draw the map is multiplied by (1 - lambda K) with K a Gaussian
/// centered on the drawn cell; the recorded point is the drawn cell shifted
/// by half the window into source coordinates.
inline FixationSet sample_fixations(const PriorityMap& pooled, GridShape window, const SamplerParams& params,
                                    std::mt19937_64& rng) {
  params.validate();
  FixationSet out;
  if (params.count == 0) return out;
  MatD s = pooled.field;
  if ((s.array() < 0).any()) throw std::invalid_argument("sample_fixations: map has negative entries");
  const GridShape grid{static_cast<int>(s.rows()), static_cast<int>(s.cols())};
  const double source_side = 0.5 * ((grid.rows + window.rows - 1) + (grid.cols + window.cols - 1));
  const double sigma = params.effective_sigma(source_side);
  auto snapshot = [&] {
    const double m = s.sum();
    out.snapshots.push_back(m > 0 ? MatD(s / m) : s);
  };
  // K depends only on the offset, so tabulate it once per call.
  const MatD kernel = gaussian_field<double>({0.0, 0.0}, grid, sigma, params.squared_kernel);
  if (params.record_provenance) snapshot();
  for (int n = 0; n < params.count; ++n) {
    MatD p = sampling_distribution(s, params.temperature, params.logits);
    if (!(p.sum() > 0)) {
      p = MatD::Constant(s.rows(), s.cols(), 1.0);
      out.fallback_used = true;
    }
    const Eigen::Index flat = detail::draw_index(p, rng);
    const int row = static_cast<int>(flat / grid.cols);
    const int col = static_cast<int>(flat % grid.cols);
    suppress_at(s, kernel, row, col, params.nms_strength);
    out.points.push_back({row + window.rows / 2.0, col + window.cols / 2.0});
    if (params.record_provenance) snapshot();
  }
  return out;
}

/// Uniformly random valid window centers (integer-aligned windows).
inline FixationSet random_fixations(GridShape source, GridShape window, int count, std::mt19937_64& rng) {
  FixationSet out;
  const int rows = source.rows - window.rows + 1, cols = source.cols - window.cols + 1;
  for (int n = 0; n < count; ++n) {
    const auto flat = static_cast<std::int64_t>(uniform01(rng) * rows * cols);
    out.points.push_back({static_cast<double>(flat / cols) + window.rows / 2.0,
                          static_cast<double>(flat % cols) + window.cols / 2.0});
  }
  return out;
}

namespace detail {
template <typename T>
T sample_bilinear(const Mat<T>& f, double y, double x) {
  const int h = static_cast<int>(f.rows()), w = static_cast<int>(f.cols());
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const double wy = y - y0, wx = x - x0;
  auto at = [&](int r, int c) -> double {
    r = std::clamp(r, 0, h - 1);
    c = std::clamp(c, 0, w - 1);
    return static_cast<double>(f(r, c));
  };
  if (wy == 0 && wx == 0) return static_cast<T>(at(y0, x0));
  const double top = (1 - wx) * at(y0, x0) + wx * at(y0, x0 + 1);
  const double bot = (1 - wx) * at(y0 + 1, x0) + wx * at(y0 + 1, x0 + 1);
  return static_cast<T>((1 - wy) * top + wy * bot);
}
}  // namespace detail

/// Axis-aligned H' x W' window centered at `center` (source coordinates),
/// bilinearly sampled. Output pixel (i, j) reads source pixel-index
/// coordinate (center - window/2 + (i, j)).
template <typename T>
Image<T> extract_patch(const Image<T>& x, Point center, GridShape window) {
  const double top = center.row - window.rows / 2.0, left = center.col - window.cols / 2.0;
  const double eps = 1e-9;
  if (top < -eps || left < -eps || top + window.rows > x.height() + eps || left + window.cols > x.width() + eps)
    throw std::invalid_argument("extract_patch: window reaches outside the pixel grid");
  Image<T> out;
  for (const auto& ch : x.channels) {
    Mat<T> p(window.rows, window.cols);
    const bool aligned = top == std::floor(top) && left == std::floor(left);
    for (int i = 0; i < window.rows; ++i)
      for (int j = 0; j < window.cols; ++j)
        p(i, j) = aligned ? ch(static_cast<int>(top) + i, static_cast<int>(left) + j)
                          : detail::sample_bilinear(ch, top + i, left + j);
    out.channels.push_back(std::move(p));
  }
  return out;
}

/// The window extraction of one channel as a sparse operator on the
/// row-major flattened source, so the crop can be recorded on a tape with
/// apply() when gradients with respect to the source are wanted.
template <typename T>
SparseOp<T> extract_patch_operator(GridShape source, Point center, GridShape window) {
  const double top = center.row - window.rows / 2.0, left = center.col - window.cols / 2.0;
  if (top < -1e-9 || left < -1e-9 || top + window.rows > source.rows + 1e-9 || left + window.cols > source.cols + 1e-9)
    throw std::invalid_argument("extract_patch_operator: window reaches outside the pixel grid");
  std::vector<Eigen::Triplet<T>> trip;
  for (int i = 0; i < window.rows; ++i)
    for (int j = 0; j < window.cols; ++j) {
      const double y = top + i, x = left + j;
      const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
      const double wy = y - y0, wx = x - x0;
      const int y1 = std::min(y0 + 1, source.rows - 1), x1 = std::min(x0 + 1, source.cols - 1);
      const int o = i * window.cols + j;
      trip.emplace_back(o, y0 * source.cols + x0, static_cast<T>((1 - wy) * (1 - wx)));
      trip.emplace_back(o, y0 * source.cols + x1, static_cast<T>((1 - wy) * wx));
      trip.emplace_back(o, y1 * source.cols + x0, static_cast<T>(wy * (1 - wx)));
      trip.emplace_back(o, y1 * source.cols + x1, static_cast<T>(wy * wx));
    }
  SparseOp<T> op(window.size(), source.size());
  op.setFromTriplets(trip.begin(), trip.end());
  op.prune(T(0));
  return op;
}

/// 2 x 3 affine map from output to input normalized coordinates
/// (align-corners-false, [-1, 1] spans the pixel grid).
struct Affine2x3 {
  double m[2][3];
};

/// Window transform for a window of `window` pixels centered at `center`.
/// `printed_scale` uses 1 + H'/H on the diagonal instead of H'/H.
inline Affine2x3 window_affine(Point center, GridShape source, GridShape window, bool printed_scale = false) {
  const double sy = static_cast<double>(window.rows) / source.rows;
  const double sx = static_cast<double>(window.cols) / source.cols;
  Affine2x3 a{};
  a.m[0][0] = printed_scale ? 1 + sx : sx;  // x row
  a.m[0][2] = 2 * center.col / source.cols - 1;
  a.m[1][1] = printed_scale ? 1 + sy : sy;
  a.m[1][2] = 2 * center.row / source.rows - 1;
  return a;
}

/// Spatial-transformer style sampler: output grid in normalized
/// coordinates, mapped through `theta`, read bilinearly with edge clamping.
template <typename T>
Image<T> affine_grid_sample(const Image<T>& x, const Affine2x3& theta, GridShape out_shape) {
  const double h = x.height(), w = x.width();
  Image<T> out;
  for (const auto& ch : x.channels) {
    Mat<T> p(out_shape.rows, out_shape.cols);
    for (int i = 0; i < out_shape.rows; ++i) {
      const double yn = (2.0 * i + 1) / out_shape.rows - 1;
      for (int j = 0; j < out_shape.cols; ++j) {
        const double xn = (2.0 * j + 1) / out_shape.cols - 1;
        const double xs = theta.m[0][0] * xn + theta.m[0][1] * yn + theta.m[0][2];
        const double ys = theta.m[1][0] * xn + theta.m[1][1] * yn + theta.m[1][2];
        p(i, j) = detail::sample_bilinear(ch, ((ys + 1) * h - 1) / 2, ((xs + 1) * w - 1) / 2);
      }
    }
    out.channels.push_back(std::move(p));
  }
  return out;
}

/// Per-step maps normalized to unit mass, in sampling order.
inline std::vector<MatD> render_priority_progression(const std::vector<MatD>& snapshots) {
  std::vector<MatD> out;
  out.reserve(snapshots.size());
  for (const auto& s : snapshots) {
    const double m = s.sum();
    out.push_back(m > 0 ? MatD(s / m) : s);
  }
  return out;
}

}  // namespace sacc
