#pragma once

// Plain (non-differentiable) grid primitives shared by every module.

#include <sacc/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <numbers>
#include <vector>

namespace sacc {

/// Subset of the two axes of a matrix. Axis 0 runs over rows, axis 1 over
/// columns. Softmax "over rows" normalizes each column.
class AxisSet {
 public:
  AxisSet() = default;
  AxisSet(std::initializer_list<int> axes) {
    for (int a : axes) {
      if (a != 0 && a != 1) throw std::invalid_argument("AxisSet: axis must be 0 or 1");
      (a == 0 ? rows_ : cols_) = true;
    }
  }
  bool rows() const { return rows_; }
  bool cols() const { return cols_; }
  bool empty() const { return !rows_ && !cols_; }

 private:
  bool rows_ = false;
  bool cols_ = false;
};

/// softmax(t / temperature) normalized jointly over the named axes.
template <typename T>
Mat<T> softmax_over(const Mat<T>& t, AxisSet axes, T temperature = T(1)) {
  if (axes.empty()) throw std::invalid_argument("softmax_over: empty axis set");
  if (!(temperature > T(0))) throw std::invalid_argument("softmax_over: temperature must be positive");
  Mat<T> out(t.rows(), t.cols());
  if (axes.rows() && axes.cols()) {
    const T m = t.maxCoeff();
    out = ((t.array() - m) / temperature).exp().matrix();
    out /= out.sum();
  } else if (axes.cols()) {
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      const T m = t.row(r).maxCoeff();
      out.row(r) = ((t.row(r).array() - m) / temperature).exp().matrix();
      out.row(r) /= out.row(r).sum();
    }
  } else {
    for (Eigen::Index c = 0; c < t.cols(); ++c) {
      const T m = t.col(c).maxCoeff();
      out.col(c) = ((t.col(c).array() - m) / temperature).exp().matrix();
      out.col(c) /= out.col(c).sum();
    }
  }
  return out;
}

/// Exact GELU, x * Phi(x) with Phi the standard normal CDF (erf form, not
/// the tanh approximation).
template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <typename T>
Mat<T> gelu(const Mat<T>& t) {
  return t.unaryExpr([](T x) { return gelu(x); });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer normalization followed by a per-column affine map.
template <typename T>
Mat<T> layer_norm(const Mat<T>& t, const RowVec<T>& scale, const RowVec<T>& shift) {
  if (scale.size() != t.cols() || shift.size() != t.cols())
    throw ShapeError("layer_norm: scale/shift length must equal the row width");
  Mat<T> out(t.rows(), t.cols());
  const T n = static_cast<T>(t.cols());
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    const T mean = t.row(r).sum() / n;
    const auto centered = (t.row(r).array() - mean).eval();
    const T var = centered.square().sum() / n;
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    out.row(r) = (centered * inv * scale.array() + shift.array()).matrix();
  }
  return out;
}

namespace detail {

struct LinearTap {
  int lo;
  int hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

// Half-pixel (align-corners-false) source coordinate for each output index.
inline std::vector<LinearTap> resize_taps(int in, int out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - lo};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of a 2-D field (align-corners-false convention).
template <typename T>
Mat<T> bilinear_resize(const Mat<T>& field, int out_h, int out_w) {
  if (field.size() == 0) throw std::invalid_argument("bilinear_resize: empty field");
  if (out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_resize: output extents must be >= 1");
  const auto ty = detail::resize_taps(static_cast<int>(field.rows()), out_h);
  const auto tx = detail::resize_taps(static_cast<int>(field.cols()), out_w);
  Mat<T> out(out_h, out_w);
  for (int i = 0; i < out_h; ++i) {
    const T wy = static_cast<T>(ty[i].w_hi);
    for (int j = 0; j < out_w; ++j) {
      const T wx = static_cast<T>(tx[j].w_hi);
      const T top = (T(1) - wx) * field(ty[i].lo, tx[j].lo) + wx * field(ty[i].lo, tx[j].hi);
      const T bot = (T(1) - wx) * field(ty[i].hi, tx[j].lo) + wx * field(ty[i].hi, tx[j].hi);
      out(i, j) = (T(1) - wy) * top + wy * bot;
    }
  }
  return out;
}

/// The same resampling expressed as a sparse operator acting on row-major
/// flattened grids: out_tokens = R * in_tokens.
template <typename T>
SparseOp<T> resize_operator(GridShape in, GridShape out) {
  if (in.size() == 0 || out.size() == 0) throw std::invalid_argument("resize_operator: empty grid");
  const auto ty = detail::resize_taps(in.rows, out.rows);
  const auto tx = detail::resize_taps(in.cols, out.cols);
  std::vector<Eigen::Triplet<T>> trip;
  trip.reserve(static_cast<std::size_t>(out.size()) * 4);
  for (int i = 0; i < out.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) {
      const int o = i * out.cols + j;
      const double wy = ty[i].w_hi, wx = tx[j].w_hi;
      trip.emplace_back(o, ty[i].lo * in.cols + tx[j].lo, static_cast<T>((1 - wy) * (1 - wx)));
      trip.emplace_back(o, ty[i].lo * in.cols + tx[j].hi, static_cast<T>((1 - wy) * wx));
      trip.emplace_back(o, ty[i].hi * in.cols + tx[j].lo, static_cast<T>(wy * (1 - wx)));
      trip.emplace_back(o, ty[i].hi * in.cols + tx[j].hi, static_cast<T>(wy * wx));
    }
  }
  SparseOp<T> op(out.size(), in.size());
  op.setFromTriplets(trip.begin(), trip.end());
  op.prune(T(0));
  return op;
}

/// Block-mean downsampling between grids whose sides divide evenly; unlike
/// bilinear taps it reads every input cell.
template <typename T>
SparseOp<T> area_downsample_operator(GridShape in, GridShape out) {
  if (out.size() == 0 || in.rows % out.rows != 0 || in.cols % out.cols != 0)
    throw std::invalid_argument("area_downsample_operator: input sides must be multiples of output sides");
  const int fy = in.rows / out.rows, fx = in.cols / out.cols;
  const T w = T(1) / static_cast<T>(fy * fx);
  std::vector<Eigen::Triplet<T>> trip;
  for (int y = 0; y < in.rows; ++y)
    for (int x = 0; x < in.cols; ++x) trip.emplace_back((y / fy) * out.cols + x / fx, y * in.cols + x, w);
  SparseOp<T> op(out.size(), in.size());
  op.setFromTriplets(trip.begin(), trip.end());
  return op;
}

/// Mean over every kh x kw window at stride one. Output is
/// (H - kh + 1) x (W - kw + 1). Uses a summed-area table.
template <typename T>
Mat<T> avg_pool_stride1(const Mat<T>& field, int kh, int kw) {
  const int h = static_cast<int>(field.rows()), w = static_cast<int>(field.cols());
  if (kh < 1 || kw < 1) throw std::invalid_argument("avg_pool_stride1: kernel extents must be >= 1");
  if (kh > h || kw > w) throw std::invalid_argument("avg_pool_stride1: kernel larger than field");
  Mat<double> sat = Mat<double>::Zero(h + 1, w + 1);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      sat(i + 1, j + 1) = static_cast<double>(field(i, j)) + sat(i, j + 1) + sat(i + 1, j) - sat(i, j);
  const int oh = h - kh + 1, ow = w - kw + 1;
  const double inv = 1.0 / (static_cast<double>(kh) * kw);
  Mat<T> out(oh, ow);
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const double s = sat(i + kh, j + kw) - sat(i, j + kw) - sat(i + kh, j) + sat(i, j);
      out(i, j) = static_cast<T>(s * inv);
    }
  // Summed-area cancellation can leave tiny values outside the input range.
  const T lo = field.minCoeff(), hi = field.maxCoeff();
  return out.cwiseMax(lo).cwiseMin(hi);
}

/// Isotropic Gaussian bump with value 1 at `center` (cell-index
/// coordinates). With `squared` false the exponent uses the plain distance,
/// exp(-d / (2 sigma^2)); otherwise exp(-d^2 / (2 sigma^2)).
template <typename T>
Mat<T> gaussian_field(Point center, GridShape shape, double sigma, bool squared) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_field: sigma must be positive");
  Mat<T> out(shape.rows, shape.cols);
  const double denom = 2.0 * sigma * sigma;
  for (int i = 0; i < shape.rows; ++i)
    for (int j = 0; j < shape.cols; ++j) {
      const double d2 = (i - center.row) * (i - center.row) + (j - center.col) * (j - center.col);
      const double d = squared ? d2 : std::sqrt(d2);
      out(i, j) = static_cast<T>(std::exp(-d / denom));
    }
  return out;
}

}  // namespace sacc
