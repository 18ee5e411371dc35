#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sacc {

// Dense row-major matrix; token matrices are (H*W) x C with spatial
// positions flattened row-major.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using SparseOp = Eigen::SparseMatrix<T, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

/// Raised when an operation produces a NaN or infinity.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when operand shapes disagree.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value produced by ") + op);
}

struct GridShape {
  int rows = 0;
  int cols = 0;
  int size() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Continuous (row, col) coordinate. Pixel i covers [i, i+1).
struct Point {
  double row = 0.0;
  double col = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Channel stack of H x W fields with unit-interval intensities.
template <typename T>
struct Image {
  std::vector<Mat<T>> channels;

  Image() = default;
  Image(int c, int h, int w, T fill = T(0)) : channels(c, Mat<T>::Constant(h, w, fill)) {}

  int num_channels() const { return static_cast<int>(channels.size()); }
  int height() const { return channels.empty() ? 0 : static_cast<int>(channels[0].rows()); }
  int width() const { return channels.empty() ? 0 : static_cast<int>(channels[0].cols()); }

  template <typename U>
  Image<U> cast() const {
    Image<U> out;
    out.channels.reserve(channels.size());
    for (const auto& ch : channels) out.channels.push_back(ch.template cast<U>());
    return out;
  }

  friend bool operator==(const Image& a, const Image& b) {
    if (a.channels.size() != b.channels.size()) return false;
    for (std::size_t c = 0; c < a.channels.size(); ++c) {
      if (a.channels[c].rows() != b.channels[c].rows() || a.channels[c].cols() != b.channels[c].cols()) return false;
      if (a.channels[c] != b.channels[c]) return false;
    }
    return true;
  }
};

using ImageF = Image<float>;

}  // namespace sacc
