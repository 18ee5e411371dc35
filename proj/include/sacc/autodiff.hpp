#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass. Values are immutable
// once recorded; gradients are accumulated during Tape::backward and the
// gradients of bound parameters are summed into a Gradients buffer. A tape
// is single-threaded; run one tape per batch element for parallelism.

#include <sacc/ops.hpp>
#include <sacc/tensor.hpp>

#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sacc {

template <typename T>
struct Parameter {
  std::string name;
  Mat<T> value;
  bool trainable = true;
  std::size_t index = 0;  // position within the owning ParameterSet
};

/// Owns parameters at stable addresses, so modules can hold references and
/// two forward passes can bind the very same storage.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(std::string name, Mat<T> init, bool trainable = true) {
    if (find(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->trainable = trainable;
    p->index = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  Parameter<T>* find(std::string_view name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(std::string_view name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

/// Per-parameter gradient accumulators aligned with a ParameterSet. An
/// empty matrix stands for an all-zero gradient.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::size_t n) : g_(n) {}

  std::size_t size() const { return g_.size(); }
  bool has(std::size_t i) const { return i < g_.size() && g_[i].size() > 0; }
  const Mat<T>& operator[](std::size_t i) const { return g_[i]; }

  template <typename Derived>
  void add(std::size_t i, const Eigen::MatrixBase<Derived>& g) {
    if (i >= g_.size()) g_.resize(i + 1);
    if (g_[i].size() == 0)
      g_[i] = g;
    else
      g_[i] += g;
  }

  Gradients& operator+=(const Gradients& o) {
    for (std::size_t i = 0; i < o.g_.size(); ++i)
      if (o.has(i)) add(i, o.g_[i]);
    return *this;
  }

  T squared_norm() const {
    T s = 0;
    for (const auto& g : g_)
      if (g.size() > 0) s += g.squaredNorm();
    return s;
  }

 private:
  std::vector<Mat<T>> g_;
};

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Mat<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<T>&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Mat<T> value) {
    require_finite(value, "constant");
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Leaf bound to `p`. Repeated binds of the same parameter on one tape
  /// return the same node, so gradients from every use are summed.
  Var<T> parameter(const Parameter<T>& p) {
    uses_.push_back(&p);
    if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
    Node n;
    n.value = p.value;
    n.requires_grad = p.trainable;
    n.param = p.trainable ? &p : nullptr;
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    bound_.emplace(&p, id);
    return {this, id};
  }

  /// Differentiable leaf that belongs to no parameter set; read its
  /// gradient with grad() after backward().
  Var<T> variable(Mat<T> value) {
    require_finite(value, "variable");
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Stop-gradient: a constant copy of `v`.
  Var<T> detach(Var<T> v) { return constant(v.value()); }

  const Mat<T>& value(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Every parameter() call in order, including repeats.
  const std::vector<const Parameter<T>*>& parameter_uses() const { return uses_; }

  Var<T> push(Mat<T> value, std::initializer_list<Var<T>> inputs, Backward bw, const char* op) {
    require_finite(value, op);
    Node n;
    n.value = std::move(value);
    for (const auto& in : inputs)
      if (nodes_[static_cast<std::size_t>(in.id)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> push(Mat<T> value, const std::vector<Var<T>>& inputs, Backward bw, const char* op) {
    require_finite(value, op);
    Node n;
    n.value = std::move(value);
    for (const auto& in : inputs)
      if (nodes_[static_cast<std::size_t>(in.id)].requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  template <typename Derived>
  void accumulate(Var<T> v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Reverse sweep from a 1x1 loss; parameter gradients are added to `sink`.
  void backward(Var<T> loss, Gradients<T>& sink) {
    if (loss.value().size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    Node& root = nodes_[static_cast<std::size_t>(loss.id)];
    if (!root.requires_grad) return;
    root.grad = Mat<T>::Ones(1, 1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) sink.add(n.param->index, n.grad);
    }
  }

  /// Gradient of the last backward pass at `v` (empty if none reached it).
  const Mat<T>& grad(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).grad; }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    Backward backward;
    bool requires_grad = false;
    const Parameter<T>* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> bound_;
  std::vector<const Parameter<T>*> uses_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

namespace detail {
template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(op) + ": shape mismatch");
}
}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Mat<T> v = a.value() * b.value();
  return a.tape->push(std::move(v), {a, b},
                      [a, b](Tape<T>& t, const Mat<T>& g) {
                        if (t.requires_grad(a)) t.accumulate(a, g * t.value(b).transpose());
                        if (t.requires_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
                      },
                      "matmul");
}

/// Left-multiplication by a fixed sparse operator (resampling, gathers).
template <typename T>
Var<T> apply(std::shared_ptr<const SparseOp<T>> op, Var<T> x) {
  if (op->cols() != x.rows()) throw ShapeError("apply: operator width differs from row count");
  Mat<T> v = (*op) * x.value();
  return x.tape->push(std::move(v), {x},
                      [op, x](Tape<T>& t, const Mat<T>& g) { t.accumulate(x, op->transpose() * g); },
                      "apply");
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Mat<T> v = a.value() + b.value();
  return a.tape->push(std::move(v), {a, b},
                      [a, b](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(a, g);
                        t.accumulate(b, g);
                      },
                      "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Mat<T> v = a.value() - b.value();
  return a.tape->push(std::move(v), {a, b},
                      [a, b](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(a, g);
                        t.accumulate(b, -g);
                      },
                      "sub");
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "hadamard");
  Mat<T> v = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(v), {a, b},
                      [a, b](Tape<T>& t, const Mat<T>& g) {
                        if (t.requires_grad(a)) t.accumulate(a, g.cwiseProduct(t.value(b)));
                        if (t.requires_grad(b)) t.accumulate(b, g.cwiseProduct(t.value(a)));
                      },
                      "hadamard");
}

/// x (m x n) plus a 1 x n row broadcast down the rows.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw ShapeError("add_row: bias must be 1 x cols");
  Mat<T> v = x.value().rowwise() + row.value().row(0);
  return x.tape->push(std::move(v), {x, row},
                      [x, row](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, g);
                        if (t.requires_grad(row)) t.accumulate(row, g.colwise().sum());
                      },
                      "add_row");
}

/// x (m x n) plus an m x 1 column broadcast across the columns.
template <typename T>
Var<T> add_col(Var<T> x, Var<T> col) {
  if (col.cols() != 1 || col.rows() != x.rows()) throw ShapeError("add_col: column must be rows x 1");
  Mat<T> v = x.value().colwise() + col.value().col(0);
  return x.tape->push(std::move(v), {x, col},
                      [x, col](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, g);
                        if (t.requires_grad(col)) t.accumulate(col, g.rowwise().sum());
                      },
                      "add_col");
}

/// Scales row r of x by col(r).
template <typename T>
Var<T> mul_col(Var<T> x, Var<T> col) {
  if (col.cols() != 1 || col.rows() != x.rows()) throw ShapeError("mul_col: column must be rows x 1");
  Mat<T> v = (x.value().array().colwise() * col.value().col(0).array()).matrix();
  return x.tape->push(std::move(v), {x, col},
                      [x, col](Tape<T>& t, const Mat<T>& g) {
                        if (t.requires_grad(x))
                          t.accumulate(x, (g.array().colwise() * t.value(col).col(0).array()).matrix());
                        if (t.requires_grad(col)) t.accumulate(col, g.cwiseProduct(t.value(x)).rowwise().sum());
                      },
                      "mul_col");
}

/// x times a 1 x 1 scalar variable.
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  if (s.value().size() != 1) throw ShapeError("mul_scalar: scalar operand must be 1 x 1");
  Mat<T> v = x.value() * s.scalar();
  return x.tape->push(std::move(v), {x, s},
                      [x, s](Tape<T>& t, const Mat<T>& g) {
                        if (t.requires_grad(x)) t.accumulate(x, g * t.value(s)(0, 0));
                        if (t.requires_grad(s)) t.accumulate(s, Mat<T>::Constant(1, 1, g.cwiseProduct(t.value(x)).sum()));
                      },
                      "mul_scalar");
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  Mat<T> v = x.value() * c;
  return x.tape->push(std::move(v), {x}, [x, c](Tape<T>& t, const Mat<T>& g) { t.accumulate(x, g * c); }, "scale");
}

template <typename T>
Var<T> add_scalar(Var<T> x, T c) {
  Mat<T> v = x.value().array() + c;
  return x.tape->push(std::move(v), {x}, [x](Tape<T>& t, const Mat<T>& g) { t.accumulate(x, g); }, "add_scalar");
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Mat<T> v = gelu(x.value());
  return x.tape->push(std::move(v), {x},
                      [x](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, g.cwiseProduct(t.value(x).unaryExpr([](T z) { return gelu_derivative(z); })));
                      },
                      "gelu");
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Mat<T> v = x.value().unaryExpr([](T z) { return T(1) / (T(1) + std::exp(-z)); });
  Mat<T> s = v;
  return x.tape->push(std::move(v), {x},
                      [x, s = std::move(s)](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, g.cwiseProduct(s.cwiseProduct((T(1) - s.array()).matrix())));
                      },
                      "sigmoid");
}

template <typename T>
Var<T> log(Var<T> x) {
  if ((x.value().array() <= T(0)).any()) throw NumericError("log: non-positive argument");
  Mat<T> v = x.value().array().log().matrix();
  return x.tape->push(std::move(v), {x},
                      [x](Tape<T>& t, const Mat<T>& g) { t.accumulate(x, g.cwiseQuotient(t.value(x))); }, "log");
}

template <typename T>
Var<T> relu(Var<T> x) {
  Mat<T> v = x.value().cwiseMax(T(0));
  return x.tape->push(std::move(v), {x},
                      [x](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, (t.value(x).array() > T(0)).select(g, Mat<T>::Zero(g.rows(), g.cols())));
                      },
                      "relu");
}

template <typename T>
Var<T> transpose(Var<T> x) {
  Mat<T> v = x.value().transpose();
  return x.tape->push(std::move(v), {x}, [x](Tape<T>& t, const Mat<T>& g) { t.accumulate(x, g.transpose()); },
                      "transpose");
}

/// 1 x n column means.
template <typename T>
Var<T> mean_rows(Var<T> x) {
  const T m = static_cast<T>(x.rows());
  Mat<T> v = x.value().colwise().sum() / m;
  return x.tape->push(std::move(v), {x},
                      [x, m](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, Mat<T>::Ones(t.value(x).rows(), 1) * (g / m));
                      },
                      "mean_rows");
}

/// m x 1 row means.
template <typename T>
Var<T> mean_cols(Var<T> x) {
  const T n = static_cast<T>(x.cols());
  Mat<T> v = x.value().rowwise().sum() / n;
  return x.tape->push(std::move(v), {x},
                      [x, n](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, (g / n) * Mat<T>::Ones(1, t.value(x).cols()));
                      },
                      "mean_cols");
}

template <typename T>
Var<T> sum(Var<T> x) {
  Mat<T> v = Mat<T>::Constant(1, 1, x.value().sum());
  return x.tape->push(std::move(v), {x},
                      [x](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, Mat<T>::Constant(t.value(x).rows(), t.value(x).cols(), g(0, 0)));
                      },
                      "sum");
}

template <typename T>
Var<T> pick(Var<T> x, Eigen::Index r, Eigen::Index c) {
  if (r < 0 || c < 0 || r >= x.rows() || c >= x.cols()) throw std::out_of_range("pick: index out of range");
  Mat<T> v = Mat<T>::Constant(1, 1, x.value()(r, c));
  return x.tape->push(std::move(v), {x},
                      [x, r, c](Tape<T>& t, const Mat<T>& g) {
                        Mat<T> d = Mat<T>::Zero(t.value(x).rows(), t.value(x).cols());
                        d(r, c) = g(0, 0);
                        t.accumulate(x, d);
                      },
                      "pick");
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Mat<T> v(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return parts[0].tape->push(std::move(v), parts,
                             [parts](Tape<T>& t, const Mat<T>& g) {
                               Eigen::Index o = 0;
                               for (const auto& p : parts) {
                                 const Eigen::Index w = t.value(p).cols();
                                 if (t.requires_grad(p)) t.accumulate(p, g.middleCols(o, w));
                                 o += w;
                               }
                             },
                             "concat_cols");
}

/// softmax(x / temperature) over the named axes.
template <typename T>
Var<T> softmax(Var<T> x, AxisSet axes, T temperature = T(1)) {
  Mat<T> y = softmax_over(x.value(), axes, temperature);
  Mat<T> y_copy = y;
  return x.tape->push(std::move(y), {x},
                      [x, axes, temperature, y = std::move(y_copy)](Tape<T>& t, const Mat<T>& g) {
                        Mat<T> gy = g.cwiseProduct(y);
                        Mat<T> d;
                        if (axes.rows() && axes.cols())
                          d = gy - y * gy.sum();
                        else if (axes.cols())
                          d = gy - (y.array().colwise() * gy.rowwise().sum().array()).matrix();
                        else
                          d = gy - (y.array().rowwise() * gy.colwise().sum().array()).matrix();
                        t.accumulate(x, d / temperature);
                      },
                      "softmax");
}

/// Row-wise log-softmax.
template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  const Mat<T>& xv = x.value();
  Mat<T> out(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T m = xv.row(r).maxCoeff();
    const T lse = m + std::log((xv.row(r).array() - m).exp().sum());
    out.row(r) = xv.row(r).array() - lse;
  }
  Mat<T> probs = out.array().exp().matrix();
  return x.tape->push(std::move(out), {x},
                      [x, p = std::move(probs)](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, g - (p.array().colwise() * g.rowwise().sum().array()).matrix());
                      },
                      "log_softmax_rows");
}

/// Row-wise layer norm with learnable 1 x n scale and shift.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> scale, Var<T> shift) {
  const Mat<T>& xv = x.value();
  if (scale.rows() != 1 || shift.rows() != 1 || scale.cols() != xv.cols() || shift.cols() != xv.cols())
    throw ShapeError("layer_norm: scale/shift length must equal the row width");
  const Eigen::Index n = xv.cols();
  Mat<T> xhat(xv.rows(), n);
  ColVec<T> inv(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mean = xv.row(r).sum() / static_cast<T>(n);
    const auto centered = (xv.row(r).array() - mean).eval();
    const T var = centered.square().sum() / static_cast<T>(n);
    inv(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = centered * inv(r);
  }
  Mat<T> y = (xhat.array().rowwise() * scale.value().row(0).array()).rowwise() + shift.value().row(0).array();
  return x.tape->push(std::move(y), {x, scale, shift},
                      [x, scale, shift, xhat = std::move(xhat), inv = std::move(inv)](Tape<T>& t, const Mat<T>& g) {
                        if (t.requires_grad(shift)) t.accumulate(shift, g.colwise().sum());
                        if (t.requires_grad(scale)) t.accumulate(scale, g.cwiseProduct(xhat).colwise().sum());
                        if (t.requires_grad(x)) {
                          const Mat<T> dxhat = (g.array().rowwise() * t.value(scale).row(0).array()).matrix();
                          const ColVec<T> m1 = dxhat.rowwise().mean();
                          const ColVec<T> m2 = dxhat.cwiseProduct(xhat).rowwise().mean();
                          Mat<T> dx = dxhat;
                          dx.colwise() -= m1;
                          dx -= (xhat.array().colwise() * m2.array()).matrix();
                          dx = (dx.array().colwise() * inv.array()).matrix();
                          t.accumulate(x, dx);
                        }
                      },
                      "layer_norm");
}

/// x / sum(x); the sum must be positive.
template <typename T>
Var<T> normalize_mass(Var<T> x) {
  const T s = x.value().sum();
  if (!(s > T(0))) throw NumericError("normalize_mass: total mass must be positive");
  Mat<T> y = x.value() / s;
  Mat<T> y_copy = y;
  return x.tape->push(std::move(y), {x},
                      [x, s, y = std::move(y_copy)](Tape<T>& t, const Mat<T>& g) {
                        t.accumulate(x, (g.array() - g.cwiseProduct(y).sum()).matrix() / s);
                      },
                      "normalize_mass");
}

/// x W + b for a row-major batch of vectors.
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  return add_row(matmul(x, weight), bias);
}

}  // namespace sacc
