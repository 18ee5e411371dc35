#pragma once

// Central-difference verification of tape gradients.

#include <sacc/autodiff.hpp>

#include <cmath>
#include <functional>

namespace sacc {

/// max_i |analytic_i - numeric_i| / (|analytic_i| + 1e-8) for a scalar
/// function of one matrix input.
inline double finite_difference_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& f,
                                      const MatD& input, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_difference_check: step must be positive");
  MatD analytic = MatD::Zero(input.rows(), input.cols());
  {
    Tape<double> tape;
    Gradients<double> unused;
    const Var<double> x = tape.variable(input);
    Var<double> out = f(tape, x);
    if (out.value().size() != 1) throw std::invalid_argument("finite_difference_check: f must return a scalar");
    tape.backward(out, unused);
    if (tape.grad(x).size() > 0) analytic = tape.grad(x);
  }
  auto eval = [&](const MatD& x) {
    Tape<double> tape;
    return f(tape, tape.constant(x)).scalar();
  };
  double worst = 0.0;
  MatD x = input;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = eval(x);
    x.data()[i] = keep - h;
    const double down = eval(x);
    x.data()[i] = keep;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-8));
  }
  return worst;
}

/// Same measure over every trainable entry of a parameter set. `loss`
/// builds the scalar objective on a fresh tape from the current values.
inline double parameter_gradient_check(ParameterSet<double>& params,
                                       const std::function<Var<double>(Tape<double>&)>& loss, double h) {
  Gradients<double> grads(params.size());
  {
    Tape<double> tape;
    Var<double> out = loss(tape);
    if (out.value().size() != 1) throw std::invalid_argument("parameter_gradient_check: loss must be a scalar");
    tape.backward(out, grads);
  }
  auto eval = [&] {
    Tape<double> tape;
    return loss(tape).scalar();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter<double>& p = params[k];
    if (!p.trainable) continue;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + h;
      const double up = eval();
      p.value.data()[i] = keep - h;
      const double down = eval();
      p.value.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = grads.has(k) ? grads[k].data()[i] : 0.0;
      worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-8));
    }
  }
  return worst;
}

}  // namespace sacc
