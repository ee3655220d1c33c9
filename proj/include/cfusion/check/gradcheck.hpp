#pragma once

// Central-difference gradient checking over a named set of inputs.

#include "cfusion/params.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace cfusion::check {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
  std::size_t coords = 0;
};

using ScalarFn = std::function<ad::Var<double>(ParamBinding<double>&)>;

inline double evaluate(const ScalarFn& f, const ParameterSet<double>& params) {
  ad::Tape<double> tape;
  ParamBinding<double> p(tape, params, false);
  return f(p).value()(0, 0);
}

/// Compares reverse-mode gradients with central differences. Tensors with
/// more than `max_coords` entries are checked on a random subset. The error
/// per tensor is ||a - n|| / max(||a|| + ||n||, floor).
inline GradCheckResult grad_check(const ScalarFn& f, ParameterSet<double> params, std::mt19937_64& rng,
                                  std::size_t max_coords = 64, double h = 1e-6, double floor = 1e-7) {
  Gradients<double> analytic;
  {
    ad::Tape<double> tape;
    ParamBinding<double> p(tape, params, true);
    auto out = f(p);
    tape.backward(out);
    analytic = p.gradients();
  }
  GradCheckResult result;
  for (auto& [name, value] : params.tensors()) {
    const auto size = static_cast<std::size_t>(value.size());
    std::vector<std::size_t> idx(size);
    for (std::size_t i = 0; i < size; ++i) idx[i] = i;
    if (size > max_coords) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_coords);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto i : idx) {
      double& x = value.data()[i];
      const double saved = x;
      x = saved + h;
      const double up = evaluate(f, params);
      x = saved - h;
      const double down = evaluate(f, params);
      x = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic.at(name).data()[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++result.coords;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), floor);
    if (rel >= result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = name;
    }
  }
  return result;
}

inline Matrix<double> random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Matrix<double> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

/// Fixed, non-degenerate linear functional of `out` so every entry matters.
inline ad::Var<double> project(ad::Var<double> out) {
  Matrix<double> r(out.rows(), out.cols());
  for (Eigen::Index j = 0; j < r.cols(); ++j) {
    for (Eigen::Index i = 0; i < r.rows(); ++i) r(i, j) = std::sin(1.0 + 0.7 * i + 1.3 * j);
  }
  return ad::mean_all(ad::hadamard(out, out.tape->constant(std::move(r))));
}

}  // namespace cfusion::check
