#pragma once

// Finite-difference gradient checking utilities, test-side only.
// The oracle is central differences on the forward path and never calls
// into the backward implementation it is checking.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "ofnet/tensor.hpp"

namespace gradcheck {

template <typename T>
struct Result {
  double rel_err = 0.0;     // max elementwise |analytic - fd| / scale
  double max_abs = 0.0;     // largest gradient magnitude seen
  size_t checked = 0;
};

/// Central finite differences of f() w.r.t. a parameter tensor.
/// f must re-run the forward path from current parameter values.
template <typename T>
std::vector<double> finite_diff(ofnet::TensorT<T>& param,
                                const std::function<double()>& f,
                                double eps) {
  std::vector<double> fd(param.size());
  auto vals = param.values();
  for (size_t i = 0; i < param.size(); ++i) {
    T keep = vals[i];
    vals[i] = T(double(keep) + eps);
    double fp = f();
    vals[i] = T(double(keep) - eps);
    double fm = f();
    vals[i] = keep;
    fd[i] = (fp - fm) / (2.0 * eps);
  }
  return fd;
}

/// Subsampled variant for big parameter tensors.
template <typename T>
std::vector<std::pair<size_t, double>> finite_diff_at(
    ofnet::TensorT<T>& param, std::span<const size_t> indices,
    const std::function<double()>& f, double eps) {
  std::vector<std::pair<size_t, double>> fd;
  auto vals = param.values();
  for (size_t i : indices) {
    T keep = vals[i];
    vals[i] = T(double(keep) + eps);
    double fp = f();
    vals[i] = T(double(keep) - eps);
    double fm = f();
    vals[i] = keep;
    fd.push_back({i, (fp - fm) / (2.0 * eps)});
  }
  return fd;
}

inline double rel_err(std::span<const double> analytic,
                      std::span<const double> fd) {
  double scale = 1e-10;
  for (double a : analytic) scale = std::max(scale, std::fabs(a));
  for (double b : fd) scale = std::max(scale, std::fabs(b));
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]));
  return worst / scale;
}

/// Checks d(sum(op(x)))/dx against central differences. Returns max relative
/// error. `forward` rebuilds the graph from x each call.
template <typename T>
double check_input_grad(
    ofnet::TensorT<T>& x,
    const std::function<ofnet::TensorT<T>(const ofnet::TensorT<T>&)>& forward,
    double eps = 1e-5) {
  x.set_requires_grad(true);
  auto run = [&]() {
    auto out = forward(x);
    double s = 0;
    for (T v : out.values()) s += double(v);
    return s;
  };
  auto loss = ofnet::sum_all(forward(x));
  std::vector<ofnet::TensorT<T>> params{x};
  ofnet::backward(loss, std::span<ofnet::TensorT<T>>(params));
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  std::vector<double> fd = finite_diff(x, run, eps);
  return rel_err(analytic, fd);
}

}  // namespace gradcheck
