#pragma once

// Central finite-difference oracle.  Independent of the backward closures: it
// only perturbs leaf values and re-runs the forward function.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tg/autodiff.hpp"

namespace tg::testing {

using VarD = ad::Var<double>;

inline VarD random_param(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = nd(rng);
  return VarD::parameter(rows, cols, std::move(v));
}

/// Numeric gradient of loss_fn() with respect to every entry of `leaf`.
inline std::vector<double> numeric_grad(VarD leaf, const std::function<double()>& loss_fn, double h = 1e-5) {
  auto vals = leaf.mutable_value();
  std::vector<double> g(vals.size());
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + h;
    const double up = loss_fn();
    vals[i] = orig - h;
    const double dn = loss_fn();
    vals[i] = orig;
    g[i] = (up - dn) / (2 * h);
  }
  return g;
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂); absolute error when both are ~0.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  if (denom < 1e-10) return std::sqrt(diff);
  return std::sqrt(diff) / denom;
}

/// Largest relative error over `leaves` between backward() and central
/// differences of build_loss().
inline double max_grad_error(const std::vector<VarD>& leaves, const std::function<VarD()>& build_loss,
                             double h = 1e-5) {
  auto grads = ad::backward(build_loss());
  double worst = 0;
  for (const auto& leaf : leaves) {
    const auto analytic = grads.get(leaf);
    const auto numeric = numeric_grad(leaf, [&] { return build_loss().item(); }, h);
    worst = std::max(worst, rel_error(analytic, numeric));
  }
  return worst;
}

}  // namespace tg::testing
