#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "llip/core/ops.hpp"
#include "llip/core/tensor.hpp"

namespace llip {

// Central-difference gradient oracle. `f` must rebuild its computation from
// the leaf tensors on every call (pure in the leaf values). Returns
// max over coordinates of |analytic - fd| / max(1, |analytic|).
//
// Runs in double precision only; the h~1e-5 sweet spot does not exist in
// single precision.
inline double finite_difference_check(const std::function<Tensor<double>()>& f,
                                      std::vector<Tensor<double>> leaves, double h = 1e-5) {
  for (const auto& leaf : leaves) {
    if (!leaf.requires_grad()) throw value_error("finite_difference_check: leaf without requires_grad");
  }
  // analytic gradients from one taped evaluation
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f();
    if (loss.numel() != 1) throw value_error("finite_difference_check: f must return a scalar");
    if (!std::isfinite(loss.item())) throw numeric_error("finite_difference_check: f returned non-finite value");
    backward(loss, tape);
    for (const auto& leaf : leaves) {
      if (leaf.has_grad())
        analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
      else
        analytic.emplace_back(static_cast<std::size_t>(leaf.numel()), 0.0);
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();

  const auto eval = [&]() {
    Tensor<double> loss = f();  // no tape active: pure forward
    const double v = loss.item();
    if (!std::isfinite(v)) throw numeric_error("finite_difference_check: f returned non-finite value");
    return v;
  };

  double max_err = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor<double>& leaf = leaves[li];
    for (long c = 0; c < leaf.numel(); ++c) {
      const double saved = leaf.data()[c];
      leaf.data()[c] = saved + h;
      const double up = eval();
      leaf.data()[c] = saved - h;
      const double down = eval();
      leaf.data()[c] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double a = analytic[li][static_cast<std::size_t>(c)];
      const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace llip
