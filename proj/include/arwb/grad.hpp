#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "arwb/tensor.hpp"

namespace arwb {

using ScalarFn = std::function<Tensor(const Tensor&)>;

/// Largest |analytic - central difference| / max(1, |analytic|) over the
/// coordinates of `x`. `h` must lie in [1e-5, 1e-2]. With `max_coords` > 0 a
/// seeded random subset of that many coordinates is probed instead of all.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h,
                         std::size_t max_coords = 0, std::uint64_t seed = 0);

/// p <- p - lr * grad for every tensor, then clears the gradients.
/// Throws ContractError when a parameter has no gradient.
void sgd_step(std::span<Tensor> params, float lr);

/// Adam with bias correction. State is keyed by parameter position, so the
/// same parameter list must be passed on every step.
class Adam {
 public:
  explicit Adam(float lr, float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update from the accumulated gradients, then clears them.
  /// Parameters without a gradient are left unchanged.
  void step(std::span<Tensor> params);
  void set_lr(float lr) { lr_ = lr; }

 private:
  float lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

}  // namespace arwb
