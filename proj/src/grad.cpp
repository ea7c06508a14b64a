#include "arwb/grad.hpp"

#include <algorithm>
#include <cmath>

#include "arwb/errors.hpp"
#include "arwb/rng.hpp"

namespace arwb {

double finite_diff_check(const ScalarFn& f, const Tensor& x, double h, std::size_t max_coords,
                         std::uint64_t seed) {
  require(h >= 1e-5 && h <= 1e-2, "finite_diff_check: h must lie in [1e-5, 1e-2]");
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  const Tensor y = f(leaf);
  if (y.requires_grad()) backward(y);
  const std::vector<float> analytic = leaf.grad();

  std::vector<std::size_t> coords;
  if (max_coords == 0 || max_coords >= x.numel()) {
    coords.resize(x.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  } else {
    Rng rng(seed);
    auto perm = rng.permutation(x.numel());
    coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(max_coords));
  }

  Tensor probe = x.clone();
  probe.set_requires_grad(false);
  double worst = 0.0;
  for (auto i : coords) {
    const float orig = x[i];
    const float up = static_cast<float>(orig + h);
    const float down = static_cast<float>(orig - h);
    probe[i] = up;
    const double fp = f(probe).item();
    probe[i] = down;
    const double fm = f(probe).item();
    probe[i] = orig;
    // divide by the representable step actually taken
    const double numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

void sgd_step(std::span<Tensor> params, float lr) {
  for (auto& p : params)
    if (!p.has_grad()) throw ContractError("sgd_step: parameter has no gradient");
  for (auto& p : params) {
    const auto g = p.grad();
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    p.zero_grad();
  }
}

void Adam::step(std::span<Tensor> params) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto d = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < d.size(); ++i) {
      m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      d[i] -= static_cast<float>(lr_ * mh / (std::sqrt(vh) + eps_));
    }
    p.zero_grad();
  }
}

}  // namespace arwb
