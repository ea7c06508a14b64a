#include "arwb/image.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "arwb/errors.hpp"

namespace arwb {

double iou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) throw ContractError("iou: degenerate box");
  const double ix = std::max(0.0, std::min<double>(a.x1(), b.x1()) - std::max<double>(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min<double>(a.y1(), b.y1()) - std::max<double>(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

Tensor box_mask(const Box& box, std::size_t height, std::size_t width, std::size_t channels) {
  Tensor m({height, width, channels}, 0.0f);
  for (std::size_t y = 0; y < height; ++y) {
    const float py = static_cast<float>(y) + 0.5f;
    if (py < box.y0() || py > box.y1()) continue;
    for (std::size_t x = 0; x < width; ++x) {
      const float px = static_cast<float>(x) + 0.5f;
      if (px < box.x0() || px > box.x1()) continue;
      for (std::size_t c = 0; c < channels; ++c) m.at(y, x, c) = 1.0f;
    }
  }
  return m;
}

Tensor clip01(const Tensor& x) {
  std::vector<float> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = std::clamp(e, 0.0f, 1.0f);
  return Tensor(x.shape(), std::move(v));
}

double max_abs(std::span<const float> v) {
  double m = 0.0;
  for (float e : v) m = std::max(m, static_cast<double>(std::abs(e)));
  return m;
}

double squared_norm(std::span<const float> v) {
  double s = 0.0;
  for (float e : v) s += static_cast<double>(e) * e;
  return s;
}

double psnr(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("psnr: shape mismatch");
  double se = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    se += d * d;
  }
  const double m = se / static_cast<double>(a.numel());
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

void check_image(const Tensor& x, const char* who) {
  if (x.shape() != image_shape())
    throw DimensionError(std::string(who) + ": expected 64x64x3 image, got " + shape_str(x.shape()));
}

}  // namespace arwb
