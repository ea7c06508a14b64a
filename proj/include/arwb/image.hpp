#pragma once

#include <cstddef>

#include "arwb/tensor.hpp"

namespace arwb {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kChannels = 3;

inline Shape image_shape() { return {kImageSize, kImageSize, kChannels}; }

/// Axis-aligned box in pixel units, center format.
struct Box {
  float cx = 0.0f;
  float cy = 0.0f;
  float w = 0.0f;
  float h = 0.0f;

  float x0() const { return cx - w / 2; }
  float y0() const { return cy - h / 2; }
  float x1() const { return cx + w / 2; }
  float y1() const { return cy + h / 2; }

  static Box from_corners(float x0, float y0, float x1, float y1) {
    return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
  }
  bool operator==(const Box&) const = default;
};

/// Intersection over union. Throws ContractError on non-positive sizes.
double iou(const Box& a, const Box& b);

/// H x W x C tensor that is 1 on pixels whose centers fall inside `box`.
Tensor box_mask(const Box& box, std::size_t height = kImageSize, std::size_t width = kImageSize,
                std::size_t channels = kChannels);

/// Element-wise clip to [0, 1]; a plain value, not recorded.
Tensor clip01(const Tensor& x);

double max_abs(std::span<const float> v);
double squared_norm(std::span<const float> v);

/// Peak signal-to-noise ratio in dB for images in [0, 1].
double psnr(const Tensor& a, const Tensor& b);

void check_image(const Tensor& x, const char* who);

}  // namespace arwb
