#pragma once

#include <cstddef>
#include <vector>

#include "arwb/rng.hpp"
#include "arwb/tensor.hpp"

// Differentiable primitives. Every function records a tape node when any
// input requires grad. No broadcasting: elementwise binary ops need equal
// shapes, and dense() is the only place a bias is added.
namespace arwb {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(float s, const Tensor& x) { return scale(x, s); }

/// Scalar reductions; accumulate in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor relu(const Tensor& x);  // subgradient 0 at 0
Tensor sigmoid(const Tensor& x);
Tensor clamp(const Tensor& x, float lo, float hi);  // gradient passes where lo < x < hi

/// Softmax over the final axis.
Tensor softmax(const Tensor& logits);
/// -log softmax(logits)[label] for a rank-1 logit vector.
Tensor cross_entropy(const Tensor& logits, std::size_t label);
/// Mean squared error; both operands may require grad.
Tensor mse(const Tensor& pred, const Tensor& target);
/// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1],
/// optionally weighted per element.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets,
                       const std::vector<float>& weights = {});

/// Valid (unpadded) convolution of an H x W x Cin input with a
/// kh x kw x Cin x Cout kernel.
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1);
/// Zero padding of the two spatial axes of an H x W x C tensor.
Tensor pad2d(const Tensor& input, std::size_t pad);
/// out[j] = sum_i in[i] W[i,j] + b[j].
Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias);
Tensor flatten(const Tensor& x);
/// Adds a bias vector along the final axis (the one permitted broadcast).
Tensor bias_add(const Tensor& x, const Tensor& bias);

/// Selects elements by flat index into a rank-1 result.
Tensor gather(const Tensor& x, const std::vector<std::size_t>& index);
/// Row stack of equally sized rank-1 tensors into n x d.
Tensor stack(const std::vector<Tensor>& rows);

/// Standardizes a rank-1 tensor to zero mean and unit variance.
Tensor layer_norm(const Tensor& x, float eps = 1e-5f);
/// Inverted dropout: kept units are scaled by 1/(1-p).
Tensor dropout(const Tensor& x, float p, Rng& rng);
/// Euclidean norm; subgradient 0 at the origin.
Tensor l2_norm(const Tensor& x);

/// Inverse-mapped affine warp of an H x W x C image about its center with
/// bilinear sampling and zero fill outside the source.
struct Affine {
  double angle_rad = 0.0;
  double scale = 1.0;
  double tx = 0.0;
  double ty = 0.0;
};
Tensor affine_warp(const Tensor& image, const Affine& t);

}  // namespace arwb
