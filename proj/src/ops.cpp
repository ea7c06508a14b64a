#include "arwb/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>

#include "arwb/errors.hpp"

namespace arwb {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  const auto xs = x.data();
  std::vector<float> y(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) y[i] = f(xs[i]);
  std::vector<float> yv = x.requires_grad() ? y : std::vector<float>{};
  return Tensor::make_result(x.shape(), std::move(y), {x},
                             [x, yv = std::move(yv), dfdx](std::span<const float> g) mutable {
                               const auto xs = x.data();
                               std::vector<float> dx(g.size());
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 dx[i] = g[i] * dfdx(xs[i], yv[i]);
                               x.accumulate_grad(dx);
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "add");
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(y), {a, b},
                             [a, b](std::span<const float> g) mutable {
                               if (a.requires_grad()) a.accumulate_grad(g);
                               if (b.requires_grad()) b.accumulate_grad(g);
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "sub");
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(y), {a, b},
                             [a, b](std::span<const float> g) mutable {
                               if (a.requires_grad()) a.accumulate_grad(g);
                               if (b.requires_grad()) {
                                 std::vector<float> n(g.begin(), g.end());
                                 for (auto& v : n) v = -v;
                                 b.accumulate_grad(n);
                               }
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  same_shape(a, b, "mul");
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(y), {a, b},
                             [a, b](std::span<const float> g) mutable {
                               std::vector<float> d(g.size());
                               if (a.requires_grad()) {
                                 for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * b[i];
                                 a.accumulate_grad(d);
                               }
                               if (b.requires_grad()) {
                                 for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * a[i];
                                 b.accumulate_grad(d);
                               }
                             });
}

Tensor scale(const Tensor& x, float s) {
  return unary(x, [s](float v) { return s * v; }, [s](float, float) { return s; });
}

Tensor add_scalar(const Tensor& x, float s) {
  return unary(x, [s](float v) { return v + s; }, [](float, float) { return 1.0f; });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return Tensor::make_result({1}, {static_cast<float>(acc)}, {x},
                             [x](std::span<const float> g) mutable {
                               x.accumulate_grad(std::vector<float>(x.numel(), g[0]));
                             });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return Tensor::make_result({1}, {static_cast<float>(acc / n)}, {x},
                             [x, n](std::span<const float> g) mutable {
                               x.accumulate_grad(
                                   std::vector<float>(x.numel(), static_cast<float>(g[0] / n)));
                             });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](float v) { return v > 0.0f ? v : 0.0f; },
               [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](float v) {
        // split by sign to avoid overflow in exp
        if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
        const float e = std::exp(v);
        return e / (1.0f + e);
      },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  return unary(x, [lo, hi](float v) { return std::clamp(v, lo, hi); },
               [lo, hi](float v, float) { return (v > lo && v < hi) ? 1.0f : 0.0f; });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() == 0) throw DimensionError("softmax of rank-0 tensor");
  const std::size_t d = logits.shape().back();
  const std::size_t rows = logits.numel() / d;
  std::vector<float> y(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* z = logits.data().data() + r * d;
    const float m = *std::max_element(z, z + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(static_cast<double>(z[j] - m));
    for (std::size_t j = 0; j < d; ++j)
      y[r * d + j] = static_cast<float>(std::exp(static_cast<double>(z[j] - m)) / total);
  }
  std::vector<float> yv = logits.requires_grad() ? y : std::vector<float>{};
  return Tensor::make_result(logits.shape(), std::move(y), {logits},
                             [logits, yv = std::move(yv), d, rows](std::span<const float> g) mutable {
                               std::vector<float> dx(g.size());
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j)
                                   dot += static_cast<double>(g[r * d + j]) * yv[r * d + j];
                                 for (std::size_t j = 0; j < d; ++j)
                                   dx[r * d + j] = static_cast<float>(
                                       yv[r * d + j] * (g[r * d + j] - dot));
                               }
                               logits.accumulate_grad(dx);
                             });
}

Tensor cross_entropy(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy expects rank-1 logits");
  if (label >= logits.numel())
    throw IndexError("label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.numel()) + " classes");
  const auto z = logits.data();
  const float m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (float v : z) total += std::exp(static_cast<double>(v - m));
  const double lse = m + std::log(total);
  const double loss = lse - z[label];
  std::vector<float> p(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) p[j] = static_cast<float>(std::exp(z[j] - lse));
  return Tensor::make_result({1}, {static_cast<float>(std::max(loss, 0.0))}, {logits},
                             [logits, p, label](std::span<const float> g) mutable {
                               std::vector<float> dx(p.size());
                               for (std::size_t j = 0; j < p.size(); ++j)
                                 dx[j] = g[0] * (p[j] - (j == label ? 1.0f : 0.0f));
                               logits.accumulate_grad(dx);
                             });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  same_shape(pred, target, "mse");
  const std::size_t n = pred.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = static_cast<double>(pred[i]) - target[i];
    acc += e * e;
  }
  return Tensor::make_result({1}, {static_cast<float>(acc / static_cast<double>(n))}, {pred, target},
                             [pred, target, n](std::span<const float> g) mutable {
                               std::vector<float> d(n);
                               const double k = 2.0 * g[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 d[i] = static_cast<float>(k * (static_cast<double>(pred[i]) - target[i]));
                               if (pred.requires_grad()) pred.accumulate_grad(d);
                               if (target.requires_grad()) {
                                 for (auto& v : d) v = -v;
                                 target.accumulate_grad(d);
                               }
                             });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets, const std::vector<float>& weights) {
  same_shape(logits, targets, "bce_with_logits");
  const std::size_t n = logits.numel();
  if (!weights.empty() && weights.size() != n) throw DimensionError("bce_with_logits: weight count");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = logits[i];
    const double t = targets[i];
    const double w = weights.empty() ? 1.0 : weights[i];
    acc += w * (std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))));
  }
  return Tensor::make_result(
      {1}, {static_cast<float>(acc / static_cast<double>(n))}, {logits},
      [logits, targets, weights, n](std::span<const float> g) mutable {
        std::vector<float> d(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double z = logits[i];
          const double s = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
          const double w = weights.empty() ? 1.0 : weights[i];
          d[i] = static_cast<float>(g[0] * w * (s - targets[i]) / static_cast<double>(n));
        }
        logits.accumulate_grad(d);
      });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride) {
  if (input.rank() != 3) throw DimensionError("conv2d input must be H x W x Cin");
  if (kernel.rank() != 4) throw DimensionError("conv2d kernel must be kh x kw x Cin x Cout");
  if (stride == 0) throw DimensionError("conv2d stride must be >= 1");
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), Co = kernel.dim(3);
  if (kernel.dim(2) != C)
    throw DimensionError("conv2d channel mismatch: input " + shape_str(input.shape()) + " kernel " +
                         shape_str(kernel.shape()));
  if (kh > H || kw > W) throw DimensionError("conv2d kernel larger than input");
  const std::size_t Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  const std::size_t P = Ho * Wo, Kd = kh * kw * C;

  auto cols = std::make_shared<std::vector<float>>(P * Kd);
  const float* src = input.data().data();
  for (std::size_t oy = 0; oy < Ho; ++oy)
    for (std::size_t ox = 0; ox < Wo; ++ox) {
      float* row = cols->data() + (oy * Wo + ox) * Kd;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const float* line = src + ((oy * stride + ky) * W + ox * stride) * C;
        std::copy(line, line + kw * C, row + ky * kw * C);
      }
    }

  std::vector<float> out(P * Co);
  MapRM(out.data(), P, Co).noalias() =
      CMapRM(cols->data(), P, Kd) * CMapRM(kernel.data().data(), Kd, Co);

  return Tensor::make_result(
      {Ho, Wo, Co}, std::move(out), {input, kernel},
      [input, kernel, cols, H, W, C, kh, kw, Co, Ho, Wo, stride, P, Kd](std::span<const float> g) mutable {
        CMapRM G(g.data(), P, Co);
        if (kernel.requires_grad()) {
          std::vector<float> dk(Kd * Co);
          MapRM(dk.data(), Kd, Co).noalias() = CMapRM(cols->data(), P, Kd).transpose() * G;
          kernel.accumulate_grad(dk);
        }
        if (input.requires_grad()) {
          RowMat dcols = G * CMapRM(kernel.data().data(), Kd, Co).transpose();
          std::vector<float> dx(H * W * C, 0.0f);
          for (std::size_t oy = 0; oy < Ho; ++oy)
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const float* row = dcols.data() + (oy * Wo + ox) * Kd;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                float* line = dx.data() + ((oy * stride + ky) * W + ox * stride) * C;
                const float* r = row + ky * kw * C;
                for (std::size_t j = 0; j < kw * C; ++j) line[j] += r[j];
              }
            }
          input.accumulate_grad(dx);
        }
      });
}

Tensor pad2d(const Tensor& input, std::size_t pad) {
  if (input.rank() != 3) throw DimensionError("pad2d input must be H x W x C");
  const std::size_t H = input.dim(0), W = input.dim(1), C = input.dim(2);
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::vector<float> out(Hp * Wp * C, 0.0f);
  for (std::size_t y = 0; y < H; ++y)
    std::copy_n(input.data().data() + y * W * C, W * C, out.data() + ((y + pad) * Wp + pad) * C);
  return Tensor::make_result({Hp, Wp, C}, std::move(out), {input},
                             [input, H, W, C, Wp, pad](std::span<const float> g) mutable {
                               std::vector<float> dx(H * W * C);
                               for (std::size_t y = 0; y < H; ++y)
                                 std::copy_n(g.data() + ((y + pad) * Wp + pad) * C, W * C,
                                             dx.data() + y * W * C);
                               input.accumulate_grad(dx);
                             });
}

Tensor dense(const Tensor& input, const Tensor& weights, const Tensor& bias) {
  if (input.rank() != 1 || weights.rank() != 2 || bias.rank() != 1)
    throw DimensionError("dense expects rank-1 input, rank-2 weights, rank-1 bias");
  const std::size_t n = input.dim(0), m = weights.dim(1);
  if (weights.dim(0) != n || bias.dim(0) != m)
    throw DimensionError("dense: input " + shape_str(input.shape()) + " weights " +
                         shape_str(weights.shape()) + " bias " + shape_str(bias.shape()));
  std::vector<float> out(bias.data().begin(), bias.data().end());
  Eigen::Map<Eigen::RowVectorXf>(out.data(), m).noalias() +=
      Eigen::Map<const Eigen::RowVectorXf>(input.data().data(), n) *
      CMapRM(weights.data().data(), n, m);
  return Tensor::make_result(
      {m}, std::move(out), {input, weights, bias},
      [input, weights, bias, n, m](std::span<const float> g) mutable {
        Eigen::Map<const Eigen::VectorXf> G(g.data(), m);
        if (weights.requires_grad()) {
          std::vector<float> dw(n * m);
          MapRM(dw.data(), n, m).noalias() =
              Eigen::Map<const Eigen::VectorXf>(input.data().data(), n) * G.transpose();
          weights.accumulate_grad(dw);
        }
        if (bias.requires_grad()) bias.accumulate_grad(g);
        if (input.requires_grad()) {
          std::vector<float> dx(n);
          Eigen::Map<Eigen::VectorXf>(dx.data(), n).noalias() =
              CMapRM(weights.data().data(), n, m) * G;
          input.accumulate_grad(dx);
        }
      });
}

Tensor flatten(const Tensor& x) { return x.reshape({x.numel()}); }

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || x.rank() == 0 || x.shape().back() != bias.dim(0))
    throw DimensionError("bias_add: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t c = bias.dim(0);
  std::vector<float> y(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias[i % c];
  return Tensor::make_result(x.shape(), std::move(y), {x, bias},
                             [x, bias, c](std::span<const float> g) mutable {
                               if (x.requires_grad()) x.accumulate_grad(g);
                               if (bias.requires_grad()) {
                                 std::vector<double> acc(c, 0.0);
                                 for (std::size_t i = 0; i < g.size(); ++i) acc[i % c] += g[i];
                                 bias.accumulate_grad(std::vector<float>(acc.begin(), acc.end()));
                               }
                             });
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& index) {
  if (index.empty()) throw DimensionError("gather with empty index");
  std::vector<float> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw IndexError("gather index out of range");
    out[i] = x[index[i]];
  }
  return Tensor::make_result({index.size()}, std::move(out), {x},
                             [x, index](std::span<const float> g) mutable {
                               std::vector<float> dx(x.numel(), 0.0f);
                               for (std::size_t i = 0; i < index.size(); ++i) dx[index[i]] += g[i];
                               x.accumulate_grad(dx);
                             });
}

Tensor stack(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("stack of zero tensors");
  const std::size_t d = rows.front().numel();
  std::vector<float> out;
  out.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.numel() != d) throw DimensionError("stack: rows differ in size");
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return Tensor::make_result({rows.size(), d}, std::move(out), rows,
                             [rows, d](std::span<const float> g) mutable {
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 if (rows[i].requires_grad())
                                   rows[i].accumulate_grad(g.subspan(i * d, d));
                             });
}

Tensor layer_norm(const Tensor& x, float eps) {
  if (x.rank() != 1) throw DimensionError("layer_norm expects rank-1 input");
  const std::size_t n = x.numel();
  double mu = 0.0;
  for (float v : x.data()) mu += v;
  mu /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x.data()) var += (v - mu) * (v - mu);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  std::vector<float> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<float>((x[i] - mu) * inv);
  std::vector<float> yv = y;
  return Tensor::make_result({n}, std::move(y), {x},
                             [x, yv = std::move(yv), inv, n](std::span<const float> g) mutable {
                               double gm = 0.0, gy = 0.0;
                               for (std::size_t i = 0; i < n; ++i) {
                                 gm += g[i];
                                 gy += static_cast<double>(g[i]) * yv[i];
                               }
                               gm /= static_cast<double>(n);
                               gy /= static_cast<double>(n);
                               std::vector<float> dx(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 dx[i] = static_cast<float>(inv * (g[i] - gm - yv[i] * gy));
                               x.accumulate_grad(dx);
                             });
}

Tensor dropout(const Tensor& x, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw ContractError("dropout probability must be in [0,1)");
  std::vector<float> mask(x.numel());
  const float keep = 1.0f / (1.0f - p);
  for (auto& m : mask) m = rng.uniform() < p ? 0.0f : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor l2_norm(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += static_cast<double>(v) * v;
  const double nrm = std::sqrt(acc);
  return Tensor::make_result({1}, {static_cast<float>(nrm)}, {x},
                             [x, nrm](std::span<const float> g) mutable {
                               std::vector<float> dx(x.numel(), 0.0f);
                               if (nrm > 0.0)
                                 for (std::size_t i = 0; i < dx.size(); ++i)
                                   dx[i] = static_cast<float>(g[0] * x[i] / nrm);
                               x.accumulate_grad(dx);
                             });
}

Tensor affine_warp(const Tensor& image, const Affine& t) {
  if (image.rank() != 3) throw DimensionError("affine_warp expects H x W x C");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (t.scale <= 0.0) throw ContractError("affine_warp scale must be positive");
  const double cx = (static_cast<double>(W) - 1.0) / 2.0, cy = (static_cast<double>(H) - 1.0) / 2.0;
  const double ca = std::cos(t.angle_rad), sa = std::sin(t.angle_rad);

  // Per output pixel: four source pixel indices and bilinear weights.
  struct Tap {
    std::array<std::int64_t, 4> src;
    std::array<float, 4> w;
  };
  auto taps = std::make_shared<std::vector<Tap>>(H * W);
  for (std::size_t oy = 0; oy < H; ++oy)
    for (std::size_t ox = 0; ox < W; ++ox) {
      const double u = (static_cast<double>(ox) - cx - t.tx) / t.scale;
      const double v = (static_cast<double>(oy) - cy - t.ty) / t.scale;
      const double sx = ca * u + sa * v + cx;
      const double sy = -sa * u + ca * v + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      Tap tap{};
      const std::array<std::pair<double, double>, 4> corners{
          {{fx, fy}, {fx + 1, fy}, {fx, fy + 1}, {fx + 1, fy + 1}}};
      const std::array<double, 4> wts{(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
      for (int k = 0; k < 4; ++k) {
        const auto [px, py] = corners[k];
        if (px < 0 || py < 0 || px >= static_cast<double>(W) || py >= static_cast<double>(H)) {
          tap.src[k] = -1;
          tap.w[k] = 0.0f;
        } else {
          tap.src[k] = static_cast<std::int64_t>(py) * static_cast<std::int64_t>(W) +
                       static_cast<std::int64_t>(px);
          tap.w[k] = static_cast<float>(wts[k]);
        }
      }
      (*taps)[oy * W + ox] = tap;
    }

  std::vector<float> out(H * W * C, 0.0f);
  const float* src = image.data().data();
  for (std::size_t p = 0; p < H * W; ++p) {
    const Tap& tap = (*taps)[p];
    for (int k = 0; k < 4; ++k) {
      if (tap.src[k] < 0) continue;
      for (std::size_t c = 0; c < C; ++c)
        out[p * C + c] += tap.w[k] * src[static_cast<std::size_t>(tap.src[k]) * C + c];
    }
  }
  return Tensor::make_result(image.shape(), std::move(out), {image},
                             [image, taps, C](std::span<const float> g) mutable {
                               std::vector<float> dx(image.numel(), 0.0f);
                               for (std::size_t p = 0; p < taps->size(); ++p) {
                                 const Tap& tap = (*taps)[p];
                                 for (int k = 0; k < 4; ++k) {
                                   if (tap.src[k] < 0) continue;
                                   for (std::size_t c = 0; c < C; ++c)
                                     dx[static_cast<std::size_t>(tap.src[k]) * C + c] +=
                                         tap.w[k] * g[p * C + c];
                                 }
                               }
                               image.accumulate_grad(dx);
                             });
}

}  // namespace arwb
