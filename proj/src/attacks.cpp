#include "arwb/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "arwb/errors.hpp"

namespace arwb {
namespace {

float sign0(float g) { return g > 0 ? 1.0f : (g < 0 ? -1.0f : 0.0f); }

std::vector<float> region_of(const Budget& b, const Tensor& x) {
  if (!b.has_region()) return std::vector<float>(x.numel(), 1.0f);
  if (b.region.shape() != x.shape())
    throw DimensionError("budget region " + shape_str(b.region.shape()) + " vs input " + shape_str(x.shape()));
  return {b.region.data().begin(), b.region.data().end()};
}

AttackResult finish(const Tensor& x, Tensor delta) {
  AttackResult r;
  r.x_adv = clip01(x + delta);
  r.delta = std::move(delta);
  return r;
}

double eval(const Objective& f, const Tensor& x) { return f(x).item(); }

// Rectangle of pixels covered by a mask (whole image when the mask is empty).
struct Rect {
  std::size_t y0, x0, h, w;
};

Rect support_rect(const std::vector<float>& mask, const Shape& shape) {
  const std::size_t H = shape[0], W = shape[1], C = shape[2];
  std::size_t y0 = H, x0 = W, y1 = 0, x1 = 0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c)
        if (mask[(y * W + x) * C + c] != 0.0f) {
          y0 = std::min(y0, y), x0 = std::min(x0, x);
          y1 = std::max(y1, y + 1), x1 = std::max(x1, x + 1);
        }
  if (y1 == 0) return {0, 0, 0, 0};
  return {y0, x0, y1 - y0, x1 - x0};
}

// Orthonormal 1-D DCT-II vector of frequency k on n points.
std::vector<double> dct_vector(std::size_t n, std::size_t k) {
  std::vector<double> v(n);
  const double a = std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    v[i] = a * std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k) /
                        (2.0 * static_cast<double>(n)));
  return v;
}

}  // namespace

void Budget::validate() const {
  require(std::isfinite(epsilon) && epsilon >= 0, "budget: epsilon must be finite and >= 0");
  require(std::isfinite(alpha) && alpha > 0, "budget: alpha must be finite and > 0");
  require(max_iters >= 1, "budget: max_iters must be >= 1");
}

SampledTransform TransformSampler::sample(Rng& rng) const {
  SampledTransform t;
  t.affine.angle_rad = rng.uniform(-max_rotation_deg, max_rotation_deg) * std::numbers::pi / 180.0;
  t.affine.scale = rng.uniform(min_scale, max_scale);
  t.affine.tx = rng.uniform(-max_translation_px, max_translation_px);
  t.affine.ty = rng.uniform(-max_translation_px, max_translation_px);
  t.brightness = static_cast<float>(rng.uniform(-max_brightness, max_brightness));
  return t;
}

bool TransformSampler::in_range(const SampledTransform& t) const {
  const double deg = t.affine.angle_rad * 180.0 / std::numbers::pi;
  return std::abs(deg) <= max_rotation_deg + 1e-9 && t.affine.scale >= min_scale &&
         t.affine.scale <= max_scale && std::abs(t.affine.tx) <= max_translation_px &&
         std::abs(t.affine.ty) <= max_translation_px && std::abs(t.brightness) <= max_brightness + 1e-7;
}

Tensor apply_transform(const Tensor& image, const SampledTransform& t) {
  return clamp(add_scalar(affine_warp(image, t.affine), t.brightness), 0.0f, 1.0f);
}

Objective attack_objective(const ModelBundle& m, const Target& target) {
  if (m.kind() == ModelKind::SignDetector) {
    const auto* labels = std::get_if<Labels>(&target);
    require(labels != nullptr, "detector attacks need ground-truth labels");
    return [m, l = *labels](const Tensor& x) { return detector_loss(detector_forward(m, x), l); };
  }
  if (m.kind() == ModelKind::DistanceRegressor) {
    const auto* ref = std::get_if<float>(&target);
    require(ref != nullptr, "regressor attacks need a reference distance");
    return [m, r = *ref](const Tensor& x) { return add_scalar(regressor_forward(m, x), -r); };
  }
  throw ContractError("attacks apply to the detector and the regressor only");
}

ScoreFn black_box_score(const ModelBundle& m, const Target& target) {
  if (m.kind() == ModelKind::SignDetector) {
    const auto* labels = std::get_if<Labels>(&target);
    require(labels != nullptr, "detector attacks need ground-truth labels");
    return [m, present = labels->has_sign](const Tensor& x) {
      const GridPrediction p = detector_forward(m, x);
      double best = 0.0;
      for (std::size_t c = 0; c < kGrid * kGrid; ++c) best = std::max(best, static_cast<double>(p.objectness(c)));
      return present ? -best : -(1.0 - best);
    };
  }
  if (m.kind() == ModelKind::DistanceRegressor) {
    const auto* ref = std::get_if<float>(&target);
    require(ref != nullptr, "regressor attacks need a reference distance");
    return [m, r = *ref](const Tensor& x) {
      return std::abs(static_cast<double>(regressor_forward(m, x).item()) - r);
    };
  }
  throw ContractError("attacks apply to the detector and the regressor only");
}

std::pair<double, std::vector<float>> value_and_grad(const Objective& f, const Tensor& x) {
  Tensor leaf = x.detach().clone();
  leaf.set_requires_grad(true);
  const Tensor y = f(leaf);
  if (y.numel() != 1) throw ContractError("objective must return a scalar");
  if (y.requires_grad()) backward(y);
  return {y.item(), leaf.grad()};
}

AttackResult gaussian_noise(const Tensor& x, float sigma, std::uint64_t seed) {
  require(sigma >= 0 && std::isfinite(sigma), "gaussian_noise: sigma must be >= 0");
  Rng rng(seed);
  Tensor delta(x.shape());
  if (sigma > 0)
    for (auto& d : delta.mutable_data()) d = static_cast<float>(rng.normal(0.0, sigma));
  AttackResult r = finish(x, delta);
  r.success = sigma > 0;
  return r;
}

AttackResult fgsm(const Objective& f, const Tensor& x, const Budget& budget) {
  budget.validate();
  require(budget.norm == Norm::Linf, "fgsm needs an L-inf budget");
  const auto region = region_of(budget, x);
  const auto [j0, g] = value_and_grad(f, x);
  Tensor delta(x.shape());
  auto d = delta.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = region[i] * budget.epsilon * sign0(g[i]);
  AttackResult r = finish(x, delta);
  const double j1 = eval(f, r.x_adv);
  r.loss_trace = {j0, j1};
  r.success = j1 > j0;
  return r;
}

AttackResult fgsm(const ModelBundle& m, const Tensor& x, const Target& target, const Budget& budget) {
  return fgsm(attack_objective(m, target), x, budget);
}

AttackResult auto_pgd(const Objective& f, const Tensor& x, const Budget& budget) {
  budget.validate();
  require(budget.norm == Norm::Linf, "auto_pgd needs an L-inf budget");
  const auto region = region_of(budget, x);
  const std::size_t n = x.numel();
  const std::size_t window = std::max<std::size_t>(5, budget.max_iters / 10);
  const float eps = budget.epsilon;

  std::vector<float> delta(n, 0.0f), best_delta(n, 0.0f);
  auto [j0, g] = value_and_grad(f, x);
  std::vector<float> best_grad = g;
  double best = -std::numeric_limits<double>::infinity();
  double checkpoint_best = j0;
  float alpha = budget.alpha;
  std::vector<double> trace;
  trace.reserve(budget.max_iters);

  for (std::size_t t = 0; t < budget.max_iters; ++t) {
    for (std::size_t i = 0; i < n; ++i)
      delta[i] = std::clamp(delta[i] + region[i] * alpha * sign0(g[i]), -eps, eps);
    const Tensor xt = clip01(x + Tensor(x.shape(), delta));
    auto [j, gt] = value_and_grad(f, xt);
    g = std::move(gt);
    if (j > best) {
      best = j;
      best_delta = delta;
      best_grad = g;
    }
    trace.push_back(best);
    if ((t + 1) % window == 0) {
      if (best <= checkpoint_best) {
        alpha /= 2;
        delta = best_delta;
        g = best_grad;
      }
      checkpoint_best = best;
    }
  }
  AttackResult r = finish(x, Tensor(x.shape(), best_delta));
  r.loss_trace = std::move(trace);
  r.success = best > j0;
  return r;
}

AttackResult auto_pgd(const ModelBundle& m, const Tensor& x, const Target& target, const Budget& budget) {
  return auto_pgd(attack_objective(m, target), x, budget);
}

AttackResult simba(const ScoreFn& score, const Tensor& x, const Budget& budget, SimbaBasis basis) {
  require(std::isfinite(budget.epsilon) && budget.epsilon >= 0, "simba: epsilon must be finite and >= 0");
  require(budget.max_queries >= 1, "simba: max_queries must be >= 1");
  if (x.rank() != 3) throw DimensionError("simba expects an H x W x C image");
  const auto region = region_of(budget, x);
  const Shape& shape = x.shape();
  const std::size_t W = shape[1], C = shape[2];
  const Rect rect = support_rect(region, shape);

  // Basis vectors are enumerated lazily: index -> (coordinates, weights).
  std::size_t count = 0;
  std::size_t fh = 0, fw = 0;
  std::vector<std::size_t> pixel_coords;
  if (basis == SimbaBasis::Pixel) {
    for (std::size_t i = 0; i < region.size(); ++i)
      if (region[i] != 0.0f) pixel_coords.push_back(i);
    count = pixel_coords.size();
  } else if (rect.h > 0) {
    fh = std::max<std::size_t>(1, rect.h / 4);
    fw = std::max<std::size_t>(1, rect.w / 4);
    count = fh * fw * C;
  }
  auto direction = [&](std::size_t k, std::vector<std::pair<std::size_t, float>>& out) {
    out.clear();
    if (basis == SimbaBasis::Pixel) {
      out.push_back({pixel_coords[k], 1.0f});
      return;
    }
    const std::size_t c = k % C, v = (k / C) % fw, u = k / (C * fw);
    const auto cy = dct_vector(rect.h, u), cx = dct_vector(rect.w, v);
    for (std::size_t y = 0; y < rect.h; ++y)
      for (std::size_t xx = 0; xx < rect.w; ++xx)
        out.push_back({((rect.y0 + y) * W + rect.x0 + xx) * C + c, static_cast<float>(cy[y] * cx[xx])});
  };

  Rng rng(budget.seed);
  const auto order = rng.permutation(count);
  const float eps = budget.epsilon;
  std::vector<float> delta(x.numel(), 0.0f);
  AttackResult r;
  double best = score(x);
  r.queries_used = 1;
  r.loss_trace.push_back(best);
  std::vector<std::pair<std::size_t, float>> q;
  std::vector<float> trial(delta.size());
  for (std::size_t step = 0; step < count && r.queries_used + 2 <= budget.max_queries; ++step) {
    direction(order[step], q);
    double scores[2];
    for (int s = 0; s < 2; ++s) {
      trial = delta;
      const float sgn = s == 0 ? -1.0f : 1.0f;
      for (const auto& [i, w] : q) trial[i] += sgn * eps * w;
      scores[s] = score(clip01(x + Tensor(shape, trial)));
    }
    r.queries_used += 2;
    const int pick = scores[1] > scores[0] ? 1 : 0;
    if (scores[pick] > best) {
      best = scores[pick];
      const float sgn = pick == 0 ? -1.0f : 1.0f;
      for (const auto& [i, w] : q) delta[i] += sgn * eps * w;
      ++r.accepted_steps;
    }
    r.loss_trace.push_back(best);
  }

  // Rounding in non-pixel bases can leave the norm a hair above the bound.
  const double bound = static_cast<double>(r.accepted_steps) * static_cast<double>(eps) * static_cast<double>(eps);
  for (double norm2 = squared_norm(delta); norm2 > bound; norm2 = squared_norm(delta)) {
    const double f = std::sqrt(bound / norm2) * (1.0 - 1e-7);
    for (auto& d : delta) d = static_cast<float>(d * f);
  }

  AttackResult out = finish(x, Tensor(shape, delta));
  out.loss_trace = std::move(r.loss_trace);
  out.queries_used = r.queries_used;
  out.accepted_steps = r.accepted_steps;
  out.success = r.accepted_steps > 0;
  return out;
}

AttackResult simba(const ModelBundle& m, const Tensor& x, const Target& target, const Budget& budget,
                   SimbaBasis basis) {
  return simba(black_box_score(m, target), x, budget, basis);
}

std::vector<Color> default_palette() {
  std::vector<Color> p;
  for (int r = 0; r < 4; ++r)
    for (int g = 0; g < 4; ++g)
      for (int b = 0; b < 2; ++b) p.push_back({r / 3.0f, g / 3.0f, static_cast<float>(b)});
  return p;
}

Tensor nps(const Tensor& image, const std::vector<std::size_t>& pixels, const std::vector<Color>& palette) {
  if (image.rank() != 3 || image.dim(2) != 3) throw DimensionError("nps expects an H x W x 3 image");
  require(!palette.empty(), "nps: empty palette");
  const std::size_t npix = image.dim(0) * image.dim(1);
  const auto xs = image.data();
  double total = 0.0;
  // Per pixel: unit direction away from the nearest color (zero on a color).
  std::vector<std::array<float, 3>> dir(pixels.size());
  for (std::size_t k = 0; k < pixels.size(); ++k) {
    const std::size_t p = pixels[k];
    if (p >= npix) throw IndexError("nps: pixel index out of range");
    const float* v = xs.data() + p * 3;
    double best = std::numeric_limits<double>::infinity();
    std::array<double, 3> diff{};
    for (const auto& c : palette) {
      const double d0 = v[0] - c[0], d1 = v[1] - c[1], d2 = v[2] - c[2];
      const double d = std::sqrt(d0 * d0 + d1 * d1 + d2 * d2);
      if (d < best) best = d, diff = {d0, d1, d2};
    }
    total += best;
    for (int c = 0; c < 3; ++c) dir[k][c] = best > 0 ? static_cast<float>(diff[c] / best) : 0.0f;
  }
  return Tensor::make_result({1}, {static_cast<float>(total)}, {image},
                             [image, pixels, dir](std::span<const float> g) {
                               std::vector<float> dx(image.numel(), 0.0f);
                               for (std::size_t k = 0; k < pixels.size(); ++k)
                                 for (int c = 0; c < 3; ++c) dx[pixels[k] * 3 + c] += g[0] * dir[k][c];
                               image.accumulate_grad(dx);
                             });
}

PatchState rp2(const ModelBundle& detector, const Tensor& x, const Tensor& mask, const Labels& target,
               const TransformSampler& sampler, float lambda, std::size_t iters, const Rp2Options& opts) {
  check_image(x, "rp2");
  if (mask.shape() != x.shape()) throw DimensionError("rp2: mask shape must match the image");
  require(detector.kind() == ModelKind::SignDetector, "rp2 attacks the sign detector");
  require(opts.samples >= 1, "rp2: need at least one transform sample");
  std::vector<std::size_t> pixels;
  const std::size_t C = x.dim(2);
  for (std::size_t p = 0; p < x.dim(0) * x.dim(1); ++p)
    for (std::size_t c = 0; c < C; ++c)
      if (mask[p * C + c] != 0.0f) {
        pixels.push_back(p);
        break;
      }
  require(!pixels.empty(), "rp2: mask is all zero");
  const float w_nps = opts.nps_weight < 0 ? 1.0f / static_cast<float>(pixels.size()) : opts.nps_weight;
  const float eps = opts.epsilon;

  Tensor delta(x.shape());
  for (std::size_t it = 0; it < iters; ++it) {
    Rng rng(Rng::mix(sampler.seed, it));
    Tensor d = delta.clone();
    d.set_requires_grad(true);
    const Tensor patch = mul(mask, d);
    const Tensor xp = clamp(add(x, patch), 0.0f, 1.0f);
    Tensor total = add(scale(l2_norm(patch), lambda), scale(nps(xp, pixels, opts.palette), w_nps));
    const float inv = 1.0f / static_cast<float>(opts.samples);
    for (std::size_t s = 0; s < opts.samples; ++s) {
      const Tensor xi = apply_transform(xp, sampler.sample(rng));
      total = add(total, scale(detector_loss(detector_forward(detector, xi), target), inv));
    }
    backward(total);
    const auto g = d.grad();
    auto dv = delta.mutable_data();
    for (std::size_t i = 0; i < dv.size(); ++i) {
      const float v = mask[i] * (dv[i] - opts.step * sign0(g[i]));
      dv[i] = std::clamp(std::clamp(v, -eps, eps), -x[i], 1.0f - x[i]);
    }
  }
  // Bounding box of the masked pixels.
  float x0 = 1e9f, y0 = 1e9f, x1 = -1e9f, y1 = -1e9f;
  for (std::size_t p : pixels) {
    const float py = static_cast<float>(p / x.dim(1)), px = static_cast<float>(p % x.dim(1));
    x0 = std::min(x0, px), y0 = std::min(y0, py), x1 = std::max(x1, px + 1), y1 = std::max(y1, py + 1);
  }
  return {delta, Box::from_corners(x0, y0, x1, y1), 0};
}

double mean_max_objectness(const ModelBundle& detector, const Tensor& image, const TransformSampler& sampler,
                           std::size_t samples, std::uint64_t seed) {
  require(samples >= 1, "mean_max_objectness: samples must be >= 1");
  Rng rng(seed);
  double total = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const GridPrediction p = detector_forward(detector, apply_transform(image, sampler.sample(rng)));
    double best = 0.0;
    for (std::size_t c = 0; c < kGrid * kGrid; ++c) best = std::max(best, static_cast<double>(p.objectness(c)));
    total += best;
  }
  return total / static_cast<double>(samples);
}

Tensor remap_patch(const Tensor& delta, const Box& from, const Box& to) {
  if (delta.rank() != 3) throw DimensionError("remap_patch expects an H x W x C tensor");
  const std::size_t H = delta.dim(0), W = delta.dim(1), C = delta.dim(2);
  if (from == to) return delta.clone();
  require(from.w > 0 && from.h > 0 && to.w > 0 && to.h > 0, "remap_patch: empty box");
  Tensor out(delta.shape());
  const Tensor inside = box_mask(to, H, W, C);
  const double sx = static_cast<double>(from.w) / to.w, sy = static_cast<double>(from.h) / to.h;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      if (inside.at(y, x, 0) == 0.0f) continue;
      const double fx = from.x0() + (static_cast<double>(x) + 0.5 - to.x0()) * sx - 0.5;
      const double fy = from.y0() + (static_cast<double>(y) + 0.5 - to.y0()) * sy - 0.5;
      const double ffx = std::floor(fx), ffy = std::floor(fy);
      const double ax = fx - ffx, ay = fy - ffy;
      const long ix = static_cast<long>(ffx), iy = static_cast<long>(ffy);
      for (std::size_t c = 0; c < C; ++c) {
        auto get = [&](long yy, long xx) -> double {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) return 0.0;
          return delta.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
        };
        const double v = (1 - ay) * ((1 - ax) * get(iy, ix) + ax * get(iy, ix + 1)) +
                         ay * ((1 - ax) * get(iy + 1, ix) + ax * get(iy + 1, ix + 1));
        out.at(y, x, c) = static_cast<float>(v);
      }
    }
  return out;
}

void prox_linf(std::vector<float>& v, double tau) {
  require(tau >= 0, "prox_linf: tau must be >= 0");
  if (tau == 0) return;
  std::vector<double> a;
  a.reserve(v.size());
  for (float x : v)
    if (x != 0.0f) a.push_back(std::abs(static_cast<double>(x)));
  const double l1 = std::accumulate(a.begin(), a.end(), 0.0);
  if (l1 <= tau) {
    std::fill(v.begin(), v.end(), 0.0f);
    return;
  }
  // Threshold theta with sum(max(|v| - theta, 0)) == tau.
  std::sort(a.begin(), a.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    cum += a[k];
    const double t = (cum - tau) / static_cast<double>(k + 1);
    if (k + 1 == a.size() || a[k + 1] <= t) {
      theta = t;
      break;
    }
  }
  const auto th = static_cast<float>(theta);
  for (auto& x : v) x = std::clamp(x, -th, th);
}

std::vector<CapFrame> cap_run(const ModelBundle& regressor, const std::vector<RoadScene>& frames,
                              const Budget& budget, float lambda) {
  budget.validate();
  require(regressor.kind() == ModelKind::DistanceRegressor, "cap_run attacks the distance regressor");
  require(lambda >= 0, "cap_run: lambda must be >= 0");
  std::vector<CapFrame> out;
  out.reserve(frames.size());
  Tensor delta;
  Box prev{};
  const float eps = budget.epsilon;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const RoadScene& f = frames[t];
    check_image(f.image, "cap_run");
    require(f.lead_box.w > 0 && f.lead_box.h > 0, "cap_run: frame " + std::to_string(t) + " has no lead box");
    const Tensor& x = f.image;
    const Tensor inside = box_mask(f.lead_box);
    delta = t == 0 ? Tensor(x.shape()) : remap_patch(delta, prev, f.lead_box);

    const double clean = regressor_forward(regressor, x).item();
    const Objective pred = [&](const Tensor& in) { return regressor_forward(regressor, in); };
    const std::size_t C = x.dim(2), npix = x.dim(0) * x.dim(1);
    for (std::size_t it = 0; it < budget.max_iters; ++it) {
      const Tensor x_in = clip01(x + delta);
      const auto g = value_and_grad(pred, x_in).second;

      // Attribution |g * x| summed over channels ranks the pixels of the box.
      std::vector<std::pair<double, std::size_t>> score;
      for (std::size_t p = 0; p < npix; ++p) {
        if (inside[p * C] == 0.0f) continue;
        double a = 0.0;
        for (std::size_t c = 0; c < C; ++c) a += std::abs(static_cast<double>(g[p * C + c]) * x_in[p * C + c]);
        score.push_back({a, p});
      }
      std::stable_sort(score.begin(), score.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      const std::size_t keep = (score.size() + 1) / 2;

      std::vector<float> d(delta.data().begin(), delta.data().end());
      for (std::size_t k = 0; k < keep; ++k)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t i = score[k].second * C + c;
          d[i] += budget.alpha * sign0(g[i]);
        }
      prox_linf(d, static_cast<double>(lambda) * budget.alpha);
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] = inside[i] * std::clamp(std::clamp(d[i], -eps, eps), -x[i], 1.0f - x[i]);
      delta = Tensor(x.shape(), std::move(d));
    }

    CapFrame cf;
    cf.patch = {delta, f.lead_box, t};
    cf.result = finish(x, delta);
    const double attacked = regressor_forward(regressor, cf.result.x_adv).item();
    cf.result.loss_trace = {clean, attacked};
    cf.result.success = attacked > clean;
    out.push_back(std::move(cf));
    prev = f.lead_box;
  }
  return out;
}

}  // namespace arwb
