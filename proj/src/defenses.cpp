#include "arwb/defenses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include <Eigen/Dense>

#include "arwb/errors.hpp"
#include "arwb/grad.hpp"
#include "arwb/ops.hpp"

namespace arwb {

Tensor median_blur(const Tensor& x, std::size_t k) {
  if (x.rank() != 3) throw DimensionError("median_blur expects an H x W x C image");
  const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  require(k % 2 == 1, "median_blur: kernel size must be odd");
  require(k <= std::min(H, W), "median_blur: kernel larger than the image");
  const long r = static_cast<long>(k / 2);
  Tensor out(x.shape());
  std::vector<float> window(k * k);
  auto rep = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1)); };
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx)
      for (std::size_t c = 0; c < C; ++c) {
        std::size_t n = 0;
        for (long dy = -r; dy <= r; ++dy)
          for (long dx = -r; dx <= r; ++dx)
            window[n++] = x.at(rep(static_cast<long>(y) + dy, H), rep(static_cast<long>(xx) + dx, W), c);
        auto mid = window.begin() + static_cast<long>(window.size() / 2);
        std::nth_element(window.begin(), mid, window.end());
        out.at(y, xx, c) = *mid;
      }
  return out;
}

Tensor bit_depth_reduce(const Tensor& x, int bits) {
  require(bits >= 1 && bits <= 8, "bit_depth_reduce: bits must lie in [1, 8]");
  const double levels = std::ldexp(1.0, bits) - 1.0;
  std::vector<float> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(std::round(x[i] * levels) / levels);
  return Tensor(x.shape(), std::move(v));
}

Tensor randomize(const Tensor& x, std::uint64_t seed, const RandomizeOptions& opts) {
  check_image(x, "randomize");
  require(opts.min_size >= 1 && opts.min_size <= opts.max_size && opts.max_size <= kImageSize,
          "randomize: size range must lie in [1, 64]");
  Rng rng(seed);
  const auto s = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(opts.min_size), static_cast<long>(opts.max_size)));
  const auto oy = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(kImageSize - s)));
  const auto ox = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(kImageSize - s)));
  Tensor out(x.shape());
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t xx = 0; xx < s; ++xx) {
      const std::size_t sy = (2 * y + 1) * kImageSize / (2 * s), sx = (2 * xx + 1) * kImageSize / (2 * s);
      for (std::size_t c = 0; c < kChannels; ++c) out.at(oy + y, ox + xx, c) = x.at(sy, sx, c);
    }
  for (auto& v : out.mutable_data())
    v = std::clamp(v + static_cast<float>(rng.uniform(-opts.noise, opts.noise)), 0.0f, 1.0f);
  return out;
}

std::string to_string(InnerAttack a) {
  switch (a) {
    case InnerAttack::Fgsm: return "fgsm";
    case InnerAttack::AutoPgd: return "autopgd";
    case InnerAttack::Gaussian: return "gaussian";
    case InnerAttack::Patch: return "patch";
  }
  return "?";
}

Tensor inner_attack(const ModelBundle& model, const Sample& s, DatasetKind kind, const AdvTrainOptions& adv,
                    std::uint64_t seed) {
  Budget b = adv.inner;
  b.seed = seed;
  const bool road = kind == DatasetKind::Road;
  if (road && adv.confine_to_box) b.region = box_mask(s.labels.box);
  const Objective loss = [&model, l = s.labels](const Tensor& x) { return task_loss(model, x, l, Track::Frozen); };
  switch (adv.attack) {
    case InnerAttack::Fgsm: return fgsm(loss, s.image, b).delta;
    case InnerAttack::AutoPgd: return auto_pgd(loss, s.image, b).delta;
    case InnerAttack::Gaussian: {
      Tensor d = gaussian_noise(s.image, b.epsilon, seed).delta;
      return b.has_region() ? mul(d, b.region) : d;
    }
    case InnerAttack::Patch: {
      if (road) {
        RoadScene f{s.image, s.labels.distance_m, s.labels.box, false};
        return cap_run(model, {f}, b, 0.0f).front().patch.delta;
      }
      if (!s.labels.has_sign) return Tensor(s.image.shape());
      TransformSampler sampler;
      sampler.seed = seed;
      Rp2Options o;
      o.step = b.alpha;
      o.samples = 2;
      o.epsilon = b.epsilon;
      return rp2(model, s.image, sign_mask(s.labels.box), Labels{}, sampler, 0.0f, b.max_iters, o).delta;
    }
  }
  throw ContractError("unknown inner attack");
}

ModelBundle adversarial_train(const ModelBundle& model, const DatasetManifest& data, const AdvTrainOptions& adv,
                              const TrainOptions& opts, TrainReport* report) {
  require(!data.empty(), "adversarial_train: dataset is empty");
  adv.inner.validate();
  ModelBundle m = model.clone();
  const DatasetKind kind = data.kind;
  const InputTransform attack = [&adv, kind](const ModelBundle& cur, const Sample& s, std::uint64_t seed) {
    return clip01(s.image + inner_attack(cur, s, kind, adv, seed));
  };
  TrainReport r = train(m, data, opts, attack);
  if (report) *report = std::move(r);
  return m;
}

std::pair<DatasetManifest, DatasetManifest> build_mixed_set(const std::vector<DatasetManifest>& per_attack,
                                                            double fraction, std::uint64_t seed) {
  require(!per_attack.empty(), "build_mixed_set: no attacked sets");
  require(fraction >= 0 && 2 * fraction <= 1, "build_mixed_set: 2 * fraction must not exceed 1");
  const std::size_t n = per_attack.front().size();
  require(n > 0, "build_mixed_set: empty attacked set");
  for (const auto& s : per_attack) require(s.size() == n, "build_mixed_set: sets differ in size");
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  const auto order = Rng(seed).permutation(n);
  DatasetManifest train_set, test_set;
  train_set.kind = test_set.kind = per_attack.front().kind;
  train_set.split = Split::Train;
  test_set.split = Split::Test;
  train_set.seed = test_set.seed = seed;
  for (const auto& s : per_attack)
    for (std::size_t j = 0; j < k; ++j) {
      train_set.entries.push_back(s.entries[order[j]]);
      test_set.entries.push_back(s.entries[order[k + j]]);
    }
  return {std::move(train_set), std::move(test_set)};
}

Tensor infonce_loss(const Tensor& embeddings, float tau) {
  require(tau > 0 && std::isfinite(tau), "infonce_loss: tau must be > 0");
  if (embeddings.rank() != 2 || embeddings.dim(0) % 2 != 0)
    throw DimensionError("infonce_loss expects a 2N x d matrix, got " + shape_str(embeddings.shape()));
  const std::size_t rows = embeddings.dim(0), d = embeddings.dim(1), n = rows / 2;
  require(n >= 2, "infonce_loss: need N >= 2 pairs");
  const auto e = embeddings.data();
  std::vector<double> u(rows * d), norm(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(e[i * d + j]) * e[i * d + j];
    require(s > 0, "infonce_loss: zero-norm embedding");
    norm[i] = std::sqrt(s);
    for (std::size_t j = 0; j < d; ++j) u[i * d + j] = e[i * d + j] / norm[i];
  }
  auto sim = [&](std::size_t a, std::size_t b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += u[a * d + j] * u[b * d + j];
    return s / tau;
  };
  // dL/dS for every (anchor, other) pair; softmax over k != i minus the positive indicator.
  std::vector<double> gs(n * rows, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(rows);
    double mx = -1e300;
    for (std::size_t k = 0; k < rows; ++k)
      if (k != i) s[k] = sim(i, k), mx = std::max(mx, s[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < rows; ++k)
      if (k != i) z += std::exp(s[k] - mx);
    const double lse = mx + std::log(z);
    loss += lse - s[i + n];
    for (std::size_t k = 0; k < rows; ++k)
      if (k != i) gs[i * rows + k] = (std::exp(s[k] - lse) - (k == i + n ? 1.0 : 0.0)) / static_cast<double>(n);
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result({1}, {static_cast<float>(loss)}, {embeddings},
                             [embeddings, u, norm, gs, n, rows, d, tau](std::span<const float> g) {
                               std::vector<double> du(rows * d, 0.0);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t k = 0; k < rows; ++k) {
                                   const double w = gs[i * rows + k] / tau;
                                   if (w == 0.0) continue;
                                   for (std::size_t j = 0; j < d; ++j) {
                                     du[i * d + j] += w * u[k * d + j];
                                     du[k * d + j] += w * u[i * d + j];
                                   }
                                 }
                               std::vector<float> de(rows * d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) dot += u[r * d + j] * du[r * d + j];
                                 for (std::size_t j = 0; j < d; ++j)
                                   de[r * d + j] =
                                       static_cast<float>(g[0] * (du[r * d + j] - u[r * d + j] * dot) / norm[r]);
                               }
                               embeddings.accumulate_grad(de);
                             });
}

namespace {

constexpr std::size_t kHeadHidden = 64;

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.normal(0.0, sd));
  t.set_requires_grad(true);
  return t;
}

float bilinear(const Tensor& img, double y, double x, std::size_t c) {
  const long H = static_cast<long>(img.dim(0)), W = static_cast<long>(img.dim(1));
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const long y0 = static_cast<long>(y), x0 = static_cast<long>(x);
  const long y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double ay = y - y0, ax = x - x0;
  auto at = [&](long yy, long xx) {
    return static_cast<double>(img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c));
  };
  return static_cast<float>((1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x1)) +
                            ay * ((1 - ax) * at(y1, x0) + ax * at(y1, x1)));
}

}  // namespace

ProjectionHead ProjectionHead::init(std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t in = backbone_feature_count();
  ProjectionHead h;
  h.w1 = he_normal({in, kHeadHidden}, in, rng);
  h.b1 = Tensor::zeros({kHeadHidden}).set_requires_grad(true);
  h.w2 = he_normal({kHeadHidden, kEmbeddingDim}, kHeadHidden, rng);
  h.b2 = Tensor::zeros({kEmbeddingDim}).set_requires_grad(true);
  return h;
}

Tensor ProjectionHead::forward(const Tensor& features, Rng* dropout_rng, float p) const {
  Tensor h = relu(layer_norm(dense(features, w1, b1)));
  if (dropout_rng) h = dropout(h, p, *dropout_rng);
  return dense(h, w2, b2);
}

Tensor augment_view(const Tensor& image, Rng& rng) {
  check_image(image, "augment_view");
  const double n = static_cast<double>(kImageSize);
  const double crop = rng.uniform(0.7 * n, n);
  const double oy = rng.uniform(0.0, n - crop), ox = rng.uniform(0.0, n - crop);
  const float brightness = static_cast<float>(rng.uniform(-0.15, 0.15));
  Tensor out(image.shape());
  const double s = crop / n;
  for (std::size_t y = 0; y < kImageSize; ++y)
    for (std::size_t x = 0; x < kImageSize; ++x)
      for (std::size_t c = 0; c < kChannels; ++c) {
        const float v = bilinear(image, oy + (y + 0.5) * s - 0.5, ox + (x + 0.5) * s - 0.5, c);
        out.at(y, x, c) = std::clamp(v + brightness + static_cast<float>(rng.normal(0.0, 0.02)), 0.0f, 1.0f);
      }
  return out;
}

ModelBundle contrastive_train(const ModelBundle& model, const DatasetManifest& data, const ContrastiveOptions& opts,
                              ContrastiveReport* report) {
  require(!data.empty(), "contrastive_train: dataset is empty");
  require(opts.tau > 0, "contrastive_train: tau must be > 0");
  require(opts.batch_pairs >= 2, "contrastive_train: need at least two pairs per batch");
  ModelBundle m = model.clone();
  ContrastiveReport rep;
  if (opts.epochs == 0) {
    if (report) *report = std::move(rep);
    return m;
  }
  const ProjectionHead head = ProjectionHead::init(Rng::mix(opts.seed, 0x9e37));
  std::vector<Tensor> params;
  for (const auto& l : m.arch())
    if (l.name.rfind("conv", 0) == 0) params.push_back(m.param(l.name));
  for (const auto& p : head.parameters()) params.push_back(p);
  Adam opt(opts.lr);
  Rng rng(opts.seed);
  const std::size_t n = data.size();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double total = 0.0;
    std::size_t batches = 0;
    // A trailing batch with fewer than two pairs has no negatives; skip it.
    for (std::size_t start = 0; start + 2 <= n; start += opts.batch_pairs) {
      const std::size_t end = std::min(n, start + opts.batch_pairs);
      Rng view_rng(Rng::mix(opts.seed, epoch * n + start));
      std::vector<Tensor> first, second;
      for (std::size_t k = start; k < end; ++k) {
        const Tensor& img = data.entries[order[k]].image;
        first.push_back(augment_view(img, view_rng));
        second.push_back(augment_view(img, view_rng));
      }
      std::vector<Tensor> z;
      for (const auto* views : {&first, &second})
        for (const auto& v : *views) z.push_back(head.forward(backbone_features(m, v, Track::Params), &view_rng, opts.dropout));
      const Tensor loss = infonce_loss(stack(z), opts.tau);
      total += loss.item();
      ++batches;
      backward(loss);
      opt.step(params);
    }
    rep.epoch_loss.push_back(batches ? total / static_cast<double>(batches) : 0.0);
  }
  rep.pretrained = m.clone();
  rep.head = head;
  rep.finetune = train(m, data, opts.finetune);
  if (report) *report = std::move(rep);
  return m;
}

double embedding_similarity_gap(const ModelBundle& model, const ProjectionHead& head, const DatasetManifest& data,
                                std::size_t pairs, std::uint64_t seed) {
  require(data.size() >= 2 && pairs >= 2, "embedding_similarity_gap: need at least two images");
  Rng rng(seed);
  const auto order = rng.permutation(data.size());
  pairs = std::min(pairs, data.size());
  std::vector<Eigen::VectorXf> a, b;
  for (std::size_t k = 0; k < pairs; ++k) {
    const Tensor& img = data.entries[order[k]].image;
    for (auto* out : {&a, &b}) {
      const Tensor z = head.forward(backbone_features(model, augment_view(img, rng)));
      Eigen::VectorXf v = Eigen::Map<const Eigen::VectorXf>(z.data().data(), static_cast<Eigen::Index>(z.numel()));
      out->push_back(v.normalized());
    }
  }
  double positive = 0.0, negative = 0.0;
  for (std::size_t k = 0; k < pairs; ++k) {
    positive += a[k].dot(b[k]);
    negative += a[k].dot(b[(k + 1) % pairs]);
  }
  return (positive - negative) / static_cast<double>(pairs);
}

void DiffusionSchedule::validate() const {
  require(!alpha_bar.empty(), "schedule: no steps");
  require(rho.size() == alpha_bar.size(), "schedule: rho and alpha_bar lengths differ");
  for (std::size_t t = 0; t < alpha_bar.size(); ++t) {
    require(alpha_bar[t] > 0 && alpha_bar[t] <= 1, "schedule: alpha_bar must lie in (0, 1]");
    require(t == 0 || alpha_bar[t] < alpha_bar[t - 1], "schedule: alpha_bar must be strictly decreasing");
    require(rho[t] > 0 && std::isfinite(rho[t]), "schedule: rho must be positive");
  }
  require(zeta >= 0 && zeta <= 1, "schedule: zeta must lie in [0, 1]");
}

DiffusionSchedule DiffusionSchedule::linear(std::size_t steps, double first, double last, double zeta,
                                            double lambda) {
  require(steps >= 1, "schedule: need at least one step");
  require(first < 1.0 && last > 0.0 && (steps == 1 || first > last), "schedule: need 1 > first > last > 0");
  DiffusionSchedule s;
  s.zeta = zeta;
  for (std::size_t t = 0; t < steps; ++t) {
    const double a = steps == 1 ? first : first + (last - first) * static_cast<double>(t) / static_cast<double>(steps - 1);
    s.alpha_bar.push_back(a);
    s.rho.push_back(lambda * a / (1.0 - a));
  }
  s.validate();
  return s;
}

Tensor prox_step(const Tensor& y, const Tensor& x0, double rho) {
  if (y.shape() != x0.shape()) throw DimensionError("prox_step: shape mismatch");
  require(rho >= 0, "prox_step: rho must be >= 0");
  std::vector<float> v(y.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(prox_step(y[i], x0[i], rho));
  return Tensor(y.shape(), std::move(v));
}

ImageDenoiser make_denoiser(const ModelBundle& net, bool median_prefilter) {
  require(net.kind() == ModelKind::Denoiser, "make_denoiser needs a denoiser checkpoint");
  return [net, median_prefilter](const Tensor& x, double sigma) {
    return denoiser_forward(net, median_prefilter ? median_blur(x, 3) : x, static_cast<float>(sigma)).detach();
  };
}

ModelBundle train_denoiser(const std::vector<Tensor>& clean, const DenoiserOptions& opts, TrainReport* report) {
  require(!clean.empty(), "train_denoiser: no images");
  ModelBundle m = ModelBundle::init(ModelKind::Denoiser, opts.seed);
  auto params = m.parameters();
  Adam opt(opts.lr);
  Rng rng(opts.seed);
  TrainReport rep;
  const std::size_t n = clean.size();
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    const auto order = rng.permutation(n);
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t end = std::min(n, start + opts.batch_size);
      const float inv = 1.0f / static_cast<float>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        Rng noise(Rng::mix(opts.seed, epoch * n + order[k]));
        const Tensor& x = clean[order[k]];
        const double sigma = std::exp(noise.uniform(std::log(opts.min_sigma), std::log(opts.max_sigma)));
        std::vector<float> v(x.numel());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + static_cast<float>(noise.normal(0.0, sigma));
        Tensor in(x.shape(), std::move(v));
        if (opts.median_prefilter) in = median_blur(in, 3);
        // Weighting by 1 / sigma^2 makes this the noise-prediction loss.
        const Tensor loss = mse(denoiser_forward(m, in, static_cast<float>(sigma), Track::Params), x);
        total += loss.item() / (sigma * sigma);
        backward(scale(loss, inv / static_cast<float>(sigma * sigma)));
      }
      opt.step(params);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(n));
  }
  if (report) *report = std::move(rep);
  return m;
}

Tensor diffpir_restore(const Tensor& y, const DiffusionSchedule& schedule, const ImageDenoiser& denoiser,
                       std::uint64_t seed) {
  schedule.validate();
  require(static_cast<bool>(denoiser), "diffpir_restore: no denoiser");
  Rng rng(seed);
  const auto& ab = schedule.alpha_bar;
  const std::size_t T = ab.size(), n = y.numel();
  auto noise = [&] {
    std::vector<double> e(n);
    for (auto& v : e) v = rng.normal();
    return e;
  };
  std::vector<double> x(n);
  {
    const auto e = noise();
    const double a = ab[T - 1];
    for (std::size_t i = 0; i < n; ++i) x[i] = std::sqrt(a) * y[i] + std::sqrt(1 - a) * e[i];
  }
  const double zeta = schedule.zeta;
  for (std::size_t t = T; t-- > 0;) {
    const double a = ab[t];
    std::vector<float> scaled(n);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = static_cast<float>(x[i] / std::sqrt(a));
    const Tensor x0 = clip01(denoiser(Tensor(y.shape(), std::move(scaled)), std::sqrt((1 - a) / a)));
    if (x0.shape() != y.shape()) throw DimensionError("diffpir_restore: denoiser changed the shape");
    const Tensor xh = prox_step(y, x0, schedule.rho[t]);
    if (t == 0) return clip01(xh);
    const double an = ab[t - 1];
    const auto e = noise();
    for (std::size_t i = 0; i < n; ++i) {
      const double eps_hat = (x[i] - std::sqrt(a) * x0[i]) / std::sqrt(1 - a);
      x[i] = std::sqrt(an) * xh[i] + std::sqrt(1 - an) * (std::sqrt(1 - zeta) * eps_hat + std::sqrt(zeta) * e[i]);
    }
  }
  return clip01(y);  // unreachable: the loop returns at t == 0
}

std::string to_string(DefenseKind k) {
  switch (k) {
    case DefenseKind::None: return "none";
    case DefenseKind::MedianBlur: return "median_blur";
    case DefenseKind::BitDepth: return "bit_depth";
    case DefenseKind::Randomize: return "randomize";
    case DefenseKind::AdvTrain: return "adv_train";
    case DefenseKind::Contrastive: return "contrastive";
    case DefenseKind::DiffPIR: return "diffpir";
  }
  return "?";
}

DefenseKind defense_from_string(const std::string& s) {
  // Case, '_' and '-' are ignored, so "medianblur" and "Median-Blur" both work.
  auto norm = [](const std::string& v) {
    std::string out;
    for (char c : v)
      if (c != '_' && c != '-') out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  for (auto k : {DefenseKind::None, DefenseKind::MedianBlur, DefenseKind::BitDepth, DefenseKind::Randomize,
                 DefenseKind::AdvTrain, DefenseKind::Contrastive, DefenseKind::DiffPIR})
    if (norm(to_string(k)) == norm(s)) return k;
  throw ConfigError("unknown defense '" + s +
                    "' (valid: none, median_blur, bit_depth, randomize, adv_train, contrastive, diffpir)");
}

void DefenseConfig::validate() const {
  require(kernel >= 3 && kernel % 2 == 1, "defense: kernel must be odd and >= 3");
  require(bits >= 1 && bits <= 8, "defense: bits must lie in [1, 8]");
  require(tau > 0, "defense: tau must be > 0");
  require(diffusion_steps >= 1, "defense: diffusion_steps must be >= 1");
  require(zeta >= 0 && zeta <= 1, "defense: zeta must lie in [0, 1]");
  require(rho_lambda > 0, "defense: rho_lambda must be > 0");
}

Tensor apply_input_defense(const DefenseConfig& cfg, const Tensor& x, std::uint64_t seed,
                           const ImageDenoiser& denoiser) {
  switch (cfg.kind) {
    case DefenseKind::MedianBlur: return median_blur(x, cfg.kernel);
    case DefenseKind::BitDepth: return bit_depth_reduce(x, cfg.bits);
    case DefenseKind::Randomize: return randomize(x, seed, cfg.randomize);
    case DefenseKind::DiffPIR:
      return diffpir_restore(
          x, DiffusionSchedule::linear(cfg.diffusion_steps, kAlphaBarFirst, kAlphaBarLast, cfg.zeta, cfg.rho_lambda), denoiser, seed);
    case DefenseKind::None:
    case DefenseKind::AdvTrain:
    case DefenseKind::Contrastive: return x;
  }
  return x;
}

}  // namespace arwb
