#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <variant>
#include <vector>

#include "arwb/image.hpp"
#include "arwb/models.hpp"
#include "arwb/ops.hpp"
#include "arwb/scenegen.hpp"
#include "arwb/tensor.hpp"

namespace arwb {

enum class Norm { Linf, L2 };

struct Budget {
  Norm norm = Norm::Linf;
  float epsilon = 8.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  std::size_t max_iters = 10;
  std::size_t max_queries = 500;
  std::uint64_t seed = 0;
  /// Optional 0/1 image-shaped mask; when set, perturbations stay inside it.
  Tensor region;

  bool has_region() const { return !region.empty(); }
  /// Throws ContractError on a negative or non-finite epsilon, a
  /// non-positive alpha or zero iterations.
  void validate() const;
};

struct AttackResult {
  Tensor x_adv;  // clip(x + delta, 0, 1)
  Tensor delta;
  std::vector<double> loss_trace;
  std::size_t queries_used = 0;
  std::size_t accepted_steps = 0;  // SimBA only
  bool success = false;
};

/// Perturbation confined to a box, as carried from frame to frame.
struct PatchState {
  Tensor delta;
  Box bbox;
  std::size_t frame_index = 0;
};

inline Tensor apply_patch(const Tensor& x, const PatchState& p) { return clip01(x + p.delta); }

struct SampledTransform {
  Affine affine;
  float brightness = 0.0f;
};

struct TransformSampler {
  double max_rotation_deg = 15.0;
  double min_scale = 0.8;
  double max_scale = 1.2;
  double max_translation_px = 4.0;
  double max_brightness = 0.1;
  std::uint64_t seed = 0;

  SampledTransform sample(Rng& rng) const;
  bool in_range(const SampledTransform& t) const;
};

/// Warp then brightness shift, clipped to [0, 1]; differentiable.
Tensor apply_transform(const Tensor& image, const SampledTransform& t);

/// Differentiable scalar an attacker maximizes.
using Objective = std::function<Tensor(const Tensor& x)>;
/// Black-box score an attacker maximizes; counts as one query per call.
using ScoreFn = std::function<double(const Tensor& x)>;

/// Ground-truth labels for the detector, or the reference (clean) distance
/// prediction for the regressor.
using Target = std::variant<Labels, float>;

/// Detector: the task loss against the labels. Regressor: predicted minus
/// reference distance, so maximizing it pushes the lead vehicle further away.
Objective attack_objective(const ModelBundle& m, const Target& target);
/// Detector: minus the probability of the true outcome (the largest
/// objectness when a sign is present, one minus it otherwise). Regressor:
/// |prediction - reference|.
ScoreFn black_box_score(const ModelBundle& m, const Target& target);

/// Value and input gradient of an objective at x.
std::pair<double, std::vector<float>> value_and_grad(const Objective& f, const Tensor& x);

AttackResult gaussian_noise(const Tensor& x, float sigma, std::uint64_t seed);

AttackResult fgsm(const Objective& f, const Tensor& x, const Budget& budget);
AttackResult fgsm(const ModelBundle& m, const Tensor& x, const Target& target, const Budget& budget);

/// Signed-gradient ascent projected onto the epsilon box. The step size is
/// halved, and the iterate reset to the best point, whenever the best loss did
/// not improve over a window of max(5, iters / 10) steps. Returns the best
/// iterate; loss_trace holds the best-so-far loss after every step.
AttackResult auto_pgd(const Objective& f, const Tensor& x, const Budget& budget);
AttackResult auto_pgd(const ModelBundle& m, const Tensor& x, const Target& target,
                      const Budget& budget);

enum class SimbaBasis { Pixel, Dct };

/// Black-box coordinate search over an orthonormal basis drawn without
/// replacement. Each step queries both signs and keeps the better one if it
/// raises the score; the first query scores the clean input.
AttackResult simba(const ScoreFn& score, const Tensor& x, const Budget& budget, SimbaBasis basis);
AttackResult simba(const ModelBundle& m, const Tensor& x, const Target& target,
                   const Budget& budget, SimbaBasis basis);

using Color = std::array<float, 3>;

/// 32 printable colors: R and G on four levels, B on two.
std::vector<Color> default_palette();

/// Sum over the listed pixels of the distance to the nearest palette color.
/// `pixels` are flat pixel indices into an H x W x 3 image.
Tensor nps(const Tensor& image, const std::vector<std::size_t>& pixels,
           const std::vector<Color>& palette);

struct Rp2Options {
  float step = 2.0f / 255.0f;
  std::size_t samples = 8;  // transforms per iteration
  std::vector<Color> palette = default_palette();
  float nps_weight = -1.0f;  // negative: 1 / (masked pixel count)
  float epsilon = 1.0f;      // optional L-inf cap on the patch
};

/// Masked patch optimized to push the detector towards `target` (use
/// has_sign = false to hide a sign) over random viewpoint transforms.
/// Throws ContractError on an all-zero mask.
PatchState rp2(const ModelBundle& detector, const Tensor& x, const Tensor& mask, const Labels& target,
               const TransformSampler& sampler, float lambda, std::size_t iters,
               const Rp2Options& opts = {});

/// Mean over sampled transforms of the largest cell objectness.
double mean_max_objectness(const ModelBundle& detector, const Tensor& image,
                           const TransformSampler& sampler, std::size_t samples, std::uint64_t seed);

/// Moves a box-confined perturbation onto another box by bilinear resampling.
Tensor remap_patch(const Tensor& delta, const Box& from, const Box& to);

/// L-inf proximal step: shrinks entries towards zero so that the removed
/// mass equals tau in L1 (everything is removed when |v|_1 <= tau).
void prox_linf(std::vector<float>& v, double tau);

struct CapFrame {
  PatchState patch;
  AttackResult result;  // loss_trace = {clean prediction, attacked prediction}
};

/// Runtime patch over a frame sequence. Each frame takes budget.max_iters
/// rounds of: a signed step of size alpha on the most sensitive half of the
/// lead box, a lambda-weighted L-inf shrinkage and the epsilon clip. The
/// patch is carried into the next frame's box. Throws ContractError on a frame without a box.
std::vector<CapFrame> cap_run(const ModelBundle& regressor, const std::vector<RoadScene>& frames,
                              const Budget& budget, float lambda);

}  // namespace arwb
