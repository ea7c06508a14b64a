#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "arwb/attacks.hpp"
#include "arwb/models.hpp"
#include "arwb/scenegen.hpp"
#include "arwb/tensor.hpp"

namespace arwb {

// ---- input processing ----

/// Per-channel median of the k x k neighborhood with edge replication.
Tensor median_blur(const Tensor& x, std::size_t k);

/// Quantizes every value to round(v (2^b - 1)) / (2^b - 1).
Tensor bit_depth_reduce(const Tensor& x, int bits);

struct RandomizeOptions {
  std::size_t min_size = 54;
  std::size_t max_size = 64;
  float noise = 1.0f / 255.0f;
};

/// Nearest-neighbor resize of a 64 x 64 image to a random size, zero padding
/// back to 64 x 64 at a random offset, small uniform noise, clip to [0, 1].
Tensor randomize(const Tensor& x, std::uint64_t seed, const RandomizeOptions& opts = {});

// ---- adversarial training ----

enum class InnerAttack { Fgsm, AutoPgd, Gaussian, Patch };

std::string to_string(InnerAttack a);

struct AdvTrainOptions {
  InnerAttack attack = InnerAttack::Fgsm;
  Budget inner;  // epsilon doubles as sigma for the Gaussian inner attack
  /// Road data: confine the inner perturbation to the lead box.
  bool confine_to_box = true;
};

/// Perturbation the inner maximization produces for one training sample.
Tensor inner_attack(const ModelBundle& model, const Sample& s, DatasetKind kind, const AdvTrainOptions& adv,
                    std::uint64_t seed);

/// Min-max training: every step attacks the current model on the task loss,
/// then descends on the attacked inputs. Returns the retrained copy.
ModelBundle adversarial_train(const ModelBundle& model, const DatasetManifest& data, const AdvTrainOptions& adv,
                              const TrainOptions& opts, TrainReport* report = nullptr);

/// Draws `fraction` of every attacked set into train and a disjoint
/// `fraction` into test. One permutation is shared by all sets, so an index
/// never appears on both sides. Throws ContractError when 2 * fraction > 1
/// or the sets differ in size.
std::pair<DatasetManifest, DatasetManifest> build_mixed_set(const std::vector<DatasetManifest>& per_attack,
                                                            double fraction, std::uint64_t seed);

// ---- contrastive learning ----

/// Mean InfoNCE over the first N rows of a 2N x d embedding matrix. Row i's
/// positive is row i + N; its denominator holds every other row.
Tensor infonce_loss(const Tensor& embeddings, float tau);

inline constexpr std::size_t kEmbeddingDim = 32;

struct ProjectionHead {
  Tensor w1, b1, w2, b2;

  static ProjectionHead init(std::uint64_t seed);
  std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
  /// dense, layer norm, relu, dropout (training only), dense.
  Tensor forward(const Tensor& features, Rng* dropout_rng = nullptr, float p = 0.1f) const;
};

/// Random crop-and-resize, brightness jitter and small noise.
Tensor augment_view(const Tensor& image, Rng& rng);

struct ContrastiveOptions {
  float tau = 0.5f;
  std::size_t epochs = 5;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  std::size_t batch_pairs = 16;
  float dropout = 0.1f;
  TrainOptions finetune;  // supervised pass on the labels afterwards
};

struct ContrastiveReport {
  std::vector<double> epoch_loss;
  TrainReport finetune;
  ModelBundle pretrained;  // backbone before fine-tuning
  ProjectionHead head;
};

/// Pretrains the backbone with InfoNCE through a projection head, discards
/// the head, then fine-tunes on the task labels.
ModelBundle contrastive_train(const ModelBundle& model, const DatasetManifest& data, const ContrastiveOptions& opts,
                              ContrastiveReport* report = nullptr);

/// Mean cosine similarity of embeddings of two augmented views of the same
/// image minus that of views of different images, over `pairs` images.
double embedding_similarity_gap(const ModelBundle& model, const ProjectionHead& head, const DatasetManifest& data,
                                std::size_t pairs, std::uint64_t seed);

// ---- diffusion restoration ----

// The trained denoiser is of little use once the accumulated noise level
// sqrt((1 - ab) / ab) passes ~0.5, so the default schedule stops at ab = 0.9.
inline constexpr double kAlphaBarFirst = 0.999;
inline constexpr double kAlphaBarLast = 0.9;
inline constexpr double kDefaultZeta = 0.6;
inline constexpr double kDefaultRhoLambda = 0.003;

struct DiffusionSchedule {
  std::vector<double> alpha_bar;  // index 0 is the least noisy step
  double zeta = kDefaultZeta;
  std::vector<double> rho;

  std::size_t steps() const { return alpha_bar.size(); }
  /// alpha_bar linear from `first` to `last`; rho_t = lambda ab_t / (1 - ab_t).
  static DiffusionSchedule linear(std::size_t steps = 10, double first = kAlphaBarFirst,
                                  double last = kAlphaBarLast, double zeta = kDefaultZeta,
                                  double lambda = kDefaultRhoLambda);
  /// Throws ContractError unless alpha_bar is strictly decreasing in (0, 1],
  /// zeta lies in [0, 1] and every rho is positive.
  void validate() const;
};

/// argmin_x |y - x|^2 + rho |x - x0|^2.
inline double prox_step(double y, double x0, double rho) { return (y + rho * x0) / (1.0 + rho); }
Tensor prox_step(const Tensor& y, const Tensor& x0, double rho);

/// Maps an image carrying Gaussian noise of standard deviation sigma to an
/// estimate of the clean image.
using ImageDenoiser = std::function<Tensor(const Tensor&, double sigma)>;

/// The trained residual network, optionally behind a 3 x 3 median prefilter.
ImageDenoiser make_denoiser(const ModelBundle& net, bool median_prefilter = false);

struct DenoiserOptions {
  std::size_t epochs = 10;
  float lr = 2e-3f;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
  // Training noise levels are log-uniform in [min_sigma, max_sigma]; noisy
  // inputs are not clipped, matching the diffusion iterates.
  float min_sigma = 0.01f;
  float max_sigma = 1.0f;
  bool median_prefilter = false;
};

/// Fits the denoiser to map clean + noise (median filtered when requested)
/// back to clean.
ModelBundle train_denoiser(const std::vector<Tensor>& clean, const DenoiserOptions& opts,
                           TrainReport* report = nullptr);

/// Identity-degradation restoration: from a re-noised start, each step
/// denoises, applies the proximal data step, and re-noises to the next level.
/// The last step returns the proximal estimate, clipped to [0, 1].
Tensor diffpir_restore(const Tensor& y, const DiffusionSchedule& schedule, const ImageDenoiser& denoiser,
                       std::uint64_t seed);

// ---- configuration ----

enum class DefenseKind { None, MedianBlur, BitDepth, Randomize, AdvTrain, Contrastive, DiffPIR };

std::string to_string(DefenseKind k);
DefenseKind defense_from_string(const std::string& s);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::None;
  std::size_t kernel = 3;
  int bits = 3;
  RandomizeOptions randomize;
  AdvTrainOptions adv;
  float tau = 0.5f;
  std::size_t diffusion_steps = 10;
  double zeta = kDefaultZeta;
  double rho_lambda = kDefaultRhoLambda;

  /// Throws ContractError on an even or small kernel, bits outside [1, 8]
  /// or a non-positive tau.
  void validate() const;
  bool is_input_defense() const {
    return kind == DefenseKind::MedianBlur || kind == DefenseKind::BitDepth || kind == DefenseKind::Randomize ||
           kind == DefenseKind::DiffPIR;
  }
  bool is_training_defense() const { return kind == DefenseKind::AdvTrain || kind == DefenseKind::Contrastive; }
};

/// Applies an input-processing defense (identity for None and the training
/// defenses). DiffPIR needs a denoiser.
Tensor apply_input_defense(const DefenseConfig& cfg, const Tensor& x, std::uint64_t seed,
                           const ImageDenoiser& denoiser = {});

}  // namespace arwb
