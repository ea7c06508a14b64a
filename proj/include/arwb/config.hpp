#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "arwb/defenses.hpp"
#include "arwb/evalkit.hpp"

namespace arwb {

/// Benchmark run description. The text form is INI-like:
///
///   seed = 7
///   [data]
///   sign_test = 200
///
/// Keys before the first section belong to the top level (only `seed`).
/// Every key has a default; unknown sections or keys are rejected.
struct RunConfig {
  std::uint64_t seed = 7;

  // [data]
  std::size_t sign_train = 500;
  std::size_t sign_test = 200;
  std::size_t road_train = 2000;
  std::size_t road_sequences = 10;
  std::size_t road_frames = 20;

  // [model]
  std::size_t detector_epochs = 30;
  std::size_t regressor_epochs = 20;
  float lr = 0.002f;
  std::size_t batch_size = 16;
  std::size_t advtrain_epochs = 30;
  std::size_t contrastive_epochs = 5;
  std::size_t finetune_epochs = 30;
  std::size_t denoiser_epochs = 10;
  std::size_t denoiser_images = 600;
  // Optional checkpoints (relative to the work directory). Empty means the
  // model is trained from the settings above.
  std::string detector;
  std::string regressor;
  std::string denoiser;

  // [attack]
  std::vector<AttackKind> attacks{AttackKind::None,    AttackKind::Gaussian, AttackKind::Fgsm,
                                  AttackKind::AutoPgd, AttackKind::Simba,    AttackKind::Patch};
  float epsilon = 8.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  std::size_t iters = 10;
  std::size_t queries = 500;
  float sigma = 8.0f / 255.0f;
  SimbaBasis basis = SimbaBasis::Dct;
  float simba_epsilon = 0.2f;
  std::size_t cap_steps = 6;
  float cap_lambda = 0.0f;
  std::size_t rp2_iters = 30;
  float rp2_step = 4.0f / 255.0f;
  float rp2_lambda = 0.0f;
  float patch_epsilon = 1.0f;

  // [defense]
  std::vector<DefenseKind> defenses{DefenseKind::None,     DefenseKind::MedianBlur, DefenseKind::BitDepth,
                                    DefenseKind::Randomize, DefenseKind::AdvTrain,   DefenseKind::Contrastive,
                                    DefenseKind::DiffPIR};
  std::size_t kernel = 3;
  int bits = 3;
  InnerAttack inner = InnerAttack::Fgsm;
  float adv_epsilon = 8.0f / 255.0f;
  float tau = 0.5f;
  std::size_t diffusion_steps = 10;
  double zeta = kDefaultZeta;
  double rho_lambda = kDefaultRhoLambda;

  // [bench]
  std::size_t jobs = 0;  // 0: hardware concurrency
  float conf = 0.25f;
  float nms_iou = 0.45f;
  std::string out = "bench";

  /// Every key in canonical order, one `section.key = value` line each.
  std::string canonical() const;
  /// Hex FNV-1a of canonical(); comments and layout do not affect it.
  std::string hash() const;

  std::vector<AttackConfig> attack_configs() const;
  std::vector<DefenseConfig> defense_configs() const;
};

/// Throws ConfigError naming the offending line or key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Applies ARW_SEED when it is set; throws ConfigError when it is not an
/// unsigned integer.
void apply_env_overrides(RunConfig& cfg);

InnerAttack inner_attack_from_string(const std::string& s);

}  // namespace arwb
