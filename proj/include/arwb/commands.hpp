#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "arwb/config.hpp"
#include "arwb/evalkit.hpp"

namespace arwb {

// Implementations of the command-line subcommands. Relative paths resolve
// against the work directory; every text output starts with a header comment
// carrying the artifact version, a hash of the request and the seed.

struct CommandContext {
  std::filesystem::path workdir = ".";
  std::size_t jobs = 1;
  std::ostream* log = nullptr;  // progress lines; null for silence

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : workdir / p; }
};

/// "arwb <version> config=<hash> seed=<seed>".
std::string output_header(const std::string& config_hash, std::uint64_t seed);

struct GenArgs {
  std::string kind = "sign";  // sign | road
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string out;  // default data/<kind>
};
void cmd_gen(const CommandContext& ctx, const GenArgs& a);

struct TrainArgs {
  std::string model = "detector";  // detector | regressor | denoiser
  std::string data;
  std::size_t epochs = 30;
  float lr = 0.002f;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  std::string out;  // default models/<model>.arwb
};
void cmd_train(const CommandContext& ctx, const TrainArgs& a);

struct AdvTrainArgs {
  std::string model = "detector";
  std::string data;
  std::string inner = "fgsm";  // fgsm | autopgd | gaussian | patch | mixed
  float eps = 8.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  std::size_t iters = 10;
  std::size_t epochs = 30;
  float lr = 0.002f;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
  double fraction = 0.25;  // mixed only
  std::string base;        // mixed only: checkpoint to attack; trained when empty
  std::string out;         // default models/<model>_adv_<inner>.arwb
};
void cmd_advtrain(const CommandContext& ctx, const AdvTrainArgs& a);

struct ContrastiveArgs {
  std::string model = "detector";
  std::string data;
  float tau = 0.5f;
  std::size_t epochs = 5;
  std::size_t finetune_epochs = 30;
  float lr = 1e-3f;
  float finetune_lr = 0.002f;
  std::uint64_t seed = 0;
  std::string out;  // default models/<model>_contrastive.arwb
};
void cmd_contrastive(const CommandContext& ctx, const ContrastiveArgs& a);

struct AttackArgs {
  std::string name;  // none | gaussian | fgsm | autopgd | simba | patch
  std::string model;
  std::string data;
  float eps = 8.0f / 255.0f;
  float alpha = 2.0f / 255.0f;
  std::size_t iters = 10;
  std::size_t queries = 500;
  float sigma = 8.0f / 255.0f;
  std::string basis = "dct";
  float lambda = 0.0f;
  std::size_t rp2_iters = 30;
  std::uint64_t seed = 0;
  std::string out;  // default out/<name>
};
/// Writes the attacked dataset and metrics.csv with a per-image norm audit.
void cmd_attack(const CommandContext& ctx, const AttackArgs& a);

struct DefendArgs {
  std::string name;  // none | median_blur | bit_depth | randomize | diffpir
  std::string data;
  std::string model;     // optional: score the processed set
  std::string denoiser;  // diffpir only
  std::size_t kernel = 3;
  int bits = 3;
  std::size_t steps = 10;
  double zeta = kDefaultZeta;
  double lambda = kDefaultRhoLambda;
  std::uint64_t seed = 0;
  std::string out;  // default out/<name>
};
void cmd_defend(const CommandContext& ctx, const DefendArgs& a);

struct RestoreArgs {
  std::string data;
  std::string denoiser;
  std::string clean;  // optional reference set for PSNR
  std::size_t steps = 10;
  double zeta = kDefaultZeta;
  double lambda = kDefaultRhoLambda;
  std::uint64_t seed = 0;
  std::string out = "out/restore";
};
void cmd_restore(const CommandContext& ctx, const RestoreArgs& a);

/// Runs the whole matrix described by the config. Writes report.csv,
/// report.md, report.raw.csv, plot_<metric>.csv, runs/<cell>/manifest.txt and
/// failures.json under the config's output directory. Returns the number of
/// failed cells.
std::size_t cmd_bench(const CommandContext& ctx, const RunConfig& cfg);

struct ReportArgs {
  std::string raw;             // report.raw.csv
  std::string format = "md";   // csv | md
  std::string out;             // stdout when empty
};
void cmd_report(const CommandContext& ctx, const ReportArgs& a, std::ostream& stdout_stream);

// ---- building blocks shared with the benchmark ----

/// Trains a fresh detector or regressor (init seed derived from `seed`).
ModelBundle train_task_model(ModelKind kind, const DatasetManifest& data, std::size_t epochs, float lr,
                             std::size_t batch, std::uint64_t seed, TrainReport* report = nullptr);

/// Every sample attacked by `kind` against a fixed model.
DatasetManifest attack_dataset(const ModelBundle& model, const DatasetManifest& data, InnerAttack kind,
                               const AdvTrainOptions& adv, std::uint64_t seed);

}  // namespace arwb
