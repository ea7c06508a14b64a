#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "arwb/attacks.hpp"
#include "arwb/defenses.hpp"
#include "arwb/image.hpp"
#include "arwb/models.hpp"
#include "arwb/scenegen.hpp"

namespace arwb {

inline constexpr const char* kVersion = "0.1.0";

// ---- detection metrics ----

struct MatchRecord {
  std::size_t image = 0;
  float score = 0.0f;
  bool true_positive = false;
};

struct DetectionMetrics {
  double map50 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::vector<MatchRecord> matches;  // every detection in ranking order
  std::size_t num_gt = 0;
};

using DetectionsPerImage = std::vector<std::vector<Detection>>;
using BoxesPerImage = std::vector<std::vector<Box>>;

/// Ranks all detections by descending score (stable) and matches each to the
/// unmatched ground truth of its image with the highest IoU, if that IoU is
/// at least `iou_threshold`.
std::vector<MatchRecord> match_detections(const DetectionsPerImage& dets, const BoxesPerImage& gts,
                                          double iou_threshold = 0.5);

/// All-point interpolated area under the precision-recall curve at IoU 0.5.
/// With no ground truth at all, AP is 1 when there are no detections and 0
/// otherwise.
double average_precision_50(const DetectionsPerImage& dets, const BoxesPerImage& gts);

/// Precision and recall of the detections scoring at least `conf`.
std::pair<double, double> precision_recall(const DetectionsPerImage& dets, const BoxesPerImage& gts,
                                           double conf = 0.25);

DetectionMetrics evaluate_detections(const DetectionsPerImage& dets, const BoxesPerImage& gts, double conf = 0.25);

// ---- range-binned regression error ----

struct RangeBinnedError {
  static constexpr std::array<double, 5> kEdges{0, 20, 40, 60, 80};
  std::array<double, 4> sum{};
  std::array<double, 4> abs_sum{};
  std::array<std::size_t, 4> count{};

  /// Bin of a clean prediction; values outside [0, 80] go to the edge bins.
  static std::size_t bin_of(double clean);
  void add(double clean, double cond);
  double mean(std::size_t bin) const { return count[bin] ? sum[bin] / static_cast<double>(count[bin]) : 0.0; }
  double mean_abs(std::size_t bin) const {
    return count[bin] ? abs_sum[bin] / static_cast<double>(count[bin]) : 0.0;
  }
  std::size_t total() const { return count[0] + count[1] + count[2] + count[3]; }
};

/// Error per frame is cond - clean, binned by the clean prediction.
RangeBinnedError binned_signed_error(const std::vector<double>& clean_preds, const std::vector<double>& cond_preds);

// ---- benchmark matrix ----

enum class AttackKind { None, Gaussian, Fgsm, AutoPgd, Simba, Patch };

std::string to_string(AttackKind k);
AttackKind attack_from_string(const std::string& s);

/// One attack column. Patch is RP2 on the detector and CAP on the regressor.
struct AttackConfig {
  AttackKind kind = AttackKind::None;
  Budget budget;        // epsilon, alpha, iters, queries and seed
  float sigma = 8.0f / 255.0f;  // Gaussian
  float lambda = 0.0f;          // RP2 norm weight
  float cap_lambda = 0.0f;      // CAP shrinkage
  SimbaBasis basis = SimbaBasis::Dct;
  float simba_epsilon = 0.2f;   // per-query step; replaces budget.epsilon for SimBA
  float patch_epsilon = 1.0f;   // RP2 bound inside the sign mask
  std::size_t cap_steps = 6;    // CAP steps per frame
  std::size_t rp2_iters = 30;
  float rp2_step = 4.0f / 255.0f;
};

struct ModelSet {
  ModelBundle detector;
  ModelBundle regressor;
};

struct BenchModels {
  ModelSet base;
  /// Checkpoints swapped in by training defenses.
  std::map<DefenseKind, ModelSet> trained;
  std::optional<ModelBundle> denoiser;
};

struct BenchData {
  DatasetManifest signs;                          // detector test scenes
  std::vector<std::vector<RoadScene>> sequences;  // regressor test frames
};

struct ReportRow {
  AttackKind attack = AttackKind::None;
  DefenseKind defense = DefenseKind::None;
  RangeBinnedError error;
  DetectionMetrics detection;
  double seconds = 0.0;  // not part of the deterministic report
  std::string cell_id() const;
};

struct CellFailure {
  std::string cell_id;
  std::string message;
};

struct ReportTable {
  std::vector<ReportRow> rows;
  std::vector<CellFailure> failures;  // cells that threw; they have no row
  std::uint64_t seed = 0;
  std::string config_hash;
  std::map<std::string, std::string> checksums;  // model name -> hex checksum
  std::string version = kVersion;
};

struct BenchOptions {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  float conf = 0.25f;
  float nms_iou = 0.45f;
  std::string config_hash;
  /// When set, a manifest per cell is written to runs/<cell-id>/manifest.txt.
  std::optional<std::filesystem::path> run_dir;
};

/// Runs every (attack, defense) cell: attack the checkpoint in effect for the
/// defense, apply the input defense, then score both models. Cells are
/// ordered by attack, then defense, in the given order. Throws ConfigError,
/// before any computation, when a training defense has no checkpoint or
/// DiffPIR has no denoiser. A cell that throws later is recorded in
/// `failures` and the remaining cells still run.
ReportTable run_benchmark_matrix(const BenchModels& models, const std::vector<AttackConfig>& attacks,
                                 const std::vector<DefenseConfig>& defenses, const BenchData& data,
                                 const BenchOptions& opts);

enum class ReportFormat { Csv, Markdown, RawCsv };

/// Seven metric columns: four range bins, then mAP@50, precision and recall.
/// Csv and Markdown round to two decimals; RawCsv keeps full precision.
std::string emit_report(const ReportTable& table, ReportFormat format);

/// Parses a RawCsv report back into rows and header metadata.
ReportTable parse_raw_report(const std::string& text);

/// One CSV per metric: rows are attacks, columns are defenses.
std::map<std::string, std::string> emit_plot_data(const ReportTable& table);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Exceptions are
/// rethrown (the first by index) after all workers finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

}  // namespace arwb
