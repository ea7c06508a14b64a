#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "arwb/errors.hpp"
#include "arwb/image.hpp"
#include "arwb/scenegen.hpp"
#include "arwb/tensor.hpp"

namespace arwb {

enum class ModelKind : std::uint8_t { SignDetector = 1, DistanceRegressor = 2, Denoiser = 3 };

std::string to_string(ModelKind k);

struct LayerSpec {
  std::string name;
  Shape shape;
};

/// Layer list of a model kind; every entry names one parameter tensor.
std::vector<LayerSpec> architecture(ModelKind kind);

/// Thrown by load() when a checkpoint holds a different model kind.
struct KindMismatch : FormatError {
  using FormatError::FormatError;
};

/// Parameters plus architecture of one of the workbench models.
class ModelBundle {
 public:
  ModelBundle() = default;

  /// Zero-initialized parameters.
  static ModelBundle zeros(ModelKind kind);
  /// He-normal weights and zero biases drawn from `seed`.
  static ModelBundle init(ModelKind kind, std::uint64_t seed);

  ModelKind kind() const { return kind_; }
  const std::vector<LayerSpec>& arch() const { return arch_; }

  const Tensor& param(const std::string& name) const;
  Tensor& param(const std::string& name);
  /// Parameter handles in architecture order.
  std::vector<Tensor> parameters() const;

  /// Deep copy: the returned bundle owns independent storage.
  ModelBundle clone() const;
  bool bitwise_equal(const ModelBundle& other) const;
  std::uint64_t checksum() const;

 private:
  ModelKind kind_ = ModelKind::SignDetector;
  std::vector<LayerSpec> arch_;
  std::map<std::string, Tensor> params_;
};

/// Whether a forward pass records parameter gradients. Frozen forwards use
/// detached parameter views and never write to the bundle.
enum class Track { Frozen, Params };

/// Shared three-layer convolutional feature extractor (flattened output).
Tensor backbone_features(const ModelBundle& m, const Tensor& image, Track track = Track::Frozen);
std::size_t backbone_feature_count();

inline constexpr std::size_t kGrid = 4;
inline constexpr std::size_t kCellValues = 5;
inline constexpr float kCellSize = static_cast<float>(kImageSize) / kGrid;

/// Raw S x S x 5 head output. One dense layer, shared by all cells, maps each
/// cell's local feature window to its five values: objectness logit, then
/// cell-relative center offsets and image-relative width/height.
struct GridPrediction {
  Tensor raw;

  float objectness_logit(std::size_t cell) const { return raw[cell * kCellValues]; }
  float objectness(std::size_t cell) const;
  /// Box of a cell clamped to the image bounds.
  Box box(std::size_t cell) const;
};

struct Detection {
  Box box;
  float score = 0.0f;
};

GridPrediction detector_forward(const ModelBundle& m, const Tensor& image, Track track = Track::Frozen);

/// Sorted by descending score; greedy non-maximum suppression drops any box
/// whose IoU with a kept box exceeds `nms_iou`.
std::vector<Detection> decode_detections(const GridPrediction& pred, float conf_threshold, float nms_iou);

/// Predicted lead distance in meters (scalar tensor).
Tensor regressor_forward(const ModelBundle& m, const Tensor& image, Track track = Track::Frozen);

/// Noise-predicting denoiser: image - sigma * r(image, sigma), with sigma fed
/// as a fourth input channel, so sigma = 0 is the identity. Gradients reach the image
/// only through the skip connection.
Tensor denoiser_forward(const ModelBundle& m, const Tensor& image, float sigma, Track track = Track::Frozen);

/// Grid cell containing a point.
std::size_t cell_of(float cx, float cy);

/// Objectness BCE over all cells plus squared box error on the positive cell.
Tensor detector_loss(const GridPrediction& pred, const Labels& labels);
/// Squared error between normalized distances (d / 80).
Tensor regressor_loss(const Tensor& distance_m, float target_m);
/// Task loss of a sign or road sample for the bundle's kind.
Tensor task_loss(const ModelBundle& m, const Tensor& image, const Labels& labels, Track track);

struct TrainOptions {
  std::size_t epochs = 10;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
  bool augment = true;  // label-preserving flips and shifts
};

/// Random horizontal/vertical flips and an integer shift that keeps the
/// labelled box inside the frame. Road scenes only receive horizontal flips.
Sample augment_sample(const Sample& s, DatasetKind kind, std::uint64_t seed);

struct TrainReport {
  std::vector<double> epoch_loss;  // mean loss of each epoch
};

/// Replaces the clean input of a training sample. Receives the model as it is
/// before the step, the sample, and a per-(epoch, sample) seed.
using InputTransform = std::function<Tensor(const ModelBundle&, const Sample&, std::uint64_t seed)>;

/// Minibatch Adam training on the kind's task loss. Deterministic per seed.
TrainReport train(ModelBundle& model, const DatasetManifest& data, const TrainOptions& opts,
                  const InputTransform& transform = {});
TrainReport train(ModelBundle& model, const DatasetManifest& data, std::size_t epochs, float lr,
                  std::uint64_t seed);

/// Plain gradient step on every parameter (see arwb::sgd_step).
void sgd_step(ModelBundle& model, float lr);

// Checkpoint: "ARWB1", kind byte, u32 tensor count, then per tensor the name
// length, name bytes, rank, u32 dims and f32 payload, all little-endian.
std::string serialize(const ModelBundle& m);
ModelBundle deserialize(const std::string& bytes);
void save(const ModelBundle& m, const std::filesystem::path& path);
ModelBundle load(const std::filesystem::path& path);
/// Throws KindMismatch when the checkpoint holds another kind.
ModelBundle load(const std::filesystem::path& path, ModelKind expected);

}  // namespace arwb
