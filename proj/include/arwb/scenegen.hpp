#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "arwb/image.hpp"
#include "arwb/tensor.hpp"

namespace arwb {

/// Pinhole constant: apparent lead-vehicle width in pixels is K / distance.
inline constexpr double kCameraK = 800.0;
inline constexpr float kMaxLeadWidth = 56.0f;
inline constexpr double kMinDistance = 5.0;
inline constexpr double kMaxDistance = 80.0;

struct SignScene {
  Tensor image;
  Box gt_box;
  bool has_sign = false;
};

struct RoadScene {
  Tensor image;
  float distance_m = 0.0f;
  Box lead_box;
  bool width_clamped = false;  // set when K / distance exceeded kMaxLeadWidth
};

struct Labels {
  bool has_sign = false;
  Box box;  // sign box or lead-vehicle box
  float distance_m = 0.0f;
};

struct Sample {
  Tensor image;
  Labels labels;
  std::string path;  // empty for in-memory scenes
};

enum class DatasetKind { Sign, Road };
enum class Split { Train, Test };

struct DatasetManifest {
  DatasetKind kind = DatasetKind::Sign;
  Split split = Split::Train;
  std::uint64_t seed = 0;
  std::vector<Sample> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

std::string to_string(DatasetKind k);
std::string to_string(Split s);

/// Sign scene with the given seed. A scene carries a white-rimmed red
/// octagon when `with_sign` is set; clutter rectangles and a smooth
/// background are always present.
SignScene render_sign_scene(std::uint64_t seed, bool with_sign);

/// Number of positive scenes among `n`: round-half-up of 0.7 n.
std::size_t positive_count(std::size_t n);

/// `n` sign scenes; positive_count(n) of them carry a sign at
/// seed-permuted indices.
DatasetManifest generate_sign_dataset(std::size_t n, std::uint64_t seed);

/// Lead width in pixels before clamping: round(K / d).
int lead_width_px(double distance_m);

RoadScene render_road_scene(double distance_m, std::uint64_t seed);

/// Frames whose lead distance interpolates linearly from d0 to d1. Scene
/// styling (colors, lateral offset) is fixed per sequence.
std::vector<RoadScene> generate_road_sequence(std::size_t frames, double d0, double d1,
                                              std::uint64_t seed);

/// `n` independent road scenes with distances uniform over [5, 80].
DatasetManifest generate_road_dataset(std::size_t n, std::uint64_t seed);

/// `count` sequences; each starts at a uniform distance in [5, 80] and moves
/// by up to 10 m over its frames.
std::vector<std::vector<RoadScene>> generate_road_sequences(std::size_t count, std::size_t frames,
                                                             std::uint64_t seed);

DatasetManifest to_manifest(const std::vector<RoadScene>& frames, std::uint64_t seed);
/// Inverse of to_manifest, in entry order (width_clamped is not stored).
std::vector<RoadScene> to_road_scenes(const DatasetManifest& m);

/// Region of a sign scene covered by the octagon inscribed in `box`.
Tensor sign_mask(const Box& box);

/// Seeded disjoint split; the first returned manifest is the train part.
std::pair<DatasetManifest, DatasetManifest> train_test_split(const DatasetManifest& m,
                                                             double test_fraction,
                                                             std::uint64_t seed);

// P6 portable pixmap, maxval 255.
std::string encode_ppm(const Tensor& image, const std::string& comment = "");
Tensor decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const Tensor& image, const std::string& comment = "");
Tensor read_ppm(const std::filesystem::path& path);

/// Writes every entry as a PPM plus manifest.csv. `header` becomes the
/// leading comment line of each file.
void write_dataset(const std::filesystem::path& dir, const DatasetManifest& m,
                   const std::string& header);
DatasetManifest load_dataset(const std::filesystem::path& dir);

}  // namespace arwb
