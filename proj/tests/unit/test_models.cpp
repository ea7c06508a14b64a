#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "arwb/errors.hpp"
#include "arwb/grad.hpp"
#include "arwb/models.hpp"
#include "arwb/ops.hpp"
#include "arwb/rng.hpp"

using namespace arwb;

namespace {

Tensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(image_shape());
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform());
  return t;
}

GridPrediction grid_with(const std::vector<std::pair<std::size_t, float>>& cells,
                         const std::vector<Box>& boxes) {
  // Builds raw values whose decoded boxes equal `boxes` for the listed cells.
  GridPrediction p;
  p.raw = Tensor({kGrid, kGrid, kCellValues}, 0.0f);
  for (std::size_t c = 0; c < kGrid * kGrid; ++c) p.raw[c * kCellValues] = -20.0f;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto [cell, score] = cells[i];
    const Box& b = boxes[i];
    std::size_t gy = cell / kGrid, gx = cell % kGrid;
    p.raw[cell * kCellValues] = std::log(score / (1 - score));
    p.raw[cell * kCellValues + 1] = b.cx / kCellSize - gx;
    p.raw[cell * kCellValues + 2] = b.cy / kCellSize - gy;
    p.raw[cell * kCellValues + 3] = b.w / kImageSize;
    p.raw[cell * kCellValues + 4] = b.h / kImageSize;
  }
  return p;
}

// Exhaustive greedy suppression over detections sorted by score.
std::vector<Detection> nms_oracle(std::vector<Detection> d, float conf, float thr) {
  std::erase_if(d, [&](const Detection& x) { return x.score < conf; });
  std::stable_sort(d.begin(), d.end(), [](auto& a, auto& b) { return a.score > b.score; });
  std::vector<bool> dead(d.size(), false);
  std::vector<Detection> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (dead[i]) continue;
    out.push_back(d[i]);
    for (std::size_t j = i + 1; j < d.size(); ++j)
      if (iou(d[i].box, d[j].box) > thr) dead[j] = true;
  }
  return out;
}

}  // namespace

TEST_CASE("architecture resolves to parameters") {
  for (ModelKind k : {ModelKind::SignDetector, ModelKind::DistanceRegressor, ModelKind::Denoiser}) {
    ModelBundle m = ModelBundle::init(k, 1);
    for (const auto& spec : m.arch()) CHECK(m.param(spec.name).shape() == spec.shape);
    CHECK(m.parameters().size() == m.arch().size());
  }
}

TEST_CASE("zero detector predicts one half everywhere") {
  ModelBundle m = ModelBundle::zeros(ModelKind::SignDetector);
  GridPrediction p = detector_forward(m, Tensor::zeros(image_shape()));
  for (std::size_t c = 0; c < kGrid * kGrid; ++c) CHECK(p.objectness(c) == doctest::Approx(0.5));
  CHECK_THROWS_AS(detector_forward(m, Tensor::zeros({32, 32, 3})), DimensionError);
}

TEST_CASE("zero regressor outputs the final bias") {
  ModelBundle m = ModelBundle::zeros(ModelKind::DistanceRegressor);
  const std::string last = m.arch().back().name;
  m.param(last)[0] = 0.25f;
  float out = regressor_forward(m, random_image(3)).item();
  CHECK(out == doctest::Approx(0.25 * 80.0));
  CHECK_THROWS_AS(regressor_forward(m, Tensor::zeros({64, 64, 1})), DimensionError);
}

TEST_CASE("forward passes are deterministic and pure") {
  ModelBundle m = ModelBundle::init(ModelKind::SignDetector, 5);
  Tensor x = random_image(4);
  GridPrediction a = detector_forward(m, x);
  GridPrediction b = detector_forward(m, x);
  CHECK(std::equal(a.raw.data().begin(), a.raw.data().end(), b.raw.data().begin()));
  for (std::size_t c = 0; c < kGrid * kGrid; ++c) {
    Box bx = a.box(c);
    CHECK(bx.x0() >= 0);
    CHECK(bx.y0() >= 0);
    CHECK(bx.x1() <= kImageSize);
    CHECK(bx.y1() <= kImageSize);
  }
}

TEST_CASE("input gradients of both models match finite differences") {
  ModelBundle det = ModelBundle::init(ModelKind::SignDetector, 7);
  ModelBundle reg = ModelBundle::init(ModelKind::DistanceRegressor, 8);
  Tensor x = random_image(9);
  auto det_f = [&](const Tensor& in) { return sum(sigmoid(gather(flatten(detector_forward(det, in).raw), {0, 5, 10, 40, 75}))); };
  auto reg_f = [&](const Tensor& in) { return scale(regressor_forward(reg, in), 1.0f / 80.0f); };
  CHECK(finite_diff_check(det_f, x, 1e-2, 40, 1) < 1e-3);
  CHECK(finite_diff_check(reg_f, x, 1e-3, 40, 2) < 1e-3);
}

TEST_CASE("decode_detections") {
  SUBCASE("nothing above threshold") {
    GridPrediction p = grid_with({{3, 0.1f}}, {Box{20, 20, 10, 10}});
    CHECK(decode_detections(p, 0.25f, 0.5f).empty());
  }
  SUBCASE("duplicate boxes collapse to the better one") {
    Box b{24, 24, 16, 16};
    // cells 5 and 6 both decode to b (center offsets may leave the cell)
    GridPrediction p = grid_with({{5, 0.9f}, {6, 0.8f}}, {b, b});
    auto d = decode_detections(p, 0.25f, 0.5f);
    REQUIRE(d.size() == 1);
    CHECK(d[0].score == doctest::Approx(0.9f));
  }
  SUBCASE("three boxes against the oracle") {
    std::vector<Box> boxes{{20, 20, 20, 20}, {24, 22, 20, 20}, {50, 50, 12, 12}};
    GridPrediction p = grid_with({{0, 0.7f}, {5, 0.9f}, {15, 0.6f}}, boxes);
    std::vector<Detection> all;
    for (std::size_t c = 0; c < kGrid * kGrid; ++c) all.push_back({p.box(c), p.objectness(c)});
    for (float thr : {0.1f, 0.45f, 0.9f}) {
      auto got = decode_detections(p, 0.25f, thr);
      auto want = nms_oracle(all, 0.25f, thr);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].score == doctest::Approx(want[i].score));
        CHECK(got[i].box == want[i].box);
      }
      for (std::size_t i = 0; i < got.size(); ++i)
        for (std::size_t j = i + 1; j < got.size(); ++j) {
          CHECK(got[i].score >= got[j].score);
          CHECK(iou(got[i].box, got[j].box) <= thr);
        }
    }
  }
}

TEST_CASE("training") {
  DatasetManifest data = generate_sign_dataset(24, 2);
  ModelBundle m = ModelBundle::init(ModelKind::SignDetector, 3);
  ModelBundle untouched = m.clone();
  TrainReport none = train(m, data, 0, 1e-3f, 1);
  CHECK(none.epoch_loss.empty());
  CHECK(m.bitwise_equal(untouched));

  TrainOptions o;
  o.epochs = 4;
  o.lr = 2e-3f;
  o.seed = 4;
  o.batch_size = 8;
  ModelBundle a = untouched.clone(), b = untouched.clone();
  TrainReport ra = train(a, data, o);
  train(b, data, o);
  CHECK(a.bitwise_equal(b));
  CHECK(ra.epoch_loss.back() < ra.epoch_loss.front());
  CHECK_FALSE(a.bitwise_equal(untouched));

  CHECK_THROWS_AS(train(a, DatasetManifest{}, o), ContractError);
}

TEST_CASE("checkpoints") {
  auto dir = std::filesystem::temp_directory_path() / "arwb_unit_ckpt";
  std::filesystem::create_directories(dir);
  ModelBundle det = ModelBundle::init(ModelKind::SignDetector, 11);
  save(det, dir / "det.arwb");
  ModelBundle back = load(dir / "det.arwb");
  CHECK(back.kind() == ModelKind::SignDetector);
  CHECK(back.bitwise_equal(det));
  CHECK(back.checksum() == det.checksum());
  CHECK_THROWS_AS(load(dir / "det.arwb", ModelKind::DistanceRegressor), KindMismatch);

  std::string bytes = serialize(det);
  CHECK(bytes.substr(0, 5) == "ARWB1");
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  CHECK_THROWS_AS(deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);
  CHECK_THROWS_AS(load(dir / "missing.arwb"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("denoiser at sigma zero is the identity") {
  ModelBundle d = ModelBundle::init(ModelKind::Denoiser, 1);
  Tensor x = random_image(2);
  Tensor y = denoiser_forward(d, x, 0.0f);
  CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}
