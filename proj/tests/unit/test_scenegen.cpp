#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "arwb/errors.hpp"
#include "arwb/rng.hpp"
#include "arwb/scenegen.hpp"

using namespace arwb;

namespace {

bool inside_image(const Box& b) {
  return b.x0() >= 0 && b.y0() >= 0 && b.x1() <= kImageSize && b.y1() <= kImageSize && b.w > 0 && b.h > 0;
}

bool same_pixels(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST_CASE("sign dataset") {
  DatasetManifest a = generate_sign_dataset(40, 3);
  DatasetManifest b = generate_sign_dataset(40, 3);
  REQUIRE(a.size() == 40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(same_pixels(a.entries[i].image, b.entries[i].image));
    CHECK(a.entries[i].labels.has_sign == b.entries[i].labels.has_sign);
    CHECK(a.entries[i].labels.box == b.entries[i].labels.box);
  }
  CHECK_FALSE(same_pixels(a.entries[0].image, generate_sign_dataset(40, 4).entries[0].image));

  std::size_t positives = 0;
  for (const auto& s : a.entries) {
    for (float v : s.image.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
    if (s.labels.has_sign) {
      ++positives;
      CHECK(inside_image(s.labels.box));
    }
  }
  CHECK(positives == positive_count(40));

  DatasetManifest ten = generate_sign_dataset(10, 1);
  std::size_t p10 = 0;
  for (const auto& s : ten.entries) p10 += s.labels.has_sign;
  CHECK(p10 == 7);
  CHECK(positive_count(10) == 7);
  CHECK(positive_count(5) == 4);  // 3.5 rounds up
  CHECK(positive_count(1) == 1);
}

TEST_CASE("road sequences follow the pinhole rule") {
  auto seq = generate_road_sequence(5, 20, 20, 9);
  for (const auto& f : seq) CHECK(f.lead_box.w == 40.0f);

  auto one = generate_road_sequence(1, 33, 70, 9);
  REQUIRE(one.size() == 1);
  CHECK(one[0].distance_m == doctest::Approx(33.0));

  auto near = generate_road_sequence(1, 5, 5, 2);
  CHECK(lead_width_px(5) == 160);
  CHECK(near[0].lead_box.w == kMaxLeadWidth);
  CHECK(near[0].width_clamped);

  auto ramp = generate_road_sequence(6, 10, 60, 4);
  for (std::size_t i = 0; i < ramp.size(); ++i) {
    CHECK(ramp[i].distance_m == doctest::Approx(10 + 10.0 * i));
    CHECK(inside_image(ramp[i].lead_box));
    if (i > 0 && !ramp[i - 1].width_clamped) CHECK(ramp[i].lead_box.w < ramp[i - 1].lead_box.w);
  }

  CHECK_THROWS_AS(generate_road_sequence(3, 4.0, 20, 1), ContractError);
  CHECK_THROWS_AS(generate_road_sequence(3, 20, 81, 1), ContractError);
}

TEST_CASE("lead width decreases with distance") {
  int prev = lead_width_px(14);
  for (double d = 15; d <= 80; d += 1) {
    int w = lead_width_px(d);
    CHECK(w <= prev);
    prev = w;
  }
  CHECK(lead_width_px(80) == 10);
  // strictly monotone over the rendered width where rounding allows
  CHECK(render_road_scene(20, 1).lead_box.w > render_road_scene(40, 1).lead_box.w);
}

TEST_CASE("ppm format") {
  Tensor white = Tensor::ones({1, 1, 3});
  std::string bytes = encode_ppm(white);
  CHECK(bytes == std::string("P6\n1 1\n255\n") + std::string(3, '\xff'));

  Rng rng(12);
  Tensor img({7, 5, 3});
  for (auto& v : img.mutable_data()) v = static_cast<float>(rng.uniform());
  Tensor back = decode_ppm(encode_ppm(img, "arwb test"));
  REQUIRE(back.shape() == img.shape());
  for (std::size_t i = 0; i < img.numel(); ++i) CHECK(std::abs(back[i] - img[i]) <= 1.0f / 255.0f);
  // decoding is exact on the 8-bit lattice
  CHECK(same_pixels(decode_ppm(encode_ppm(back)), back));

  std::string truncated = bytes.substr(0, bytes.size() - 1);
  CHECK_THROWS_AS(decode_ppm(truncated), FormatError);
  CHECK_THROWS_AS(decode_ppm("P5\n1 1\n255\n\xff"), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n1 x\n255\n"), FormatError);
  CHECK_THROWS_AS(decode_ppm("P6\n1 1\n65535\n\xff\xff\xff"), FormatError);
}

TEST_CASE("dataset directory round trip") {
  auto dir = std::filesystem::temp_directory_path() / "arwb_unit_dataset";
  std::filesystem::remove_all(dir);
  DatasetManifest road = to_manifest(generate_road_sequence(4, 30, 40, 5), 5);
  write_dataset(dir, road, "arwb test");
  DatasetManifest back = load_dataset(dir);
  REQUIRE(back.size() == road.size());
  CHECK(back.kind == DatasetKind::Road);
  for (std::size_t i = 0; i < road.size(); ++i) {
    CHECK(back.entries[i].labels.distance_m == doctest::Approx(road.entries[i].labels.distance_m));
    CHECK(back.entries[i].labels.box == road.entries[i].labels.box);
    for (std::size_t j = 0; j < road.entries[i].image.numel(); ++j)
      REQUIRE(std::abs(back.entries[i].image[j] - road.entries[i].image[j]) <= 1.0f / 255.0f);
  }
  std::filesystem::remove_all(dir);
  CHECK_THROWS(load_dataset(dir));
}

TEST_CASE("train/test split is disjoint and seeded") {
  DatasetManifest m = generate_sign_dataset(20, 8);
  for (std::size_t i = 0; i < m.size(); ++i) m.entries[i].path = std::to_string(i);
  auto [train, test] = train_test_split(m, 0.25, 1);
  CHECK(train.size() + test.size() == 20);
  CHECK(test.size() == 5);
  for (const auto& a : train.entries)
    for (const auto& b : test.entries) CHECK(a.path != b.path);
  auto again = train_test_split(m, 0.25, 1);
  for (std::size_t i = 0; i < test.size(); ++i) CHECK(again.second.entries[i].path == test.entries[i].path);
}
