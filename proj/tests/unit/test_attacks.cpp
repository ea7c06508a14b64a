#include <doctest.h>

#include <cmath>
#include <numeric>

#include "arwb/attacks.hpp"
#include "arwb/errors.hpp"
#include "arwb/ops.hpp"

using namespace arwb;

namespace {

Tensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(image_shape());
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(0.1, 0.9));
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

// A fixed random linear functional of the image: analytic input gradient.
Objective linear_objective(const Tensor& w) {
  return [w](const Tensor& x) { return sum(mul(w, x)); };
}

void check_linf(const AttackResult& r, const Tensor& x, float eps) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    REQUIRE(std::abs(r.delta[i]) <= eps);
    REQUIRE(r.x_adv[i] >= 0.0f);
    REQUIRE(r.x_adv[i] <= 1.0f);
    REQUIRE(r.x_adv[i] == std::clamp(x[i] + r.delta[i], 0.0f, 1.0f));
  }
}

}  // namespace

TEST_CASE("gaussian noise") {
  Tensor x = random_image(1);
  CHECK(bit_equal(gaussian_noise(x, 0.0f, 3).x_adv, x));
  AttackResult a = gaussian_noise(x, 0.1f, 3), b = gaussian_noise(x, 0.1f, 3);
  CHECK(bit_equal(a.x_adv, b.x_adv));
  double mean = std::accumulate(a.delta.data().begin(), a.delta.data().end(), 0.0) / a.delta.numel();
  CHECK(std::abs(mean) <= 3 * 0.1 / std::sqrt(12288.0));
  CHECK_THROWS_AS(gaussian_noise(x, -0.1f, 3), ContractError);
}

TEST_CASE("fgsm closed form") {
  Tensor w({2}, std::vector<float>{2, -3});
  Tensor x({2}, std::vector<float>{0.5f, 0.5f});
  Budget b;
  b.epsilon = 0.1f;
  AttackResult r = fgsm(linear_objective(w), x, b);
  CHECK(r.x_adv[0] == doctest::Approx(0.6f));
  CHECK(r.x_adv[1] == doctest::Approx(0.4f));

  // sign(0) = 0: coordinates with zero gradient do not move
  Tensor w0({3}, std::vector<float>{0, 1, -1});
  AttackResult r0 = fgsm(linear_objective(w0), Tensor({3}, 0.5f), b);
  CHECK(r0.delta[0] == 0.0f);
  CHECK(r0.delta[1] == 0.1f);
  CHECK(r0.delta[2] == -0.1f);

  // image-sized linear head
  Tensor wi = random_image(2);
  for (std::size_t i = 0; i < wi.numel(); ++i) wi[i] -= 0.5f;
  Tensor x2 = random_image(3);
  AttackResult ri = fgsm(linear_objective(wi), x2, b);
  for (std::size_t i = 0; i < wi.numel(); ++i)
    REQUIRE(ri.delta[i] == (wi[i] > 0 ? 0.1f : (wi[i] < 0 ? -0.1f : 0.0f)));
}

TEST_CASE("auto_pgd") {
  Tensor w = random_image(4);
  for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= 0.5f;
  Objective f = [w](const Tensor& x) { return sum(mul(w, mul(x, x))); };
  Tensor x = random_image(5);
  Budget b;
  b.epsilon = 8.0f / 255;
  b.alpha = 2.0f / 255;
  b.max_iters = 30;
  AttackResult r = auto_pgd(f, x, b);
  check_linf(r, x, b.epsilon);
  REQUIRE(r.loss_trace.size() == 30);
  for (std::size_t i = 1; i < r.loss_trace.size(); ++i) CHECK(r.loss_trace[i] >= r.loss_trace[i - 1]);
  CHECK(f(r.x_adv).item() == doctest::Approx(r.loss_trace.back()).epsilon(1e-5));

  Budget one = b;
  one.max_iters = 1;
  one.alpha = one.epsilon;
  CHECK(bit_equal(auto_pgd(f, x, one).x_adv, fgsm(f, x, one).x_adv));

  Budget bad = b;
  bad.max_iters = 0;
  CHECK_THROWS_AS(auto_pgd(f, x, bad), ContractError);
}

TEST_CASE("simba") {
  Tensor x = random_image(6);
  Budget b;
  b.epsilon = 0.2f;
  b.max_queries = 201;

  SUBCASE("constant model") {
    AttackResult r = simba([](const Tensor&) { return 1.0; }, x, b, SimbaBasis::Dct);
    CHECK_FALSE(r.success);
    CHECK(r.accepted_steps == 0);
    for (float d : r.delta.data()) REQUIRE(d == 0.0f);
    CHECK(r.queries_used <= b.max_queries);
  }
  SUBCASE("pixel basis moves one coordinate by epsilon per accepted step") {
    Tensor w = random_image(7);
    ScoreFn score = [w](const Tensor& in) {
      double s = 0;
      for (std::size_t i = 0; i < in.numel(); ++i) s += (w[i] - 0.5) * in[i];
      return s;
    };
    AttackResult r = simba(score, x, b, SimbaBasis::Pixel);
    std::size_t moved = 0;
    for (float d : r.delta.data()) {
      if (d == 0.0f) continue;
      ++moved;
      CHECK(std::abs(d) == b.epsilon);
    }
    CHECK(moved == r.accepted_steps);
    CHECK(r.accepted_steps > 0);
    CHECK(r.queries_used <= b.max_queries);
    CHECK(r.accepted_steps <= b.max_queries / 2);
    for (std::size_t i = 1; i < r.loss_trace.size(); ++i) CHECK(r.loss_trace[i] >= r.loss_trace[i - 1]);
  }
  SUBCASE("dct basis respects the cumulative bound") {
    Tensor w = random_image(8);
    ScoreFn score = [w](const Tensor& in) {
      double s = 0;
      for (std::size_t i = 0; i < in.numel(); ++i) s += std::sin(20 * w[i]) * in[i];
      return s;
    };
    AttackResult r = simba(score, x, b, SimbaBasis::Dct);
    CHECK(r.accepted_steps > 0);
    CHECK(squared_norm(r.delta.data()) <= r.accepted_steps * double(b.epsilon) * b.epsilon);
    CHECK(squared_norm(r.delta.data()) <= (r.queries_used / 2) * double(b.epsilon) * b.epsilon);
    AttackResult again = simba(score, x, b, SimbaBasis::Dct);
    CHECK(bit_equal(again.delta, r.delta));
  }
  SUBCASE("zero epsilon is the identity") {
    Budget z = b;
    z.epsilon = 0;
    AttackResult r = simba([](const Tensor& in) { return double(in[0]); }, x, z, SimbaBasis::Pixel);
    CHECK(bit_equal(r.x_adv, x));
  }
}

TEST_CASE("nps and palette") {
  auto palette = default_palette();
  CHECK(palette.size() == 32);
  Tensor img({2, 2, 3});
  for (std::size_t p = 0; p < 4; ++p)
    for (int c = 0; c < 3; ++c) img[p * 3 + c] = palette[p * 5][c];
  CHECK(nps(img, {0, 1, 2, 3}, palette).item() == 0.0f);
  img[0] = palette[0][0] + 0.1f;
  CHECK(nps(img, {0, 1, 2, 3}, palette).item() == doctest::Approx(0.1f));
  CHECK(nps(img, {1}, palette).item() == 0.0f);
}

TEST_CASE("transform sampler ranges") {
  TransformSampler s;
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    SampledTransform t = s.sample(rng);
    CHECK(s.in_range(t));
    CHECK(std::abs(t.affine.angle_rad) <= 15.0 * M_PI / 180 + 1e-12);
    CHECK(t.affine.scale >= 0.8);
    CHECK(t.affine.scale <= 1.2);
    CHECK(std::abs(t.brightness) <= 0.1f + 1e-7f);
  }
}

TEST_CASE("rp2 stays on the mask") {
  ModelBundle det = ModelBundle::init(ModelKind::SignDetector, 3);
  SignScene s = render_sign_scene(4, true);
  Tensor mask = sign_mask(s.gt_box);
  Labels hide;
  TransformSampler sampler;
  sampler.seed = 5;
  Rp2Options o;
  o.samples = 2;
  PatchState p = rp2(det, s.image, mask, hide, sampler, 0.1f, 3, o);
  bool any = false;
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    if (mask[i] == 0.0f) REQUIRE(p.delta[i] == 0.0f);
    any = any || p.delta[i] != 0.0f;
  }
  CHECK(any);
  CHECK_THROWS_AS(rp2(det, s.image, Tensor::zeros(image_shape()), hide, sampler, 0.1f, 1, o), ContractError);
}

TEST_CASE("prox_linf closed form") {
  std::vector<float> v{0.5f, -0.2f, 0.1f};
  prox_linf(v, 0.2);  // threshold 0.3 removes 0.2 from the first entry only
  CHECK(v[0] == doctest::Approx(0.3f));
  CHECK(v[1] == doctest::Approx(-0.2f));
  CHECK(v[2] == doctest::Approx(0.1f));

  std::vector<float> w{0.5f, -0.4f, 0.1f};
  prox_linf(w, 0.3);  // theta = (0.9 - 0.3) / 2
  CHECK(w[0] == doctest::Approx(0.3f));
  CHECK(w[1] == doctest::Approx(-0.3f));

  std::vector<float> all{0.1f, -0.1f};
  prox_linf(all, 0.5);
  CHECK(all[0] == 0.0f);
  CHECK(all[1] == 0.0f);

  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    std::vector<float> r(20);
    for (auto& x : r) x = static_cast<float>(rng.uniform(-1, 1));
    double before = 0;
    for (float x : r) before += std::abs(x);
    double tau = rng.uniform(0, before);
    std::vector<float> s = r;
    prox_linf(s, tau);
    double after = 0;
    for (float x : s) after += std::abs(x);
    CHECK(before - after == doctest::Approx(tau).epsilon(1e-4));
  }
}

TEST_CASE("cap_run") {
  ModelBundle reg = ModelBundle::init(ModelKind::DistanceRegressor, 12);
  auto frames = generate_road_sequence(4, 30, 25, 6);
  Budget b;
  b.epsilon = 8.0f / 255;
  b.max_iters = 2;
  auto out = cap_run(reg, frames, b, 0.0f);
  REQUIRE(out.size() == frames.size());
  for (std::size_t t = 0; t < frames.size(); ++t) {
    Tensor inside = box_mask(frames[t].lead_box);
    check_linf(out[t].result, frames[t].image, b.epsilon);
    for (std::size_t i = 0; i < inside.numel(); ++i)
      if (inside[i] == 0.0f) REQUIRE(out[t].patch.delta[i] == 0.0f);
    CHECK(out[t].patch.frame_index == t);
  }

  auto shrunk = cap_run(reg, frames, b, 1e9f);
  for (const auto& f : shrunk) {
    for (float d : f.patch.delta.data()) REQUIRE(d == 0.0f);
    CHECK(f.result.loss_trace[0] == f.result.loss_trace[1]);
  }

  auto none = frames;
  none[1].lead_box = Box{};
  CHECK_THROWS_AS(cap_run(reg, none, b, 0.0f), ContractError);
}

TEST_CASE("zero budgets are the identity for every attack") {
  ModelBundle det = ModelBundle::init(ModelKind::SignDetector, 2);
  ModelBundle reg = ModelBundle::init(ModelKind::DistanceRegressor, 3);
  SignScene s = render_sign_scene(1, true);
  Labels l{true, s.gt_box, 0};
  Budget z;
  z.epsilon = 0;
  CHECK(bit_equal(fgsm(det, s.image, l, z).x_adv, s.image));
  CHECK(bit_equal(auto_pgd(det, s.image, l, z).x_adv, s.image));
  CHECK(bit_equal(simba(det, s.image, l, z, SimbaBasis::Dct).x_adv, s.image));
  Rp2Options o;
  o.epsilon = 0;
  o.samples = 1;
  PatchState p = rp2(det, s.image, sign_mask(s.gt_box), Labels{}, TransformSampler{}, 0, 2, o);
  CHECK(bit_equal(apply_patch(s.image, p), s.image));
  auto frames = generate_road_sequence(2, 20, 20, 1);
  for (const auto& f : cap_run(reg, frames, z, 0)) CHECK(f.result.loss_trace[0] == f.result.loss_trace[1]);
}
