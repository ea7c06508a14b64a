#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "arwb/defenses.hpp"
#include "arwb/errors.hpp"
#include "arwb/grad.hpp"
#include "arwb/ops.hpp"
#include "support/oracles.hpp"

using namespace arwb;

namespace {

Tensor random_image(std::uint64_t seed, std::size_t h = kImageSize, std::size_t w = kImageSize) {
  Rng rng(seed);
  Tensor t({h, w, 3});
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform());
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Tensor median_oracle(const Tensor& x, std::size_t k) { return oracle::median(x, k); }
double infonce_oracle(const std::vector<std::vector<double>>& z, double tau) { return oracle::infonce(z, tau); }
using oracle::to_tensor;

}  // namespace

TEST_CASE("median blur") {
  Tensor flat(image_shape(), 0.3f);
  CHECK(bit_equal(median_blur(flat, 3), flat));

  Tensor dot({8, 8, 3}, 0.0f);
  for (std::size_t c = 0; c < 3; ++c) dot.at(4, 4, c) = 1.0f;
  const Tensor blurred = median_blur(dot, 3);
  for (float v : blurred.data()) CHECK(v == 0.0f);

  for (std::uint64_t s = 0; s < 100; ++s) {
    Tensor x = random_image(s, 8, 8);
    REQUIRE(bit_equal(median_blur(x, 3), median_oracle(x, 3)));
  }
  Tensor x = random_image(7, 12, 9);
  CHECK(bit_equal(median_blur(x, 5), median_oracle(x, 5)));
  CHECK_THROWS_AS(median_blur(x, 4), ContractError);
}

TEST_CASE("bit depth reduction") {
  Tensor v({1, 1, 3}, std::vector<float>{0.4f, 0.6f, 0.5f});
  Tensor q = bit_depth_reduce(v, 1);
  CHECK(q[0] == 0.0f);
  CHECK(q[1] == 1.0f);

  Tensor x = random_image(3);
  for (int b : {1, 3, 5, 8}) {
    Tensor y = bit_depth_reduce(x, b);
    CHECK(bit_equal(bit_depth_reduce(y, b), y));
    for (std::size_t c = 0; c < 3; ++c) {
      std::set<float> levels;
      for (std::size_t p = 0; p < kImageSize * kImageSize; ++p) levels.insert(y[p * 3 + c]);
      CHECK(levels.size() <= (1u << b));
    }
  }
  CHECK_THROWS_AS(bit_depth_reduce(x, 0), ContractError);
  CHECK_THROWS_AS(bit_depth_reduce(x, 9), ContractError);
}

TEST_CASE("randomize") {
  Tensor x = random_image(4);
  CHECK(bit_equal(randomize(x, 9), randomize(x, 9)));
  CHECK_FALSE(bit_equal(randomize(x, 9), randomize(x, 10)));
  for (std::uint64_t s = 0; s < 20; ++s) {
    Tensor y = randomize(x, s);
    CHECK(y.shape() == image_shape());
    for (float v : y.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
  RandomizeOptions id;
  id.min_size = id.max_size = 64;
  id.noise = 0;
  CHECK(bit_equal(randomize(x, 1, id), x));
}

TEST_CASE("adversarial training with a zero budget is standard training") {
  DatasetManifest data = generate_sign_dataset(16, 5);
  ModelBundle init = ModelBundle::init(ModelKind::SignDetector, 6);
  TrainOptions o;
  o.epochs = 2;
  o.lr = 2e-3f;
  o.seed = 7;
  o.batch_size = 8;
  ModelBundle plain = init.clone();
  train(plain, data, o);
  for (InnerAttack a : {InnerAttack::Fgsm, InnerAttack::AutoPgd, InnerAttack::Gaussian}) {
    AdvTrainOptions adv;
    adv.attack = a;
    adv.inner.epsilon = 0;
    adv.inner.max_iters = 2;
    CHECK(adversarial_train(init, data, adv, o).bitwise_equal(plain));
  }

  AdvTrainOptions adv;
  adv.inner.epsilon = 8.0f / 255;
  TrainReport r;
  o.epochs = 4;
  ModelBundle robust = adversarial_train(init, data, adv, o, &r);
  CHECK_FALSE(robust.bitwise_equal(plain));
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  CHECK(init.bitwise_equal(ModelBundle::init(ModelKind::SignDetector, 6)));
}

TEST_CASE("mixed set") {
  std::vector<DatasetManifest> sets(4);
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t i = 0; i < 416; ++i) {
      Sample s;
      s.image = Tensor({1, 1, 3});
      s.path = std::to_string(a) + "/" + std::to_string(i);
      sets[a].entries.push_back(s);
    }
  auto [train, test] = build_mixed_set(sets, 0.25, 3);
  CHECK(train.size() == 4 * 104);
  CHECK(test.size() == 4 * 104);
  std::map<char, std::size_t> per_attack;
  std::set<std::string> train_idx, test_idx;
  for (const auto& s : train.entries) {
    ++per_attack[s.path[0]];
    train_idx.insert(s.path.substr(2));
  }
  for (const auto& s : test.entries) test_idx.insert(s.path.substr(2));
  for (char a : {'0', '1', '2', '3'}) CHECK(per_attack[a] == 104);
  for (const auto& i : train_idx) CHECK(test_idx.count(i) == 0);

  auto again = build_mixed_set(sets, 0.25, 3);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(again.first.entries[i].path == train.entries[i].path);

  std::vector<DatasetManifest> frames(1);
  frames[0].entries.resize(9600, Sample{Tensor({1}), {}, ""});
  CHECK(build_mixed_set(frames, 0.25, 1).first.size() == 2400);

  CHECK_THROWS_AS(build_mixed_set(sets, 0.6, 1), ContractError);
  sets[1].entries.pop_back();
  CHECK_THROWS_AS(build_mixed_set(sets, 0.25, 1), ContractError);
}

TEST_CASE("infonce") {
  // N = 2: positives identical, negatives orthogonal
  std::vector<std::vector<double>> z{{1, 0, 0}, {0, 1, 0}, {1, 0, 0}, {0, 1, 0}};
  CHECK(infonce_loss(to_tensor(z), 1.0f).item() == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 2))).epsilon(1e-5));
  CHECK(infonce_loss(to_tensor(z), 1.0f).item() == doctest::Approx(0.5514).epsilon(1e-4));

  std::vector<std::vector<double>> same(6, {0.3, -0.2, 0.7});
  CHECK(infonce_loss(to_tensor(same), 0.5f).item() == doctest::Approx(std::log(5.0)).epsilon(1e-5));

  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> r(8, std::vector<double>(5));
    for (auto& row : r)
      for (auto& v : row) v = rng.normal();
    const double tau = rng.uniform(0.1, 2.0);
    const Tensor e = to_tensor(r);
    const float loss = infonce_loss(e, static_cast<float>(tau)).item();
    CHECK(loss == doctest::Approx(infonce_oracle(r, tau)).epsilon(1e-5));
    CHECK(infonce_loss(scale(e, 37.5f), static_cast<float>(tau)).item() == doctest::Approx(loss).epsilon(1e-5));
    CHECK(infonce_loss(e, 1e4f).item() == doctest::Approx(std::log(7.0)).epsilon(1e-3));
  }

  std::vector<std::vector<double>> zero{{0, 0}, {1, 0}, {0, 1}, {1, 1}};
  CHECK_THROWS_AS(infonce_loss(to_tensor(zero), 1.0f), ContractError);
  CHECK_THROWS_AS(infonce_loss(Tensor({2, 3}, 1.0f), 1.0f), ContractError);
  CHECK_THROWS_AS(infonce_loss(to_tensor(z), 0.0f), ContractError);

  CHECK(finite_diff_check([](const Tensor& in) { return infonce_loss(in, 0.5f); },
                          to_tensor({{1, 2, 0}, {0, 1, 3}, {2, 1, 1}, {1, -1, 2}}), 1e-3) < 1e-3);
}

TEST_CASE("contrastive training with zero epochs leaves the model alone") {
  DatasetManifest data = generate_sign_dataset(8, 1);
  ModelBundle m = ModelBundle::init(ModelKind::SignDetector, 2);
  ContrastiveOptions o;
  o.epochs = 0;
  o.finetune.epochs = 0;
  CHECK(contrastive_train(m, data, o).bitwise_equal(m));
}

TEST_CASE("proximal step") {
  CHECK(prox_step(0.2, 0.6, 1.0) == doctest::Approx(0.4));
  CHECK(prox_step(0.2, 0.6, 1e12) == doctest::Approx(0.6));
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const double y = rng.uniform(), x0 = rng.uniform(), rho = std::exp(rng.uniform(-5, 5));
    // stationary point of |y - x|^2 + rho |x - x0|^2
    const double x = prox_step(y, x0, rho);
    REQUIRE(std::abs((x - y) + rho * (x - x0)) <= 1e-6 * (1 + rho));
  }
  Tensor y = random_image(6), x0 = random_image(7);
  Tensor p = prox_step(y, x0, 0.5);
  for (std::size_t i = 0; i < y.numel(); ++i) REQUIRE(p[i] == doctest::Approx(prox_step(y[i], x0[i], 0.5)).epsilon(1e-6));
}

TEST_CASE("diffusion schedule") {
  DiffusionSchedule s = DiffusionSchedule::linear();
  CHECK(s.steps() == 10);
  CHECK(s.alpha_bar.front() == doctest::Approx(0.999));
  CHECK(s.alpha_bar.back() == doctest::Approx(0.9));
  for (std::size_t t = 1; t < s.steps(); ++t) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  for (std::size_t t = 0; t < s.steps(); ++t) CHECK(s.rho[t] == doctest::Approx(0.003 * s.alpha_bar[t] / (1 - s.alpha_bar[t])));
  s.validate();
  DiffusionSchedule bad = s;
  bad.alpha_bar[3] = bad.alpha_bar[2];
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = s;
  bad.zeta = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = s;
  bad.rho[0] = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
}

TEST_CASE("diffpir with an exact denoiser recovers the clean image") {
  Tensor clean = random_image(8);
  Tensor noisy = gaussian_noise(clean, 0.1f, 9).x_adv;
  ImageDenoiser oracle = [&](const Tensor&, double) { return clean; };
  Tensor restored = diffpir_restore(noisy, DiffusionSchedule::linear(10, 0.999, 0.5, 0.3, 1e6), oracle, 1);
  CHECK(psnr(restored, clean) > 40.0);
  CHECK(psnr(restored, clean) > psnr(noisy, clean));
  for (float v : restored.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
  CHECK(bit_equal(diffpir_restore(noisy, DiffusionSchedule::linear(), oracle, 1),
                  diffpir_restore(noisy, DiffusionSchedule::linear(), oracle, 1)));
}

TEST_CASE("defense configuration") {
  DefenseConfig c;
  c.kind = DefenseKind::MedianBlur;
  c.kernel = 4;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.kernel = 1;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.kernel = 3;
  c.bits = 9;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c.bits = 3;
  c.tau = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);

  CHECK(defense_from_string("medianblur") == DefenseKind::MedianBlur);
  CHECK(defense_from_string("Median-Blur") == DefenseKind::MedianBlur);
  CHECK(defense_from_string("diffpir") == DefenseKind::DiffPIR);
  CHECK_THROWS(defense_from_string("jpeg"));
  for (DefenseKind k : {DefenseKind::None, DefenseKind::MedianBlur, DefenseKind::BitDepth, DefenseKind::Randomize,
                        DefenseKind::AdvTrain, DefenseKind::Contrastive, DefenseKind::DiffPIR})
    CHECK(defense_from_string(to_string(k)) == k);

  Tensor x = random_image(10);
  DefenseConfig none;
  CHECK(bit_equal(apply_input_defense(none, x, 1), x));
  DefenseConfig blur;
  blur.kind = DefenseKind::MedianBlur;
  CHECK(bit_equal(apply_input_defense(blur, x, 1), median_blur(x, 3)));
}
