#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "arwb/errors.hpp"
#include "arwb/evalkit.hpp"
#include "support/oracles.hpp"

using namespace arwb;

namespace {

using oracle::Fixture;
using oracle::random_fixture;

double ap_oracle(const Fixture& f) { return oracle::average_precision(f); }
std::pair<double, double> pr_oracle(const Fixture& f, double conf) { return oracle::precision_recall(f, conf); }

ReportTable sample_table() {
  ReportTable t;
  t.seed = 3;
  t.config_hash = "abc123";
  t.checksums["detector"] = "00ff";
  for (AttackKind a : {AttackKind::None, AttackKind::Fgsm})
    for (DefenseKind d : {DefenseKind::None, DefenseKind::MedianBlur}) {
      ReportRow r;
      r.attack = a;
      r.defense = d;
      r.error.add(10, 10 + 1.0 / 3.0);
      r.error.add(70, 65.123456789);
      r.detection.map50 = 2.0 / 3.0;
      r.detection.precision = 0.123456789012;
      r.detection.recall = 1.0 / 7.0;
      t.rows.push_back(r);
    }
  return t;
}

}  // namespace

TEST_CASE("iou") {
  Box a{10, 10, 4, 4};
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(a, Box{30, 30, 4, 4}) == 0.0);
  CHECK(iou(Box::from_corners(0, 0, 2, 2), Box::from_corners(1, 1, 3, 3)) == doctest::Approx(1.0 / 7.0));
  CHECK_THROWS_AS(iou(Box{1, 1, 0, 2}, a), ContractError);
}

TEST_CASE("average precision examples") {
  Box g = Box::from_corners(10, 10, 20, 20);
  Box close = Box::from_corners(10, 10, 20, 16);  // IoU 0.6
  CHECK(iou(g, close) == doctest::Approx(0.6));
  CHECK(average_precision_50({{{close, 0.9f}}}, {{g}}) == doctest::Approx(1.0));
  CHECK(average_precision_50({{}}, {{g}}) == 0.0);

  // false positive ranked first on a two-object image
  Box g2 = Box::from_corners(40, 40, 50, 50);
  Fixture f{{{{Box{30, 5, 4, 4}, 0.95f}, {g, 0.9f}, {g2, 0.5f}}}, {{g, g2}}};
  CHECK(average_precision_50(f.dets, f.gts) == doctest::Approx(ap_oracle(f)));
  CHECK(average_precision_50(f.dets, f.gts) == doctest::Approx(2.0 / 3.0));

  CHECK(average_precision_50({{}}, {{}}) == 1.0);
  CHECK(average_precision_50({{{g, 0.5f}}}, {{}}) == 0.0);
}

TEST_CASE("metrics match the brute-force oracle on random fixtures") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Fixture f = random_fixture(s);
    const double ap = average_precision_50(f.dets, f.gts);
    CHECK(ap == doctest::Approx(ap_oracle(f)).epsilon(1e-12));
    auto [p, r] = precision_recall(f.dets, f.gts, 0.25);
    auto [po, ro] = pr_oracle(f, 0.25);
    CHECK(p == doctest::Approx(po));
    CHECK(r == doctest::Approx(ro));
    for (double v : {ap, p, r}) CHECK((v >= 0.0 && v <= 1.0));

    // rank-preserving rescaling of scores leaves AP unchanged
    Fixture g = f;
    for (auto& d : g.dets)
      for (auto& x : d) x.score *= 0.5f;
    CHECK(average_precision_50(g.dets, g.gts) == doctest::Approx(ap));

    std::size_t ngt = 0, tps = 0;
    for (const auto& b : f.gts) ngt += b.size();
    for (const auto& m : match_detections(f.dets, f.gts)) tps += m.true_positive;
    CHECK(tps <= ngt);
  }
}

TEST_CASE("precision and recall conventions") {
  Box g{20, 20, 10, 10};
  CHECK(precision_recall({{{g, 0.9f}}}, {{g}}) == std::pair(1.0, 1.0));
  CHECK(precision_recall({{}}, {{g}}) == std::pair(0.0, 0.0));
  CHECK(precision_recall({{}}, {{}}) == std::pair(1.0, 1.0));
  // below the confidence threshold counts as no detection
  CHECK(precision_recall({{{g, 0.1f}}}, {{g}}) == std::pair(0.0, 0.0));

  // hand count over five images: TP 3, FP 2, FN 2
  Box a{10, 10, 8, 8}, b{40, 40, 8, 8}, c{50, 20, 8, 8};
  DetectionsPerImage dets{{{a, 0.9f}}, {{c, 0.8f}}, {{b, 0.7f}, {a, 0.6f}}, {}, {{c, 0.5f}}};
  BoxesPerImage gts{{a}, {b}, {b}, {a}, {c}};
  auto [p, r] = precision_recall(dets, gts);
  CHECK(p == doctest::Approx(3.0 / 5.0));
  CHECK(r == doctest::Approx(3.0 / 5.0));
}

TEST_CASE("range-binned signed error") {
  RangeBinnedError zero = binned_signed_error({5, 25, 45, 75}, {5, 25, 45, 75});
  for (std::size_t b = 0; b < 4; ++b) CHECK(zero.mean(b) == 0.0);
  RangeBinnedError e = binned_signed_error({10, 30}, {12, 29});
  CHECK(e.mean(0) == doctest::Approx(2.0));
  CHECK(e.mean(1) == doctest::Approx(-1.0));
  CHECK(e.count[2] == 0);
  CHECK(RangeBinnedError::bin_of(20) == 1);
  CHECK(RangeBinnedError::bin_of(80) == 3);
  CHECK(RangeBinnedError::bin_of(-3) == 0);
  CHECK(RangeBinnedError::bin_of(95) == 3);
  CHECK_THROWS_AS(binned_signed_error({1, 2}, {1}), ContractError);

  Rng rng(2);
  std::vector<double> clean, cond;
  for (int i = 0; i < 200; ++i) clean.push_back(rng.uniform(0, 80)), cond.push_back(rng.uniform(0, 80));
  RangeBinnedError r = binned_signed_error(clean, cond);
  CHECK(r.total() == 200);
  double sum = 0;
  for (std::size_t b = 0; b < 4; ++b) sum += r.sum[b];
  double direct = 0;
  for (int i = 0; i < 200; ++i) direct += cond[i] - clean[i];
  CHECK(sum == doctest::Approx(direct));
}

TEST_CASE("report emission") {
  ReportTable empty;
  std::string csv = emit_report(empty, ReportFormat::Csv);
  std::istringstream lines(csv);
  std::string l;
  std::size_t n = 0, data_lines = 0;
  while (std::getline(lines, l)) {
    ++n;
    if (!l.empty() && l[0] != '#') ++data_lines;
  }
  CHECK(data_lines == 1);

  ReportTable t = sample_table();
  std::string md = emit_report(t, ReportFormat::Markdown);
  std::istringstream mdl(md);
  std::size_t rows = 0;
  while (std::getline(mdl, l)) {
    if (l.rfind("| ", 0) != 0) continue;
    ++rows;
    CHECK(std::count(l.begin(), l.end(), '|') == 10);  // attack, defense and seven metrics
  }
  CHECK(rows == t.rows.size() + 1);
  CHECK(md.find("| fgsm | median_blur | 0.33 |") != std::string::npos);

  std::string c2 = emit_report(t, ReportFormat::Csv);
  CHECK(c2.find("none,none,0.33,0.00,0.00,-4.88,0.67,0.12,0.14") != std::string::npos);
  CHECK(c2.find("config=abc123") != std::string::npos);
  CHECK(c2.find("seed=3") != std::string::npos);
  CHECK(c2.find(kVersion) != std::string::npos);

  ReportTable back = parse_raw_report(emit_report(t, ReportFormat::RawCsv));
  REQUIRE(back.rows.size() == t.rows.size());
  CHECK(back.seed == 3);
  CHECK(back.config_hash == "abc123");
  CHECK(back.checksums == t.checksums);
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    CHECK(back.rows[i].attack == t.rows[i].attack);
    CHECK(back.rows[i].defense == t.rows[i].defense);
    for (std::size_t b = 0; b < 4; ++b) {
      CHECK(std::abs(back.rows[i].error.mean(b) - t.rows[i].error.mean(b)) <= 1e-9);
      CHECK(back.rows[i].error.count[b] == t.rows[i].error.count[b]);
    }
    CHECK(std::abs(back.rows[i].detection.map50 - t.rows[i].detection.map50) <= 1e-9);
    CHECK(std::abs(back.rows[i].detection.precision - t.rows[i].detection.precision) <= 1e-9);
    CHECK(std::abs(back.rows[i].detection.recall - t.rows[i].detection.recall) <= 1e-9);
  }
  CHECK(emit_report(back, ReportFormat::Csv) == emit_report(t, ReportFormat::Csv));

  auto plots = emit_plot_data(t);
  CHECK(plots.size() == 7);
  REQUIRE(plots.count("plot_map50.csv"));
  CHECK(plots["plot_map50.csv"].find("attack,none,median_blur") != std::string::npos);
}

TEST_CASE("attack names") {
  CHECK(attack_from_string("AutoPGD") == AttackKind::AutoPgd);
  CHECK(attack_from_string("auto_pgd") == AttackKind::AutoPgd);
  for (AttackKind k : {AttackKind::None, AttackKind::Gaussian, AttackKind::Fgsm, AttackKind::AutoPgd,
                       AttackKind::Simba, AttackKind::Patch})
    CHECK(attack_from_string(to_string(k)) == k);
  CHECK_THROWS(attack_from_string("cw"));
}

TEST_CASE("parallel_for") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  std::atomic<int> ran{0};
  try {
    parallel_for(50, 3, [&](std::size_t i) {
      ++ran;
      if (i == 7 || i == 30) throw std::runtime_error("boom " + std::to_string(i));
    });
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "boom 7");
  }
  CHECK(ran == 50);
}

TEST_CASE("benchmark matrix on small data") {
  BenchModels models;
  models.base.detector = ModelBundle::init(ModelKind::SignDetector, 1);
  models.base.regressor = ModelBundle::init(ModelKind::DistanceRegressor, 2);
  BenchData data;
  data.signs = generate_sign_dataset(6, 3);
  data.sequences = generate_road_sequences(2, 3, 4);

  AttackConfig none, gauss0, fgsm;
  gauss0.kind = AttackKind::Gaussian;
  gauss0.sigma = 0;
  fgsm.kind = AttackKind::Fgsm;
  DefenseConfig d_none, d_blur;
  d_blur.kind = DefenseKind::MedianBlur;
  BenchOptions o;
  o.seed = 5;
  o.jobs = 2;
  ReportTable t = run_benchmark_matrix(models, {none, gauss0, fgsm}, {d_none, d_blur}, data, o);
  REQUIRE(t.rows.size() == 6);
  CHECK(t.failures.empty());
  CHECK(t.rows[0].attack == AttackKind::None);
  CHECK(t.rows[1].defense == DefenseKind::MedianBlur);

  // (none, none) is the clean evaluation
  DetectionsPerImage dets;
  BoxesPerImage gts;
  for (const auto& s : data.signs.entries) {
    dets.push_back(decode_detections(detector_forward(models.base.detector, s.image), o.conf, o.nms_iou));
    gts.push_back(s.labels.has_sign ? std::vector<Box>{s.labels.box} : std::vector<Box>{});
  }
  DetectionMetrics clean = evaluate_detections(dets, gts, o.conf);
  CHECK(t.rows[0].detection.map50 == clean.map50);
  CHECK(t.rows[0].detection.precision == clean.precision);
  for (std::size_t b = 0; b < 4; ++b) CHECK(t.rows[0].error.mean(b) == 0.0);
  CHECK(t.rows[0].error.total() == 6);

  // zero-sigma noise under a defense equals the defense alone
  auto same = [](ReportRow a, ReportRow b) {
    a.attack = b.attack;
    return emit_report(ReportTable{{a}}, ReportFormat::RawCsv) == emit_report(ReportTable{{b}}, ReportFormat::RawCsv);
  };
  CHECK(same(t.rows[2], t.rows[0]));
  CHECK(same(t.rows[3], t.rows[1]));

  o.jobs = 1;
  ReportTable serial = run_benchmark_matrix(models, {none, gauss0, fgsm}, {d_none, d_blur}, data, o);
  CHECK(emit_report(serial, ReportFormat::RawCsv) == emit_report(t, ReportFormat::RawCsv));

  DefenseConfig adv;
  adv.kind = DefenseKind::AdvTrain;
  CHECK_THROWS_AS(run_benchmark_matrix(models, {none}, {adv}, data, o), ConfigError);
  DefenseConfig pir;
  pir.kind = DefenseKind::DiffPIR;
  CHECK_THROWS_AS(run_benchmark_matrix(models, {none}, {pir}, data, o), ConfigError);
}
