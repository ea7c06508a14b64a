#include "arwb/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "arwb/errors.hpp"
#include "arwb/hash.hpp"

namespace arwb {

std::vector<MatchRecord> match_detections(const DetectionsPerImage& dets, const BoxesPerImage& gts,
                                          double iou_threshold) {
  if (dets.size() != gts.size()) throw ContractError("match_detections: detection and ground-truth lists differ in length");
  struct Ranked {
    std::size_t image, index;
    float score;
  };
  std::vector<Ranked> ranked;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (std::size_t k = 0; k < dets[i].size(); ++k) ranked.push_back({i, k, dets[i][k].score});
  std::stable_sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::vector<MatchRecord> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) {
    const Box& b = dets[r.image][r.index].box;
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < gts[r.image].size(); ++g) {
      if (used[r.image][g]) continue;
      const double v = iou(b, gts[r.image][g]);
      if (v > best) best = v, best_g = g;
    }
    const bool tp = best >= iou_threshold;
    if (tp) used[r.image][best_g] = true;
    out.push_back({r.image, r.score, tp});
  }
  return out;
}

namespace {

std::size_t count_gt(const BoxesPerImage& gts) {
  std::size_t n = 0;
  for (const auto& g : gts) n += g.size();
  return n;
}

double ap_from_matches(const std::vector<MatchRecord>& m, std::size_t num_gt) {
  if (num_gt == 0) return m.empty() ? 1.0 : 0.0;
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    tp += m[k].true_positive;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // Precision envelope, then area under the step function.
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t k = 0; k < prec.size(); ++k) {
    ap += (rec[k] - prev_r) * prec[k];
    prev_r = rec[k];
  }
  return ap;
}

}  // namespace

double average_precision_50(const DetectionsPerImage& dets, const BoxesPerImage& gts) {
  return ap_from_matches(match_detections(dets, gts, 0.5), count_gt(gts));
}

std::pair<double, double> precision_recall(const DetectionsPerImage& dets, const BoxesPerImage& gts, double conf) {
  DetectionsPerImage kept(dets.size());
  std::size_t ndet = 0;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i])
      if (d.score >= conf) kept[i].push_back(d), ++ndet;
  const std::size_t ngt = count_gt(gts);
  if (ndet == 0 && ngt == 0) return {1.0, 1.0};
  std::size_t tp = 0;
  for (const auto& m : match_detections(kept, gts, 0.5)) tp += m.true_positive;
  const double p = ndet ? static_cast<double>(tp) / static_cast<double>(ndet) : 0.0;
  const double r = ngt ? static_cast<double>(tp) / static_cast<double>(ngt) : 0.0;
  return {p, r};
}

DetectionMetrics evaluate_detections(const DetectionsPerImage& dets, const BoxesPerImage& gts, double conf) {
  DetectionMetrics m;
  m.matches = match_detections(dets, gts, 0.5);
  m.num_gt = count_gt(gts);
  m.map50 = ap_from_matches(m.matches, m.num_gt);
  std::tie(m.precision, m.recall) = precision_recall(dets, gts, conf);
  return m;
}

std::size_t RangeBinnedError::bin_of(double clean) {
  for (std::size_t b = 1; b < 4; ++b)
    if (clean < kEdges[b]) return b - 1;
  return 3;
}

void RangeBinnedError::add(double clean, double cond) {
  const std::size_t b = bin_of(clean);
  sum[b] += cond - clean;
  abs_sum[b] += std::abs(cond - clean);
  ++count[b];
}

RangeBinnedError binned_signed_error(const std::vector<double>& clean_preds, const std::vector<double>& cond_preds) {
  require(clean_preds.size() == cond_preds.size(), "binned_signed_error: length mismatch");
  RangeBinnedError e;
  for (std::size_t i = 0; i < clean_preds.size(); ++i) e.add(clean_preds[i], cond_preds[i]);
  return e;
}

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::None: return "none";
    case AttackKind::Gaussian: return "gaussian";
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::AutoPgd: return "autopgd";
    case AttackKind::Simba: return "simba";
    case AttackKind::Patch: return "patch";
  }
  return "?";
}

AttackKind attack_from_string(const std::string& s) {
  auto norm = [](const std::string& v) {
    std::string out;
    for (char c : v)
      if (c != '_' && c != '-') out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  };
  for (auto k : {AttackKind::None, AttackKind::Gaussian, AttackKind::Fgsm, AttackKind::AutoPgd, AttackKind::Simba,
                 AttackKind::Patch})
    if (norm(to_string(k)) == norm(s)) return k;
  throw ConfigError("unknown attack '" + s + "' (valid: none, gaussian, fgsm, autopgd, simba, patch)");
}

std::string ReportRow::cell_id() const { return to_string(attack) + "__" + to_string(defense); }

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::mutex mu;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard lock(mu);
            if (next >= n) return;
            i = next++;
          }
          run(i);
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

std::uint64_t image_seed(std::uint64_t seed, std::uint64_t stream, std::size_t i) {
  return Rng::mix(Rng::mix(seed, stream), i);
}

constexpr std::uint64_t kAttackStream = 0xa77ac;
constexpr std::uint64_t kDefenseStream = 0xdefe;

struct Flat {
  std::vector<const RoadScene*> frames;
  std::vector<std::pair<std::size_t, std::size_t>> where;  // (sequence, frame)
};

Flat flatten_frames(const BenchData& data) {
  Flat f;
  for (std::size_t s = 0; s < data.sequences.size(); ++s)
    for (std::size_t k = 0; k < data.sequences[s].size(); ++k) {
      f.frames.push_back(&data.sequences[s][k]);
      f.where.push_back({s, k});
    }
  return f;
}

// Attacked inputs of every test image for one attack against one model set.
struct Attacked {
  std::vector<Tensor> signs;
  std::vector<Tensor> frames;
};

Attacked run_attack(const ModelSet& ms, const AttackConfig& a, const BenchData& data, const Flat& flat,
                    const std::vector<double>& own_clean, const BenchOptions& opts) {
  Attacked out;
  const std::size_t ns = data.signs.size(), nf = flat.frames.size();
  out.signs.resize(ns);
  out.frames.resize(nf);
  const auto stream = kAttackStream + static_cast<std::uint64_t>(a.kind);

  parallel_for(ns, opts.jobs, [&](std::size_t i) {
    const Sample& s = data.signs.entries[i];
    const std::uint64_t seed = image_seed(opts.seed ^ a.budget.seed, stream, i);
    Budget b = a.budget;
    b.seed = seed;
    switch (a.kind) {
      case AttackKind::None: out.signs[i] = s.image; break;
      case AttackKind::Gaussian: out.signs[i] = gaussian_noise(s.image, a.sigma, seed).x_adv; break;
      case AttackKind::Fgsm: out.signs[i] = fgsm(ms.detector, s.image, s.labels, b).x_adv; break;
      case AttackKind::AutoPgd: out.signs[i] = auto_pgd(ms.detector, s.image, s.labels, b).x_adv; break;
      case AttackKind::Simba: {
        b.norm = Norm::L2;
        b.epsilon = a.simba_epsilon;
        out.signs[i] = simba(ms.detector, s.image, s.labels, b, a.basis).x_adv;
        break;
      }
      case AttackKind::Patch: {
        if (!s.labels.has_sign) {
          out.signs[i] = s.image;
          break;
        }
        TransformSampler sampler;
        sampler.seed = seed;
        Rp2Options o;
        o.step = a.rp2_step;
        o.epsilon = a.patch_epsilon;
        const PatchState p =
            rp2(ms.detector, s.image, sign_mask(s.labels.box), Labels{}, sampler, a.lambda, a.rp2_iters, o);
        out.signs[i] = apply_patch(s.image, p);
        break;
      }
    }
  });

  if (a.kind == AttackKind::Patch) {
    std::vector<std::vector<CapFrame>> per_seq(data.sequences.size());
    parallel_for(data.sequences.size(), opts.jobs, [&](std::size_t s) {
      Budget b = a.budget;
      b.max_iters = a.cap_steps;
      b.seed = image_seed(opts.seed ^ a.budget.seed, stream, 1'000'000 + s);
      per_seq[s] = cap_run(ms.regressor, data.sequences[s], b, a.cap_lambda);
    });
    for (std::size_t i = 0; i < nf; ++i) out.frames[i] = per_seq[flat.where[i].first][flat.where[i].second].result.x_adv;
    return out;
  }

  parallel_for(nf, opts.jobs, [&](std::size_t i) {
    const RoadScene& f = *flat.frames[i];
    const std::uint64_t seed = image_seed(opts.seed ^ a.budget.seed, stream, 1'000'000 + i);
    Budget b = a.budget;
    b.seed = seed;
    b.region = box_mask(f.lead_box);
    const Target ref = static_cast<float>(own_clean[i]);
    switch (a.kind) {
      case AttackKind::None: out.frames[i] = f.image; break;
      case AttackKind::Gaussian: out.frames[i] = gaussian_noise(f.image, a.sigma, seed).x_adv; break;
      case AttackKind::Fgsm: out.frames[i] = fgsm(ms.regressor, f.image, ref, b).x_adv; break;
      case AttackKind::AutoPgd: out.frames[i] = auto_pgd(ms.regressor, f.image, ref, b).x_adv; break;
      case AttackKind::Simba:
        b.norm = Norm::L2;
        b.epsilon = a.simba_epsilon;
        out.frames[i] = simba(ms.regressor, f.image, ref, b, a.basis).x_adv;
        break;
      case AttackKind::Patch: break;
    }
  });
  return out;
}

std::string hex_checksum(const ModelBundle& m) { return hex64(m.checksum()); }

std::string fmt(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s = buf;
  if (s == "-0.00" || s == "-0.0" || s == "-0") s.erase(0, 1);
  return s;
}

std::string fmt_raw(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_manifest(const std::filesystem::path& dir, const ReportRow& row, const AttackConfig& a,
                    const DefenseConfig& d, const ModelSet& ms, const ReportTable& t) {
  std::filesystem::create_directories(dir);
  std::ostringstream o;
  o << "# arwb " << t.version << " config=" << t.config_hash << " seed=" << t.seed << "\n";
  o << "cell = " << row.cell_id() << "\n";
  o << "attack = " << to_string(a.kind) << "\n";
  o << "attack.epsilon = " << fmt_raw(a.budget.epsilon) << "\n";
  o << "attack.alpha = " << fmt_raw(a.budget.alpha) << "\n";
  o << "attack.iters = " << a.budget.max_iters << "\n";
  o << "attack.queries = " << a.budget.max_queries << "\n";
  o << "attack.sigma = " << fmt_raw(a.sigma) << "\n";
  o << "attack.lambda = " << fmt_raw(a.lambda) << "\n";
  o << "attack.cap_lambda = " << fmt_raw(a.cap_lambda) << "\n";
  o << "attack.simba_epsilon = " << fmt_raw(a.simba_epsilon) << "\n";
  o << "attack.patch_epsilon = " << fmt_raw(a.patch_epsilon) << "\n";
  o << "defense = " << to_string(d.kind) << "\n";
  o << "detector = " << hex_checksum(ms.detector) << "\n";
  o << "regressor = " << hex_checksum(ms.regressor) << "\n";
  o << "images = " << row.detection.matches.size() << " detections, " << row.detection.num_gt << " gt\n";
  o << "frames = " << row.error.total() << "\n";
  o << "map50 = " << fmt_raw(row.detection.map50) << "\n";
  o << "precision = " << fmt_raw(row.detection.precision) << "\n";
  o << "recall = " << fmt_raw(row.detection.recall) << "\n";
  for (std::size_t b = 0; b < 4; ++b)
    o << "error.bin" << b << " = " << fmt_raw(row.error.mean(b)) << " (n=" << row.error.count[b] << ")\n";
  std::ofstream f(dir / "manifest.txt", std::ios::binary);
  if (!f) throw IoError("cannot write " + (dir / "manifest.txt").string());
  f << o.str();
}

}  // namespace

ReportTable run_benchmark_matrix(const BenchModels& models, const std::vector<AttackConfig>& attacks,
                                 const std::vector<DefenseConfig>& defenses, const BenchData& data,
                                 const BenchOptions& opts) {
  for (const auto& d : defenses) {
    d.validate();
    if (d.is_training_defense() && !models.trained.count(d.kind))
      throw ConfigError("no checkpoint for training defense '" + to_string(d.kind) + "'");
    if (d.kind == DefenseKind::DiffPIR && !models.denoiser)
      throw ConfigError("diffpir defense needs a denoiser checkpoint");
  }
  for (const auto& a : attacks) a.budget.validate();
  const ImageDenoiser denoiser = models.denoiser ? make_denoiser(*models.denoiser) : ImageDenoiser{};
  const Flat flat = flatten_frames(data);
  const std::size_t ns = data.signs.size(), nf = flat.frames.size();

  auto clean_preds = [&](const ModelBundle& reg) {
    std::vector<double> p(nf);
    parallel_for(nf, opts.jobs, [&](std::size_t i) { p[i] = regressor_forward(reg, flat.frames[i]->image).item(); });
    return p;
  };
  const std::vector<double> reference = clean_preds(models.base.regressor);

  BoxesPerImage gts(ns);
  for (std::size_t i = 0; i < ns; ++i)
    if (data.signs.entries[i].labels.has_sign) gts[i].push_back(data.signs.entries[i].labels.box);

  ReportTable table;
  table.seed = opts.seed;
  table.config_hash = opts.config_hash;
  table.checksums["detector"] = hex_checksum(models.base.detector);
  table.checksums["regressor"] = hex_checksum(models.base.regressor);
  for (const auto& [k, ms] : models.trained) {
    table.checksums[to_string(k) + ".detector"] = hex_checksum(ms.detector);
    table.checksums[to_string(k) + ".regressor"] = hex_checksum(ms.regressor);
  }
  if (models.denoiser) table.checksums["denoiser"] = hex_checksum(*models.denoiser);

  // Model sets in play: the base set plus one per training defense.
  std::map<DefenseKind, const ModelSet*> sets;
  for (const auto& d : defenses) sets[d.kind] = d.is_training_defense() ? &models.trained.at(d.kind) : &models.base;
  std::map<const ModelSet*, std::vector<double>> own_clean;
  for (const auto& [k, ms] : sets)
    if (!own_clean.count(ms)) own_clean[ms] = ms == &models.base ? reference : clean_preds(ms->regressor);

  for (const auto& a : attacks) {
    std::map<const ModelSet*, Attacked> cache;
    for (const auto& d : defenses) {
      const std::string id = to_string(a.kind) + "__" + to_string(d.kind);
      try {
        const auto t0 = std::chrono::steady_clock::now();
        const ModelSet* ms = sets.at(d.kind);
        if (!cache.count(ms)) cache[ms] = run_attack(*ms, a, data, flat, own_clean.at(ms), opts);
        const Attacked& adv = cache.at(ms);
        const auto stream = kDefenseStream + static_cast<std::uint64_t>(d.kind);

        DetectionsPerImage dets(ns);
        parallel_for(ns, opts.jobs, [&](std::size_t i) {
          const Tensor x = apply_input_defense(d, adv.signs[i], image_seed(opts.seed, stream, i), denoiser);
          dets[i] = decode_detections(detector_forward(ms->detector, x), opts.conf, opts.nms_iou);
        });
        std::vector<double> cond(nf);
        parallel_for(nf, opts.jobs, [&](std::size_t i) {
          const Tensor x = apply_input_defense(d, adv.frames[i], image_seed(opts.seed, stream, 1'000'000 + i), denoiser);
          cond[i] = regressor_forward(ms->regressor, x).item();
        });

        ReportRow row;
        row.attack = a.kind;
        row.defense = d.kind;
        row.detection = evaluate_detections(dets, gts, opts.conf);
        row.error = binned_signed_error(reference, cond);
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (opts.run_dir) write_manifest(*opts.run_dir / row.cell_id(), row, a, d, *ms, table);
        table.rows.push_back(std::move(row));
      } catch (const std::exception& e) {
        table.failures.push_back({id, e.what()});
      }
    }
  }
  return table;
}

namespace {

const char* kMetricNames[7] = {"err_0_20", "err_20_40", "err_40_60", "err_60_80", "map50", "precision", "recall"};

std::array<double, 7> metric_values(const ReportRow& r) {
  return {r.error.mean(0), r.error.mean(1), r.error.mean(2), r.error.mean(3),
          r.detection.map50, r.detection.precision, r.detection.recall};
}

std::string header_line(const ReportTable& t) {
  std::ostringstream o;
  o << "arwb " << t.version << " config=" << t.config_hash << " seed=" << t.seed;
  for (const auto& [k, v] : t.checksums) o << " " << k << "=" << v;
  return o.str();
}

}  // namespace

std::string emit_report(const ReportTable& table, ReportFormat format) {
  std::ostringstream o;
  if (format == ReportFormat::Markdown) {
    o << "<!-- " << header_line(table) << " -->\n";
    o << "| attack | defense |";
    for (const char* m : kMetricNames) o << " " << m << " |";
    o << "\n|---|---|";
    for (int i = 0; i < 7; ++i) o << "---:|";
    o << "\n";
    for (const auto& r : table.rows) {
      o << "| " << to_string(r.attack) << " | " << to_string(r.defense) << " |";
      for (double v : metric_values(r)) o << " " << fmt(v, 2) << " |";
      o << "\n";
    }
    return o.str();
  }
  o << "# " << header_line(table) << "\n";
  o << "attack,defense";
  for (const char* m : kMetricNames) o << "," << m;
  if (format == ReportFormat::RawCsv) o << ",n_0_20,n_20_40,n_40_60,n_60_80";
  o << "\n";
  for (const auto& r : table.rows) {
    o << to_string(r.attack) << "," << to_string(r.defense);
    for (double v : metric_values(r)) o << "," << (format == ReportFormat::RawCsv ? fmt_raw(v) : fmt(v, 2));
    if (format == ReportFormat::RawCsv)
      for (auto c : r.error.count) o << "," << c;
    o << "\n";
  }
  return o.str();
}

ReportTable parse_raw_report(const std::string& text) {
  ReportTable t;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.rfind("# arwb ", 0) == 0 && !header) {
      std::istringstream words(line.substr(7));
      words >> t.version;
      for (std::string w; words >> w;) {
        const auto eq = w.find('=');
        if (eq == std::string::npos) continue;
        const std::string k = w.substr(0, eq), v = w.substr(eq + 1);
        if (k == "config") t.config_hash = v;
        else if (k == "seed") t.seed = std::stoull(v);
        else t.checksums[k] = v;
      }
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 13) throw FormatError("raw report: expected 13 fields, got " + std::to_string(f.size()));
    ReportRow r;
    r.attack = attack_from_string(f[0]);
    r.defense = defense_from_string(f[1]);
    for (std::size_t b = 0; b < 4; ++b) {
      r.error.count[b] = std::stoull(f[9 + b]);
      r.error.sum[b] = std::stod(f[2 + b]) * static_cast<double>(r.error.count[b]);
    }
    r.detection.map50 = std::stod(f[6]);
    r.detection.precision = std::stod(f[7]);
    r.detection.recall = std::stod(f[8]);
    t.rows.push_back(std::move(r));
  }
  return t;
}

std::map<std::string, std::string> emit_plot_data(const ReportTable& table) {
  std::vector<AttackKind> atk;
  std::vector<DefenseKind> def;
  for (const auto& r : table.rows) {
    if (std::find(atk.begin(), atk.end(), r.attack) == atk.end()) atk.push_back(r.attack);
    if (std::find(def.begin(), def.end(), r.defense) == def.end()) def.push_back(r.defense);
  }
  std::map<std::string, std::string> out;
  for (std::size_t m = 0; m < 7; ++m) {
    std::ostringstream o;
    o << "# " << header_line(table) << "\n";
    o << "attack";
    for (auto d : def) o << "," << to_string(d);
    o << "\n";
    for (auto a : atk) {
      o << to_string(a);
      for (auto d : def) {
        o << ",";
        for (const auto& r : table.rows)
          if (r.attack == a && r.defense == d) o << fmt_raw(metric_values(r)[m]);
      }
      o << "\n";
    }
    out[std::string("plot_") + kMetricNames[m] + ".csv"] = o.str();
  }
  return out;
}

}  // namespace arwb
