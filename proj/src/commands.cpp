#include "arwb/commands.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "arwb/errors.hpp"
#include "arwb/hash.hpp"
#include "arwb/rng.hpp"

namespace arwb {

namespace fs = std::filesystem;

std::string output_header(const std::string& config_hash, std::uint64_t seed) {
  return std::string("arwb ") + kVersion + " config=" + config_hash + " seed=" + std::to_string(seed);
}

namespace {

// Hash of a command's canonical argument list, standing in for the config
// hash of commands that take no config file.
std::string request_hash(const std::string& canonical) { return hex64(fnv1a(canonical)); }

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void say(const CommandContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

ModelKind task_kind(const std::string& s) {
  if (s == "detector") return ModelKind::SignDetector;
  if (s == "regressor") return ModelKind::DistanceRegressor;
  throw UsageError("unknown model '" + s + "' (valid: detector, regressor)");
}

DatasetKind data_kind_for(ModelKind k) {
  return k == ModelKind::SignDetector ? DatasetKind::Sign : DatasetKind::Road;
}

DatasetManifest load_task_data(const CommandContext& ctx, const std::string& dir, ModelKind kind) {
  if (dir.empty()) throw ConfigError("no dataset given (--data)");
  const fs::path p = ctx.resolve(dir);
  if (!fs::exists(p / "manifest.csv")) throw ConfigError("dataset not found: " + p.string());
  DatasetManifest m = load_dataset(p);
  if (m.empty()) throw ConfigError("dataset is empty: " + p.string());
  if (kind != ModelKind::Denoiser && m.kind != data_kind_for(kind))
    throw ConfigError("dataset " + p.string() + " holds " + to_string(m.kind) + " scenes, model needs " +
                      to_string(data_kind_for(kind)));
  return m;
}

ModelBundle load_checkpoint(const CommandContext& ctx, const std::string& path) {
  if (path.empty()) throw ConfigError("no checkpoint given");
  const fs::path p = ctx.resolve(path);
  if (!fs::exists(p)) throw ConfigError("checkpoint not found: " + p.string());
  return load(p);
}

std::string curve_csv(const std::string& header, const std::vector<std::pair<std::string, double>>& rows) {
  std::ostringstream o;
  o << "# " << header << "\nphase,epoch,loss\n";
  std::map<std::string, std::size_t> epoch;
  for (const auto& [phase, loss] : rows) o << phase << "," << ++epoch[phase] << "," << num(loss) << "\n";
  return o.str();
}

std::vector<std::pair<std::string, double>> phase(const std::string& name, const std::vector<double>& losses) {
  std::vector<std::pair<std::string, double>> out;
  for (double l : losses) out.push_back({name, l});
  return out;
}

void save_with_curve(const fs::path& ckpt, const ModelBundle& m, const std::string& curve) {
  std::error_code ec;
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path(), ec);
  save(m, ckpt);
  fs::path c = ckpt;
  c.replace_extension(".curve.csv");
  write_text(c, curve);
}

// Largest objectness for the detector, predicted distance for the regressor.
double model_score(const ModelBundle& m, const Tensor& x) {
  if (m.kind() == ModelKind::SignDetector) {
    const GridPrediction p = detector_forward(m, x);
    double best = 0.0;
    for (std::size_t c = 0; c < kGrid * kGrid; ++c) best = std::max<double>(best, p.objectness(c));
    return best;
  }
  return regressor_forward(m, x).item();
}

// Dataset-level metric: mAP@50 for signs, mean |prediction - label| for road.
std::string summary_metric(const ModelBundle& m, const DatasetManifest& data, const std::vector<Tensor>& images,
                           double* value) {
  if (m.kind() == ModelKind::SignDetector) {
    DetectionsPerImage dets;
    BoxesPerImage gts;
    for (std::size_t i = 0; i < images.size(); ++i) {
      dets.push_back(decode_detections(detector_forward(m, images[i]), 0.0f, 0.45f));
      gts.push_back(data.entries[i].labels.has_sign ? std::vector<Box>{data.entries[i].labels.box} : std::vector<Box>{});
    }
    *value = average_precision_50(dets, gts);
    return "map50";
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i)
    sum += std::abs(regressor_forward(m, images[i]).item() - data.entries[i].labels.distance_m);
  *value = images.empty() ? 0.0 : sum / static_cast<double>(images.size());
  return "mean_abs_error_m";
}

std::string image_name(std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
  return name;
}

DatasetManifest with_images(const DatasetManifest& data, const std::vector<Tensor>& images) {
  DatasetManifest out = data;
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.entries[i].image = images[i];
    out.entries[i].path.clear();
  }
  return out;
}

std::vector<Tensor> images_of(const DatasetManifest& data) {
  std::vector<Tensor> out;
  for (const auto& s : data.entries) out.push_back(s.image);
  return out;
}

}  // namespace

// ---- gen ----

void cmd_gen(const CommandContext& ctx, const GenArgs& a) {
  if (a.n == 0) throw UsageError("gen: --n must be at least 1");
  DatasetManifest m;
  if (a.kind == "sign") m = generate_sign_dataset(a.n, a.seed);
  else if (a.kind == "road") m = generate_road_dataset(a.n, a.seed);
  else throw UsageError("gen: unknown kind '" + a.kind + "' (valid: sign, road)");
  const std::string hash = request_hash("gen kind=" + a.kind + " n=" + std::to_string(a.n));
  const fs::path out = ctx.resolve(a.out.empty() ? "data/" + a.kind : a.out);
  write_dataset(out, m, output_header(hash, a.seed));
  say(ctx, "wrote " + std::to_string(m.size()) + " " + a.kind + " scenes to " + out.string());
}

// ---- training ----

ModelBundle train_task_model(ModelKind kind, const DatasetManifest& data, std::size_t epochs, float lr,
                             std::size_t batch, std::uint64_t seed, TrainReport* report) {
  ModelBundle m = ModelBundle::init(kind, Rng::mix(seed, 1));
  TrainOptions o;
  o.epochs = epochs;
  o.lr = lr;
  o.batch_size = batch;
  o.seed = seed;
  TrainReport rep = train(m, data, o);
  if (report) *report = std::move(rep);
  return m;
}

void cmd_train(const CommandContext& ctx, const TrainArgs& a) {
  if (a.epochs == 0) throw UsageError("train: --epochs must be at least 1");
  const std::string canonical = "train model=" + a.model + " data=" + a.data + " epochs=" + std::to_string(a.epochs) +
                                " lr=" + num(a.lr) + " batch=" + std::to_string(a.batch);
  const std::string header = output_header(request_hash(canonical), a.seed);
  const fs::path out = ctx.resolve(a.out.empty() ? "models/" + a.model + ".arwb" : a.out);
  if (a.model == "denoiser") {
    const DatasetManifest data = load_task_data(ctx, a.data, ModelKind::Denoiser);
    DenoiserOptions o;
    o.epochs = a.epochs;
    o.lr = a.lr;
    o.seed = a.seed;
    TrainReport rep;
    const ModelBundle m = train_denoiser(images_of(data), o, &rep);
    save_with_curve(out, m, curve_csv(header, phase("denoise", rep.epoch_loss)));
  } else {
    const ModelKind kind = task_kind(a.model);
    const DatasetManifest data = load_task_data(ctx, a.data, kind);
    TrainReport rep;
    const ModelBundle m = train_task_model(kind, data, a.epochs, a.lr, a.batch, a.seed, &rep);
    save_with_curve(out, m, curve_csv(header, phase("train", rep.epoch_loss)));
  }
  say(ctx, "wrote " + out.string());
}

DatasetManifest attack_dataset(const ModelBundle& model, const DatasetManifest& data, InnerAttack kind,
                               const AdvTrainOptions& adv, std::uint64_t seed) {
  DatasetManifest out = data;
  AdvTrainOptions o = adv;
  o.attack = kind;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data.entries[i];
    const Tensor delta = inner_attack(model, s, data.kind, o, Rng::mix(seed, i));
    out.entries[i].image = clip01(s.image + delta);
    out.entries[i].path.clear();
  }
  return out;
}

void cmd_advtrain(const CommandContext& ctx, const AdvTrainArgs& a) {
  if (a.epochs == 0) throw UsageError("advtrain: --epochs must be at least 1");
  const ModelKind kind = task_kind(a.model);
  const DatasetManifest data = load_task_data(ctx, a.data, kind);
  AdvTrainOptions adv;
  adv.inner.epsilon = a.eps;
  adv.inner.alpha = a.alpha;
  adv.inner.max_iters = a.iters;
  adv.inner.validate();
  const std::string canonical = "advtrain model=" + a.model + " data=" + a.data + " inner=" + a.inner +
                                " eps=" + num(a.eps) + " alpha=" + num(a.alpha) + " iters=" + std::to_string(a.iters) +
                                " epochs=" + std::to_string(a.epochs) + " lr=" + num(a.lr) +
                                " batch=" + std::to_string(a.batch) + " fraction=" + num(a.fraction) + " base=" + a.base;
  const std::string header = output_header(request_hash(canonical), a.seed);
  const fs::path out = ctx.resolve(a.out.empty() ? "models/" + a.model + "_adv_" + a.inner + ".arwb" : a.out);

  if (a.inner != "mixed") {
    adv.attack = inner_attack_from_string(a.inner);
    TrainOptions o;
    o.epochs = a.epochs;
    o.lr = a.lr;
    o.batch_size = a.batch;
    o.seed = a.seed;
    TrainReport rep;
    const ModelBundle m = adversarial_train(ModelBundle::init(kind, Rng::mix(a.seed, 1)), data, adv, o, &rep);
    save_with_curve(out, m, curve_csv(header, phase("train", rep.epoch_loss)));
    say(ctx, "wrote " + out.string());
    return;
  }

  // Mixed protocol: attack the data with each inner attack against a
  // standard model, draw the mixed train/test sets, train on the mix.
  ModelBundle base;
  if (a.base.empty()) {
    say(ctx, "training the standard model to attack");
    base = train_task_model(kind, data, a.epochs, a.lr, a.batch, a.seed);
  } else {
    base = load_checkpoint(ctx, a.base);
  }
  std::vector<DatasetManifest> per_attack;
  for (auto k : {InnerAttack::Gaussian, InnerAttack::Fgsm, InnerAttack::AutoPgd, InnerAttack::Patch}) {
    say(ctx, "attacking the training set with " + to_string(k));
    per_attack.push_back(attack_dataset(base, data, k, adv, Rng::mix(a.seed, 0x400 + static_cast<int>(k))));
  }
  const auto [mixed_train, mixed_test] = build_mixed_set(per_attack, a.fraction, a.seed);
  TrainReport rep;
  const ModelBundle m = train_task_model(kind, mixed_train, a.epochs, a.lr, a.batch, a.seed, &rep);
  save_with_curve(out, m, curve_csv(header, phase("train", rep.epoch_loss)));
  fs::path test_dir = out;
  test_dir.replace_extension("");
  test_dir += "_mixed_test";
  write_dataset(test_dir, mixed_test, header);
  say(ctx, "mixed set: " + std::to_string(mixed_train.size()) + " train, " + std::to_string(mixed_test.size()) +
               " test; wrote " + out.string());
}

void cmd_contrastive(const CommandContext& ctx, const ContrastiveArgs& a) {
  const ModelKind kind = task_kind(a.model);
  const DatasetManifest data = load_task_data(ctx, a.data, kind);
  ContrastiveOptions o;
  o.tau = a.tau;
  o.epochs = a.epochs;
  o.lr = a.lr;
  o.seed = a.seed;
  o.finetune.epochs = a.finetune_epochs;
  o.finetune.lr = a.finetune_lr;
  o.finetune.seed = a.seed;
  const std::string canonical = "contrastive model=" + a.model + " data=" + a.data + " tau=" + num(a.tau) +
                                " epochs=" + std::to_string(a.epochs) + " finetune=" + std::to_string(a.finetune_epochs) +
                                " lr=" + num(a.lr) + " finetune_lr=" + num(a.finetune_lr);
  const std::string header = output_header(request_hash(canonical), a.seed);
  ContrastiveReport rep;
  const ModelBundle m = contrastive_train(ModelBundle::init(kind, Rng::mix(a.seed, 1)), data, o, &rep);
  auto rows = phase("contrastive", rep.epoch_loss);
  for (const auto& r : phase("finetune", rep.finetune.epoch_loss)) rows.push_back(r);
  const fs::path out = ctx.resolve(a.out.empty() ? "models/" + a.model + "_contrastive.arwb" : a.out);
  save_with_curve(out, m, curve_csv(header, rows));
  say(ctx, "wrote " + out.string());
}

// ---- attack / defend / restore ----

void cmd_attack(const CommandContext& ctx, const AttackArgs& a) {
  const AttackKind kind = [&] {
    try {
      return attack_from_string(a.name);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }();
  if (a.basis != "dct" && a.basis != "pixel") throw UsageError("unknown basis '" + a.basis + "' (valid: dct, pixel)");
  const ModelBundle model = load_checkpoint(ctx, a.model);
  if (model.kind() == ModelKind::Denoiser) throw UsageError("attack: the denoiser is not an attack target");
  const DatasetManifest data = load_task_data(ctx, a.data, model.kind());
  Budget budget;
  budget.epsilon = a.eps;
  budget.alpha = a.alpha;
  budget.max_iters = a.iters;
  budget.max_queries = a.queries;
  budget.validate();
  const SimbaBasis basis = a.basis == "dct" ? SimbaBasis::Dct : SimbaBasis::Pixel;
  const bool detector = model.kind() == ModelKind::SignDetector;
  const std::size_t n = data.size();

  std::vector<AttackResult> results(n);
  std::vector<std::string> bound_kind(n, "linf");
  std::vector<double> bound(n, a.eps);
  std::vector<double> clean_score(n);
  parallel_for(n, ctx.jobs, [&](std::size_t i) { clean_score[i] = model_score(model, data.entries[i].image); });

  if (kind == AttackKind::Patch && !detector) {
    // CAP treats the dataset as one frame sequence in manifest order.
    const auto frames = cap_run(model, to_road_scenes(data), [&] {
      Budget b = budget;
      b.seed = a.seed;
      return b;
    }(), a.lambda);
    for (std::size_t i = 0; i < n; ++i) results[i] = frames[i].result;
  } else {
    parallel_for(n, ctx.jobs, [&](std::size_t i) {
      const Sample& s = data.entries[i];
      Budget b = budget;
      b.seed = Rng::mix(a.seed, i);
      if (!detector) b.region = box_mask(s.labels.box);
      const Target target = detector ? Target(s.labels) : Target(static_cast<float>(clean_score[i]));
      AttackResult r;
      switch (kind) {
        case AttackKind::None: r.x_adv = s.image; r.delta = Tensor(s.image.shape(), 0.0f); break;
        case AttackKind::Gaussian:
          r = gaussian_noise(s.image, a.sigma, b.seed);
          bound_kind[i] = "none";
          break;
        case AttackKind::Fgsm: r = fgsm(model, s.image, target, b); break;
        case AttackKind::AutoPgd: r = auto_pgd(model, s.image, target, b); break;
        case AttackKind::Simba:
          b.norm = Norm::L2;
          r = simba(model, s.image, target, b, basis);
          bound_kind[i] = "l2sq";
          bound[i] = static_cast<double>(r.accepted_steps) * a.eps * a.eps;
          break;
        case AttackKind::Patch: {
          if (!s.labels.has_sign) {
            r.x_adv = s.image;
            r.delta = Tensor(s.image.shape(), 0.0f);
            break;
          }
          TransformSampler sampler;
          sampler.seed = b.seed;
          Rp2Options o;
          o.epsilon = 1.0f;
          const PatchState p = rp2(model, s.image, sign_mask(s.labels.box), Labels{}, sampler, a.lambda, a.rp2_iters, o);
          r.x_adv = apply_patch(s.image, p);
          r.delta = p.delta;
          bound_kind[i] = "mask";
          bound[i] = 1.0;
          break;
        }
      }
      results[i] = std::move(r);
    });
  }

  const std::string canonical = "attack name=" + to_string(kind) + " model=" + a.model + " data=" + a.data +
                                " eps=" + num(a.eps) + " alpha=" + num(a.alpha) + " iters=" + std::to_string(a.iters) +
                                " queries=" + std::to_string(a.queries) + " sigma=" + num(a.sigma) +
                                " basis=" + a.basis + " lambda=" + num(a.lambda) + " rp2_iters=" + std::to_string(a.rp2_iters);
  const std::string header = output_header(request_hash(canonical), a.seed);
  const fs::path out = ctx.resolve(a.out.empty() ? "out/" + to_string(kind) : a.out);

  std::vector<Tensor> adv(n);
  std::ostringstream csv;
  csv << "# " << header << "\n";
  csv << "index,file,score_clean,score_adv,linf,l2sq,bound_kind,bound,within_bound,queries_used,accepted_steps\n";
  std::size_t violations = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const AttackResult& r = results[i];
    adv[i] = r.x_adv;
    const Tensor applied = r.x_adv - data.entries[i].image;
    const Tensor& measured = r.delta.empty() ? applied : r.delta;
    const double linf = max_abs(measured.data());
    const double l2sq = squared_norm(measured.data());
    bool ok = true;
    if (bound_kind[i] == "linf") ok = linf <= bound[i];
    else if (bound_kind[i] == "l2sq") ok = l2sq <= bound[i] * (1.0 + 1e-6) + 1e-12;
    else if (bound_kind[i] == "mask") {
      const Tensor m = data.entries[i].labels.has_sign ? sign_mask(data.entries[i].labels.box) : Tensor();
      for (std::size_t k = 0; k < applied.numel() && !m.empty(); ++k)
        if (m[k] == 0.0f && applied[k] != 0.0f) ok = false;
    }
    if (!ok) ++violations;
    csv << i << "," << image_name(i) << "," << num(clean_score[i]) << "," << num(model_score(model, r.x_adv)) << ","
        << num(linf) << "," << num(l2sq) << "," << bound_kind[i] << "," << (bound_kind[i] == "none" ? "" : num(bound[i]))
        << "," << (ok ? 1 : 0) << "," << r.queries_used << "," << r.accepted_steps << "\n";
  }
  write_dataset(out, with_images(data, adv), header);
  write_text(out / "metrics.csv", csv.str());
  double before = 0.0, after = 0.0;
  const std::string metric = summary_metric(model, data, images_of(data), &before);
  summary_metric(model, data, adv, &after);
  write_text(out / "summary.csv",
             "# " + header + "\nmetric,clean,attacked\n" + metric + "," + num(before) + "," + num(after) + "\n");
  say(ctx, "wrote " + out.string() + ": " + metric + " " + num(before) + " -> " + num(after) +
               (violations ? ", " + std::to_string(violations) + " budget violations" : ""));
  if (violations) throw ContractError("attack: " + std::to_string(violations) + " images exceed their budget");
}

void cmd_defend(const CommandContext& ctx, const DefendArgs& a) {
  DefenseConfig cfg;
  try {
    cfg.kind = defense_from_string(a.name);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (cfg.is_training_defense())
    throw UsageError("defend: " + to_string(cfg.kind) + " is a training defense; use advtrain or contrastive");
  cfg.kernel = a.kernel;
  cfg.bits = a.bits;
  cfg.diffusion_steps = a.steps;
  cfg.zeta = a.zeta;
  cfg.rho_lambda = a.lambda;
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const DatasetManifest data = load_task_data(ctx, a.data, ModelKind::Denoiser);
  ImageDenoiser denoiser;
  if (cfg.kind == DefenseKind::DiffPIR) {
    if (a.denoiser.empty()) throw ConfigError("defend diffpir: --denoiser is required");
    denoiser = make_denoiser(load(ctx.resolve(a.denoiser), ModelKind::Denoiser));
  }
  const std::size_t n = data.size();
  std::vector<Tensor> processed(n);
  parallel_for(n, ctx.jobs, [&](std::size_t i) {
    processed[i] = apply_input_defense(cfg, data.entries[i].image, Rng::mix(a.seed, i), denoiser);
  });

  const std::string canonical = "defend name=" + to_string(cfg.kind) + " data=" + a.data + " model=" + a.model +
                                " denoiser=" + a.denoiser + " k=" + std::to_string(a.kernel) +
                                " bits=" + std::to_string(a.bits) + " steps=" + std::to_string(a.steps) +
                                " zeta=" + num(a.zeta) + " lambda=" + num(a.lambda);
  const std::string header = output_header(request_hash(canonical), a.seed);
  const fs::path out = ctx.resolve(a.out.empty() ? "out/" + to_string(cfg.kind) : a.out);
  std::optional<ModelBundle> model;
  if (!a.model.empty()) model = load_checkpoint(ctx, a.model);

  std::ostringstream csv;
  csv << "# " << header << "\nindex,file,psnr_vs_input" << (model ? ",score_input,score_output" : "") << "\n";
  for (std::size_t i = 0; i < n; ++i) {
    csv << i << "," << image_name(i) << "," << num(psnr(processed[i], data.entries[i].image));
    if (model)
      csv << "," << num(model_score(*model, data.entries[i].image)) << "," << num(model_score(*model, processed[i]));
    csv << "\n";
  }
  write_dataset(out, with_images(data, processed), header);
  write_text(out / "metrics.csv", csv.str());
  if (model) {
    if (data.kind != data_kind_for(model->kind())) throw ConfigError("defend: model and dataset kinds differ");
    double before = 0.0, after = 0.0;
    const std::string metric = summary_metric(*model, data, images_of(data), &before);
    summary_metric(*model, data, processed, &after);
    write_text(out / "summary.csv",
               "# " + header + "\nmetric,input,defended\n" + metric + "," + num(before) + "," + num(after) + "\n");
    say(ctx, metric + " " + num(before) + " -> " + num(after));
  }
  say(ctx, "wrote " + out.string());
}

void cmd_restore(const CommandContext& ctx, const RestoreArgs& a) {
  const DatasetManifest data = load_task_data(ctx, a.data, ModelKind::Denoiser);
  if (a.denoiser.empty()) throw ConfigError("restore: --denoiser is required");
  const ImageDenoiser denoiser = make_denoiser(load(ctx.resolve(a.denoiser), ModelKind::Denoiser));
  const DiffusionSchedule schedule = DiffusionSchedule::linear(a.steps, kAlphaBarFirst, kAlphaBarLast, a.zeta, a.lambda);
  std::optional<DatasetManifest> clean;
  if (!a.clean.empty()) {
    clean = load_task_data(ctx, a.clean, ModelKind::Denoiser);
    if (clean->size() != data.size()) throw ConfigError("restore: --clean has a different number of images");
  }
  const std::size_t n = data.size();
  std::vector<Tensor> restored(n);
  parallel_for(n, ctx.jobs, [&](std::size_t i) {
    restored[i] = diffpir_restore(data.entries[i].image, schedule, denoiser, Rng::mix(a.seed, i));
  });
  const std::string canonical = "restore data=" + a.data + " denoiser=" + a.denoiser + " clean=" + a.clean +
                                " steps=" + std::to_string(a.steps) + " zeta=" + num(a.zeta) + " lambda=" + num(a.lambda);
  const std::string header = output_header(request_hash(canonical), a.seed);
  const fs::path out = ctx.resolve(a.out);
  std::ostringstream csv;
  csv << "# " << header << "\nindex,file" << (clean ? ",psnr_input,psnr_restored,improved" : ",psnr_vs_input") << "\n";
  std::size_t improved = 0;
  for (std::size_t i = 0; i < n; ++i) {
    csv << i << "," << image_name(i);
    if (clean) {
      const double before = psnr(data.entries[i].image, clean->entries[i].image);
      const double after = psnr(restored[i], clean->entries[i].image);
      improved += after > before;
      csv << "," << num(before) << "," << num(after) << "," << (after > before ? 1 : 0);
    } else {
      csv << "," << num(psnr(restored[i], data.entries[i].image));
    }
    csv << "\n";
  }
  write_dataset(out, with_images(data, restored), header);
  write_text(out / "metrics.csv", csv.str());
  say(ctx, "wrote " + out.string() +
               (clean ? ": PSNR improved on " + std::to_string(improved) + "/" + std::to_string(n) + " images" : ""));
}

// ---- bench / report ----

std::size_t cmd_bench(const CommandContext& ctx, const RunConfig& cfg) {
  const std::string hash = cfg.hash();
  const std::uint64_t seed = cfg.seed;
  const std::string header = output_header(hash, seed);
  const fs::path out = ctx.resolve(cfg.out);
  const auto attacks = cfg.attack_configs();
  const auto defenses = cfg.defense_configs();
  auto has = [&](DefenseKind k) { return std::find(cfg.defenses.begin(), cfg.defenses.end(), k) != cfg.defenses.end(); };
  // Fail on missing checkpoints before any computation.
  for (const std::string* p : {&cfg.detector, &cfg.regressor, &cfg.denoiser})
    if (!p->empty() && !fs::exists(ctx.resolve(*p))) throw ConfigError("checkpoint not found: " + ctx.resolve(*p).string());

  say(ctx, "generating data");
  const DatasetManifest sign_train = generate_sign_dataset(cfg.sign_train, Rng::mix(seed, 11));
  const DatasetManifest road_train = generate_road_dataset(cfg.road_train, Rng::mix(seed, 12));
  BenchData data;
  data.signs = generate_sign_dataset(cfg.sign_test, Rng::mix(seed, 13));
  data.sequences = generate_road_sequences(cfg.road_sequences, cfg.road_frames, Rng::mix(seed, 14));

  const fs::path model_dir = out / "models";
  fs::create_directories(model_dir);
  auto obtain = [&](const std::string& path, const std::string& name, auto make) {
    if (!path.empty()) return load(ctx.resolve(path));
    say(ctx, "training " + name);
    ModelBundle m = make();
    save(m, model_dir / (name + ".arwb"));
    return m;
  };
  const float lr = cfg.lr;
  const std::size_t batch = cfg.batch_size;
  BenchModels models;
  models.base.detector = obtain(cfg.detector, "detector", [&] {
    return train_task_model(ModelKind::SignDetector, sign_train, cfg.detector_epochs, lr, batch, Rng::mix(seed, 21));
  });
  models.base.regressor = obtain(cfg.regressor, "regressor", [&] {
    return train_task_model(ModelKind::DistanceRegressor, road_train, cfg.regressor_epochs, lr, batch,
                            Rng::mix(seed, 22));
  });
  if (has(DefenseKind::AdvTrain)) {
    AdvTrainOptions adv;
    adv.attack = cfg.inner;
    adv.inner.epsilon = cfg.adv_epsilon;
    adv.inner.alpha = cfg.adv_epsilon / 4.0f;
    auto robust = [&](ModelKind kind, const DatasetManifest& d, std::size_t epochs, std::uint64_t s) {
      TrainOptions o;
      o.epochs = epochs;
      o.lr = lr;
      o.batch_size = batch;
      o.seed = s;
      return adversarial_train(ModelBundle::init(kind, Rng::mix(s, 1)), d, adv, o);
    };
    ModelSet ms;
    ms.detector = obtain("", "detector_adv", [&] {
      return robust(ModelKind::SignDetector, sign_train, cfg.advtrain_epochs, Rng::mix(seed, 31));
    });
    ms.regressor = obtain("", "regressor_adv", [&] {
      return robust(ModelKind::DistanceRegressor, road_train, cfg.advtrain_epochs, Rng::mix(seed, 32));
    });
    models.trained[DefenseKind::AdvTrain] = std::move(ms);
  }
  if (has(DefenseKind::Contrastive)) {
    auto contrastive = [&](ModelKind kind, const DatasetManifest& d, std::size_t finetune, std::uint64_t s) {
      ContrastiveOptions o;
      o.tau = cfg.tau;
      o.epochs = cfg.contrastive_epochs;
      o.seed = s;
      o.finetune.epochs = finetune;
      o.finetune.lr = lr;
      o.finetune.batch_size = batch;
      o.finetune.seed = s;
      return contrastive_train(ModelBundle::init(kind, Rng::mix(s, 1)), d, o);
    };
    ModelSet ms;
    ms.detector = obtain("", "detector_contrastive", [&] {
      return contrastive(ModelKind::SignDetector, sign_train, cfg.finetune_epochs, Rng::mix(seed, 41));
    });
    ms.regressor = obtain("", "regressor_contrastive", [&] {
      return contrastive(ModelKind::DistanceRegressor, road_train, cfg.finetune_epochs, Rng::mix(seed, 42));
    });
    models.trained[DefenseKind::Contrastive] = std::move(ms);
  }
  if (has(DefenseKind::DiffPIR)) {
    models.denoiser = obtain(cfg.denoiser, "denoiser", [&] {
      std::vector<Tensor> clean;
      const std::size_t half = cfg.denoiser_images / 2;
      for (std::size_t i = 0; i < half && i < sign_train.size(); ++i) clean.push_back(sign_train.entries[i].image);
      for (std::size_t i = 0; clean.size() < cfg.denoiser_images && i < road_train.size(); ++i)
        clean.push_back(road_train.entries[i].image);
      DenoiserOptions o;
      o.epochs = cfg.denoiser_epochs;
      o.seed = Rng::mix(seed, 51);
      return train_denoiser(clean, o);
    });
  }

  say(ctx, "running " + std::to_string(attacks.size() * defenses.size()) + " cells");
  BenchOptions bo;
  bo.seed = seed;
  bo.jobs = ctx.jobs;
  bo.conf = cfg.conf;
  bo.nms_iou = cfg.nms_iou;
  bo.config_hash = hash;
  bo.run_dir = out / "runs";
  const ReportTable table = run_benchmark_matrix(models, attacks, defenses, data, bo);

  write_text(out / "report.csv", emit_report(table, ReportFormat::Csv));
  write_text(out / "report.md", emit_report(table, ReportFormat::Markdown));
  write_text(out / "report.raw.csv", emit_report(table, ReportFormat::RawCsv));
  for (const auto& [name, text] : emit_plot_data(table)) write_text(out / name, text);
  write_text(out / "config.canonical.txt", "# " + header + "\n" + cfg.canonical());

  nlohmann::ordered_json failures;
  failures["version"] = kVersion;
  failures["config"] = hash;
  failures["seed"] = seed;
  failures["requested"] = attacks.size() * defenses.size();
  failures["completed"] = table.rows.size();
  failures["failures"] = nlohmann::json::array();
  for (const auto& f : table.failures) failures["failures"].push_back({{"cell", f.cell_id}, {"error", f.message}});
  write_text(out / "failures.json", failures.dump(2) + "\n");
  say(ctx, "wrote " + out.string() + " (" + std::to_string(table.rows.size()) + " cells, " +
               std::to_string(table.failures.size()) + " failed)");
  return table.failures.size();
}

void cmd_report(const CommandContext& ctx, const ReportArgs& a, std::ostream& stdout_stream) {
  if (a.raw.empty()) throw UsageError("report: --raw is required");
  std::ifstream f(ctx.resolve(a.raw), std::ios::binary);
  if (!f) throw ConfigError("report: cannot read " + ctx.resolve(a.raw).string());
  std::ostringstream ss;
  ss << f.rdbuf();
  const ReportTable t = parse_raw_report(ss.str());
  ReportFormat fmt;
  if (a.format == "csv") fmt = ReportFormat::Csv;
  else if (a.format == "md") fmt = ReportFormat::Markdown;
  else throw UsageError("report: unknown format '" + a.format + "' (valid: csv, md)");
  const std::string text = emit_report(t, fmt);
  if (a.out.empty()) stdout_stream << text;
  else write_text(ctx.resolve(a.out), text);
}

}  // namespace arwb
