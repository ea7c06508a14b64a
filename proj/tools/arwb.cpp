// Command-line front end; see `arwb --help`.

#include <cstdlib>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "arwb/commands.hpp"
#include "arwb/errors.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kIo = 4, kCellsFailed = 5 };

}  // namespace

int main(int argc, char** argv) {
  using namespace arwb;
  CLI::App app{"Adversarial robustness workbench: toy sign detector and distance regressor"};
  app.require_subcommand(1);
  std::string workdir = ".";
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  bool quiet = false;
  app.add_option("--workdir", workdir, "Base directory for every relative path");
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_flag("-q,--quiet", quiet, "No progress output");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset (PPM images + manifest.csv)");
  g->add_option("--kind", gen.kind, "sign or road")->check(CLI::IsMember({"sign", "road"}));
  g->add_option("--n", gen.n, "Number of scenes")->required();
  g->add_option("--seed", gen.seed);
  g->add_option("--out", gen.out, "Output directory (default data/<kind>)");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; writes the checkpoint and <checkpoint>.curve.csv");
  t->add_option("--model", tr.model, "detector, regressor or denoiser")
      ->check(CLI::IsMember({"detector", "regressor", "denoiser"}));
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--epochs", tr.epochs);
  t->add_option("--lr", tr.lr);
  t->add_option("--batch", tr.batch);
  t->add_option("--seed", tr.seed);
  t->add_option("--out", tr.out, "Checkpoint path (default models/<model>.arwb)");

  AdvTrainArgs at;
  auto* a = app.add_subcommand("advtrain", "Min-max adversarial training");
  a->add_option("--model", at.model)->check(CLI::IsMember({"detector", "regressor"}));
  a->add_option("--data", at.data)->required();
  a->add_option("--inner", at.inner, "Inner attack")
      ->check(CLI::IsMember({"fgsm", "autopgd", "gaussian", "patch", "mixed"}));
  a->add_option("--eps", at.eps);
  a->add_option("--alpha", at.alpha);
  a->add_option("--iters", at.iters);
  a->add_option("--epochs", at.epochs);
  a->add_option("--lr", at.lr);
  a->add_option("--batch", at.batch);
  a->add_option("--seed", at.seed);
  a->add_option("--fraction", at.fraction, "Mixed set: share of each attacked set drawn into train and test");
  a->add_option("--base", at.base, "Mixed set: checkpoint to attack (trained when omitted)");
  a->add_option("--out", at.out);

  ContrastiveArgs ct;
  auto* c = app.add_subcommand("contrastive", "InfoNCE pretraining followed by supervised fine-tuning");
  c->add_option("--model", ct.model)->check(CLI::IsMember({"detector", "regressor"}));
  c->add_option("--data", ct.data)->required();
  c->add_option("--tau", ct.tau)->check(CLI::PositiveNumber);
  c->add_option("--epochs", ct.epochs);
  c->add_option("--finetune-epochs", ct.finetune_epochs);
  c->add_option("--lr", ct.lr);
  c->add_option("--finetune-lr", ct.finetune_lr);
  c->add_option("--seed", ct.seed);
  c->add_option("--out", ct.out);

  AttackArgs ak;
  auto* k = app.add_subcommand("attack", "Attack every image of a dataset; writes out/<name>/");
  k->add_option("--name", ak.name, "none, gaussian, fgsm, autopgd, simba or patch")->required();
  k->add_option("--model", ak.model, "Checkpoint")->required();
  k->add_option("--data", ak.data)->required();
  k->add_option("--eps", ak.eps);
  k->add_option("--alpha", ak.alpha);
  k->add_option("--iters", ak.iters);
  k->add_option("--queries", ak.queries);
  k->add_option("--sigma", ak.sigma);
  k->add_option("--basis", ak.basis, "SimBA basis: dct or pixel");
  k->add_option("--lambda", ak.lambda, "RP2 norm weight / CAP shrinkage");
  k->add_option("--rp2-iters", ak.rp2_iters);
  k->add_option("--seed", ak.seed);
  k->add_option("--out", ak.out);

  DefendArgs df;
  auto* d = app.add_subcommand("defend", "Apply an input-processing defense; writes out/<name>/");
  d->add_option("--name", df.name, "none, median_blur, bit_depth, randomize or diffpir")->required();
  d->add_option("--data", df.data)->required();
  d->add_option("--model", df.model, "Optional checkpoint to score the processed set");
  d->add_option("--denoiser", df.denoiser, "Denoiser checkpoint (diffpir)");
  d->add_option("-k,--kernel", df.kernel);
  d->add_option("--bits", df.bits);
  d->add_option("--steps", df.steps);
  d->add_option("--zeta", df.zeta);
  d->add_option("--lambda", df.lambda);
  d->add_option("--seed", df.seed);
  d->add_option("--out", df.out);

  RestoreArgs rs;
  auto* r = app.add_subcommand("restore", "DiffPIR restoration of a dataset");
  r->add_option("--data", rs.data)->required();
  r->add_option("--denoiser", rs.denoiser)->required();
  r->add_option("--clean", rs.clean, "Clean reference dataset for PSNR");
  r->add_option("--steps", rs.steps);
  r->add_option("--zeta", rs.zeta);
  r->add_option("--lambda", rs.lambda);
  r->add_option("--seed", rs.seed);
  r->add_option("--out", rs.out);

  std::string config_path;
  auto* b = app.add_subcommand("bench", "Run the attack x defense matrix of a config file");
  b->add_option("config", config_path, "Config file")->required();

  ReportArgs rp;
  auto* p = app.add_subcommand("report", "Re-emit a report from its raw sidecar");
  p->add_option("--raw", rp.raw, "report.raw.csv")->required();
  p->add_option("--format", rp.format, "csv or md")->check(CLI::IsMember({"csv", "md"}));
  p->add_option("--out", rp.out, "Output file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  CommandContext ctx;
  ctx.workdir = workdir;
  ctx.jobs = jobs;
  ctx.log = quiet ? nullptr : &std::cerr;
  try {
    if (g->parsed()) cmd_gen(ctx, gen);
    else if (t->parsed()) cmd_train(ctx, tr);
    else if (a->parsed()) cmd_advtrain(ctx, at);
    else if (c->parsed()) cmd_contrastive(ctx, ct);
    else if (k->parsed()) cmd_attack(ctx, ak);
    else if (d->parsed()) cmd_defend(ctx, df);
    else if (r->parsed()) cmd_restore(ctx, rs);
    else if (p->parsed()) cmd_report(ctx, rp, std::cout);
    else if (b->parsed()) {
      RunConfig cfg = load_config(ctx.resolve(config_path));
      apply_env_overrides(cfg);
      if (cfg.jobs != 0 && !app.get_option("--jobs")->count()) ctx.jobs = cfg.jobs;
      if (cmd_bench(ctx, cfg) != 0) return kCellsFailed;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
