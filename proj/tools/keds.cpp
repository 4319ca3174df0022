// keds: command-line front end for the synthetic and exported pipelines.

#include <CLI11.hpp>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "keds/cli/gradient_suite.hpp"
#include "keds/cli/pipeline.hpp"
#include "keds/cli/run_config.hpp"
#include "keds/error.hpp"
#include "keds/log.hpp"

namespace fs = std::filesystem;
using namespace keds;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<std::uint32_t> topk;
  std::string db;
  std::string out;
  std::string streams;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Run config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Root seed");
  app->add_option("--alpha", o.alpha, "Hybrid weight of stream M");
  app->add_option("--beta", o.beta, "Weight of the complement term");
  app->add_option("--topk", o.topk, "Retrieved knowledge rows K");
  app->add_option("--db", o.db, "Knowledge database directory");
  app->add_option("--out", o.out, "Primary output path of the command");
  app->add_option("--streams", o.streams, "Active streams")->check(CLI::IsMember({"M", "A", "both"}));
  app->add_option("--threads", o.threads, "Worker threads");
}

cli::RunConfig resolve(const Overrides& o, bool training) {
  auto c = o.config.empty() ? cli::parse_run_config("{}") : cli::load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.alpha) c.eval.inference.alpha = *o.alpha;
  if (o.beta) c.train.config.beta = *o.beta;
  if (o.topk) c.eval.inference.k = c.train.config.k = *o.topk;
  if (!o.db.empty()) c.store.db = o.db;
  if (!o.streams.empty()) (training ? c.train.config.streams : c.eval.inference.streams) = o.streams;
  if (o.threads) c.threads = *o.threads;
  c.validate();
  log::info("effective config:\n" + cli::to_json(c));
  return c;
}

fs::path or_default(const std::string& flag, const fs::path& fallback) {
  return flag.empty() ? fallback : fs::path(flag);
}

void write_report(const std::vector<evalkit::SweepRow>& rows, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  evalkit::save_report(rows, path);
  std::cout << evalkit::format_table(rows);
  log::info("report -> " + path.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-enhanced zero-shot composed retrieval over frozen embeddings"};
  app.require_subcommand(1);

  Overrides o;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic world");
  auto* db = app.add_subcommand("build-db", "Build the knowledge database and its indices");
  auto* mine = app.add_subcommand("mine", "Mine pseudo triplets from the corpus");
  auto* train = app.add_subcommand("train", "Train both projection networks");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on composed tasks");
  auto* sweep = app.add_subcommand("sweep", "Run an ablation axis");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  for (auto* s : {gen, db, mine, train, eval, sweep}) add_common(s, o);

  std::string resume, checkpoint, axis;
  std::vector<std::string> values;
  std::size_t grad_seeds = 10;
  train->add_option("--resume", resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  for (auto* s : {eval, sweep}) s->add_option("--checkpoint", checkpoint, "Model checkpoint");
  sweep->add_option("--axis", axis, "alpha | k | beta | db_size | knockout")->required();
  sweep->add_option("--values", values, "Axis values")->required();
  grad->add_option("--seeds", grad_seeds, "Seeds per case");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      auto c = resolve(o, false);
      cli::gen_synth(c, or_default(o.out, c.world_dir()));
    } else if (db->parsed()) {
      auto c = resolve(o, false);
      cli::build_db(c, or_default(o.out, c.db_dir()));
    } else if (mine->parsed()) {
      auto c = resolve(o, false);
      cli::mine(c, or_default(o.out, cli::default_triplets(c)));
    } else if (train->parsed()) {
      auto c = resolve(o, true);
      const auto log_path = cli::default_train_log(c);
      fs::create_directories(c.dir());
      std::ofstream log_file(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
      if (!log_file) throw PathError("cannot write " + log_path.string());
      cli::train(c, or_default(o.out, cli::default_checkpoint(c)),
                 [&](const std::string& line) {
                   log_file << line << '\n';
                   log::info(line);
                 },
                 resume);
    } else if (eval->parsed() || sweep->parsed()) {
      auto c = resolve(o, false);
      const auto ckpt = or_default(checkpoint, cli::default_checkpoint(c));
      if (!fs::exists(ckpt)) throw PathError("missing input: " + ckpt.string());
      auto model = trainer::load_checkpoint(ckpt).model;
      std::vector<evalkit::SweepRow> rows;
      if (eval->parsed()) {
        rows = cli::evaluate(c, model);
      } else {
        std::vector<evalkit::SweepValue> parsed;
        for (const auto& v : values) parsed.push_back(cli::parse_sweep_value(v));
        rows = cli::sweep(c, model, axis, parsed);
      }
      write_report(rows, or_default(o.out, cli::default_report(c)));
    } else if (grad->parsed()) {
      auto report = cli::run_gradient_suite(grad_seeds);
      std::cout << cli::format_report(report);
      return report.passed() ? 0 : 1;
    }
  } catch (const Error& e) {
    log::error(e.what());
    return 1;
  } catch (const std::exception& e) {
    log::error(std::string("unexpected: ") + e.what());
    return 2;
  }
  return 0;
}
