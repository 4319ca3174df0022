#include "keds/cli/pipeline.hpp"

#include <charconv>
#include <fstream>

#include "keds/error.hpp"
#include "keds/log.hpp"
#include "keds/mining/mining.hpp"
#include "keds/store/index.hpp"

namespace keds::cli {

namespace fs = std::filesystem;

namespace {

void require(const fs::path& p) {
  if (!fs::exists(p)) throw PathError("missing input: " + p.string());
}

store::EmbeddingMatrix load_matrix(const fs::path& p) {
  require(p);
  return store::load(p);
}

std::vector<store::KnowledgeRecord> load_meta(const fs::path& p) {
  require(p);
  return store::load_records(p);
}

}  // namespace

fs::path default_triplets(const RunConfig& c) { return c.dir() / "triplets.jsonl"; }
fs::path default_checkpoint(const RunConfig& c) { return c.dir() / "model.kedc"; }
fs::path default_train_log(const RunConfig& c) { return c.dir() / "train_log.jsonl"; }
fs::path default_report(const RunConfig& c) { return c.dir() / "report.jsonl"; }

TextSide load_text_side(const RunConfig& c) {
  TextSide t;
  const auto vocab_path = c.world_dir() / "vocab.json";
  require(vocab_path);
  t.vocab = encoders::Vocab::load(vocab_path);
  auto cc = c.composer();
  if (t.vocab.size() > cc.vocab_size) {
    throw ConfigError("vocab.json has " + std::to_string(t.vocab.size()) + " words but model.composer.vocab_size is " +
                      std::to_string(cc.vocab_size));
  }
  const auto table_path = c.world_dir() / "vocab.kedb";
  if (fs::exists(table_path)) {
    auto table = store::load(table_path);
    t.composer = std::make_unique<encoders::ComposerF>(cc, &table);
  } else {
    t.composer = std::make_unique<encoders::ComposerF>(cc);
  }
  return t;
}

void gen_synth(const RunConfig& c, const fs::path& out) {
  auto world = encoders::synth_generate(c.synth, c.composer(), c.seed);
  encoders::save_world(world, out);
  log::info("gen-synth: corpus " + std::to_string(c.synth.corpus) + ", database " +
            std::to_string(c.synth.database) + ", gallery " + std::to_string(c.synth.gallery) + ", " +
            std::to_string(world.tasks.size()) + " tasks -> " + out.string());
}

std::uint64_t build_db(const RunConfig& c, const fs::path& db_dir) {
  const auto w = c.world_dir();
  auto images = load_matrix(w / "db_images.kedb");
  auto captions = load_matrix(w / "db_captions.kedb");
  auto records = load_meta(w / "db.jsonl");
  if (c.store.db_size > 0 && c.store.db_size < images.count()) {
    images = images.prefix(c.store.db_size);
    captions = captions.prefix(c.store.db_size);
    records.resize(c.store.db_size);
  }
  auto kb = store::KnowledgeBase::build(std::move(images), std::move(captions), std::move(records), c.index_spec());
  fs::create_directories(db_dir);
  store::save(kb.images(), db_dir / "db_images.kedb");
  store::save(kb.captions(), db_dir / "db_captions.kedb");
  store::save_records(kb.records(), db_dir / "db.jsonl");
  kb.save_indices(db_dir, "db");
  log::info("build-db: " + std::to_string(kb.size()) + " rows, " + c.store.index + " index -> " + db_dir.string());
  return kb.size();
}

std::pair<std::size_t, std::size_t> mine(const RunConfig& c, const fs::path& out) {
  const auto w = c.world_dir();
  auto captions = std::make_shared<const store::EmbeddingMatrix>(load_matrix(w / "corpus_captions.kedb"));
  auto records = load_meta(w / "corpus.jsonl");
  store::FlatIndex index(captions);
  auto result = mining::mine(records, index, c.threads);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  mining::save_triplets(result.triplets, out);
  log::info("mine: " + std::to_string(result.triplets.size()) + " triplets, " + std::to_string(result.skipped) +
            " skipped -> " + out.string());
  return {result.triplets.size(), result.skipped};
}

store::KnowledgeBase load_knowledge(const RunConfig& c) {
  const auto dir = c.db_dir();
  require(dir / "db_images.kedb");
  return store::KnowledgeBase::load(dir, "db", c.index_spec());
}

namespace {

trainer::Model run_training(const RunConfig& c, const trainer::TrainConfig& tc, const TextSide& text,
                            const store::KnowledgeBase& kb, const std::vector<mining::PseudoTriplet>& triplets,
                            const std::function<void(const std::string&)>& log_sink, const fs::path& checkpoint,
                            const fs::path& resume) {
  const auto w = c.world_dir();
  auto images = load_matrix(w / "corpus_images.kedb");
  auto captions = load_matrix(w / "corpus_captions.kedb");
  trainer::TrainData data{&images, &captions, triplets, &kb};
  trainer::Trainer tr(tc, trainer::init_model(c.seed, c.model.bkp), *text.composer, text.vocab, std::move(data),
                      c.seed, c.threads);
  if (!resume.empty()) {
    tr.restore(trainer::load_checkpoint(resume));
    log::info("train: resumed at step " + std::to_string(tr.current_step()));
  }
  tr.run([&](const trainer::StepLog& l) {
    if (log_sink && (l.step % c.train.log_every == 0 || l.step == tc.total_steps)) {
      log_sink(trainer::to_json_line(l));
    }
    if (!checkpoint.empty() && c.train.checkpoint_every > 0 && l.step % c.train.checkpoint_every == 0) {
      trainer::save_checkpoint(tr.checkpoint(), checkpoint);
    }
  });
  if (!checkpoint.empty()) trainer::save_checkpoint(tr.checkpoint(), checkpoint);
  return tr.model().clone();
}

}  // namespace

trainer::Model train(const RunConfig& c, const fs::path& checkpoint,
                     const std::function<void(const std::string&)>& log_sink, const fs::path& resume) {
  auto text = load_text_side(c);
  auto kb = load_knowledge(c);
  const auto tpath = default_triplets(c);
  require(tpath);
  auto triplets = mining::load_triplets(tpath);
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  return run_training(c, c.train.config, text, kb, triplets, log_sink, checkpoint, resume);
}

trainer::Model train_in_memory(const RunConfig& c, const trainer::TrainConfig& tc, const TextSide& text,
                               const store::KnowledgeBase& kb,
                               const std::function<void(const std::string&)>& log_sink) {
  const auto tpath = default_triplets(c);
  require(tpath);
  return run_training(c, tc, text, kb, mining::load_triplets(tpath), log_sink, {}, {});
}

std::vector<encoders::EvalTask> load_eval_tasks(const RunConfig& c) {
  const fs::path p = c.eval.tasks.empty() ? c.world_dir() / "tasks.jsonl" : fs::path(c.eval.tasks);
  require(p);
  return encoders::load_tasks(p);
}

std::vector<evalkit::SweepRow> evaluate(const RunConfig& c, const trainer::Model& model) {
  auto text = load_text_side(c);
  auto kb = load_knowledge(c);
  auto gallery = load_matrix(c.world_dir() / "gallery_images.kedb");
  auto tasks = load_eval_tasks(c);
  evalkit::Bundle bundle{&model, text.composer.get(), &kb, &gallery};
  std::vector<evalkit::SweepRow> rows;
  auto ranks = evalkit::rank_tasks(bundle, tasks, c.eval.inference, c.threads);
  rows.push_back({"method", std::string("keds"), evalkit::summarize(ranks, tasks), c.seed});
  if (c.eval.baselines) {
    for (auto b : {evalkit::Baseline::ImageOnly, evalkit::Baseline::TextOnly, evalkit::Baseline::ImageText}) {
      auto r = evalkit::rank_baseline(b, *text.composer, gallery, tasks, c.threads);
      rows.push_back({"method", std::string(evalkit::baseline_name(b)), evalkit::summarize(r, tasks), c.seed});
    }
  }
  return rows;
}

std::vector<evalkit::SweepRow> sweep(const RunConfig& c, const trainer::Model& model, const std::string& axis,
                                     const std::vector<evalkit::SweepValue>& values) {
  auto text = load_text_side(c);
  auto kb = load_knowledge(c);
  auto gallery = load_matrix(c.world_dir() / "gallery_images.kedb");
  auto tasks = load_eval_tasks(c);
  return evalkit::ablation_sweep(
      axis, values, c.eval.inference, c.train.config, c.seed, [&](const evalkit::SweepPoint& p) {
        const store::KnowledgeBase sized = p.db_size > 0 && p.db_size < kb.size() ? kb.prefix(p.db_size) : kb;
        trainer::Model local;
        const trainer::Model* use = &model;
        if (p.retrain) {
          log::info("sweep: retraining for " + axis);
          local = train_in_memory(c, p.train, text, sized);
          use = &local;
        }
        evalkit::Bundle bundle{use, text.composer.get(), &sized, &gallery};
        return evalkit::summarize(evalkit::rank_tasks(bundle, tasks, p.inference, c.threads), tasks);
      });
}

evalkit::SweepValue parse_sweep_value(const std::string& text) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec == std::errc() && ptr == text.data() + text.size()) return v;
  return text;
}

}  // namespace keds::cli
