#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "keds/cli/run_config.hpp"
#include "keds/encoders/composer.hpp"
#include "keds/encoders/tokens.hpp"
#include "keds/evalkit/evalkit.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/trainer/trainer.hpp"

namespace keds::cli {

// Artifact layout under RunConfig::dir():
//   world/     vocab.json, vocab.kedb (optional), {corpus,db,gallery}_{images,captions}.kedb,
//              {corpus,db,gallery}.jsonl, tasks.jsonl
//   db/        db_images.kedb, db_captions.kedb, db.jsonl, db_index.json
//   triplets.jsonl, model.kedc, train_log.jsonl, report.jsonl

std::filesystem::path default_triplets(const RunConfig& c);
std::filesystem::path default_checkpoint(const RunConfig& c);
std::filesystem::path default_train_log(const RunConfig& c);
std::filesystem::path default_report(const RunConfig& c);

/// Frozen text side of a run: the vocab and the composer built over it.
struct TextSide {
  encoders::Vocab vocab;
  std::unique_ptr<encoders::ComposerF> composer;
};
/// Uses world/vocab.kedb as the vocabulary table when present.
TextSide load_text_side(const RunConfig& c);

void gen_synth(const RunConfig& c, const std::filesystem::path& out);
/// Returns the number of database rows indexed.
std::uint64_t build_db(const RunConfig& c, const std::filesystem::path& db_dir);
/// Returns {triplets written, records skipped}.
std::pair<std::size_t, std::size_t> mine(const RunConfig& c, const std::filesystem::path& out);

store::KnowledgeBase load_knowledge(const RunConfig& c);

/// Trains from scratch (or from `resume` when non-empty) and writes the
/// final checkpoint to `checkpoint`. Log lines go to `log_sink`.
trainer::Model train(const RunConfig& c, const std::filesystem::path& checkpoint,
                     const std::function<void(const std::string&)>& log_sink,
                     const std::filesystem::path& resume = {});

/// Trains in memory against an already loaded text side and knowledge base.
trainer::Model train_in_memory(const RunConfig& c, const trainer::TrainConfig& train_config,
                               const TextSide& text, const store::KnowledgeBase& knowledge,
                               const std::function<void(const std::string&)>& log_sink = {});

std::vector<encoders::EvalTask> load_eval_tasks(const RunConfig& c);

/// One row for the composed method ("method" axis, value "keds") and, when
/// enabled, one per baseline.
std::vector<evalkit::SweepRow> evaluate(const RunConfig& c, const trainer::Model& model);

/// Runs an ablation axis. Points needing new weights are trained in memory;
/// the rest reuse `model`.
std::vector<evalkit::SweepRow> sweep(const RunConfig& c, const trainer::Model& model, const std::string& axis,
                                     const std::vector<evalkit::SweepValue>& values);

/// "0.25" -> number, "img" -> name.
evalkit::SweepValue parse_sweep_value(const std::string& text);

}  // namespace keds::cli
