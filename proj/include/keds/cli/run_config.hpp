#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "keds/bkp/bkp.hpp"
#include "keds/encoders/composer.hpp"
#include "keds/encoders/synth.hpp"
#include "keds/evalkit/evalkit.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/trainer/trainer.hpp"

namespace keds::cli {

struct StoreSection {
  /// Working directory; every artifact path below is relative to it.
  std::string dir = "keds_run";
  /// Knowledge database directory; empty means "<dir>/db".
  std::string db;
  /// Rows of the database to keep; 0 keeps all.
  std::uint64_t db_size = 0;
  std::string index = "flat";
  std::size_t partitions = 64;
  std::size_t iterations = 10;
  std::size_t nprobe = 16;
};

struct ModelSection {
  bkp::BkpConfig bkp;
  /// dim and seed are filled from bkp.dim and the root seed.
  encoders::ComposerConfig composer;
};

struct TrainSection {
  trainer::TrainConfig config;
  std::uint64_t log_every = 50;
  /// 0 writes a checkpoint only at the end.
  std::uint64_t checkpoint_every = 0;
};

struct EvalSection {
  evalkit::InferenceConfig inference;
  /// Task file; empty means the synthetic tasks in "<dir>/world".
  std::string tasks;
  bool baselines = true;
};

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  encoders::SynthConfig synth;
  StoreSection store;
  ModelSection model;
  TrainSection train;
  EvalSection eval;

  /// Composer config with dim and seed resolved.
  encoders::ComposerConfig composer() const;
  store::IndexSpec index_spec() const;
  std::filesystem::path dir() const { return store.dir; }
  std::filesystem::path world_dir() const { return dir() / "world"; }
  std::filesystem::path db_dir() const;
  /// Throws ConfigError on any out-of-range field.
  void validate() const;
};

/// Parses a config document. Unknown keys and type mismatches throw
/// ConfigError naming the key and its line; `origin` prefixes messages.
RunConfig parse_run_config(const std::string& text, const std::string& origin = "config");
/// Throws PathError when the file cannot be read.
RunConfig load_run_config(const std::filesystem::path& path);
/// Canonical JSON of the effective config (every field, defaults included).
std::string to_json(const RunConfig& config);

}  // namespace keds::cli
