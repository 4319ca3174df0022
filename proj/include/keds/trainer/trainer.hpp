#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "keds/bkp/bkp.hpp"
#include "keds/encoders/composer.hpp"
#include "keds/encoders/tokens.hpp"
#include "keds/mining/mining.hpp"
#include "keds/random.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/trainer/optimizer.hpp"

namespace keds::trainer {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::uint64_t warmup_steps = 200;
  std::uint64_t total_steps = 2000;
  std::uint64_t batch_size = 64;
  double tau = 100.0;
  double beta = 1.0;
  std::uint32_t k = 16;
  /// "both" | "M" | "A"
  std::string streams = "both";
  /// Train the two streams on alternating steps instead of summing their losses.
  bool alternate = false;
  /// Stream A template: "subject" (span replaced by slots) or "prompt" (prompt only).
  std::string a_template = "subject";
  bkp::Knockout knockout;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

/// The two projection networks: phi_M (contrastive) and phi_A (registration).
struct Model {
  bkp::BkpParams<float> phi_m;
  bkp::BkpParams<float> phi_a;

  Model clone() const;
};

/// phi_M and phi_A from independent labelled streams of one seed.
Model init_model(std::uint64_t seed, const bkp::BkpConfig& config);

/// Canonical JSON of everything that shapes a run; hashed into checkpoints.
std::string describe(const TrainConfig& train, const bkp::BkpConfig& model, std::uint64_t seed);

struct TrainData {
  /// Corpus features; row id = record id = image id.
  const store::EmbeddingMatrix* images = nullptr;
  const store::EmbeddingMatrix* captions = nullptr;
  std::vector<mining::PseudoTriplet> triplets;
  /// Knowledge database queried for contexts.
  const store::KnowledgeBase* knowledge = nullptr;
};

struct StepLog {
  std::uint64_t step = 0;
  double lr = 0.0;
  /// NaN when the stream did not run this step.
  double l_c = 0.0;
  double l_r = 0.0;
};

/// {"step", "lr", "L_c", "L_r"}; NaN losses are written as null.
std::string to_json_line(const StepLog& log);

struct Checkpoint {
  std::uint64_t step = 0;
  std::uint64_t config_digest = 0;
  std::string config_json;
  Model model;
  std::uint64_t optimizer_steps = 0;
  std::vector<std::vector<float>> first_moments;
  std::vector<std::vector<float>> second_moments;
  std::string rng_state;
  std::uint64_t cursor = 0;
  std::vector<std::uint64_t> order;
};

/// "KEDC" container: u32 version, u64 step, u64 config digest, config JSON,
/// named parameter and moment segments in matrix encoding, sampler state.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Dual-stream optimization over mined triplets. Knowledge contexts are
/// retrieved once at construction (all features are frozen).
class Trainer {
 public:
  Trainer(TrainConfig config, Model model, const encoders::ComposerF& composer,
          const encoders::Vocab& vocab, TrainData data, std::uint64_t seed,
          std::size_t threads = 1);

  StepLog step();
  /// Steps until total_steps, calling `sink` after each.
  void run(const std::function<void(const StepLog&)>& sink = {});

  std::uint64_t current_step() const { return step_; }
  const Model& model() const { return model_; }
  const TrainConfig& config() const { return config_; }
  std::uint64_t config_digest() const;
  std::string config_json() const;

  Checkpoint checkpoint() const;
  /// Continues from `ckpt`; throws ConfigError if its digest differs.
  void restore(const Checkpoint& ckpt);

  /// Losses on a fixed set of triplet indices without updating anything.
  StepLog evaluate_batch(const std::vector<std::size_t>& indices) const;

 private:
  struct Losses;
  Losses forward(const std::vector<std::size_t>& indices, bool run_m, bool run_a) const;
  std::vector<std::size_t> next_batch();
  void reshuffle();

  TrainConfig config_;
  Model model_;
  const encoders::ComposerF& composer_;
  encoders::TokenSequence prompt_;
  TrainData data_;
  std::uint64_t seed_;
  std::vector<std::uint64_t> ctx_image_ids_;
  std::vector<std::uint64_t> ctx_caption_ids_;
  AdamW<float> optimizer_;
  Rng sampler_;
  std::vector<std::uint64_t> order_;
  std::uint64_t cursor_ = 0;
  std::uint64_t step_ = 0;
};

/// Every parameter of both networks, phi_M first.
std::vector<numeric::TensorF> all_parameters(const Model& model);

}  // namespace keds::trainer
