#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "keds/bkp/bkp.hpp"
#include "keds/encoders/composer.hpp"
#include "keds/encoders/task.hpp"
#include "keds/store/embedding_matrix.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/trainer/trainer.hpp"

namespace keds::evalkit {

/// normalize(alpha * v + (1 - alpha) * va). Throws ConfigError unless 0 <= alpha <= 1.
std::vector<float> hybrid_feature(std::span<const float> v, std::span<const float> va, double alpha);

/// Candidates by descending inner product with `query`, ties to the lower id.
std::vector<std::uint64_t> rank_candidates(std::span<const float> query,
                                           const store::EmbeddingMatrix& gallery,
                                           std::span<const std::uint64_t> candidates);

/// Fraction of tasks whose top-k holds a target.
double recall_at_k(const std::vector<std::vector<std::uint64_t>>& rankings,
                   const std::vector<encoders::EvalTask>& tasks, std::size_t k);

struct Recalls {
  double r1 = 0, r5 = 0, r10 = 0, r50 = 0;
  std::size_t n_tasks = 0;
  friend bool operator==(const Recalls&, const Recalls&) = default;
};
Recalls summarize(const std::vector<std::vector<std::uint64_t>>& rankings,
                  const std::vector<encoders::EvalTask>& tasks);

struct InferenceConfig {
  double alpha = 0.5;
  std::uint32_t k = 16;
  /// "both" | "M" (alpha forced to 1) | "A" (alpha forced to 0)
  std::string streams = "both";
  bkp::Knockout knockout;
  void validate() const;
};

/// Everything a composed query needs. Pointers are borrowed.
struct Bundle {
  const trainer::Model* model = nullptr;
  const encoders::ComposerF* composer = nullptr;
  const store::KnowledgeBase* knowledge = nullptr;
  /// Gallery image features; task ids index its rows.
  const store::EmbeddingMatrix* gallery = nullptr;
};

struct ComposedQueries {
  /// Row t: stream M composed feature for task t (v-hat), and stream A (v-hat_a).
  store::EmbeddingMatrix m;
  store::EmbeddingMatrix a;
};

/// Tasks are processed in fixed chunks, so results do not depend on `threads`.
ComposedQueries compose_queries(const Bundle& bundle, const std::vector<encoders::EvalTask>& tasks,
                                const InferenceConfig& config, std::size_t threads = 1);

std::vector<std::vector<std::uint64_t>> rank_composed(const Bundle& bundle,
                                                      const std::vector<encoders::EvalTask>& tasks,
                                                      const ComposedQueries& queries, double alpha,
                                                      std::size_t threads = 1);

/// compose_queries + rank_composed with the config's effective alpha.
std::vector<std::vector<std::uint64_t>> rank_tasks(const Bundle& bundle,
                                                   const std::vector<encoders::EvalTask>& tasks,
                                                   const InferenceConfig& config,
                                                   std::size_t threads = 1);

enum class Baseline { ImageOnly, TextOnly, ImageText };
const char* baseline_name(Baseline b);

/// Query features for a baseline: the reference image, the instruction text
/// without slots, or the renormalized average of the two.
std::vector<float> baseline_query(Baseline b, const encoders::ComposerF& composer,
                                  const store::EmbeddingMatrix& gallery,
                                  const encoders::EvalTask& task);

std::vector<std::vector<std::uint64_t>> rank_baseline(Baseline b, const encoders::ComposerF& composer,
                                                      const store::EmbeddingMatrix& gallery,
                                                      const std::vector<encoders::EvalTask>& tasks,
                                                      std::size_t threads = 1);

// Ablation sweeps.

/// Axes: "alpha", "k", "beta", "db_size" take numbers; "knockout" takes
/// "none", "img", "cap", "phi_a", "context", "extra".
using SweepValue = std::variant<double, std::string>;

struct SweepPoint {
  std::string axis;
  SweepValue value;
  InferenceConfig inference;
  trainer::TrainConfig train;
  /// 0 keeps the full database.
  std::uint64_t db_size = 0;
  /// Whether this point changes anything that requires retraining.
  bool retrain = false;
};

/// Applies one axis value to the base configs. Throws ConfigError on an
/// unknown axis or value.
SweepPoint make_point(const std::string& axis, const SweepValue& value,
                      const InferenceConfig& base_inference, const trainer::TrainConfig& base_train);

struct SweepRow {
  std::string axis;
  SweepValue value;
  Recalls recalls;
  std::uint64_t seed = 0;
};

std::vector<SweepRow> ablation_sweep(const std::string& axis, const std::vector<SweepValue>& values,
                                     const InferenceConfig& base_inference,
                                     const trainer::TrainConfig& base_train, std::uint64_t seed,
                                     const std::function<Recalls(const SweepPoint&)>& evaluate);

/// {"axis", "value", "R1", "R5", "R10", "R50", "n_tasks", "seed"}
std::string to_json_line(const SweepRow& row);
void save_report(const std::vector<SweepRow>& rows, const std::filesystem::path& path);
std::string format_table(const std::vector<SweepRow>& rows);

}  // namespace keds::evalkit
