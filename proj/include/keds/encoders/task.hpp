#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "keds/encoders/tokens.hpp"

namespace keds::encoders {

/// One composed-retrieval query over the gallery.
struct EvalTask {
  std::uint64_t reference = 0;
  /// Holds Slot0..Slot(p-1) where the reference's pseudo token goes.
  TokenSequence instruction;
  std::vector<std::uint64_t> candidates;
  std::vector<std::uint64_t> targets;

  /// Throws FormatError unless targets is a non-empty subset of candidates.
  void validate() const;
  friend bool operator==(const EvalTask&, const EvalTask&) = default;
};

/// {"reference", "instruction", "candidates", "targets"} per line.
void save_tasks(const std::vector<EvalTask>& tasks, const std::filesystem::path& path);
std::vector<EvalTask> load_tasks(const std::filesystem::path& path);

}  // namespace keds::encoders
