#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "keds/encoders/tokens.hpp"
#include "keds/store/index.hpp"
#include "keds/store/metadata.hpp"

namespace keds::mining {

inline constexpr std::uint32_t kPseudoRows = 3;

struct PseudoTriplet {
  std::uint64_t image_id = 0;
  encoders::TokenSequence template_tokens;
  std::uint64_t target = 0;
  std::array<std::uint64_t, 2> complements{};

  /// Throws MiningError on a broken triplet (slot count, complement ids).
  void validate() const;
  friend bool operator==(const PseudoTriplet&, const PseudoTriplet&) = default;
};

/// Top-2 captions by feature similarity, excluding `caption_id`. Ties go to
/// the lower id.
std::pair<std::uint64_t, std::uint64_t> find_complements(std::uint64_t caption_id,
                                                         const store::FlatIndex& captions);

struct MineResult {
  std::vector<PseudoTriplet> triplets;
  /// Records without a subject span.
  std::size_t skipped = 0;
};

/// One triplet per record with a span. Record id doubles as image id and
/// caption row. Throws MiningError when the corpus has fewer than 3 captions.
MineResult mine(const std::vector<store::KnowledgeRecord>& records,
                const store::FlatIndex& captions, std::size_t threads = 1);

std::string to_json_line(const PseudoTriplet& t);
PseudoTriplet triplet_from_json_line(const std::string& line);
void save_triplets(const std::vector<PseudoTriplet>& triplets, const std::filesystem::path& path);
std::vector<PseudoTriplet> load_triplets(const std::filesystem::path& path);

}  // namespace keds::mining
