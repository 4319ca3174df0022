#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace keds::store {

struct Span {
  std::uint32_t start = 0;
  std::uint32_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

/// One caption of the knowledge corpus.
struct KnowledgeRecord {
  std::uint64_t id = 0;
  std::vector<std::uint32_t> caption_tokens;
  std::optional<Span> subject_span;
  std::optional<std::string> text;

  /// Throws FormatError unless 0 <= start < end <= len(tokens).
  void validate() const;
  friend bool operator==(const KnowledgeRecord&, const KnowledgeRecord&) = default;
};

std::string to_json_line(const KnowledgeRecord& r);
KnowledgeRecord record_from_json_line(const std::string& line);

/// Line-delimited JSON, one object per row id in order.
void save_records(const std::vector<KnowledgeRecord>& records, const std::filesystem::path& path);
std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path);

}  // namespace keds::store
