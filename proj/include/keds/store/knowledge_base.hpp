#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "keds/store/embedding_matrix.hpp"
#include "keds/store/index.hpp"
#include "keds/store/metadata.hpp"

namespace keds::store {

struct IndexSpec {
  std::string type = "flat";  // "flat" | "ivf"
  std::size_t partitions = 64;
  std::size_t iterations = 10;
  std::size_t nprobe = 16;
  std::uint64_t seed = 0;
};

/// Paired image/caption banks with one index each. Immutable after build.
class KnowledgeBase {
 public:
  /// Normalizes both banks (if not already) and builds indices.
  static KnowledgeBase build(EmbeddingMatrix images, EmbeddingMatrix captions,
                             std::vector<KnowledgeRecord> records, const IndexSpec& spec);

  /// Reads "<prefix>_images.kedb", "<prefix>_captions.kedb", "<prefix>.jsonl"
  /// and, when present, the index manifest "<prefix>_index.json".
  static KnowledgeBase load(const std::filesystem::path& dir, const std::string& prefix,
                            const IndexSpec& fallback);
  /// Writes the index manifest and IVF files next to the bank files.
  void save_indices(const std::filesystem::path& dir, const std::string& prefix) const;

  /// First n rows of both banks with fresh indices.
  KnowledgeBase prefix(std::uint64_t n) const;

  const EmbeddingMatrix& images() const { return *images_; }
  const EmbeddingMatrix& captions() const { return *captions_; }
  const std::vector<KnowledgeRecord>& records() const { return records_; }
  const Index& image_index() const { return *image_index_; }
  const Index& caption_index() const { return *caption_index_; }
  const IndexSpec& spec() const { return spec_; }
  std::uint64_t size() const { return images_->count(); }

 private:
  std::shared_ptr<const EmbeddingMatrix> images_;
  std::shared_ptr<const EmbeddingMatrix> captions_;
  std::vector<KnowledgeRecord> records_;
  std::shared_ptr<const Index> image_index_;
  std::shared_ptr<const Index> caption_index_;
  IndexSpec spec_;
};

}  // namespace keds::store
