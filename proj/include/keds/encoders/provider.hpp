#pragma once

#include <filesystem>
#include <memory>
#include <span>

#include "keds/numeric/tensor.hpp"
#include "keds/store/embedding_matrix.hpp"

namespace keds::encoders {

/// Precomputed frozen features addressed by row id.
class EmbeddingProvider {
 public:
  explicit EmbeddingProvider(std::shared_ptr<const store::EmbeddingMatrix> matrix);
  static EmbeddingProvider from_file(const std::filesystem::path& path);

  std::span<const float> lookup(std::uint64_t id) const;
  /// Constant [ids.size() x d] tensor.
  numeric::TensorF gather(std::span<const std::uint64_t> ids) const;

  std::uint32_t dim() const { return matrix_->dim(); }
  std::uint64_t size() const { return matrix_->count(); }
  const store::EmbeddingMatrix& matrix() const { return *matrix_; }
  std::shared_ptr<const store::EmbeddingMatrix> shared() const { return matrix_; }

 private:
  std::shared_ptr<const store::EmbeddingMatrix> matrix_;
};

}  // namespace keds::encoders
