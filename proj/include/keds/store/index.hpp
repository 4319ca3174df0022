#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "keds/store/embedding_matrix.hpp"

namespace keds::store {

struct SearchHit {
  std::uint64_t id = 0;
  double score = 0.0;
  friend bool operator==(const SearchHit&, const SearchHit&) = default;
};

/// Score descending, then id ascending.
inline bool hit_before(const SearchHit& a, const SearchHit& b) {
  return a.score > b.score || (a.score == b.score && a.id < b.id);
}

/// Inner product accumulated in double.
double inner_product(std::span<const float> a, std::span<const float> b);

/// Keeps the best k hits of `hits` in hit_before order.
void keep_top(std::vector<SearchHit>& hits, std::size_t k);

/// Read-only top-K inner-product search over an EmbeddingMatrix.
class Index {
 public:
  virtual ~Index() = default;
  virtual std::uint32_t dim() const = 0;
  virtual std::uint64_t size() const = 0;
  virtual std::vector<SearchHit> search(std::span<const float> query, std::size_t k) const = 0;

  /// One result list per query row; `threads` <= 1 runs inline.
  std::vector<std::vector<SearchHit>> search_batch(const EmbeddingMatrix& queries, std::size_t k,
                                                   std::size_t threads = 1) const;
};

/// Exact search.
class FlatIndex final : public Index {
 public:
  explicit FlatIndex(std::shared_ptr<const EmbeddingMatrix> matrix);

  std::uint32_t dim() const override { return matrix_->dim(); }
  std::uint64_t size() const override { return matrix_->count(); }
  std::vector<SearchHit> search(std::span<const float> query, std::size_t k) const override;
  const EmbeddingMatrix& matrix() const { return *matrix_; }

 private:
  std::shared_ptr<const EmbeddingMatrix> matrix_;
};

/// Inverted-file index: k-means coarse partitions, scanning the nprobe
/// partitions whose centroids score highest.
class IvfIndex final : public Index {
 public:
  IvfIndex(std::shared_ptr<const EmbeddingMatrix> matrix, EmbeddingMatrix centroids,
           std::vector<std::vector<std::uint64_t>> lists, std::size_t nprobe);

  std::uint32_t dim() const override { return matrix_->dim(); }
  std::uint64_t size() const override { return matrix_->count(); }
  std::size_t partitions() const { return lists_.size(); }
  std::size_t nprobe() const { return nprobe_; }
  void set_nprobe(std::size_t nprobe);

  std::vector<SearchHit> search(std::span<const float> query, std::size_t k) const override;
  std::vector<SearchHit> search(std::span<const float> query, std::size_t k,
                                std::size_t nprobe) const;

  const EmbeddingMatrix& centroids() const { return centroids_; }
  const std::vector<std::vector<std::uint64_t>>& lists() const { return lists_; }
  const EmbeddingMatrix& matrix() const { return *matrix_; }

 private:
  std::shared_ptr<const EmbeddingMatrix> matrix_;
  EmbeddingMatrix centroids_;
  std::vector<std::vector<std::uint64_t>> lists_;
  std::size_t nprobe_;
};

struct IvfParams {
  std::size_t partitions = 16;
  std::size_t iterations = 10;
  std::uint64_t seed = 0;
  std::size_t nprobe = 4;
};

/// Spherical k-means (inner-product assignment, normalized centroids).
/// Deterministic for fixed inputs and seed. Throws ConfigError if P > N.
IvfIndex build_ivf(std::shared_ptr<const EmbeddingMatrix> matrix, const IvfParams& params);

/// "KEDI" file: centroids in matrix encoding plus posting lists. The data
/// matrix itself is stored separately.
void save_ivf(const IvfIndex& index, const std::filesystem::path& path);
IvfIndex load_ivf(std::shared_ptr<const EmbeddingMatrix> matrix, const std::filesystem::path& path,
                  std::size_t nprobe);

/// Fraction of `exact` ids present in `approx`, averaged over queries.
double mean_recall(const std::vector<std::vector<SearchHit>>& approx,
                   const std::vector<std::vector<SearchHit>>& exact);

}  // namespace keds::store
