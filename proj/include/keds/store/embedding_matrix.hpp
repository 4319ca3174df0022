#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace keds::store {

/// N x d float32 rows, row-major.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::uint32_t dim, std::uint64_t count, std::vector<float> values,
                  bool normalized = false);

  std::uint32_t dim() const { return dim_; }
  std::uint64_t count() const { return count_; }
  bool normalized() const { return normalized_; }
  bool empty() const { return count_ == 0; }

  std::span<const float> row(std::uint64_t id) const;
  std::span<float> mutable_row(std::uint64_t id);
  std::span<const float> values() const { return values_; }

  void append(std::span<const float> row);
  /// Scales every row to unit L2 norm and sets the normalized flag.
  void normalize_rows();
  /// Throws FormatError if the normalized flag is set but some row is not unit-norm (tol 1e-5).
  void validate() const;

  /// Rows [0, n) as a new matrix.
  EmbeddingMatrix prefix(std::uint64_t n) const;
  EmbeddingMatrix select(std::span<const std::uint64_t> ids) const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;

 private:
  std::uint32_t dim_ = 0;
  std::uint64_t count_ = 0;
  std::vector<float> values_;
  bool normalized_ = false;
};

inline constexpr char kMatrixMagic[4] = {'K', 'E', 'D', 'B'};
inline constexpr std::uint32_t kMatrixVersion = 1;
inline constexpr std::size_t kMatrixHeaderBytes = 28;

/// Binary layout: "KEDB", u32 version, u32 dim, u64 count, u8 normalized,
/// 7 pad bytes, then count*dim little-endian f32.
void write_matrix(std::ostream& out, const EmbeddingMatrix& m);
/// `available` bounds the bytes that may be consumed (truncation check).
EmbeddingMatrix read_matrix(std::istream& in, std::uint64_t available);

void save(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load(const std::filesystem::path& path);

}  // namespace keds::store
