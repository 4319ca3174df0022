#include "keds/store/embedding_matrix.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "keds/error.hpp"
#include "keds/store/binary_io.hpp"

namespace keds::store {

EmbeddingMatrix::EmbeddingMatrix(std::uint32_t dim, std::uint64_t count, std::vector<float> values,
                                 bool normalized)
    : dim_(dim), count_(count), values_(std::move(values)), normalized_(normalized) {
  if (dim_ == 0) throw DimensionError("embedding matrix dim must be positive");
  if (values_.size() != count_ * dim_) {
    throw DimensionError("embedding matrix expects " + std::to_string(count_ * dim_) +
                         " values, got " + std::to_string(values_.size()));
  }
}

std::span<const float> EmbeddingMatrix::row(std::uint64_t id) const {
  if (id >= count_) {
    throw LookupError("row id " + std::to_string(id) + " out of range (count " +
                      std::to_string(count_) + ")");
  }
  return std::span<const float>(values_).subspan(id * dim_, dim_);
}

std::span<float> EmbeddingMatrix::mutable_row(std::uint64_t id) {
  if (id >= count_) throw LookupError("row id " + std::to_string(id) + " out of range");
  return std::span<float>(values_).subspan(id * dim_, dim_);
}

void EmbeddingMatrix::append(std::span<const float> r) {
  if (dim_ == 0) dim_ = static_cast<std::uint32_t>(r.size());
  if (r.size() != dim_) {
    throw DimensionError("append row of width " + std::to_string(r.size()) + " to dim " +
                         std::to_string(dim_));
  }
  values_.insert(values_.end(), r.begin(), r.end());
  ++count_;
  normalized_ = false;
}

void EmbeddingMatrix::normalize_rows() {
  for (std::uint64_t i = 0; i < count_; ++i) {
    auto r = mutable_row(i);
    double ss = 0.0;
    for (float x : r) ss += double(x) * x;
    const double norm = std::sqrt(ss);
    if (norm < 1e-12) throw DegenerateVectorError("row " + std::to_string(i) + " has zero norm");
    for (float& x : r) x = static_cast<float>(x / norm);
  }
  normalized_ = true;
}

void EmbeddingMatrix::validate() const {
  if (values_.size() != count_ * dim_) throw FormatError("value count does not match header");
  if (!normalized_) return;
  for (std::uint64_t i = 0; i < count_; ++i) {
    double ss = 0.0;
    for (float x : row(i)) ss += double(x) * x;
    if (std::abs(std::sqrt(ss) - 1.0) > 1e-5) {
      throw FormatError("normalized flag set but row " + std::to_string(i) + " is not unit norm");
    }
  }
}

EmbeddingMatrix EmbeddingMatrix::prefix(std::uint64_t n) const {
  if (n > count_) throw LookupError("prefix longer than matrix");
  return EmbeddingMatrix(dim_, n, std::vector<float>(values_.begin(), values_.begin() + n * dim_),
                         normalized_);
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::uint64_t> ids) const {
  std::vector<float> out;
  out.reserve(ids.size() * dim_);
  for (auto id : ids) {
    auto r = row(id);
    out.insert(out.end(), r.begin(), r.end());
  }
  return EmbeddingMatrix(dim_, ids.size(), std::move(out), normalized_);
}

void write_matrix(std::ostream& out, const EmbeddingMatrix& m) {
  out.write(kMatrixMagic, 4);
  io::write_le<std::uint32_t>(out, kMatrixVersion);
  io::write_le<std::uint32_t>(out, m.dim());
  io::write_le<std::uint64_t>(out, m.count());
  io::write_le<std::uint8_t>(out, m.normalized() ? 1 : 0);
  const char pad[7] = {};
  out.write(pad, 7);
  out.write(reinterpret_cast<const char*>(m.values().data()),
            static_cast<std::streamsize>(m.values().size() * sizeof(float)));
}

EmbeddingMatrix read_matrix(std::istream& in, std::uint64_t available) {
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError("truncated header: missing field 'magic'");
  if (std::string(magic, 4) != std::string(kMatrixMagic, 4)) throw FormatError("bad magic");
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kMatrixVersion) {
    throw FormatError("unsupported version " + std::to_string(version));
  }
  const auto dim = io::read_le<std::uint32_t>(in, "dim");
  const auto count = io::read_le<std::uint64_t>(in, "count");
  const auto flag = io::read_le<std::uint8_t>(in, "normalized");
  char pad[7];
  if (!in.read(pad, 7)) throw FormatError("truncated header: missing field 'pad'");
  if (dim == 0) throw FormatError("bad dim: 0");
  if (flag > 1) throw FormatError("bad normalized flag " + std::to_string(flag));
  const std::uint64_t remaining = available - kMatrixHeaderBytes;
  if (count > remaining / (std::uint64_t(dim) * sizeof(float))) {
    throw FormatError("truncated payload: header declares " + std::to_string(count) + "x" +
                      std::to_string(dim) + " floats but only " + std::to_string(remaining) +
                      " bytes remain");
  }
  std::vector<float> values(count * dim);
  if (!in.read(reinterpret_cast<char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(float)))) {
    throw FormatError("truncated payload");
  }
  EmbeddingMatrix m(dim, count, std::move(values), flag == 1);
  m.validate();
  return m;
}

void save(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  write_matrix(out, m);
  if (!out) throw PathError("write failed: " + path.string());
}

EmbeddingMatrix load(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw PathError("cannot read: " + path.string());
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PathError("cannot open: " + path.string());
  try {
    return read_matrix(in, size);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace keds::store
