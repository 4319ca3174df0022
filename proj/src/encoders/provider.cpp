#include "keds/encoders/provider.hpp"

#include <algorithm>

#include "keds/error.hpp"

namespace keds::encoders {

EmbeddingProvider::EmbeddingProvider(std::shared_ptr<const store::EmbeddingMatrix> matrix)
    : matrix_(std::move(matrix)) {
  if (!matrix_) throw ConfigError("provider needs a matrix");
}

EmbeddingProvider EmbeddingProvider::from_file(const std::filesystem::path& path) {
  return EmbeddingProvider(std::make_shared<const store::EmbeddingMatrix>(store::load(path)));
}

std::span<const float> EmbeddingProvider::lookup(std::uint64_t id) const {
  if (id >= matrix_->count()) {
    throw LookupError("feature id " + std::to_string(id) + " not in provider of " +
                      std::to_string(matrix_->count()) + " rows");
  }
  return matrix_->row(id);
}

numeric::TensorF EmbeddingProvider::gather(std::span<const std::uint64_t> ids) const {
  const std::size_t d = dim();
  std::vector<float> out(ids.size() * d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    auto row = lookup(ids[r]);
    std::copy(row.begin(), row.end(), out.begin() + r * d);
  }
  return numeric::TensorF({ids.size(), d}, std::move(out));
}

}  // namespace keds::encoders
