#include "keds/store/index.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <thread>
#include <unordered_set>

#include "keds/error.hpp"
#include "keds/random.hpp"
#include "keds/store/binary_io.hpp"

namespace keds::store {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;

void check_query(std::span<const float> query, std::uint32_t dim) {
  if (query.size() != dim) {
    throw DimensionError("query dim " + std::to_string(query.size()) + " does not match index dim " +
                         std::to_string(dim));
  }
}

std::vector<SearchHit> scan_rows(const EmbeddingMatrix& m, std::span<const float> query,
                                 std::span<const std::uint64_t> ids) {
  std::vector<SearchHit> hits;
  hits.reserve(ids.size());
  for (auto id : ids) hits.push_back({id, inner_product(m.row(id), query)});
  return hits;
}

/// Row-wise argmax of X * C^T, lowest partition on ties.
std::vector<std::uint32_t> assign(const EmbeddingMatrix& data, const RowMat& centroids) {
  const std::size_t n = data.count();
  const std::size_t d = data.dim();
  std::vector<std::uint32_t> out(n);
  constexpr std::size_t kChunk = 4096;
  RowMat scores;
  for (std::size_t begin = 0; begin < n; begin += kChunk) {
    const std::size_t rows = std::min(kChunk, n - begin);
    ConstRowMap block(data.values().data() + begin * d, rows, d);
    scores.noalias() = block * centroids.transpose();
    for (std::size_t r = 0; r < rows; ++r) {
      std::uint32_t best = 0;
      for (std::uint32_t p = 1; p < scores.cols(); ++p) {
        if (scores(r, p) > scores(r, best)) best = p;
      }
      out[begin + r] = best;
    }
  }
  return out;
}

}  // namespace

double inner_product(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i]) * double(b[i]);
  return s;
}

void keep_top(std::vector<SearchHit>& hits, std::size_t k) {
  if (k < hits.size()) {
    std::nth_element(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                     hit_before);
    hits.resize(k);
  }
  std::sort(hits.begin(), hits.end(), hit_before);
}

std::vector<std::vector<SearchHit>> Index::search_batch(const EmbeddingMatrix& queries,
                                                        std::size_t k, std::size_t threads) const {
  std::vector<std::vector<SearchHit>> out(queries.count());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) out[q] = search(queries.row(q), k);
  };
  const std::size_t n = out.size();
  if (threads <= 1 || n < 2 * threads) {
    work(0, n);
    return out;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    if (begin >= n) break;
    pool.emplace_back(work, begin, std::min(n, begin + chunk));
  }
  return out;
}

FlatIndex::FlatIndex(std::shared_ptr<const EmbeddingMatrix> matrix) : matrix_(std::move(matrix)) {
  if (!matrix_) throw ConfigError("flat index needs a matrix");
}

std::vector<SearchHit> FlatIndex::search(std::span<const float> query, std::size_t k) const {
  if (matrix_->count() == 0 || k == 0) return {};
  check_query(query, matrix_->dim());
  std::vector<SearchHit> hits(matrix_->count());
  for (std::uint64_t i = 0; i < matrix_->count(); ++i) {
    hits[i] = {i, inner_product(matrix_->row(i), query)};
  }
  keep_top(hits, k);
  return hits;
}

IvfIndex::IvfIndex(std::shared_ptr<const EmbeddingMatrix> matrix, EmbeddingMatrix centroids,
                   std::vector<std::vector<std::uint64_t>> lists, std::size_t nprobe)
    : matrix_(std::move(matrix)), centroids_(std::move(centroids)), lists_(std::move(lists)) {
  if (!matrix_) throw ConfigError("ivf index needs a matrix");
  if (lists_.empty() || centroids_.count() != lists_.size()) {
    throw ConfigError("ivf index needs one centroid per posting list");
  }
  if (centroids_.dim() != matrix_->dim()) throw DimensionError("centroid dim mismatch");
  std::vector<char> seen(matrix_->count(), 0);
  std::uint64_t total = 0;
  for (const auto& list : lists_) {
    for (auto id : list) {
      if (id >= seen.size() || seen[id]) {
        throw FormatError("posting lists do not partition the id set (id " + std::to_string(id) +
                          ")");
      }
      seen[id] = 1;
      ++total;
    }
  }
  if (total != matrix_->count()) throw FormatError("posting lists omit some ids");
  set_nprobe(nprobe);
}

void IvfIndex::set_nprobe(std::size_t nprobe) {
  if (nprobe < 1 || nprobe > lists_.size()) {
    throw ConfigError("nprobe " + std::to_string(nprobe) + " outside [1, " +
                      std::to_string(lists_.size()) + "]");
  }
  nprobe_ = nprobe;
}

std::vector<SearchHit> IvfIndex::search(std::span<const float> query, std::size_t k) const {
  return search(query, k, nprobe_);
}

std::vector<SearchHit> IvfIndex::search(std::span<const float> query, std::size_t k,
                                        std::size_t nprobe) const {
  if (nprobe < 1 || nprobe > lists_.size()) {
    throw ConfigError("nprobe " + std::to_string(nprobe) + " outside [1, " +
                      std::to_string(lists_.size()) + "]");
  }
  if (k == 0 || matrix_->count() == 0) return {};
  check_query(query, matrix_->dim());
  std::vector<SearchHit> probes(lists_.size());
  for (std::uint64_t p = 0; p < lists_.size(); ++p) {
    probes[p] = {p, inner_product(centroids_.row(p), query)};
  }
  keep_top(probes, nprobe);
  std::vector<SearchHit> hits;
  for (const auto& probe : probes) {
    auto part = scan_rows(*matrix_, query, lists_[probe.id]);
    hits.insert(hits.end(), part.begin(), part.end());
  }
  keep_top(hits, k);
  return hits;
}

IvfIndex build_ivf(std::shared_ptr<const EmbeddingMatrix> matrix, const IvfParams& params) {
  if (!matrix) throw ConfigError("build_ivf needs a matrix");
  const std::size_t n = matrix->count();
  const std::size_t d = matrix->dim();
  const std::size_t parts = params.partitions;
  if (parts < 1) throw ConfigError("ivf partitions must be >= 1");
  if (parts > n) {
    throw ConfigError("ivf partitions " + std::to_string(parts) + " exceed row count " +
                      std::to_string(n));
  }
  if (params.iterations < 1) throw ConfigError("ivf iterations must be >= 1");

  Rng rng(params.seed, "store.ivf");
  std::vector<std::uint64_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order.begin(), order.end());

  RowMat centroids(parts, d);
  auto set_centroid_from_row = [&](std::size_t p, std::uint64_t id) {
    auto r = matrix->row(id);
    for (std::size_t c = 0; c < d; ++c) centroids(p, c) = r[c];
  };
  auto normalize_centroid = [&](std::size_t p) -> bool {
    const double norm = centroids.row(p).cast<double>().norm();
    if (norm < 1e-12) return false;
    centroids.row(p) /= static_cast<float>(norm);
    return true;
  };
  for (std::size_t p = 0; p < parts; ++p) {
    set_centroid_from_row(p, order[p]);
    if (!normalize_centroid(p)) centroids.row(p).setConstant(1.0f / std::sqrt(float(d)));
  }

  std::vector<std::uint32_t> labels;
  Eigen::MatrixXd sums(parts, d);
  std::vector<std::size_t> sizes(parts);
  for (std::size_t it = 0; it < params.iterations; ++it) {
    labels = assign(*matrix, centroids);
    sums.setZero();
    std::fill(sizes.begin(), sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = matrix->row(i);
      for (std::size_t c = 0; c < d; ++c) sums(labels[i], c) += r[c];
      ++sizes[labels[i]];
    }
    for (std::size_t p = 0; p < parts; ++p) {
      if (sizes[p] > 0) {
        centroids.row(p) = sums.row(p).cast<float>();
        if (normalize_centroid(p)) continue;
      }
      set_centroid_from_row(p, rng.index(n));
      if (!normalize_centroid(p)) centroids.row(p).setConstant(1.0f / std::sqrt(float(d)));
    }
  }
  labels = assign(*matrix, centroids);
  std::vector<std::vector<std::uint64_t>> lists(parts);
  for (std::size_t i = 0; i < n; ++i) lists[labels[i]].push_back(i);

  std::vector<float> cvals(centroids.data(), centroids.data() + parts * d);
  EmbeddingMatrix cmat(static_cast<std::uint32_t>(d), parts, std::move(cvals), true);
  const std::size_t nprobe = std::min(std::max<std::size_t>(params.nprobe, 1), parts);
  return IvfIndex(std::move(matrix), std::move(cmat), std::move(lists), nprobe);
}

namespace {
constexpr char kIvfMagic[4] = {'K', 'E', 'D', 'I'};
constexpr std::uint32_t kIvfVersion = 1;
}  // namespace

void save_ivf(const IvfIndex& index, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PathError("cannot open for writing: " + path.string());
  out.write(kIvfMagic, 4);
  io::write_le<std::uint32_t>(out, kIvfVersion);
  io::write_le<std::uint64_t>(out, index.size());
  io::write_le<std::uint64_t>(out, index.partitions());
  write_matrix(out, index.centroids());
  for (const auto& list : index.lists()) {
    io::write_le<std::uint64_t>(out, list.size());
    out.write(reinterpret_cast<const char*>(list.data()),
              static_cast<std::streamsize>(list.size() * sizeof(std::uint64_t)));
  }
  if (!out) throw PathError("write failed: " + path.string());
}

IvfIndex load_ivf(std::shared_ptr<const EmbeddingMatrix> matrix, const std::filesystem::path& path,
                  std::size_t nprobe) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw PathError("cannot read: " + path.string());
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kIvfMagic, 4)) {
    throw FormatError(path.string() + ": bad magic");
  }
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kIvfVersion) throw FormatError(path.string() + ": unsupported version");
  const auto count = io::read_le<std::uint64_t>(in, "count");
  const auto parts = io::read_le<std::uint64_t>(in, "partitions");
  if (!matrix || count != matrix->count()) {
    throw FormatError(path.string() + ": index covers " + std::to_string(count) +
                      " rows but the matrix has " + std::to_string(matrix ? matrix->count() : 0));
  }
  const std::uint64_t header = 4 + 4 + 8 + 8;
  auto centroids = read_matrix(in, size - header);
  if (centroids.count() != parts) throw FormatError(path.string() + ": centroid count mismatch");
  std::vector<std::vector<std::uint64_t>> lists(parts);
  for (auto& list : lists) {
    const auto len = io::read_le<std::uint64_t>(in, "list length");
    if (len > count) throw FormatError(path.string() + ": bad list length");
    list.resize(len);
    if (len && !in.read(reinterpret_cast<char*>(list.data()),
                        static_cast<std::streamsize>(len * sizeof(std::uint64_t)))) {
      throw FormatError(path.string() + ": truncated posting list");
    }
  }
  return IvfIndex(std::move(matrix), std::move(centroids), std::move(lists), nprobe);
}

double mean_recall(const std::vector<std::vector<SearchHit>>& approx,
                   const std::vector<std::vector<SearchHit>>& exact) {
  if (approx.size() != exact.size()) throw DimensionError("recall needs matching query counts");
  if (exact.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < exact.size(); ++q) {
    if (exact[q].empty()) {
      total += 1.0;
      continue;
    }
    std::unordered_set<std::uint64_t> found;
    for (const auto& h : approx[q]) found.insert(h.id);
    std::size_t hit = 0;
    for (const auto& h : exact[q]) hit += found.count(h.id);
    total += double(hit) / double(exact[q].size());
  }
  return total / double(exact.size());
}

}  // namespace keds::store
