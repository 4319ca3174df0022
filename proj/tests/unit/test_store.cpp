#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "keds/error.hpp"
#include "keds/random.hpp"
#include "keds/store/binary_io.hpp"
#include "keds/store/embedding_matrix.hpp"
#include "keds/store/index.hpp"
#include "keds/store/knowledge_base.hpp"
#include "keds/store/metadata.hpp"

namespace ks = keds::store;
namespace fs = std::filesystem;

namespace {

std::shared_ptr<const ks::EmbeddingMatrix> random_unit(std::uint64_t n, std::uint32_t d,
                                                       std::uint64_t seed) {
  keds::Rng rng(seed);
  std::vector<float> v(n * d);
  for (auto& x : v) x = float(rng.normal());
  ks::EmbeddingMatrix m(d, n, std::move(v));
  m.normalize_rows();
  return std::make_shared<const ks::EmbeddingMatrix>(std::move(m));
}

std::vector<ks::SearchHit> brute_force(const ks::EmbeddingMatrix& m, std::span<const float> q,
                                       std::size_t k) {
  std::vector<ks::SearchHit> all;
  for (std::uint64_t i = 0; i < m.count(); ++i) {
    long double s = 0;
    for (std::uint32_t j = 0; j < m.dim(); ++j) s += (long double)m.row(i)[j] * q[j];
    all.push_back({i, double(s)});
  }
  std::sort(all.begin(), all.end(), ks::hit_before);
  all.resize(std::min(k, all.size()));
  return all;
}

std::vector<std::uint64_t> ids_of(const std::vector<ks::SearchHit>& hits) {
  std::vector<std::uint64_t> ids;
  for (const auto& h : hits) ids.push_back(h.id);
  return ids;
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("keds_store_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

}  // namespace

TEST(FlatSearch, TwoDimensionalExample) {
  auto m = std::make_shared<const ks::EmbeddingMatrix>(
      2, 4, std::vector<float>{1, 0, 0, 1, -1, 0, 0.5f, 0.5f});
  ks::FlatIndex index(m);
  std::vector<float> q{1, 0};
  auto hits = index.search(q, 2);
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].id, 0u);
  EXPECT_EQ(hits[1].id, 3u);
  EXPECT_DOUBLE_EQ(hits[0].score, 1.0);
  EXPECT_DOUBLE_EQ(hits[1].score, 0.5);
}

TEST(FlatSearch, KAtLeastCountReturnsEverythingSorted) {
  auto m = random_unit(20, 6, 3);
  ks::FlatIndex index(m);
  auto q = m->row(5);
  auto hits = index.search(q, 100);
  ASSERT_EQ(hits.size(), 20u);
  EXPECT_TRUE(std::is_sorted(hits.begin(), hits.end(), ks::hit_before));
}

TEST(FlatSearch, SelfSimilarityIsOne) {
  auto m = random_unit(50, 16, 4);
  ks::FlatIndex index(m);
  auto hits = index.search(m->row(17), 1);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].id, 17u);
  EXPECT_NEAR(hits[0].score, 1.0, 1e-6);
}

TEST(FlatSearch, TiesBreakByAscendingId) {
  auto m = std::make_shared<const ks::EmbeddingMatrix>(
      2, 4, std::vector<float>{0, 1, 1, 0, 0, 1, 1, 0});
  ks::FlatIndex index(m);
  std::vector<float> q{1, 0};
  EXPECT_EQ(ids_of(index.search(q, 4)), (std::vector<std::uint64_t>{1, 3, 0, 2}));
}

TEST(FlatSearch, EmptyStoreAndZeroK) {
  auto empty = std::make_shared<const ks::EmbeddingMatrix>(4, 0, std::vector<float>{});
  std::vector<float> q{1, 0, 0, 0};
  EXPECT_TRUE(ks::FlatIndex(empty).search(q, 5).empty());
  auto m = random_unit(10, 4, 1);
  EXPECT_TRUE(ks::FlatIndex(m).search(q, 0).empty());
}

TEST(FlatSearch, DimensionMismatchThrows) {
  auto m = random_unit(10, 4, 1);
  std::vector<float> q{1, 0, 0};
  EXPECT_THROW(ks::FlatIndex(m).search(q, 1), keds::DimensionError);
}

TEST(FlatSearch, MatchesBruteForceOracle) {
  for (std::uint64_t n : {1ull, 7ull, 300ull, 5000ull, 100000ull}) {
    auto m = random_unit(n, 16, n);
    ks::FlatIndex index(m);
    auto queries = random_unit(5, 16, n + 1);
    for (std::uint64_t qi = 0; qi < queries->count(); ++qi) {
      auto got = index.search(queries->row(qi), 10);
      auto want = brute_force(*m, queries->row(qi), 10);
      EXPECT_EQ(ids_of(got), ids_of(want)) << "n=" << n;
    }
  }
}

TEST(FlatSearch, BatchMatchesSequentialAcrossThreads) {
  auto m = random_unit(2000, 16, 8);
  auto queries = random_unit(37, 16, 9);
  ks::FlatIndex index(m);
  auto one = index.search_batch(*queries, 8, 1);
  auto four = index.search_batch(*queries, 8, 4);
  EXPECT_EQ(one, four);
}

TEST(Ivf, SeparatedClustersGetOneListEach) {
  const std::uint32_t d = 8;
  keds::Rng rng(5);
  std::vector<float> v;
  for (int c = 0; c < 4; ++c) {
    for (int i = 0; i < 100; ++i) {
      for (std::uint32_t j = 0; j < d; ++j) {
        v.push_back(float((j == std::uint32_t(c) ? 1.0 : 0.0) + 0.05 * rng.normal()));
      }
    }
  }
  ks::EmbeddingMatrix raw(d, 400, std::move(v));
  raw.normalize_rows();
  auto m = std::make_shared<const ks::EmbeddingMatrix>(std::move(raw));
  auto ivf = ks::build_ivf(m, {4, 10, 42, 1});
  std::set<std::set<std::uint64_t>> got;
  for (const auto& l : ivf.lists()) got.insert(std::set<std::uint64_t>(l.begin(), l.end()));
  std::set<std::set<std::uint64_t>> want;
  for (std::uint64_t c = 0; c < 4; ++c) {
    std::set<std::uint64_t> s;
    for (std::uint64_t i = 0; i < 100; ++i) s.insert(c * 100 + i);
    want.insert(s);
  }
  EXPECT_EQ(got, want);
}

TEST(Ivf, SinglePartitionHoldsAllIds) {
  auto m = random_unit(50, 4, 2);
  auto ivf = ks::build_ivf(m, {1, 3, 0, 1});
  ASSERT_EQ(ivf.lists().size(), 1u);
  auto l = ivf.lists()[0];
  std::sort(l.begin(), l.end());
  std::vector<std::uint64_t> all(50);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_EQ(l, all);
}

TEST(Ivf, DeterministicCentroids) {
  auto m = random_unit(500, 12, 6);
  auto a = ks::build_ivf(m, {8, 5, 99, 2});
  auto b = ks::build_ivf(m, {8, 5, 99, 2});
  ASSERT_EQ(a.centroids().values().size(), b.centroids().values().size());
  EXPECT_EQ(std::memcmp(a.centroids().values().data(), b.centroids().values().data(),
                        a.centroids().values().size() * sizeof(float)),
            0);
  EXPECT_EQ(a.lists(), b.lists());
}

TEST(Ivf, FullProbeEqualsFlat) {
  auto m = random_unit(3000, 16, 7);
  auto ivf = ks::build_ivf(m, {20, 5, 1, 20});
  ks::FlatIndex flat(m);
  auto queries = random_unit(20, 16, 70);
  for (std::uint64_t qi = 0; qi < queries->count(); ++qi) {
    EXPECT_EQ(ivf.search(queries->row(qi), 16), flat.search(queries->row(qi), 16));
  }
}

TEST(Ivf, RecallOnRandomUnitVectors) {
  auto m = random_unit(10000, 16, 10);
  const std::size_t parts = 128;
  const std::size_t nprobe = (parts + 3) / 4;
  auto ivf = ks::build_ivf(m, {parts, 10, 3, nprobe});
  ks::FlatIndex flat(m);
  auto queries = random_unit(100, 16, 11);
  double recall = ks::mean_recall(ivf.search_batch(*queries, 16), flat.search_batch(*queries, 16));
  EXPECT_GE(recall, 0.9);
}

TEST(Ivf, ZeroKAndNprobeRange) {
  auto m = random_unit(100, 4, 12);
  auto ivf = ks::build_ivf(m, {4, 2, 0, 1});
  std::vector<float> q{1, 0, 0, 0};
  EXPECT_TRUE(ivf.search(q, 0).empty());
  EXPECT_THROW(ivf.search(q, 3, 0), keds::ConfigError);
  EXPECT_THROW(ivf.search(q, 3, 5), keds::ConfigError);
  EXPECT_THROW(ivf.set_nprobe(9), keds::ConfigError);
}

TEST(Ivf, TooManyPartitionsIsConfigError) {
  auto m = random_unit(3, 4, 13);
  EXPECT_THROW(ks::build_ivf(m, {4, 2, 0, 1}), keds::ConfigError);
  EXPECT_THROW(ks::build_ivf(m, {2, 0, 0, 1}), keds::ConfigError);
}

TEST(Ivf, ListsPartitionIdsForRandomInstances) {
  keds::Rng rng(14);
  for (int trial = 0; trial < 10; ++trial) {
    std::uint64_t n = 10 + rng.index(500);
    std::size_t p = 1 + rng.index(std::min<std::uint64_t>(n, 32));
    auto m = random_unit(n, 8, 100 + trial);
    auto ivf = ks::build_ivf(m, {p, 4, std::uint64_t(trial), 1});
    std::vector<int> seen(n, 0);
    for (const auto& l : ivf.lists()) {
      for (auto id : l) seen[id]++;
    }
    EXPECT_TRUE(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  }
}

TEST(Ivf, RejectsOverlappingLists) {
  auto m = random_unit(4, 2, 15);
  ks::EmbeddingMatrix c(2, 2, {1, 0, 0, 1}, true);
  EXPECT_THROW(ks::IvfIndex(m, c, {{0, 1}, {1, 2, 3}}, 1), keds::FormatError);
  EXPECT_THROW(ks::IvfIndex(m, c, {{0, 1}, {2}}, 1), keds::FormatError);
}

TEST(Ivf, SaveLoadRoundTrip) {
  TempDir dir;
  auto m = random_unit(400, 8, 16);
  auto ivf = ks::build_ivf(m, {6, 4, 2, 3});
  ks::save_ivf(ivf, dir.path() / "x.kedi");
  auto back = ks::load_ivf(m, dir.path() / "x.kedi", 3);
  EXPECT_EQ(back.centroids(), ivf.centroids());
  EXPECT_EQ(back.lists(), ivf.lists());
}

TEST(MatrixIo, RoundTripIsBitExact) {
  TempDir dir;
  keds::Rng rng(17);
  std::vector<float> v(100 * 8);
  for (auto& x : v) x = float(rng.normal());
  ks::EmbeddingMatrix m(8, 100, v);
  ks::save(m, dir.path() / "m.kedb");
  auto back = ks::load(dir.path() / "m.kedb");
  EXPECT_EQ(back.dim(), 8u);
  EXPECT_EQ(back.count(), 100u);
  EXPECT_FALSE(back.normalized());
  EXPECT_EQ(std::memcmp(back.values().data(), v.data(), v.size() * sizeof(float)), 0);
  EXPECT_EQ(fs::file_size(dir.path() / "m.kedb"), ks::kMatrixHeaderBytes + v.size() * 4);
}

TEST(MatrixIo, HeaderLayout) {
  ks::EmbeddingMatrix m(3, 2, {1, 0, 0, 0, 1, 0}, true);
  std::stringstream ss;
  ks::write_matrix(ss, m);
  auto bytes = ss.str();
  ASSERT_EQ(bytes.size(), 28u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "KEDB");
  std::uint32_t version, dim;
  std::uint64_t count;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&dim, bytes.data() + 8, 4);
  std::memcpy(&count, bytes.data() + 12, 8);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(dim, 3u);
  EXPECT_EQ(count, 2u);
  EXPECT_EQ(bytes[20], 1);
  for (int i = 21; i < 28; ++i) EXPECT_EQ(bytes[i], 0);
  float first;
  std::memcpy(&first, bytes.data() + 28, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(MatrixIo, BadMagic) {
  ks::EmbeddingMatrix m(2, 1, {1, 0});
  std::stringstream ss;
  ks::write_matrix(ss, m);
  auto bytes = ss.str();
  bytes.replace(0, 4, "XXXX");
  std::istringstream in(bytes);
  try {
    ks::read_matrix(in, bytes.size());
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(MatrixIo, BadVersion) {
  ks::EmbeddingMatrix m(2, 1, {1, 0});
  std::stringstream ss;
  ks::write_matrix(ss, m);
  auto bytes = ss.str();
  bytes[4] = 7;
  std::istringstream in(bytes);
  try {
    ks::read_matrix(in, bytes.size());
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(MatrixIo, TruncatedPayload) {
  TempDir dir;
  ks::EmbeddingMatrix m(4, 10, std::vector<float>(40, 0.5f));
  ks::save(m, dir.path() / "t.kedb");
  fs::resize_file(dir.path() / "t.kedb", fs::file_size(dir.path() / "t.kedb") - 4);
  try {
    ks::load(dir.path() / "t.kedb");
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(MatrixIo, TruncatedHeaderNamesField) {
  std::string bytes = "KEDB";
  bytes.append("\x01\x00\x00\x00", 4);
  std::istringstream in(bytes);
  try {
    ks::read_matrix(in, bytes.size());
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("dim"), std::string::npos);
  }
}

TEST(MatrixIo, NormalizedFlagIsValidatedOnLoad) {
  ks::EmbeddingMatrix m(2, 1, {3, 4}, true);
  std::stringstream ss;
  ks::write_matrix(ss, m);
  auto bytes = ss.str();
  std::istringstream in(bytes);
  EXPECT_THROW(ks::read_matrix(in, bytes.size()), keds::FormatError);
}

TEST(MatrixIo, MissingFileIsPathError) {
  EXPECT_THROW(ks::load("/nonexistent/dir/x.kedb"), keds::PathError);
}

TEST(EmbeddingMatrix, ValueCountMustMatch) {
  EXPECT_THROW(ks::EmbeddingMatrix(3, 2, std::vector<float>(5)), keds::DimensionError);
}

TEST(EmbeddingMatrix, NormalizeRowsGivesUnitNorm) {
  auto m = random_unit(30, 5, 18);
  for (std::uint64_t i = 0; i < m->count(); ++i) {
    double s = 0;
    for (float x : m->row(i)) s += double(x) * x;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
  EXPECT_NO_THROW(m->validate());
}

TEST(Metadata, JsonLineRoundTrip) {
  ks::KnowledgeRecord r{3, {5, 6, 7}, ks::Span{0, 2}, "a red cube"};
  auto back = ks::record_from_json_line(ks::to_json_line(r));
  EXPECT_EQ(back, r);
  ks::KnowledgeRecord bare{0, {1}, std::nullopt, std::nullopt};
  EXPECT_EQ(ks::record_from_json_line(ks::to_json_line(bare)), bare);
  EXPECT_NE(ks::to_json_line(bare).find("\"subject_span\":null"), std::string::npos);
}

TEST(Metadata, InvalidSpanRejected) {
  EXPECT_THROW(ks::record_from_json_line(R"({"id":0,"caption_tokens":[1,2],"subject_span":[1,1]})"),
               keds::FormatError);
  EXPECT_THROW(ks::record_from_json_line(R"({"id":0,"caption_tokens":[1,2],"subject_span":[0,3]})"),
               keds::FormatError);
  EXPECT_THROW(ks::record_from_json_line("{not json"), keds::FormatError);
}

TEST(Metadata, FileRoundTripAndLineNumbers) {
  TempDir dir;
  std::vector<ks::KnowledgeRecord> recs{{0, {1, 2}, ks::Span{0, 1}, std::nullopt},
                                        {1, {3}, std::nullopt, "x"}};
  ks::save_records(recs, dir.path() / "m.jsonl");
  EXPECT_EQ(ks::load_records(dir.path() / "m.jsonl"), recs);

  std::ofstream(dir.path() / "bad.jsonl") << R"({"id":0,"caption_tokens":[1]})" << "\n"
                                          << R"({"id":5,"caption_tokens":[1]})" << "\n";
  try {
    ks::load_records(dir.path() / "bad.jsonl");
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(KnowledgeBase, BuildNormalizesAndSearchesBothBanks) {
  auto imgs = *random_unit(200, 8, 19);
  keds::Rng rng(20);
  std::vector<float> cap(200 * 8);
  for (auto& x : cap) x = float(3.0 * rng.normal());
  auto kb = ks::KnowledgeBase::build(imgs, ks::EmbeddingMatrix(8, 200, cap), {}, {});
  EXPECT_TRUE(kb.captions().normalized());
  EXPECT_EQ(kb.image_index().search(imgs.row(9), 1)[0].id, 9u);
  EXPECT_EQ(kb.caption_index().search(kb.captions().row(4), 1)[0].id, 4u);
}

TEST(KnowledgeBase, MismatchedBanksThrow) {
  EXPECT_THROW(ks::KnowledgeBase::build(*random_unit(5, 4, 1), *random_unit(6, 4, 2), {}, {}),
               keds::DimensionError);
}

TEST(KnowledgeBase, IvfManifestRoundTrip) {
  TempDir dir;
  auto imgs = random_unit(300, 8, 21);
  auto caps = random_unit(300, 8, 22);
  ks::save(*imgs, dir.path() / "kb_images.kedb");
  ks::save(*caps, dir.path() / "kb_captions.kedb");
  ks::IndexSpec spec;
  spec.type = "ivf";
  spec.partitions = 8;
  spec.nprobe = 8;
  auto kb = ks::KnowledgeBase::load(dir.path(), "kb", spec);
  kb.save_indices(dir.path(), "kb");
  auto again = ks::KnowledgeBase::load(dir.path(), "kb", ks::IndexSpec{});
  EXPECT_EQ(again.spec().type, "ivf");
  ks::FlatIndex flat(imgs);
  for (std::uint64_t i = 0; i < 10; ++i) {
    EXPECT_EQ(again.image_index().search(caps->row(i), 5), flat.search(caps->row(i), 5));
  }
}
