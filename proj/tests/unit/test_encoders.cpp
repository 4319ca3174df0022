#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "keds/encoders/composer.hpp"
#include "keds/encoders/provider.hpp"
#include "keds/encoders/synth.hpp"
#include "keds/encoders/task.hpp"
#include "keds/encoders/tokens.hpp"
#include "keds/error.hpp"
#include "keds/numeric/gradcheck.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/random.hpp"
#include "keds/store/embedding_matrix.hpp"

namespace ke = keds::encoders;
namespace kn = keds::numeric;
namespace ks = keds::store;
namespace fs = std::filesystem;
using ke::TokenItem;
using kn::TensorD;
using kn::TensorF;

namespace {

ke::ComposerConfig small_composer(std::uint64_t seed = 1) {
  ke::ComposerConfig c;
  c.vocab_size = 64;
  c.dim = 16;
  c.max_len = 12;
  c.layers = 2;
  c.heads = 4;
  c.seed = seed;
  return c;
}

ke::SynthConfig small_world() {
  ke::SynthConfig c;
  c.corpus = 200;
  c.database = 150;
  c.gallery = 400;
  c.tasks = 100;
  return c;
}

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("keds_enc_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

ke::Vocab prompt_vocab() { return ke::Vocab({"<pad>", "a", "photo", "of", "with", "and"}); }

}  // namespace

TEST(Compose, RepeatedCallsAreBitwiseIdentical) {
  ke::ComposerF comp(small_composer());
  keds::Rng rng(2);
  ke::TokenSequence seq{TokenItem::tok(5), TokenItem::slot(0), TokenItem::slot(1), TokenItem::tok(9)};
  std::vector<float> pv;
  for (double x : rng.normal_vector(32)) pv.push_back(float(x));
  TensorF pseudo({2, 16}, pv);
  auto a = comp.compose(seq, pseudo);
  auto b = comp.compose(seq, pseudo);
  ASSERT_EQ(a.shape(), (kn::Shape{16}));
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  ke::ComposerF again(small_composer());
  EXPECT_EQ(again.digest(), comp.digest());
  EXPECT_NE(ke::ComposerF(small_composer(2)).digest(), comp.digest());
}

TEST(Compose, OutputIsUnitNorm) {
  ke::ComposerF comp(small_composer());
  std::vector<ke::TokenSequence> seqs{ke::from_ids({1, 2, 3}), ke::from_ids({4}), ke::from_ids({7, 7, 8, 9})};
  auto out = comp.encode(seqs);
  ASSERT_EQ(out.rows(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    double n = 0;
    for (std::size_t c = 0; c < 16; ++c) n += double(out.at(r, c)) * out.at(r, c);
    EXPECT_NEAR(n, 1.0, 1e-5);
  }
}

TEST(Compose, GradientReachesPseudoOnly) {
  ke::ComposerD comp(small_composer());
  keds::Rng rng(3);
  TensorD pseudo({3, 16}, rng.normal_vector(48), true);
  ke::TokenSequence seq{TokenItem::tok(1), TokenItem::slot(0), TokenItem::slot(1),
                        TokenItem::slot(2), TokenItem::tok(4)};
  auto before = comp.serialize();
  kn::sum(comp.compose(seq, pseudo)).backward();
  EXPECT_TRUE(pseudo.has_grad());
  double g = 0;
  for (double x : pseudo.grad()) g += std::abs(x);
  EXPECT_GT(g, 0.0);
  for (const auto& [name, t] : comp.weights()) {
    EXPECT_FALSE(t->requires_grad()) << name;
    EXPECT_FALSE(t->has_grad()) << name;
  }
  EXPECT_EQ(comp.serialize(), before);
}

TEST(Compose, PseudoGradientMatchesFiniteDifferences) {
  ke::ComposerD comp(small_composer());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    keds::Rng rng(100 + seed);
    TensorD w({16}, rng.normal_vector(16));
    ke::TokenSequence seq{TokenItem::tok(1), TokenItem::slot(0), TokenItem::slot(1),
                          TokenItem::slot(2), TokenItem::tok(4)};
    auto fn = [&](std::span<const TensorD> in) { return kn::dot(comp.compose(seq, in[0]), w); };
    auto r = kn::gradcheck(fn, {TensorD({3, 16}, rng.normal_vector(48))});
    EXPECT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(Compose, Errors) {
  ke::ComposerF comp(small_composer());
  TensorF pseudo({2, 16});
  EXPECT_THROW(comp.compose({TokenItem::slot(2)}, pseudo), keds::InjectionError);
  EXPECT_THROW(comp.compose({}, pseudo), keds::LengthError);
  EXPECT_THROW(comp.compose(ke::TokenSequence(13, TokenItem::tok(1)), pseudo), keds::LengthError);
  EXPECT_THROW(comp.compose({TokenItem::tok(64)}, pseudo), keds::LookupError);
  auto cfg = small_composer();
  cfg.heads = 3;
  EXPECT_THROW(ke::ComposerF{cfg}, keds::ConfigError);
  ks::EmbeddingMatrix wrong(8, 64, std::vector<float>(8 * 64, 0.1f));
  EXPECT_THROW(ke::ComposerF(small_composer(), &wrong), keds::ConfigError);
}

TEST(Compose, SwappingDistinctTokensChangesOutput) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ke::ComposerF comp(small_composer(seed));
    auto a = comp.encode(std::vector<ke::TokenSequence>{ke::from_ids({3, 10, 20, 4})});
    auto b = comp.encode(std::vector<ke::TokenSequence>{ke::from_ids({3, 20, 10, 4})});
    EXPECT_GT(max_abs_diff(a.values(), b.values()), 1e-6) << seed;
  }
}

TEST(Compose, BatchRowsMatchSingleCompositions) {
  ke::ComposerD comp(small_composer());
  keds::Rng rng(5);
  std::vector<ke::TokenSequence> seqs{
      {TokenItem::tok(1), TokenItem::slot(0), TokenItem::slot(1)},
      {TokenItem::slot(1), TokenItem::tok(2), TokenItem::tok(3), TokenItem::slot(0)},
      {TokenItem::tok(9)}};
  TensorD pseudo({6, 16}, rng.normal_vector(96));
  auto batch = comp.compose_batch(seqs, pseudo, 2);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    auto one = comp.compose(seqs[b], kn::slice_rows(pseudo, 2 * b, 2 * b + 2));
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(batch.at(b, c), one.values()[c], 1e-12);
  }
}

TEST(MakePrompt, LengthsAndSlots) {
  auto v = prompt_vocab();
  auto p3 = ke::make_prompt(v, 3);
  ASSERT_EQ(p3.size(), 6u);
  EXPECT_EQ(p3[0], TokenItem::tok(v.id("a")));
  EXPECT_EQ(p3[1], TokenItem::tok(v.id("photo")));
  EXPECT_EQ(p3[2], TokenItem::tok(v.id("of")));
  for (std::uint32_t s = 0; s < 3; ++s) EXPECT_EQ(p3[3 + s], TokenItem::slot(s));
  EXPECT_EQ(ke::make_prompt(v, 1).size(), 4u);
  EXPECT_THROW(ke::make_prompt(v, 0), keds::InjectionError);
}

TEST(MakePrompt, DifferentPseudoBlocksGiveDifferentFeatures) {
  ke::ComposerF comp(small_composer());
  auto prompt = ke::make_prompt(prompt_vocab(), 3);
  keds::Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<float> a, b;
    for (double x : rng.normal_vector(48)) a.push_back(float(x));
    for (double x : rng.normal_vector(48)) b.push_back(float(x));
    auto fa = comp.compose(prompt, TensorF({3, 16}, a));
    auto fb = comp.compose(prompt, TensorF({3, 16}, b));
    double dist = 0;
    for (std::size_t c = 0; c < 16; ++c) dist += std::pow(fa.values()[c] - fb.values()[c], 2);
    EXPECT_GT(std::sqrt(dist), 1e-3);
  }
}

TEST(InjectSpan, Examples) {
  ks::KnowledgeRecord r{0, {7, 8, 9, 10}, ks::Span{0, 2}, std::nullopt};
  EXPECT_EQ(ke::inject_span(r, 3),
            (ke::TokenSequence{TokenItem::slot(0), TokenItem::slot(1), TokenItem::slot(2),
                               TokenItem::tok(9), TokenItem::tok(10)}));
  r.subject_span = ks::Span{1, 4};
  EXPECT_EQ(ke::inject_span(r, 1), (ke::TokenSequence{TokenItem::tok(7), TokenItem::slot(0)}));
  r.subject_span = ks::Span{0, 4};
  EXPECT_EQ(ke::inject_span(r, 3), (ke::TokenSequence{TokenItem::slot(0), TokenItem::slot(1),
                                                      TokenItem::slot(2)}));
  r.subject_span.reset();
  EXPECT_THROW(ke::inject_span(r, 3), keds::MiningError);
}

TEST(InjectSpan, LengthIdentityAndSlotPositionsOverRandomSpans) {
  keds::Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::uint32_t n = 1 + std::uint32_t(rng.index(20));
    std::vector<std::uint32_t> toks(n);
    for (auto& t : toks) t = std::uint32_t(rng.index(1000));
    const std::uint32_t start = std::uint32_t(rng.index(n));
    const std::uint32_t end = start + 1 + std::uint32_t(rng.index(n - start));
    const std::uint32_t p = 1 + std::uint32_t(rng.index(4));
    ks::KnowledgeRecord r{0, toks, ks::Span{start, end}, std::nullopt};
    auto seq = ke::inject_span(r, p);
    ASSERT_EQ(seq.size(), n - (end - start) + p);
    auto pos = ke::slot_positions(seq);
    ASSERT_EQ(pos.size(), p);
    EXPECT_EQ(pos.front(), start);
    for (std::uint32_t s = 0; s < p; ++s) EXPECT_EQ(seq[pos[s]], TokenItem::slot(s));
    for (std::uint32_t i = 0; i < start; ++i) EXPECT_EQ(seq[i], TokenItem::tok(toks[i]));
    for (std::uint32_t i = end; i < n; ++i) EXPECT_EQ(seq[i - end + start + p], TokenItem::tok(toks[i]));
  }
}

TEST(Tokens, JsonRoundTrip) {
  ke::TokenSequence seq{TokenItem::tok(4), TokenItem::slot(0), TokenItem::slot(2), TokenItem::tok(0)};
  auto text = ke::to_json(seq);
  EXPECT_EQ(text, R"([{"tok":4},{"slot":0},{"slot":2},{"tok":0}])");
  EXPECT_EQ(ke::sequence_from_json(text), seq);
  EXPECT_THROW(ke::sequence_from_json(R"([{"word":1}])"), keds::FormatError);
  EXPECT_EQ(ke::without_slots(seq), ke::from_ids({4, 0}));
  EXPECT_EQ(ke::count_slots(seq), 2u);
}

TEST(Vocab, SaveLoadUsesWordToIdObject) {
  auto dir = temp_dir("vocab");
  ke::Vocab v({"<pad>", "a", "photo", "of", "red"});
  v.save(dir / "vocab.json");
  std::ifstream in(dir / "vocab.json");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("\"red\""), std::string::npos);
  auto back = ke::Vocab::load(dir / "vocab.json");
  EXPECT_EQ(back.words(), v.words());
  EXPECT_EQ(back.id("red"), 4u);
  EXPECT_THROW(back.id("blue"), keds::LookupError);

  std::ofstream(dir / "gap.json") << R"({"a": 0, "b": 2})";
  EXPECT_THROW(ke::Vocab::load(dir / "gap.json"), keds::FormatError);
  fs::remove_all(dir);
}

TEST(Provider, LookupReturnsStoredRow) {
  std::vector<float> v{1, 0, 0, 1, 0.6f, 0.8f};
  auto m = std::make_shared<const ks::EmbeddingMatrix>(2, 3, v);
  ke::EmbeddingProvider p(m);
  auto row = p.lookup(2);
  EXPECT_EQ(row[0], 0.6f);
  EXPECT_EQ(row[1], 0.8f);
  EXPECT_THROW(p.lookup(3), keds::LookupError);
  std::vector<std::uint64_t> ids{2, 0};
  auto g = p.gather(ids);
  EXPECT_EQ(g.shape(), (kn::Shape{2, 2}));
  EXPECT_EQ(g.at(0, 1), 0.8f);
  EXPECT_EQ(g.at(1, 0), 1.0f);
  EXPECT_FALSE(g.requires_grad());
}

TEST(Tasks, JsonlRoundTripAndValidation) {
  auto dir = temp_dir("tasks");
  std::vector<ke::EvalTask> tasks{
      {3, {TokenItem::tok(1), TokenItem::slot(0)}, {0, 1, 2}, {1}},
      {0, {TokenItem::slot(0), TokenItem::tok(5)}, {1, 2}, {2}}};
  ke::save_tasks(tasks, dir / "t.jsonl");
  EXPECT_EQ(ke::load_tasks(dir / "t.jsonl"), tasks);
  ke::EvalTask bad{0, {}, {1, 2}, {5}};
  EXPECT_THROW(bad.validate(), keds::FormatError);
  std::ofstream(dir / "bad.jsonl") << R"({"reference": 0, "instruction": [], "candidates": [1], "targets": [1]})"
                                   << "\n{oops\n";
  try {
    ke::load_tasks(dir / "bad.jsonl");
    FAIL() << "expected FormatError";
  } catch (const keds::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

class SynthTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    world_ = new ke::SynthWorld(ke::synth_generate(small_world(), composer(), 42));
  }
  static void TearDownTestSuite() {
    delete world_;
    world_ = nullptr;
  }
  static ke::ComposerConfig composer() {
    ke::ComposerConfig c;
    c.vocab_size = 64;
    c.dim = 32;
    c.seed = 9;
    return c;
  }
  static ke::SynthWorld* world_;
};
ke::SynthWorld* SynthTest::world_ = nullptr;

TEST_F(SynthTest, ShapesAndRecords) {
  const auto& w = *world_;
  EXPECT_EQ(w.corpus.images.count(), 200u);
  EXPECT_EQ(w.database.captions.count(), 150u);
  EXPECT_EQ(w.gallery.images.dim(), 32u);
  EXPECT_EQ(w.tasks.size(), 100u);
  EXPECT_TRUE(w.corpus.images.normalized());
  for (const auto& r : w.corpus.records) {
    ASSERT_TRUE(r.subject_span.has_value());
    EXPECT_EQ(r.subject_span->start, 1u);
    EXPECT_EQ(r.caption_tokens[0], w.vocab.id("a"));
    r.validate();
  }
}

TEST_F(SynthTest, TargetsAreUniqueInTheirCandidatePool) {
  for (const auto& t : world_->tasks) {
    t.validate();
    ASSERT_EQ(t.targets.size(), 1u);
    EXPECT_EQ(std::count(t.candidates.begin(), t.candidates.end(), t.targets[0]), 1);
    EXPECT_EQ(std::count(t.candidates.begin(), t.candidates.end(), t.reference), 0);
    const auto& target_attrs = world_->gallery.items[t.targets[0]].attributes;
    for (auto c : t.candidates) {
      if (c != t.targets[0]) EXPECT_NE(world_->gallery.items[c].attributes, target_attrs);
    }
  }
}

TEST_F(SynthTest, LatentNearestNeighbourIsTheTarget) {
  const auto& w = *world_;
  const auto attrs = small_world().attributes;
  for (const auto& t : w.tasks) {
    const auto word = t.instruction.back().value;
    auto query = w.gallery.items[t.reference].attributes;
    bool found = false;
    for (std::uint32_t j = 0; j < attrs && !found; ++j) {
      for (std::uint8_t v = 0; v < 2; ++v) {
        if (w.word_id(j, v) == word) {
          EXPECT_NE(query[j], v);
          query[j] = v;
          found = true;
        }
      }
    }
    ASSERT_TRUE(found);
    auto ql = w.semantic_latent(query);
    std::uint64_t best = 0;
    double best_d = INFINITY;
    for (auto c : t.candidates) {
      auto cl = w.semantic_latent(w.gallery.items[c].attributes);
      double dist = 0;
      for (std::size_t k = 0; k < cl.size(); ++k) dist += (cl[k] - ql[k]) * (cl[k] - ql[k]);
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    EXPECT_EQ(best, t.targets[0]);
  }
}

TEST(Synth, NoiselessIdenticalItemsHaveIdenticalImageFeatures) {
  auto cfg = small_world();
  cfg.image_noise = 0;
  cfg.caption_noise = 0;
  cfg.style_factors = 1;
  cfg.style_values = 1;
  cfg.attributes = 2;
  cfg.subject_min = 1;
  cfg.subject_max = 2;
  cfg.tasks = 10;
  ke::ComposerConfig cc;
  cc.vocab_size = 32;
  cc.dim = 16;
  auto w = ke::synth_generate(cfg, cc, 5);
  std::size_t pairs = 0;
  for (std::uint64_t a = 0; a < 50; ++a) {
    for (std::uint64_t b = a + 1; b < 50; ++b) {
      if (w.gallery.items[a] != w.gallery.items[b]) continue;
      ++pairs;
      auto ra = w.gallery.images.row(a), rb = w.gallery.images.row(b);
      EXPECT_TRUE(std::equal(ra.begin(), ra.end(), rb.begin()));
    }
  }
  EXPECT_GT(pairs, 0u);
}

TEST(Synth, SameSeedIsDeterministic) {
  ke::ComposerConfig cc;
  cc.vocab_size = 64;
  cc.dim = 16;
  auto cfg = small_world();
  auto a = ke::synth_generate(cfg, cc, 3);
  auto b = ke::synth_generate(cfg, cc, 3);
  EXPECT_TRUE(std::equal(a.gallery.images.values().begin(), a.gallery.images.values().end(),
                         b.gallery.images.values().begin()));
  EXPECT_EQ(a.tasks, b.tasks);
  EXPECT_EQ(a.corpus.records, b.corpus.records);
}

TEST_F(SynthTest, SaveWorldWritesReadableFiles) {
  auto dir = temp_dir("world");
  ke::save_world(*world_, dir);
  EXPECT_EQ(ke::Vocab::load(dir / "vocab.json").words(), world_->vocab.words());
  auto g = ks::load(dir / "gallery_images.kedb");
  EXPECT_EQ(g.count(), world_->gallery.images.count());
  EXPECT_EQ(ks::load_records(dir / "corpus.jsonl"), world_->corpus.records);
  EXPECT_EQ(ke::load_tasks(dir / "tasks.jsonl"), world_->tasks);
  fs::remove_all(dir);
}
