#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "keds/bkp/bkp.hpp"
#include "keds/error.hpp"
#include "keds/numeric/gradcheck.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/random.hpp"
#include "keds/store/knowledge_base.hpp"

namespace kb = keds::bkp;
namespace kn = keds::numeric;
using keds::numeric::TensorD;
using keds::numeric::TensorF;

namespace {

using Mat = std::vector<std::vector<double>>;

std::vector<double> unit_vector(keds::Rng& rng, std::size_t d) {
  auto v = rng.normal_vector(d);
  double n = 0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

std::vector<double> unit_rows(keds::Rng& rng, std::size_t k, std::size_t d) {
  std::vector<double> out;
  for (std::size_t r = 0; r < k; ++r) {
    auto v = unit_vector(rng, d);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

kb::KnowledgeContext make_ctx(keds::Rng& rng, std::size_t k, std::uint32_t d) {
  kb::KnowledgeContext ctx;
  ctx.k = k;
  ctx.dim = d;
  for (double x : unit_rows(rng, k, d)) ctx.image_feats.push_back(float(x));
  for (double x : unit_rows(rng, k, d)) ctx.caption_feats.push_back(float(x));
  return ctx;
}

/// Moves every parameter off its init value so biases and gains matter.
template <typename T>
void scramble(const kb::BkpParams<T>& p, std::uint64_t seed, double spread = 0.3) {
  keds::Rng rng(seed);
  for (auto& [name, t] : p.parameters()) {
    auto t2 = t;
    for (auto& x : t2.mutable_values()) x += static_cast<T>(rng.normal(0.0, spread));
  }
}

Mat to_mat(const TensorD& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

std::vector<double> vec(const TensorD& t) { return {t.values().begin(), t.values().end()}; }

// Straight-line reference, written against the maths rather than the library.
std::vector<double> lin(const std::vector<double>& x, const Mat& w, const std::vector<double>& b) {
  std::vector<double> y(b);
  for (std::size_t j = 0; j < y.size(); ++j)
    for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w[i][j];
  return y;
}

std::vector<double> ln(const std::vector<double>& x, const std::vector<double>& g,
                       const std::vector<double>& b) {
  const double n = double(x.size());
  double mu = std::accumulate(x.begin(), x.end(), 0.0) / n, var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return y;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

std::vector<double> ref_stack(const std::vector<kb::CrossLayer<double>>& stack,
                              std::vector<double> x, const Mat& mem, std::size_t heads) {
  const std::size_t d = x.size(), dh = d / heads;
  for (const auto& l : stack) {
    auto q = lin(ln(x, vec(l.ln_q_g), vec(l.ln_q_b)), to_mat(l.wq), vec(l.bq));
    Mat keys, vals;
    for (const auto& m : mem) {
      auto hm = ln(m, vec(l.ln_m_g), vec(l.ln_m_b));
      keys.push_back(lin(hm, to_mat(l.wk), vec(l.bk)));
      vals.push_back(lin(hm, to_mat(l.wv), vec(l.bv)));
    }
    std::vector<double> att(d, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> s(mem.size());
      for (std::size_t j = 0; j < mem.size(); ++j) {
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s[j] += q[c] * keys[j][c];
        s[j] /= std::sqrt(double(dh));
      }
      double mx = *std::max_element(s.begin(), s.end()), z = 0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < mem.size(); ++j)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) att[c] += s[j] / z * vals[j][c];
    }
    auto o = lin(att, to_mat(l.wo), vec(l.bo));
    for (std::size_t c = 0; c < d; ++c) x[c] += o[c];
    auto hid = lin(ln(x, vec(l.ln_f_g), vec(l.ln_f_b)), to_mat(l.w1), vec(l.b1));
    for (double& v : hid) v = gelu(v);
    auto f = lin(hid, to_mat(l.w2), vec(l.b2));
    for (std::size_t c = 0; c < d; ++c) x[c] += f[c];
  }
  return x;
}

Mat ref_project(const kb::BkpParams<double>& p, const std::vector<double>& image,
                const kb::KnowledgeContext& ctx) {
  const std::size_t d = p.config.dim;
  auto psi = [&](const std::vector<double>& x) { return lin(x, to_mat(p.psi_w), vec(p.psi_b)); };
  Mat mi, mc;
  for (std::size_t k = 0; k < ctx.k; ++k) {
    mi.push_back(psi({ctx.image_feats.begin() + k * d, ctx.image_feats.begin() + (k + 1) * d}));
    mc.push_back(psi({ctx.caption_feats.begin() + k * d, ctx.caption_feats.begin() + (k + 1) * d}));
  }
  auto hat = psi(image);
  return {hat, ref_stack(p.image_stack, hat, mi, p.config.heads),
          ref_stack(p.caption_stack, hat, mc, p.config.heads)};
}

kb::BkpConfig small_config(std::uint32_t d = 8, std::uint32_t layers = 2, std::uint32_t heads = 2) {
  kb::BkpConfig c;
  c.dim = d;
  c.layers = layers;
  c.heads = heads;
  return c;
}

}  // namespace

TEST(BkpProject, SingleKeyClosedForm) {
  // One layer, zero feed-forward, identity output projection: v = i_hat + value row.
  const std::uint32_t d = 8;
  auto p = kb::init<double>(3, small_config(d, 1, 2));
  scramble(p, 4);
  for (auto* t : {&p.image_stack[0].w2, &p.image_stack[0].b2, &p.image_stack[0].bo}) {
    for (auto& x : t->mutable_values()) x = 0;
  }
  auto wo = p.image_stack[0].wo.mutable_values();
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) wo[r * d + c] = r == c ? 1.0 : 0.0;

  keds::Rng rng(5);
  auto ctx = make_ctx(rng, 1, d);
  auto image = unit_vector(rng, d);
  auto out = kb::project(p, TensorD({d}, image), ctx);

  auto hat = lin(image, to_mat(p.psi_w), vec(p.psi_b));
  auto mem = lin({ctx.image_feats.begin(), ctx.image_feats.end()}, to_mat(p.psi_w), vec(p.psi_b));
  const auto& l = p.image_stack[0];
  auto value = lin(ln(mem, vec(l.ln_m_g), vec(l.ln_m_b)), to_mat(l.wv), vec(l.bv));
  for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at(1, c), hat[c] + value[c], 1e-12);
}

TEST(BkpProject, MatchesStraightLineReference) {
  const std::uint32_t d = 8;
  auto p = kb::init<double>(11, small_config(d, 2, 2));
  scramble(p, 12);
  keds::Rng rng(13);
  auto ctx = make_ctx(rng, 4, d);
  auto image = unit_vector(rng, d);
  auto out = kb::project(p, TensorD({d}, image), ctx);
  auto ref = ref_project(p, image, ctx);
  ASSERT_EQ(out.rows(), 3u);
  ASSERT_EQ(out.cols(), d);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.at(r, c), ref[r][c], 1e-6) << r << "," << c;
}

TEST(BkpProject, RowZeroIsMappedImageBitwise) {
  const std::uint32_t d = 16;
  auto p = kb::init<float>(21, small_config(d, 2, 4));
  scramble(p, 22);
  keds::Rng rng(23);
  auto ctx = make_ctx(rng, 5, d);
  std::vector<float> image;
  for (double x : unit_vector(rng, d)) image.push_back(float(x));
  TensorF img({1, d}, image);
  auto out = kb::project(p, img, ctx);
  auto mapped = kn::add_row(kn::matmul(img, p.psi_w), p.psi_b);
  ASSERT_EQ(out.shape(), (kn::Shape{3, d}));
  for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(out.at(0, c), mapped.at(0, c));
}

TEST(BkpProject, BatchRowsMatchSingleCalls) {
  const std::uint32_t d = 8, k = 3, b = 4;
  auto p = kb::init<double>(31, small_config(d, 2, 2));
  scramble(p, 32);
  keds::Rng rng(33);
  std::vector<double> imgs, ci, cc;
  std::vector<kb::KnowledgeContext> ctxs;
  for (std::uint32_t i = 0; i < b; ++i) {
    auto v = unit_vector(rng, d);
    imgs.insert(imgs.end(), v.begin(), v.end());
    ctxs.push_back(make_ctx(rng, k, d));
    ci.insert(ci.end(), ctxs.back().image_feats.begin(), ctxs.back().image_feats.end());
    cc.insert(cc.end(), ctxs.back().caption_feats.begin(), ctxs.back().caption_feats.end());
  }
  auto batch = kb::project_batch(p, TensorD({b, d}, imgs), TensorD({b * k, d}, ci),
                                 TensorD({b * k, d}, cc), k);
  for (std::uint32_t i = 0; i < b; ++i) {
    auto one = kb::project(p, TensorD({d}, {imgs.begin() + i * d, imgs.begin() + (i + 1) * d}),
                           ctxs[i]);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(batch.at(3 * i + r, c), one.at(r, c), 1e-12);
  }
}

TEST(BkpProject, PermutingContextRowsLeavesOutputUnchanged) {
  const std::uint32_t d = 16;
  const std::size_t k = 6;
  auto p = kb::init<double>(41, small_config(d, 3, 4));
  scramble(p, 42);
  keds::Rng rng(43);
  for (int trial = 0; trial < 5; ++trial) {
    auto ctx = make_ctx(rng, k, d);
    auto image = unit_vector(rng, d);
    auto base = kb::project(p, TensorD({d}, image), ctx);
    std::vector<std::size_t> pi(k), pc(k);
    std::iota(pi.begin(), pi.end(), 0);
    std::iota(pc.begin(), pc.end(), 0);
    rng.shuffle(pi.begin(), pi.end());
    rng.shuffle(pc.begin(), pc.end());
    auto perm = ctx;
    for (std::size_t r = 0; r < k; ++r) {
      std::copy_n(ctx.image_feats.begin() + pi[r] * d, d, perm.image_feats.begin() + r * d);
      std::copy_n(ctx.caption_feats.begin() + pc[r] * d, d, perm.caption_feats.begin() + r * d);
    }
    auto out = kb::project(p, TensorD({d}, image), perm);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.values()[i], base.values()[i], 1e-6);
  }
}

TEST(BkpProject, PermutationInvarianceHoldsInFloatAtLargeMagnitude) {
  const std::uint32_t d = 64;
  const std::size_t k = 16;
  auto p = kb::init<float>(44, small_config(d, 3, 4));
  scramble(p, 45, 0.2);
  keds::Rng rng(46);
  float peak = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto ctx = make_ctx(rng, k, d);
    auto v = unit_vector(rng, d);
    TensorF image({d}, std::vector<float>(v.begin(), v.end()));
    auto base = kb::project(p, image, ctx);
    std::vector<std::size_t> pi(k), pc(k);
    std::iota(pi.begin(), pi.end(), 0);
    std::iota(pc.begin(), pc.end(), 0);
    rng.shuffle(pi.begin(), pi.end());
    rng.shuffle(pc.begin(), pc.end());
    auto perm = ctx;
    for (std::size_t r = 0; r < k; ++r) {
      std::copy_n(ctx.image_feats.begin() + pi[r] * d, d, perm.image_feats.begin() + r * d);
      std::copy_n(ctx.caption_feats.begin() + pc[r] * d, d, perm.caption_feats.begin() + r * d);
    }
    auto out = kb::project(p, image, perm);
    for (std::size_t i = 0; i < out.numel(); ++i) {
      peak = std::max(peak, std::abs(base.values()[i]));
      EXPECT_NEAR(out.values()[i], base.values()[i], 1e-6);
    }
  }
  EXPECT_GT(peak, 8.0f);
}

TEST(BkpProject, DifferentContextChangesBothBranches) {
  const std::uint32_t d = 16;
  auto p = kb::init<double>(51, small_config(d, 3, 4));
  keds::Rng rng(52);
  auto image = unit_vector(rng, d);
  auto a = kb::project(p, TensorD({d}, image), make_ctx(rng, 4, d));
  auto b = kb::project(p, TensorD({d}, image), make_ctx(rng, 4, d));
  for (std::size_t r : {1, 2}) {
    double diff = 0;
    for (std::size_t c = 0; c < d; ++c) diff = std::max(diff, std::abs(a.at(r, c) - b.at(r, c)));
    EXPECT_GT(diff, 1e-4) << "row " << r;
  }
}

TEST(BkpProject, KnockoutZeroesOneBranch) {
  const std::uint32_t d = 8;
  auto p = kb::init<double>(61, small_config(d));
  keds::Rng rng(62);
  auto ctx = make_ctx(rng, 3, d);
  TensorD img({d}, unit_vector(rng, d));
  auto full = kb::project(p, img, ctx);
  auto no_img = kb::project(p, img, ctx, {.image_branch = true});
  auto no_cap = kb::project(p, img, ctx, {.caption_branch = true});
  for (std::size_t c = 0; c < d; ++c) {
    EXPECT_EQ(no_img.at(1, c), 0.0);
    EXPECT_EQ(no_img.at(2, c), full.at(2, c));
    EXPECT_EQ(no_cap.at(2, c), 0.0);
    EXPECT_EQ(no_cap.at(1, c), full.at(1, c));
  }
}

TEST(BkpProject, EmptyContextAndDimensionErrors) {
  auto p = kb::init<double>(71, small_config(8));
  keds::Rng rng(72);
  TensorD img({8}, unit_vector(rng, 8));
  kb::KnowledgeContext empty;
  empty.dim = 8;
  EXPECT_THROW(kb::project(p, img, empty), keds::EmptyContextError);
  EXPECT_THROW(kb::project(p, img, make_ctx(rng, 2, 16)), keds::DimensionError);
  EXPECT_THROW(kb::project(p, TensorD({4}, std::vector<double>(4, 0.5)), make_ctx(rng, 2, 8)),
               keds::DimensionError);
}

TEST(BkpInit, SameSeedIsBitwiseIdentical) {
  auto a = kb::init<float>(81, kb::BkpConfig{});
  auto b = kb::init<float>(81, kb::BkpConfig{});
  auto c = kb::init<float>(82, kb::BkpConfig{});
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    auto va = pa[i].second.values(), vb = pb[i].second.values(), vc = pc[i].second.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin())) << pa[i].first;
    any_differs |= !std::equal(va.begin(), va.end(), vc.begin());
  }
  EXPECT_TRUE(any_differs);
}

TEST(BkpInit, PsiStartsNearIdentity) {
  auto p = kb::init<double>(91, kb::BkpConfig{});
  keds::Rng rng(92);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = unit_vector(rng, 64);
    auto y = kn::add_row(kn::matmul(TensorD({1, 64}, x), p.psi_w), p.psi_b);
    double err = 0;
    for (std::size_t c = 0; c < 64; ++c) err += (y.at(0, c) - x[c]) * (y.at(0, c) - x[c]);
    EXPECT_LT(std::sqrt(err), 0.1);
  }
}

TEST(BkpInit, WeightsRespectFanInBound) {
  auto p = kb::init<double>(93, kb::BkpConfig{});
  for (const auto& [name, t] : p.parameters()) {
    if (name.find(".w") == std::string::npos || name.starts_with("psi")) continue;
    const double bound = 1.0 / std::sqrt(double(t.rows()));
    for (double v : t.values()) ASSERT_LE(std::abs(v), bound) << name;
  }
}

TEST(BkpInit, HeadsMustDivideDim) {
  EXPECT_THROW(kb::init<float>(1, small_config(10, 2, 4)), keds::ConfigError);
}

TEST(BkpParams, IndependentInstancesShareNoStorage) {
  auto m = kb::init<double>(101, small_config(), "bkp.M");
  auto a = m.clone();
  auto pm = m.parameters(), pa = a.parameters();
  for (std::size_t i = 0; i < pm.size(); ++i) {
    EXPECT_NE(pm[i].second.node().get(), pa[i].second.node().get());
    const double before = pa[i].second.values()[0];
    pm[i].second.mutable_values()[0] += 1.0;
    EXPECT_EQ(pa[i].second.values()[0], before) << pm[i].first;
  }
  auto other = kb::init<double>(101, small_config(), "bkp.A");
  EXPECT_NE(other.psi_w.values()[1], kb::init<double>(101, small_config(), "bkp.M").psi_w.values()[1]);
}

TEST(BkpParams, CastRoundTripKeepsFloatValues) {
  auto f = kb::init<float>(111, small_config());
  auto back = f.cast<double>().cast<float>();
  auto pf = f.parameters(), pb = back.parameters();
  for (std::size_t i = 0; i < pf.size(); ++i) {
    auto a = pf[i].second.values(), b = pb[i].second.values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
}

class BkpGradcheck : public ::testing::TestWithParam<int> {};

TEST_P(BkpGradcheck, EveryParameterAndTheImage) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  kb::BkpConfig cfg = small_config(8, 2, 2);
  cfg.ffn_mult = 2;
  auto p = kb::init<double>(seed, cfg);
  scramble(p, seed + 1);
  keds::Rng rng(seed + 2);
  const std::size_t k = 3;
  auto ctx = make_ctx(rng, k, 8);
  TensorD ci({k, 8}, {ctx.image_feats.begin(), ctx.image_feats.end()});
  TensorD cc({k, 8}, {ctx.caption_feats.begin(), ctx.caption_feats.end()});
  TensorD weights({3, 8}, rng.normal_vector(24));

  TensorD image({1, 8}, unit_vector(rng, 8), true);
  auto fn = [&](std::span<const TensorD>) {
    return kn::dot(kb::project_batch(p, image, ci, cc, k), weights);
  };
  std::vector<TensorD> inputs{image};
  std::vector<std::string> names{"image"};
  std::vector<TensorD> key_biases;
  for (auto& [name, t] : p.parameters()) {
    // Softmax is shift invariant, so the key bias has an exactly zero gradient
    // and a relative error is meaningless there.
    if (name.ends_with(".bk")) {
      key_biases.push_back(t);
    } else {
      inputs.push_back(t);
      names.push_back(name);
    }
  }
  auto r = kn::gradcheck(fn, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << "worst input " << names[r.worst_input];

  for (auto& t : key_biases) t.zero_grad();
  fn({}).backward();
  for (auto& t : key_biases) {
    for (double g : t.grad()) EXPECT_LT(std::abs(g), 1e-12);
    auto v = t.mutable_values();
    const double saved = v[0];
    v[0] = saved + 1e-3;
    const double up = fn({}).item();
    v[0] = saved;
    EXPECT_NEAR(up, fn({}).item(), 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, BkpGradcheck, ::testing::Range(0, 10));

TEST(RetrieveContext, TwoSearchesKeyedByImage) {
  keds::Rng rng(121);
  const std::uint32_t d = 8;
  const std::uint64_t n = 50;
  std::vector<float> iv, cv;
  for (double x : unit_rows(rng, n, d)) iv.push_back(float(x));
  for (double x : unit_rows(rng, n, d)) cv.push_back(float(x));
  auto base = keds::store::KnowledgeBase::build(keds::store::EmbeddingMatrix(d, n, iv),
                                                keds::store::EmbeddingMatrix(d, n, cv), {}, {});
  const auto* captions = &base.captions();
  std::vector<float> q(base.images().row(7).begin(), base.images().row(7).end());
  auto ctx = kb::retrieve_context(base, q, 4);
  ASSERT_EQ(ctx.image_ids.size(), 4u);
  EXPECT_EQ(ctx.image_ids[0], 7u);
  auto expected = base.caption_index().search(q, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(ctx.caption_ids[i], expected[i].id);
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_EQ(ctx.caption_feats[i * d + c], captions->row(expected[i].id)[c]);
    }
  }
  EXPECT_THROW(kb::retrieve_context(base, q, 0), keds::EmptyContextError);
  EXPECT_THROW(kb::retrieve_context(base, q, n + 1), keds::EmptyContextError);
}
