#include "keds/bkp/bkp.hpp"

#include <cmath>

#include "keds/error.hpp"
#include "keds/numeric/ops.hpp"
#include "keds/random.hpp"

namespace keds::bkp {

namespace nm = numeric;

namespace {

template <typename T>
nm::Tensor<T> uniform_param(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return nm::Tensor<T>({rows, cols}, std::move(v), true);
}

template <typename T>
nm::Tensor<T> const_param(std::size_t n, T value) {
  return nm::Tensor<T>({n}, std::vector<T>(n, value), true);
}

template <typename T>
nm::Tensor<T> linear(const nm::Tensor<T>& x, const nm::Tensor<T>& w, const nm::Tensor<T>& b) {
  return nm::add_row(nm::matmul(x, w), b);
}

template <typename T>
CrossLayer<T> init_layer(Rng& rng, std::size_t d, std::size_t hidden) {
  const double bd = 1.0 / std::sqrt(double(d));
  const double bh = 1.0 / std::sqrt(double(hidden));
  CrossLayer<T> l;
  l.ln_q_g = const_param<T>(d, 1);
  l.ln_q_b = const_param<T>(d, 0);
  l.ln_m_g = const_param<T>(d, 1);
  l.ln_m_b = const_param<T>(d, 0);
  l.wq = uniform_param<T>(rng, d, d, bd);
  l.bq = const_param<T>(d, 0);
  l.wk = uniform_param<T>(rng, d, d, bd);
  l.bk = const_param<T>(d, 0);
  l.wv = uniform_param<T>(rng, d, d, bd);
  l.bv = const_param<T>(d, 0);
  l.wo = uniform_param<T>(rng, d, d, bd);
  l.bo = const_param<T>(d, 0);
  l.ln_f_g = const_param<T>(d, 1);
  l.ln_f_b = const_param<T>(d, 0);
  l.w1 = uniform_param<T>(rng, d, hidden, bd);
  l.b1 = const_param<T>(hidden, 0);
  l.w2 = uniform_param<T>(rng, hidden, d, bh);
  l.b2 = const_param<T>(d, 0);
  return l;
}

template <typename T>
void append_layer(std::vector<std::pair<std::string, nm::Tensor<T>>>& out, const std::string& prefix,
                  const CrossLayer<T>& l) {
  out.emplace_back(prefix + "ln_q_g", l.ln_q_g);
  out.emplace_back(prefix + "ln_q_b", l.ln_q_b);
  out.emplace_back(prefix + "ln_m_g", l.ln_m_g);
  out.emplace_back(prefix + "ln_m_b", l.ln_m_b);
  out.emplace_back(prefix + "wq", l.wq);
  out.emplace_back(prefix + "bq", l.bq);
  out.emplace_back(prefix + "wk", l.wk);
  out.emplace_back(prefix + "bk", l.bk);
  out.emplace_back(prefix + "wv", l.wv);
  out.emplace_back(prefix + "bv", l.bv);
  out.emplace_back(prefix + "wo", l.wo);
  out.emplace_back(prefix + "bo", l.bo);
  out.emplace_back(prefix + "ln_f_g", l.ln_f_g);
  out.emplace_back(prefix + "ln_f_b", l.ln_f_b);
  out.emplace_back(prefix + "w1", l.w1);
  out.emplace_back(prefix + "b1", l.b1);
  out.emplace_back(prefix + "w2", l.w2);
  out.emplace_back(prefix + "b2", l.b2);
}

template <typename To, typename From>
nm::Tensor<To> copy_leaf(const nm::Tensor<From>& t) {
  auto v = t.values();
  return nm::Tensor<To>(t.shape(), std::vector<To>(v.begin(), v.end()), true);
}

template <typename To, typename From>
CrossLayer<To> copy_layer(const CrossLayer<From>& l) {
  return {copy_leaf<To>(l.ln_q_g), copy_leaf<To>(l.ln_q_b), copy_leaf<To>(l.ln_m_g),
          copy_leaf<To>(l.ln_m_b), copy_leaf<To>(l.wq),     copy_leaf<To>(l.bq),
          copy_leaf<To>(l.wk),     copy_leaf<To>(l.bk),     copy_leaf<To>(l.wv),
          copy_leaf<To>(l.bv),     copy_leaf<To>(l.wo),     copy_leaf<To>(l.bo),
          copy_leaf<To>(l.ln_f_g), copy_leaf<To>(l.ln_f_b), copy_leaf<To>(l.w1),
          copy_leaf<To>(l.b1),     copy_leaf<To>(l.w2),     copy_leaf<To>(l.b2)};
}

/// One cross-attention stack: B single-row queries over B memories of K rows.
template <typename T>
nm::Tensor<T> run_stack(const std::vector<CrossLayer<T>>& stack, nm::Tensor<T> x,
                        const nm::Tensor<T>& memory, std::span<const std::size_t> q_off,
                        std::span<const std::size_t> k_off, std::size_t heads) {
  for (const auto& l : stack) {
    auto hq = nm::layer_norm(x, l.ln_q_g, l.ln_q_b);
    auto hm = nm::layer_norm(memory, l.ln_m_g, l.ln_m_b);
    auto a = nm::attention(linear(hq, l.wq, l.bq), linear(hm, l.wk, l.bk), linear(hm, l.wv, l.bv),
                           q_off, k_off, heads);
    x = nm::add(x, linear(a, l.wo, l.bo));
    auto hf = nm::layer_norm(x, l.ln_f_g, l.ln_f_b);
    x = nm::add(x, linear(nm::gelu(linear(hf, l.w1, l.b1)), l.w2, l.b2));
  }
  return x;
}

}  // namespace

KnowledgeContext retrieve_context(const store::KnowledgeBase& kb, std::span<const float> query,
                                  std::size_t k) {
  if (k == 0) throw EmptyContextError("K must be >= 1");
  auto ih = kb.image_index().search(query, k);
  auto ch = kb.caption_index().search(query, k);
  if (ih.size() < k || ch.size() < k) {
    throw EmptyContextError("knowledge base of " + std::to_string(kb.size()) +
                            " rows cannot supply K=" + std::to_string(k));
  }
  KnowledgeContext ctx;
  ctx.k = k;
  ctx.dim = kb.images().dim();
  for (const auto& h : ih) {
    auto r = kb.images().row(h.id);
    ctx.image_feats.insert(ctx.image_feats.end(), r.begin(), r.end());
    ctx.image_ids.push_back(h.id);
  }
  for (const auto& h : ch) {
    auto r = kb.captions().row(h.id);
    ctx.caption_feats.insert(ctx.caption_feats.end(), r.begin(), r.end());
    ctx.caption_ids.push_back(h.id);
  }
  return ctx;
}

template <typename T>
std::vector<std::pair<std::string, nm::Tensor<T>>> BkpParams<T>::parameters() const {
  std::vector<std::pair<std::string, nm::Tensor<T>>> out{{"psi.w", psi_w}, {"psi.b", psi_b}};
  for (std::size_t i = 0; i < image_stack.size(); ++i) {
    append_layer(out, "img." + std::to_string(i) + ".", image_stack[i]);
  }
  for (std::size_t i = 0; i < caption_stack.size(); ++i) {
    append_layer(out, "cap." + std::to_string(i) + ".", caption_stack[i]);
  }
  return out;
}

template <typename T>
BkpParams<T> BkpParams<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
BkpParams<U> BkpParams<T>::cast() const {
  BkpParams<U> out;
  out.config = config;
  out.psi_w = copy_leaf<U>(psi_w);
  out.psi_b = copy_leaf<U>(psi_b);
  for (const auto& l : image_stack) out.image_stack.push_back(copy_layer<U>(l));
  for (const auto& l : caption_stack) out.caption_stack.push_back(copy_layer<U>(l));
  return out;
}

template <typename T>
BkpParams<T> init(std::uint64_t seed, const BkpConfig& config, const std::string& label) {
  const std::size_t d = config.dim;
  if (d == 0 || config.heads == 0 || d % config.heads != 0) {
    throw ConfigError("bkp dim " + std::to_string(d) + " not divisible by heads " +
                      std::to_string(config.heads));
  }
  if (config.layers == 0) throw ConfigError("bkp needs at least one layer");
  BkpParams<T> p;
  p.config = config;
  {
    Rng rng(seed, label + ".psi");
    std::vector<T> w(d * d);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        w[r * d + c] = static_cast<T>((r == c ? 1.0 : 0.0) + rng.uniform(-0.01, 0.01));
      }
    }
    p.psi_w = nm::Tensor<T>({d, d}, std::move(w), true);
    p.psi_b = const_param<T>(d, 0);
  }
  const std::size_t hidden = d * config.ffn_mult;
  Rng img_rng(seed, label + ".image_stack");
  Rng cap_rng(seed, label + ".caption_stack");
  for (std::uint32_t l = 0; l < config.layers; ++l) {
    p.image_stack.push_back(init_layer<T>(img_rng, d, hidden));
    p.caption_stack.push_back(init_layer<T>(cap_rng, d, hidden));
  }
  return p;
}

template <typename T>
nm::Tensor<T> project_batch(const BkpParams<T>& params, const nm::Tensor<T>& images,
                            const nm::Tensor<T>& ctx_images, const nm::Tensor<T>& ctx_captions,
                            std::size_t k, const Knockout& knockout) {
  const std::size_t d = params.config.dim;
  if (k == 0) throw EmptyContextError("knowledge context is empty (K=0)");
  const std::size_t b = images.rows();
  if (images.cols() != d || ctx_images.cols() != d || ctx_captions.cols() != d) {
    throw DimensionError("bkp dim " + std::to_string(d) + " vs inputs " +
                         nm::shape_str(images.shape()) + ", " + nm::shape_str(ctx_images.shape()) + ", " +
                         nm::shape_str(ctx_captions.shape()));
  }
  if (ctx_images.rows() != b * k || ctx_captions.rows() != b * k) {
    throw DimensionError("context rows " + std::to_string(ctx_images.rows()) + "/" +
                         std::to_string(ctx_captions.rows()) + " != B*K = " +
                         std::to_string(b * k));
  }
  auto q_off = nm::uniform_offsets(b, 1);
  auto k_off = nm::uniform_offsets(b, k);

  auto mapped = linear(images, params.psi_w, params.psi_b);
  auto mem_i = linear(ctx_images, params.psi_w, params.psi_b);
  auto mem_c = linear(ctx_captions, params.psi_w, params.psi_b);

  auto zeros = nm::Tensor<T>({b, d});
  auto v_i = knockout.image_branch
                 ? zeros
                 : run_stack(params.image_stack, mapped, mem_i, q_off, k_off, params.config.heads);
  auto v_c = knockout.caption_branch ? zeros
                                     : run_stack(params.caption_stack, mapped, mem_c, q_off, k_off,
                                                 params.config.heads);

  std::vector<nm::Tensor<T>> parts{mapped, v_i, v_c};
  std::vector<nm::RowRef> refs;
  refs.reserve(3 * b);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t s = 0; s < 3; ++s) refs.push_back({s, r});
  }
  return nm::gather_rows<T>(parts, refs);
}

template <typename T>
nm::Tensor<T> project(const BkpParams<T>& params, const nm::Tensor<T>& image,
                      const KnowledgeContext& ctx, const Knockout& knockout) {
  const std::size_t d = params.config.dim;
  if (ctx.k == 0) throw EmptyContextError("knowledge context is empty (K=0)");
  if (ctx.dim != d || ctx.image_feats.size() != ctx.k * d || ctx.caption_feats.size() != ctx.k * d) {
    throw DimensionError("context is not K x " + std::to_string(d));
  }
  if (image.numel() != d) {
    throw DimensionError("image feature " + nm::shape_str(image.shape()) + " != dim " + std::to_string(d));
  }
  auto row = image.rank() == 2 ? image : nm::reshape(image, {1, d});
  nm::Tensor<T> ci({ctx.k, d}, std::vector<T>(ctx.image_feats.begin(), ctx.image_feats.end()));
  nm::Tensor<T> cc({ctx.k, d}, std::vector<T>(ctx.caption_feats.begin(), ctx.caption_feats.end()));
  return project_batch(params, row, ci, cc, ctx.k, knockout);
}

template struct BkpParams<float>;
template struct BkpParams<double>;
template BkpParams<double> BkpParams<float>::cast<double>() const;
template BkpParams<float> BkpParams<double>::cast<float>() const;
template BkpParams<float> init<float>(std::uint64_t, const BkpConfig&, const std::string&);
template BkpParams<double> init<double>(std::uint64_t, const BkpConfig&, const std::string&);
template nm::Tensor<float> project_batch(const BkpParams<float>&, const nm::Tensor<float>&,
                                         const nm::Tensor<float>&, const nm::Tensor<float>&,
                                         std::size_t, const Knockout&);
template nm::Tensor<double> project_batch(const BkpParams<double>&, const nm::Tensor<double>&,
                                          const nm::Tensor<double>&, const nm::Tensor<double>&,
                                          std::size_t, const Knockout&);
template nm::Tensor<float> project(const BkpParams<float>&, const nm::Tensor<float>&,
                                   const KnowledgeContext&, const Knockout&);
template nm::Tensor<double> project(const BkpParams<double>&, const nm::Tensor<double>&,
                                    const KnowledgeContext&, const Knockout&);

}  // namespace keds::bkp
