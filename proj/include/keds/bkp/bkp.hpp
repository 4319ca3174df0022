#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "keds/numeric/tensor.hpp"
#include "keds/store/knowledge_base.hpp"

namespace keds::bkp {

struct BkpConfig {
  std::uint32_t dim = 64;
  std::uint32_t layers = 3;
  std::uint32_t heads = 4;
  std::uint32_t ffn_mult = 4;
};

/// Top-K retrieved image and caption features for one query.
struct KnowledgeContext {
  std::size_t k = 0;
  std::uint32_t dim = 0;
  std::vector<float> image_feats;    // k x dim
  std::vector<float> caption_feats;  // k x dim
  std::vector<std::uint64_t> image_ids;
  std::vector<std::uint64_t> caption_ids;
};

/// Two independent searches, both keyed by the image feature.
KnowledgeContext retrieve_context(const store::KnowledgeBase& kb, std::span<const float> query,
                                  std::size_t k);

template <typename T>
struct CrossLayer {
  numeric::Tensor<T> ln_q_g, ln_q_b, ln_m_g, ln_m_b;
  numeric::Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  numeric::Tensor<T> ln_f_g, ln_f_b, w1, b1, w2, b2;
};

template <typename T>
struct BkpParams {
  BkpConfig config;
  numeric::Tensor<T> psi_w, psi_b;
  std::vector<CrossLayer<T>> image_stack;
  std::vector<CrossLayer<T>> caption_stack;

  /// Every trainable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, numeric::Tensor<T>>> parameters() const;
  /// Deep copy: new leaves, same values.
  BkpParams clone() const;
  template <typename U>
  BkpParams<U> cast() const;
};

/// Scaled-uniform weights (bound 1/sqrt(fan_in)); psi starts at identity plus
/// uniform noise of 0.01; layer-norm gains 1, biases 0. Throws ConfigError if
/// dim % heads != 0.
template <typename T>
BkpParams<T> init(std::uint64_t seed, const BkpConfig& config, const std::string& label = "bkp");

/// Disables one pathway by zeroing its output token.
struct Knockout {
  bool image_branch = false;
  bool caption_branch = false;
};

/// Batched projection. images: [B x d]; ctx_images, ctx_captions: [B*K x d]
/// (item b owns rows b*K .. b*K+K-1). Returns [3B x d] with rows
/// 3b, 3b+1, 3b+2 = psi(i_b), v_i, v_c.
template <typename T>
numeric::Tensor<T> project_batch(const BkpParams<T>& params, const numeric::Tensor<T>& images,
                                 const numeric::Tensor<T>& ctx_images,
                                 const numeric::Tensor<T>& ctx_captions, std::size_t k,
                                 const Knockout& knockout = {});

/// Single item: i is [d] or [1 x d]; returns [3 x d].
template <typename T>
numeric::Tensor<T> project(const BkpParams<T>& params, const numeric::Tensor<T>& image,
                           const KnowledgeContext& ctx, const Knockout& knockout = {});

}  // namespace keds::bkp
