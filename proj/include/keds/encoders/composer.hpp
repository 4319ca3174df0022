#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "keds/encoders/tokens.hpp"
#include "keds/numeric/tensor.hpp"
#include "keds/store/embedding_matrix.hpp"

namespace keds::encoders {

struct ComposerConfig {
  std::uint32_t vocab_size = 1024;
  std::uint32_t dim = 64;
  std::uint32_t max_len = 32;
  std::uint32_t layers = 2;
  std::uint32_t heads = 4;
  std::uint32_t ffn_mult = 4;
  /// Multiplier on the output projections of each residual branch.
  double residual_scale = 0.5;
  /// Elementwise stddev of positional rows; seeded vocab rows use 1.
  double position_scale = 0.1;
  std::uint64_t seed = 0;
};

/// Frozen seeded text encoder: token/pseudo rows plus positions, pre-norm
/// self-attention blocks, mean pooling, L2 normalization. No weight ever
/// requires grad; gradients flow only into the supplied pseudo rows.
template <typename T>
class FrozenComposer {
 public:
  using Tensor = numeric::Tensor<T>;

  /// `vocab_table`, when given, replaces the seeded vocabulary rows.
  explicit FrozenComposer(const ComposerConfig& config,
                          const store::EmbeddingMatrix* vocab_table = nullptr);

  const ComposerConfig& config() const { return config_; }
  std::uint32_t dim() const { return config_.dim; }

  /// Slot s of sequence b reads pseudo row b*p + s. Returns [B x d].
  Tensor compose_batch(std::span<const TokenSequence> seqs, const Tensor& pseudo,
                       std::uint32_t p) const;
  /// Sequences without slots.
  Tensor encode(std::span<const TokenSequence> seqs) const;
  /// Single sequence against a [p x d] block; returns shape [d].
  Tensor compose(const TokenSequence& seq, const Tensor& pseudo) const;

  /// Every weight tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, const Tensor*>> weights() const;
  /// Raw bytes of all weights, for bitwise freeze checks.
  std::vector<unsigned char> serialize() const;
  std::uint64_t digest() const;

 private:
  struct Block {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
  };

  void check(std::span<const TokenSequence> seqs, std::uint32_t p, std::size_t pseudo_rows) const;

  ComposerConfig config_;
  Tensor vocab_;
  Tensor positions_;
  std::vector<Block> blocks_;
};

using ComposerF = FrozenComposer<float>;
using ComposerD = FrozenComposer<double>;

}  // namespace keds::encoders
