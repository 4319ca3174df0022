#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "keds/numeric/tensor.hpp"

namespace keds::numeric {

inline constexpr double kNormEpsilon = 1e-12;

// Matrix ops treat rank-1 tensors as a single row.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// a + bias, bias broadcast over rows. The only broadcast supported.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);
template <typename T>
Tensor<T> mean(const Tensor<T>& a);
template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);
/// Per-row inner products, shape [m].
template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a);
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a);
/// out[r] = a[r, index[r]], shape [m].
template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::span<const std::size_t> index);

/// Unit-L2 rows. Throws DegenerateVectorError if any row norm is below eps.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, double eps = kNormEpsilon);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);
/// tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts);
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

struct RowRef {
  std::size_t source;
  std::size_t row;
};
/// out[r] = sources[refs[r].source].row(refs[r].row). Sources share a width.
template <typename T>
Tensor<T> gather_rows(std::span<const Tensor<T>> sources, std::span<const RowRef> refs);

/// Mean of each row segment [offsets[b], offsets[b+1]), shape [B x cols].
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> offsets);

/// Segmented multi-head scaled dot-product attention. Query segment b
/// (rows q_offsets[b]..q_offsets[b+1]) attends over key/value segment b.
/// Columns are split into `heads` equal slices.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::size_t> q_offsets,
                    std::span<const std::size_t> k_offsets, std::size_t heads);

/// Offsets 0, step, 2*step, ... count*step.
std::vector<std::size_t> uniform_offsets(std::size_t count, std::size_t step);

}  // namespace keds::numeric
