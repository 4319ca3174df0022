#pragma once

#include <span>

#include "keds/numeric/tensor.hpp"

namespace keds::trainer {

/// Symmetric cross-entropy over tau-scaled cosine similarities. Rows are
/// normalized internally. Throws BatchError if |B| < 2.
template <typename T>
numeric::Tensor<T> contrastive_loss(const numeric::Tensor<T>& img, const numeric::Tensor<T>& txt,
                                    double tau);

struct RegistrationParts {
  double cos = 0.0;
  double sup = 0.0;
  double total = 0.0;
};

/// L_cos + beta * L_sup for single vectors. Throws DegenerateVectorError on a zero vector.
RegistrationParts registration_loss(std::span<const double> v, std::span<const double> t,
                                    std::span<const double> ts, std::span<const double> ts2,
                                    double beta);

/// Batch mean of the registration loss; every argument is [B x d].
template <typename T>
numeric::Tensor<T> registration_loss(const numeric::Tensor<T>& v, const numeric::Tensor<T>& t,
                                     const numeric::Tensor<T>& ts, const numeric::Tensor<T>& ts2,
                                     double beta);

}  // namespace keds::trainer
