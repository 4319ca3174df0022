#include "keds/trainer/losses.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "keds/error.hpp"
#include "keds/numeric/ops.hpp"

namespace keds::trainer {

namespace nm = numeric;

template <typename T>
nm::Tensor<T> contrastive_loss(const nm::Tensor<T>& img, const nm::Tensor<T>& txt, double tau) {
  if (img.rank() != 2 || txt.rank() != 2 || img.shape() != txt.shape()) {
    throw DimensionError("contrastive_loss needs equal [B x d] inputs, got " +
                         nm::shape_str(img.shape()) + " and " + nm::shape_str(txt.shape()));
  }
  const std::size_t b = img.rows();
  if (b < 2) throw BatchError("contrastive_loss needs |B| >= 2, got " + std::to_string(b));
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  auto logits = nm::scale(nm::matmul(nm::l2_normalize(img), nm::transpose(nm::l2_normalize(txt))),
                          static_cast<T>(tau));
  std::vector<std::size_t> diag(b);
  std::iota(diag.begin(), diag.end(), 0);
  auto i2t = nm::mean(nm::pick(nm::log_softmax_rows(logits), diag));
  auto t2i = nm::mean(nm::pick(nm::log_softmax_rows(nm::transpose(logits)), diag));
  return nm::scale(nm::add(i2t, t2i), T(-1));
}

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa < nm::kNormEpsilon * nm::kNormEpsilon || bb < nm::kNormEpsilon * nm::kNormEpsilon) {
    throw DegenerateVectorError("registration_loss on a zero vector");
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

}  // namespace

RegistrationParts registration_loss(std::span<const double> v, std::span<const double> t,
                                    std::span<const double> ts, std::span<const double> ts2,
                                    double beta) {
  RegistrationParts r;
  r.cos = 1.0 - cosine(v, t);
  r.sup = 1.0 - 0.5 * (cosine(v, ts) + cosine(v, ts2));
  r.total = r.cos + beta * r.sup;
  return r;
}

template <typename T>
nm::Tensor<T> registration_loss(const nm::Tensor<T>& v, const nm::Tensor<T>& t,
                                const nm::Tensor<T>& ts, const nm::Tensor<T>& ts2, double beta) {
  if (v.shape() != t.shape() || v.shape() != ts.shape() || v.shape() != ts2.shape()) {
    throw DimensionError("registration_loss inputs differ in shape");
  }
  auto vn = nm::l2_normalize(v);
  auto l_cos = nm::sub(nm::Tensor<T>::scalar(T(1)), nm::mean(nm::rowwise_dot(vn, nm::l2_normalize(t))));
  auto sup_cos = nm::scale(nm::add(nm::mean(nm::rowwise_dot(vn, nm::l2_normalize(ts))),
                                   nm::mean(nm::rowwise_dot(vn, nm::l2_normalize(ts2)))),
                           T(0.5));
  auto l_sup = nm::sub(nm::Tensor<T>::scalar(T(1)), sup_cos);
  return nm::add(l_cos, nm::scale(l_sup, static_cast<T>(beta)));
}

template nm::Tensor<float> contrastive_loss(const nm::Tensor<float>&, const nm::Tensor<float>&, double);
template nm::Tensor<double> contrastive_loss(const nm::Tensor<double>&, const nm::Tensor<double>&, double);
template nm::Tensor<float> registration_loss(const nm::Tensor<float>&, const nm::Tensor<float>&,
                                             const nm::Tensor<float>&, const nm::Tensor<float>&, double);
template nm::Tensor<double> registration_loss(const nm::Tensor<double>&, const nm::Tensor<double>&,
                                              const nm::Tensor<double>&, const nm::Tensor<double>&,
                                              double);

}  // namespace keds::trainer
