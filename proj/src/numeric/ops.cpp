#include "keds/numeric/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "keds/error.hpp"

namespace keds::numeric {

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const Mat<T>>;
template <typename T>
using MutMap = Eigen::Map<Mat<T>>;

template <typename T>
using Node = detail::Node<T>;

/// Grad buffer of parent i, or nullptr when it does not need one.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.grad_buffer().data();
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return Shape{rows, cols}; }

}  // namespace

std::vector<std::size_t> uniform_offsets(std::size_t count, std::size_t step) {
  std::vector<std::size_t> out(count + 1);
  for (std::size_t i = 0; i <= count; ++i) out[i] = i * step;
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.values().data(), m, k) * ConstMap<T>(b.values().data(), k, n);
  return Tensor<T>::from_op(matrix_shape(m, n), std::move(out), {a, b}, "matmul",
                            [m, k, n](Node<T>& self) {
                              ConstMap<T> dc(self.grad.data(), m, n);
                              const auto& av = self.parents[0]->value;
                              const auto& bv = self.parents[1]->value;
                              if (T* ga = parent_grad(self, 0)) {
                                MutMap<T>(ga, m, k).noalias() +=
                                    dc * ConstMap<T>(bv.data(), k, n).transpose();
                              }
                              if (T* gb = parent_grad(self, 1)) {
                                MutMap<T>(gb, k, n).noalias() +=
                                    ConstMap<T>(av.data(), m, k).transpose() * dc;
                              }
                            });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), n, m) = ConstMap<T>(a.values().data(), m, n).transpose();
  return Tensor<T>::from_op(matrix_shape(n, m), std::move(out), {a}, "transpose",
                            [m, n](Node<T>& self) {
                              if (T* ga = parent_grad(self, 0)) {
                                MutMap<T>(ga, m, n) +=
                                    ConstMap<T>(self.grad.data(), n, m).transpose();
                              }
                            });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (T* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, "sub", [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, "mul", [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row bias " + shape_str(bias.shape()) + " does not match width of " +
                         shape_str(a.shape()));
  }
  std::vector<T> out(a.values().begin(), a.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, bias}, "add_row",
                            [m, n](Node<T>& self) {
                              if (T* g = parent_grad(self, 0)) {
                                for (std::size_t i = 0; i < m * n; ++i) g[i] += self.grad[i];
                              }
                              if (T* g = parent_grad(self, 1)) {
                                for (std::size_t r = 0; r < m; ++r) {
                                  for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values().begin(), a.values().end());
  for (auto& x : out) x *= factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, "scale", [factor](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (T x : a.values()) total += x;
  return Tensor<T>::from_op(Shape{}, {total}, {a}, "sum", [](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T total{0};
  for (T x : a.values()) total += x;
  const T inv = T{1} / static_cast<T>(a.numel());
  return Tensor<T>::from_op(Shape{}, {total * inv}, {a}, "mean", [inv](Node<T>& self) {
    if (T* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0] * inv;
    }
  });
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.numel() != b.numel()) {
    throw DimensionError("dot size mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  T total{0};
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * bv[i];
  return Tensor<T>::from_op(Shape{}, {total}, {a, b}, "dot", [](Node<T>& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const T g0 = self.grad[0];
    if (T* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += g0 * bv[i];
    }
    if (T* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < bv.size(); ++i) g[i] += g0 * av[i];
    }
  });
}

template <typename T>
Tensor<T> rowwise_dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "rowwise_dot");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m, T{0});
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r] += av[r * n + c] * bv[r * n + c];
  }
  return Tensor<T>::from_op(Shape{m}, std::move(out), {a, b}, "rowwise_dot",
                            [m, n](Node<T>& self) {
                              const auto& av = self.parents[0]->value;
                              const auto& bv = self.parents[1]->value;
                              T* ga = parent_grad(self, 0);
                              T* gb = parent_grad(self, 1);
                              for (std::size_t r = 0; r < m; ++r) {
                                const T g = self.grad[r];
                                for (std::size_t c = 0; c < n; ++c) {
                                  if (ga) ga[r * n + c] += g * bv[r * n + c];
                                  if (gb) gb[r * n + c] += g * av[r * n + c];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    const T* x = av.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    T z{0};
    for (std::size_t c = 0; c < n; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (std::size_t c = 0; c < n; ++c) y[c] /= z;
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, "softmax_rows",
                            [m, n](Node<T>& self) {
                              T* g = parent_grad(self, 0);
                              if (!g) return;
                              for (std::size_t r = 0; r < m; ++r) {
                                const T* y = self.value.data() + r * n;
                                const T* dy = self.grad.data() + r * n;
                                T s{0};
                                for (std::size_t c = 0; c < n; ++c) s += dy[c] * y[c];
                                for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (dy[c] - s);
                              }
                            });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    const T* x = av.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    T z{0};
    for (std::size_t c = 0; c < n; ++c) z += std::exp(x[c] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t c = 0; c < n; ++c) y[c] = x[c] - lse;
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, "log_softmax_rows",
                            [m, n](Node<T>& self) {
                              T* g = parent_grad(self, 0);
                              if (!g) return;
                              for (std::size_t r = 0; r < m; ++r) {
                                const T* y = self.value.data() + r * n;
                                const T* dy = self.grad.data() + r * n;
                                T s{0};
                                for (std::size_t c = 0; c < n; ++c) s += dy[c];
                                for (std::size_t c = 0; c < n; ++c) {
                                  g[r * n + c] += dy[c] - std::exp(y[c]) * s;
                                }
                              }
                            });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::span<const std::size_t> index) {
  const std::size_t m = a.rows(), n = a.cols();
  if (index.size() != m) {
    throw DimensionError("pick needs one index per row of " + shape_str(a.shape()));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<T> out(m);
  auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    if (idx[r] >= n) throw DimensionError("pick index out of range");
    out[r] = av[r * n + idx[r]];
  }
  return Tensor<T>::from_op(Shape{m}, std::move(out), {a}, "pick",
                            [n, idx = std::move(idx)](Node<T>& self) {
                              if (T* g = parent_grad(self, 0)) {
                                for (std::size_t r = 0; r < idx.size(); ++r) {
                                  g[r * n + idx[r]] += self.grad[r];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, double eps) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  std::vector<T> norms(m);
  auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += double(av[r * n + c]) * double(av[r * n + c]);
    const double norm = std::sqrt(ss);
    if (!(norm >= eps)) {
      throw DegenerateVectorError("l2_normalize: row " + std::to_string(r) + " has norm " +
                                  std::to_string(norm) + " below epsilon");
    }
    norms[r] = static_cast<T>(norm);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = static_cast<T>(av[r * n + c] / norm);
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, "l2_normalize",
                            [m, n, norms = std::move(norms)](Node<T>& self) {
                              T* g = parent_grad(self, 0);
                              if (!g) return;
                              for (std::size_t r = 0; r < m; ++r) {
                                const T* y = self.value.data() + r * n;
                                const T* dy = self.grad.data() + r * n;
                                T s{0};
                                for (std::size_t c = 0; c < n; ++c) s += y[c] * dy[c];
                                for (std::size_t c = 0; c < n; ++c) {
                                  g[r * n + c] += (dy[c] - y[c] * s) / norms[r];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm affine params do not match width of " + shape_str(x.shape()));
  }
  std::vector<T> out(m * n), xhat(m * n), inv_std(m);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.data() + r * n;
    T mu{0};
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<T>(n);
    T var{0};
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<T>(n);
    inv_std[r] = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * inv_std[r];
      out[r * n + c] = xhat[r * n + c] * gv[c] + bv[c];
    }
  }
  return Tensor<T>::from_op(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        const auto& gv = self.parents[1]->value;
        T* gx = parent_grad(self, 0);
        T* gg = parent_grad(self, 1);
        T* gb = parent_grad(self, 2);
        std::vector<T> dxhat(n);
        for (std::size_t r = 0; r < m; ++r) {
          const T* dy = self.grad.data() + r * n;
          const T* xh = xhat.data() + r * n;
          T mean_d{0}, mean_dx{0};
          for (std::size_t c = 0; c < n; ++c) {
            if (gg) gg[c] += dy[c] * xh[c];
            if (gb) gb[c] += dy[c];
            dxhat[c] = dy[c] * gv[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
          }
          if (!gx) continue;
          mean_d /= static_cast<T>(n);
          mean_dx /= static_cast<T>(n);
          for (std::size_t c = 0; c < n; ++c) {
            gx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = static_cast<T>(0.044715);
  std::vector<T> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = av[i];
    out[i] = T{0.5} * x * (T{1} + std::tanh(kC * (x + kA * x * x * x)));
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, "gelu", [](Node<T>& self) {
    T* g = parent_grad(self, 0);
    if (!g) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const T x = xv[i];
      const T th = std::tanh(kC * (x + kA * x * x * x));
      const T d = T{0.5} * (T{1} + th) +
                  T{0.5} * x * (T{1} - th * th) * kC * (T{1} + T{3} * kA * x * x);
      g[i] += self.grad[i] * d;
    }
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> starts;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows width mismatch");
    starts.push_back(m);
    m += p.rows();
  }
  std::vector<T> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::from_op(matrix_shape(m, n), std::move(out), std::move(parents), "concat_rows",
                            [n, starts = std::move(starts)](Node<T>& self) {
                              for (std::size_t p = 0; p < starts.size(); ++p) {
                                T* g = parent_grad(self, p);
                                if (!g) continue;
                                const std::size_t len = self.parents[p]->value.size();
                                const T* src = self.grad.data() + starts[p] * n;
                                for (std::size_t i = 0; i < len; ++i) g[i] += src[i];
                              }
                            });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t n = a.cols();
  if (begin >= end || end > a.rows()) {
    throw DimensionError("slice_rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(a.shape()));
  }
  auto av = a.values();
  std::vector<T> out(av.begin() + begin * n, av.begin() + end * n);
  return Tensor<T>::from_op(matrix_shape(end - begin, n), std::move(out), {a}, "slice_rows",
                            [begin, n](Node<T>& self) {
                              if (T* g = parent_grad(self, 0)) {
                                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  g[begin * n + i] += self.grad[i];
                                }
                              }
                            });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto av = a.values();
  return Tensor<T>::from_op(std::move(shape), std::vector<T>(av.begin(), av.end()), {a}, "reshape",
                            [](Node<T>& self) {
                              if (T* g = parent_grad(self, 0)) {
                                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> gather_rows(std::span<const Tensor<T>> sources, std::span<const RowRef> refs) {
  if (sources.empty() || refs.empty()) throw DimensionError("gather_rows needs sources and rows");
  const std::size_t n = sources[0].cols();
  for (const auto& s : sources) {
    if (s.cols() != n) throw DimensionError("gather_rows source width mismatch");
  }
  std::vector<RowRef> rr(refs.begin(), refs.end());
  std::vector<T> out(rr.size() * n);
  for (std::size_t r = 0; r < rr.size(); ++r) {
    if (rr[r].source >= sources.size() || rr[r].row >= sources[rr[r].source].rows()) {
      throw DimensionError("gather_rows reference out of range");
    }
    auto sv = sources[rr[r].source].values();
    std::copy_n(sv.begin() + rr[r].row * n, n, out.begin() + r * n);
  }
  std::vector<Tensor<T>> parents(sources.begin(), sources.end());
  Shape shape = matrix_shape(rr.size(), n);
  return Tensor<T>::from_op(std::move(shape), std::move(out), std::move(parents),
                            "gather_rows", [n, rr = std::move(rr)](Node<T>& self) {
                              for (std::size_t r = 0; r < rr.size(); ++r) {
                                T* g = parent_grad(self, rr[r].source);
                                if (!g) continue;
                                const T* src = self.grad.data() + r * n;
                                T* dst = g + rr[r].row * n;
                                for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
                              }
                            });
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, std::span<const std::size_t> offsets) {
  const std::size_t n = x.cols();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != x.rows()) {
    throw DimensionError("segment_mean offsets do not cover " + shape_str(x.shape()));
  }
  const std::size_t segments = offsets.size() - 1;
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  std::vector<T> out(segments * n, T{0});
  auto xv = x.values();
  for (std::size_t b = 0; b < segments; ++b) {
    if (off[b + 1] <= off[b]) throw DimensionError("segment_mean empty segment");
    const T inv = T{1} / static_cast<T>(off[b + 1] - off[b]);
    for (std::size_t r = off[b]; r < off[b + 1]; ++r) {
      for (std::size_t c = 0; c < n; ++c) out[b * n + c] += xv[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) out[b * n + c] *= inv;
  }
  return Tensor<T>::from_op(matrix_shape(segments, n), std::move(out), {x}, "segment_mean",
                            [n, off = std::move(off)](Node<T>& self) {
                              T* g = parent_grad(self, 0);
                              if (!g) return;
                              for (std::size_t b = 0; b + 1 < off.size(); ++b) {
                                const T inv = T{1} / static_cast<T>(off[b + 1] - off[b]);
                                for (std::size_t r = off[b]; r < off[b + 1]; ++r) {
                                  for (std::size_t c = 0; c < n; ++c) {
                                    g[r * n + c] += self.grad[b * n + c] * inv;
                                  }
                                }
                              }
                            });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const std::size_t> q_offsets, std::span<const std::size_t> k_offsets,
                    std::size_t heads) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention shape mismatch: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (q_offsets.size() != k_offsets.size() || q_offsets.size() < 2 || q_offsets.back() != q.rows() ||
      k_offsets.back() != k.rows() || q_offsets.front() != 0 || k_offsets.front() != 0) {
    throw DimensionError("attention segment offsets do not cover the inputs");
  }
  const std::size_t segments = q_offsets.size() - 1;
  const std::size_t dh = d / heads;
  const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(dh));
  std::vector<std::size_t> qo(q_offsets.begin(), q_offsets.end());
  std::vector<std::size_t> ko(k_offsets.begin(), k_offsets.end());

  // probs layout: for each segment, for each head, Lq x Lk block.
  std::vector<std::size_t> prob_start(segments + 1, 0);
  for (std::size_t b = 0; b < segments; ++b) {
    if (qo[b + 1] < qo[b] || ko[b + 1] <= ko[b]) {
      throw DimensionError("attention segment " + std::to_string(b) + " has no keys");
    }
    prob_start[b + 1] = prob_start[b] + heads * (qo[b + 1] - qo[b]) * (ko[b + 1] - ko[b]);
  }
  std::vector<T> probs(prob_start.back());
  std::vector<T> out(q.rows() * d, T{0});
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  std::vector<double> acc(dh);
  for (std::size_t b = 0; b < segments; ++b) {
    const std::size_t lq = qo[b + 1] - qo[b], lk = ko[b + 1] - ko[b];
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + prob_start[b] + h * lq * lk;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qi = qv.data() + (qo[b] + i) * d + c0;
        T* pi = p + i * lk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          const T* kj = kv.data() + (ko[b] + j) * d + c0;
          T s{0};
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          pi[j] = s * inv_sqrt;
          mx = std::max(mx, pi[j]);
        }
        // Sums over keys run in double so the rounded result does not depend on key order.
        double z = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          z += pi[j];
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < lk; ++j) {
          pi[j] = static_cast<T>(pi[j] / z);
          const T* vj = vv.data() + (ko[b] + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) acc[c] += double(pi[j]) * vj[c];
        }
        T* oi = out.data() + (qo[b] + i) * d + c0;
        for (std::size_t c = 0; c < dh; ++c) oi[c] = static_cast<T>(acc[c]);
      }
    }
  }
  return Tensor<T>::from_op(
      q.shape(), std::move(out), {q, k, v}, "attention",
      [d, dh, heads, inv_sqrt, qo = std::move(qo), ko = std::move(ko),
       prob_start = std::move(prob_start), probs = std::move(probs)](Node<T>& self) {
        const auto& qv = self.parents[0]->value;
        const auto& kv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        T* gq = parent_grad(self, 0);
        T* gk = parent_grad(self, 1);
        T* gv = parent_grad(self, 2);
        std::vector<T> dp;
        for (std::size_t b = 0; b + 1 < qo.size(); ++b) {
          const std::size_t lq = qo[b + 1] - qo[b], lk = ko[b + 1] - ko[b];
          dp.resize(lk);
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + prob_start[b] + h * lq * lk;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < lq; ++i) {
              const T* pi = p + i * lk;
              const T* doi = self.grad.data() + (qo[b] + i) * d + c0;
              T s{0};
              for (std::size_t j = 0; j < lk; ++j) {
                const T* vj = vv.data() + (ko[b] + j) * d + c0;
                T acc{0};
                for (std::size_t c = 0; c < dh; ++c) acc += doi[c] * vj[c];
                dp[j] = acc;
                s += acc * pi[j];
                if (gv) {
                  T* gvj = gv + (ko[b] + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pi[j] * doi[c];
                }
              }
              const T* qi = qv.data() + (qo[b] + i) * d + c0;
              for (std::size_t j = 0; j < lk; ++j) {
                const T ds = pi[j] * (dp[j] - s) * inv_sqrt;
                const T* kj = kv.data() + (ko[b] + j) * d + c0;
                if (gq) {
                  T* gqi = gq + (qo[b] + i) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (ko[b] + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

#define KEDS_INSTANTIATE_OPS(T)                                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> rowwise_dot(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                               \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                           \
  template Tensor<T> pick(const Tensor<T>&, std::span<const std::size_t>);                         \
  template Tensor<T> l2_normalize(const Tensor<T>&, double);                                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
  template Tensor<T> gelu(const Tensor<T>&);                                                       \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                      \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                       \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> gather_rows(std::span<const Tensor<T>>, std::span<const RowRef>);             \
  template Tensor<T> segment_mean(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,               \
                               std::span<const std::size_t>, std::span<const std::size_t>,         \
                               std::size_t);

KEDS_INSTANTIATE_OPS(float)
KEDS_INSTANTIATE_OPS(double)

#undef KEDS_INSTANTIATE_OPS

}  // namespace keds::numeric
