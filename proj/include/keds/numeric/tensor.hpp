#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace keds::numeric {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One record of the autodiff graph. Parents are always created before their
/// children, so `seq` is a topological index.
template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  bool released = false;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad;
  }
};

std::uint64_t next_seq();

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode gradient.
///
/// A Tensor is a cheap handle; copies alias the same storage. Leaves are
/// created directly and may be mutated (parameters). Results of ops are
/// interior nodes and are read-only. A graph is released by `backward()`;
/// calling it again through released nodes raises GraphError.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::Node<T>;
  using BackwardFn = std::function<void(Node&)>;

  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor scalar(T value);

  /// Builds an op result. The result requires grad iff any parent does; the
  /// parent links and backward closure are only kept in that case.
  static Tensor from_op(Shape shape, std::vector<T> values,
                        std::vector<Tensor> parents, const char* op,
                        BackwardFn backward_fn);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Rows of a matrix view: rank-1 tensors are a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> values() const;
  std::span<T> mutable_values();
  T item() const;
  T at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  const char* op_name() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  void zero_grad();

  void backward();

  /// A fresh leaf holding a copy of the values.
  Tensor detach() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  Node& checked() const;

  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Converts values between precisions, producing a new leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& src, bool requires_grad = false) {
  std::vector<To> out(src.values().begin(), src.values().end());
  return Tensor<To>(src.shape(), std::move(out), requires_grad);
}

}  // namespace keds::numeric
