#include "keds/numeric/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "keds/error.hpp"

namespace keds::numeric {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {
std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}
}  // namespace detail

namespace {
void validate_shape(const Shape& shape) {
  for (auto s : shape) {
    if (s == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero extent");
  }
}
}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, bool requires_grad) {
  validate_shape(shape);
  node_ = std::make_shared<Node>();
  node_->value.assign(shape_numel(shape), T{0});
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
  node_->seq = detail::next_seq();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
  node_->seq = detail::next_seq();
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::from_op(Shape shape, std::vector<T> values, std::vector<Tensor> parents,
                             const char* op, BackwardFn backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  node->seq = detail::next_seq();
  bool needs = false;
  for (const auto& p : parents) {
    if (!p.defined()) throw GraphError(std::string("undefined input to ") + op);
    if (p.node_->released) {
      throw GraphError(std::string("input to ") + op + " belongs to a released graph");
    }
    needs = needs || p.node_->requires_grad;
  }
  node->requires_grad = needs;
  node->is_leaf = !needs;
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

template <typename T>
typename Tensor<T>::Node& Tensor<T>::checked() const {
  if (!node_) throw GraphError("use of an undefined tensor");
  return *node_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return checked().shape;
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return checked().value.size();
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = shape();
  if (s.size() <= 1) return 1;
  return shape_numel(Shape(s.begin(), s.end() - 1));
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

template <typename T>
std::span<const T> Tensor<T>::values() const {
  return checked().value;
}

template <typename T>
std::span<T> Tensor<T>::mutable_values() {
  auto& n = checked();
  if (!n.is_leaf) throw GraphError(std::string("cannot mutate the output of op ") + n.op);
  return n.value;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = checked();
  if (n.value.size() != 1) {
    throw RankError("item() on non-scalar tensor of shape " + shape_str(n.shape));
  }
  return n.value[0];
}

template <typename T>
T Tensor<T>::at(std::size_t row, std::size_t col) const {
  if (row >= rows() || col >= cols()) throw DimensionError("index out of range");
  return checked().value[row * cols() + col];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return checked().requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  auto& n = checked();
  if (!n.is_leaf) throw GraphError("requires_grad can only be set on leaves");
  n.requires_grad = flag;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return checked().is_leaf;
}

template <typename T>
const char* Tensor<T>::op_name() const {
  return checked().op;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !checked().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return checked().grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  checked().grad.clear();
}

template <typename T>
void Tensor<T>::backward() {
  auto& root = checked();
  if (root.value.size() != 1) {
    throw RankError("backward() needs a scalar root, got shape " + shape_str(root.shape));
  }
  if (root.released) throw GraphError("backward() called twice on the same graph");
  if (!root.requires_grad) throw GraphError("backward() root does not depend on any gradient input");

  // Strong references keep upstream nodes alive while links are released.
  std::vector<std::shared_ptr<Node>> order;
  std::vector<std::shared_ptr<Node>> stack{node_};
  std::unordered_set<const Node*> seen;
  while (!stack.empty()) {
    auto n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    if (n->released) throw GraphError("backward() reached a node of a released graph");
    for (auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p);
    }
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  root.grad_buffer()[0] += T{1};
  for (auto& n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (auto& n : order) {
    if (n->is_leaf) continue;
    n->backward_fn = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->released = true;
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = checked();
  return Tensor(n.shape, n.value, false);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace keds::numeric
