#pragma once

// Dense row-major tensors with tape-free reverse-mode differentiation.
//
// Every op returns a new Tensor whose node remembers its parents and a
// closure that pushes the output gradient back into them. Nodes are only
// linked when at least one input requires a gradient, so inference through
// the same ops builds no graph at all.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rad::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  // Set once backward has run through this node; a second pass is an error.
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;
  using BackwardFn = std::function<void(Node<T>&)>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  // Builds an op output. `backward` is attached only when some parent
  // requires a gradient; it reads node.grad and accumulates into
  // node.parents[i]->ensure_grad() for parents that require one.
  static Tensor make_op(Shape shape, std::vector<T> value, std::vector<Tensor> parents,
                        BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad();

  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t i, std::size_t j) const;

  // Fresh leaf holding a copy of the value.
  Tensor detach(bool requires_grad = false) const;

  const NodePtr& node() const { return node_; }

 private:
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}
  NodePtr node_;
};

template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// add/sub/mul accept b whose shape equals a's or a's trailing dimensions.
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> tanh(const Tensor<T>& x);
// tanh approximation
template <class T> Tensor<T> gelu(const Tensor<T>& x);
// Normalizes over the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));
// Rows of `table` ([V x d]) gathered by id -> [n x d].
template <class T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids);
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <class T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
// Multi-head scaled dot-product attention over [T x d] inputs with a causal
// mask: row i attends to rows 0..i only.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_head);

// Populates gradients for every requires_grad leaf reachable from `loss`.
template <class T> void backward(const Tensor<T>& loss);

// Max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// using central differences.
template <class T>
double gradcheck(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, T eps);
// Same check on at most max_per_param coordinates of each parameter, drawn
// without replacement from seed; 0 checks every coordinate.
template <class T>
double gradcheck(const std::function<Tensor<T>()>& f, std::span<Tensor<T>> params, T eps,
                 std::size_t max_per_param, std::uint64_t seed);

}  // namespace rad::ad
