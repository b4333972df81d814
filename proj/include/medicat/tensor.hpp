#pragma once

// Dense row-major tensors recorded on a reverse-mode tape.
//
// Every op result keeps shared ownership of its inputs plus a backward
// closure; the graph reachable from a loss *is* the tape. backward() orders
// that graph topologically and replays the closures in reverse, each node
// exactly once. Leaf gradients accumulate across passes until zero_grad();
// interior gradients live only for the duration of one pass.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace medicat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until the first contribution
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool active = false;  // set per backward pass: this node wants a gradient

  // Zero-initialised gradient buffer for accumulation.
  Real* grad_buffer();
};

template <typename Real = double>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<Real>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const Real> values() const { return node_->value; }
  // Leaf values only; mutating an interior node would desynchronise the tape.
  std::span<Real> mutable_values();
  Real item() const;
  Real at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  // Sets the gradient accumulator to zeros (allocating it if needed).
  void zero_grad();

  // New leaf sharing no history with this tensor.
  Tensor detach() const;

  Node<Real>* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

// Builds an op result whose inputs are `parents`. `backward` receives the
// result node; parents that are `active` expect contributions through
// Node::grad_buffer(). requires_grad propagates from any parent.
template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> parents,
                         std::function<void(Node<Real>&)> backward);

// Reverse pass from a scalar loss. With an empty `targets` list every
// requires_grad tensor reachable from `loss` receives d(loss)/d(tensor);
// otherwise only the listed leaves do, and work on other branches is skipped.
template <typename Real>
void backward(const Tensor<Real>& loss, std::span<const Tensor<Real>> targets = {});

// Leaves reachable from `root` (each once, in discovery order).
template <typename Real>
std::vector<Tensor<Real>> collect_leaves(const Tensor<Real>& root);

// ---- ops --------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor);
// x[..., n] + bias[n], broadcast over leading axes.
template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias);
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x);
// Normalises over the last axis; gamma, beta have that axis' extent.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, Real eps = Real(1e-5));
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::ptrdiff_t axis = -1);
// Mean over one axis; the axis is removed from the result shape.
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x, std::ptrdiff_t axis);
template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape);
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x);
// Rows of x (axis 0) picked by index; repeats allowed.
template <typename Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<std::size_t> rows);
template <typename Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b);
// Fused multi-head self-attention over packed [batch*tokens x 3*d] qkv rows.
template <typename Real>
Tensor<Real> self_attention(const Tensor<Real>& qkv, std::size_t batch, std::size_t tokens,
                            std::size_t heads);

}  // namespace medicat
