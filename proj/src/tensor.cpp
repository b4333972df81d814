#include "medicat/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "medicat/error.hpp"

namespace medicat {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
Real* Node<Real>::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), Real(0));
  return grad.data();
}

namespace {

template <typename Real>
std::shared_ptr<Node<Real>> make_leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  if (values.size() != shape_numel(shape))
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

template <typename Real>
Tensor<Real> Tensor<Real>::full(Shape shape, Real value, bool requires_grad) {
  std::vector<Real> values(shape_numel(shape), value);
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

template <typename Real>
Tensor<Real> Tensor<Real>::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

template <typename Real>
Tensor<Real> Tensor<Real>::scalar(Real value, bool requires_grad) {
  return Tensor(make_leaf<Real>({1}, {value}, requires_grad));
}

template <typename Real>
std::span<Real> Tensor<Real>::mutable_values() {
  if (!node_->is_leaf)
    throw ContractError(std::string("cannot mutate the values of an op result (") + node_->op +
                        ")");
  return node_->value;
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1)
    throw ContractError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->value[0];
}

template <typename Real>
Real Tensor<Real>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank())
    throw DimensionError("index rank " + std::to_string(index.size()) + " for tensor " +
                         shape_str(shape()));
  std::size_t flat = 0, axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

template <typename Real>
void Tensor<Real>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  node_->grad.assign(node_->value.size(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(make_leaf(node_->shape, node_->value, false));
}

template <typename Real>
Tensor<Real> make_result(const char* op, Shape shape, std::vector<Real> value,
                         std::vector<Tensor<Real>> parents,
                         std::function<void(Node<Real>&)> backward_fn) {
  auto node = std::make_shared<Node<Real>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->is_leaf = false;
  for (auto& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.node_ptr());
  }
  if (node->requires_grad) node->backward = std::move(backward_fn);
  return Tensor<Real>(std::move(node));
}

namespace {

// Post-order over the requires_grad subgraph: parents precede children.
template <typename Real>
std::vector<Node<Real>*> topo_order(Node<Real>* root, bool grad_only) {
  std::vector<Node<Real>*> order;
  std::unordered_set<Node<Real>*> seen;
  std::vector<std::pair<Node<Real>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Real>* parent = node->parents[next++].get();
      if ((!grad_only || parent->requires_grad) && seen.insert(parent).second)
        stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

template <typename Real>
void backward(const Tensor<Real>& loss, std::span<const Tensor<Real>> targets) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad())
    throw ContractError("backward: loss is not connected to any tensor that requires grad");

  std::unordered_set<const Node<Real>*> wanted;
  for (const auto& t : targets) {
    if (!t.requires_grad()) throw ContractError("backward target does not require grad");
    wanted.insert(t.node());
  }

  auto order = topo_order(loss.node(), true);
  for (auto* n : order) {
    if (wanted.empty()) {
      n->active = n->requires_grad;
    } else {
      bool on = wanted.count(n) > 0;
      if (!n->is_leaf)
        for (const auto& p : n->parents) on = on || p->active;
      n->active = on;
    }
    if (!n->is_leaf) n->grad.clear();
  }

  loss.node()->grad_buffer()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = *it;
    if (n->is_leaf || !n->active || n->grad.empty() || !n->backward) continue;
    n->backward(*n);
  }
  for (auto* n : order) {
    if (!n->is_leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
    n->active = false;
  }
}

template <typename Real>
std::vector<Tensor<Real>> collect_leaves(const Tensor<Real>& root) {
  std::vector<Tensor<Real>> leaves;
  std::unordered_set<Node<Real>*> seen{root.node()};
  std::vector<std::shared_ptr<Node<Real>>> stack{root.node_ptr()};
  while (!stack.empty()) {
    auto node = stack.back();
    stack.pop_back();
    if (node->is_leaf) leaves.emplace_back(node);
    for (auto it = node->parents.rbegin(); it != node->parents.rend(); ++it)
      if (seen.insert(it->get()).second) stack.push_back(*it);
  }
  return leaves;
}

#define MEDICAT_INSTANTIATE(R)                                                               \
  template struct Node<R>;                                                                   \
  template class Tensor<R>;                                                                  \
  template Tensor<R> make_result<R>(const char*, Shape, std::vector<R>,                      \
                                    std::vector<Tensor<R>>, std::function<void(Node<R>&)>);  \
  template void backward<R>(const Tensor<R>&, std::span<const Tensor<R>>);                   \
  template std::vector<Tensor<R>> collect_leaves<R>(const Tensor<R>&);

MEDICAT_INSTANTIATE(float)
MEDICAT_INSTANTIATE(double)

#undef MEDICAT_INSTANTIATE

}  // namespace medicat
