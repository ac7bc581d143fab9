#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace gatefuse {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for its lifetime (evaluation, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string op = "leaf";
  std::string label;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates this node's grad into its parents' grads.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const noexcept { return !backward_fn; }

  std::vector<Real>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage (like a reference),
/// which is what lets the model and the parameter store refer to the same
/// parameters. Use clone() for a deep copy.
template <class Real>
class Tensor {
 public:
  using Node = TensorNode<Real>;
  using value_type = Real;

  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) +
                                  " does not match " +
                                  std::to_string(data.size()) + " elements");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real(0)), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  /// Builds a (possibly recorded) result node. Used by primitives only.
  static Tensor make_result(Shape shape, std::vector<Real> data, std::string op,
                            std::vector<Tensor> inputs,
                            std::function<void(Node&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    out.node_->op = std::move(op);
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward_fn = std::move(backward);
    return out;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<Real> data() { return node_->data; }
  std::span<const Real> data() const { return node_->data; }
  std::vector<Real>& values() { return node_->data; }
  const std::vector<Real>& values() const { return node_->data; }

  /// Gradient view; zeros when nothing has been accumulated yet.
  std::span<Real> grad() { return node_->grad_buffer(); }
  std::vector<Real> grad_copy() const {
    if (node_->grad.size() != node_->data.size())
      return std::vector<Real>(node_->data.size(), Real(0));
    return node_->grad;
  }
  bool has_grad() const noexcept { return node_->grad.size() == node_->data.size(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }
  /// Drops the gradient buffer entirely (has_grad() becomes false).
  void clear_grad() { node_->grad.clear(); }

  Real item() const {
    if (size() != 1) {
      throw std::invalid_argument("item: tensor of shape " + shape_str(shape()) +
                                  " is not a scalar");
    }
    return node_->data[0];
  }
  Real operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  const std::string& op() const { return node_->op; }
  const std::string& label() const { return node_->label; }
  /// Attaches a name to the node for graph introspection.
  Tensor& tag(std::string label) {
    node_->label = std::move(label);
    return *this;
  }

  std::vector<Tensor> parents() const {
    std::vector<Tensor> out;
    for (const auto& p : node_->parents) out.push_back(Tensor(p));
    return out;
  }

  /// Same values, no tape history.
  Tensor detach() const { return Tensor(node_->shape, node_->data); }
  Tensor clone() const {
    Tensor t(node_->shape, node_->data, node_->requires_grad);
    return t;
  }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  /// Reverse-mode sweep from a scalar. Leaf gradients accumulate across
  /// calls; intermediate gradients are reset on every call.
  void backward() const {
    if (size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_str(shape()));
    }
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (Node* n : order) {
      if (!n->is_leaf()) n->grad.assign(n->data.size(), Real(0));
    }
    node_->grad_buffer()[0] += Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

}  // namespace gatefuse
