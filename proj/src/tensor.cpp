#include "cpt/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cpt {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw TensorError("tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                      shape_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->ensure_grad();
  return node;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw TensorError("tensor: use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return node_ ? node_->values.size() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw TensorError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw TensorError("tensor: expected a matrix, got " + shape_string(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw TensorError("tensor: expected a matrix, got " + shape_string(shape()));
  return node_->shape[1];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw TensorError("tensor: use of undefined tensor");
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw TensorError("tensor: use of undefined tensor");
  return node_->values;
}

double Tensor::at(std::size_t row, std::size_t col) const { return node_->values[row * cols() + col]; }

double Tensor::item() const {
  if (numel() != 1) throw TensorError("tensor: item() on tensor of shape " + shape_string(shape()));
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TensorError("tensor: no gradient buffer");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw TensorError("tensor: use of undefined tensor");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) return;
  node_->grad.assign(node_->values.size(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw TensorError("backward: root must be a scalar, got " +
                      (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  const auto& root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior nodes restart from zero so repeated sweeps over shared
  // sub-graphs do not double count; leaves keep accumulating.
  for (detail::Node* node : order) {
    if (node->backward) node->grad.assign(node->values.size(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->backward) continue;
    node->ensure_grad();
    node->backward(*node);
  }
}

}  // namespace cpt
