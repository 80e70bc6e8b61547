#include "serkd/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <utility>

namespace serkd {

std::size_t element_count(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace detail {

Buffer& Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

void Node::accumulate(std::span<const double> g) {
  auto& buf = grad_buffer();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

}  // namespace detail

namespace {

void validate_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + to_string(shape));
  }
}

std::shared_ptr<detail::Node> leaf(Shape shape, Buffer value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  Buffer data(element_count(shape), value);
  return Tensor(leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::span<const double> values, bool requires_grad) {
  validate_shape(shape);
  if (element_count(shape) != values.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " +
                         std::to_string(element_count(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  Buffer data(values.begin(), values.end());
  return Tensor(leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({}, value, requires_grad); }

const detail::Node& Tensor::checked() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return checked().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[axis];
}

std::span<const double> Tensor::values() const { return checked().value; }

double Tensor::item() const {
  const auto v = values();
  if (v.size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return v[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for shape " + to_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for shape " + to_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return values()[flat];
}

std::span<double> Tensor::leaf_values() {
  if (!checked().is_leaf()) throw ContractError("leaf_values() on a non-leaf tensor");
  return node_->value;
}

bool Tensor::requires_grad() const { return checked().requires_grad; }
bool Tensor::is_leaf() const { return checked().is_leaf(); }
bool Tensor::has_grad() const { return !checked().grad.empty(); }
std::span<const double> Tensor::grad() const { return checked().grad; }

void Tensor::zero_grad() {
  checked();
  node_->grad.clear();
  node_->grad.shrink_to_fit();
}

Tensor Tensor::clone(bool requires_grad) const {
  const auto& n = checked();
  return Tensor(leaf(n.shape, n.value, requires_grad));
}

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs, const char* op,
                   detail::BackwardFn backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

namespace {

// Post-order DFS restricted to gradient-carrying nodes.
std::vector<detail::Node*> topological_order(detail::Node* root) {
  std::vector<detail::Node*> order;
  if (!root->requires_grad) return order;
  std::unordered_map<detail::Node*, bool> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen[root] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen[child]) {
        seen[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

ComputationRecord record_of(const Tensor& root) {
  ComputationRecord record;
  const auto order = topological_order(root.node().get());
  std::unordered_map<const detail::Node*, std::size_t> position;
  for (std::size_t i = 0; i < order.size(); ++i) position[order[i]] = i;
  for (auto* node : order) {
    RecordEntry entry{node->op, {}};
    for (auto& in : node->inputs) {
      if (in->requires_grad) entry.inputs.push_back(position.at(in.get()));
    }
    record.entries.push_back(std::move(entry));
  }
  return record;
}

void Tensor::backward() const {
  const auto& n = checked();
  if (n.value.size() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " + to_string(n.shape));
  }
  if (!n.requires_grad) return;
  const auto order = topological_order(node_.get());
  const double one = 1.0;
  node_->accumulate(std::span<const double>(&one, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward(*node);
    // Intermediate gradients are consumed; release them to bound peak memory.
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

}  // namespace serkd
