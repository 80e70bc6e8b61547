#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "serkd/errors.hpp"
#include "serkd/memory.hpp"

namespace serkd {

using Shape = std::vector<std::size_t>;
using Buffer = std::vector<double, CountingAllocator<double>>;

std::size_t element_count(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until something is accumulated
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const noexcept { return !backward; }
  Buffer& grad_buffer();
  void accumulate(std::span<const double> g);
};

}  // namespace detail

/// Dense row-major float64 tensor with reverse-mode differentiation.
///
/// A Tensor is a cheap handle: copies share the same node. Values are fixed
/// once an op has produced them; only leaves expose mutable values (used by
/// optimizers) and every node owns a gradient buffer filled by backward().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const double> values,
                     bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return values().size(); }

  std::span<const double> values() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  /// Mutable view of a leaf's values. Throws ContractError on op results.
  std::span<double> leaf_values();

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Fresh leaf holding a copy of the values with the requested flag.
  Tensor clone(bool requires_grad) const;

  /// Populates gradients of every requires_grad leaf reachable from this
  /// scalar. Gradients accumulate across calls until zero_grad().
  void backward() const;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  const detail::Node& checked() const;
  std::shared_ptr<detail::Node> node_;
};

/// Builds an op result. Inputs and the backward rule are only retained when
/// at least one input requires a gradient.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   const char* op, detail::BackwardFn backward);

struct RecordEntry {
  const char* op;
  std::vector<std::size_t> inputs;  // positions of gradient-carrying inputs
};

/// Topologically ordered view of the graph feeding `root`: every entry's
/// inputs appear before it and each node appears exactly once.
struct ComputationRecord {
  std::vector<RecordEntry> entries;
};

ComputationRecord record_of(const Tensor& root);

}  // namespace serkd
