#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lg {

using Shape = std::vector<std::size_t>;

/// Raised when an operation receives arguments that violate its contract.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation would commit a NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable, unwritable or corrupt files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

/// Dense row-major float32 array with an attached differentiation record.
///
/// Copies share storage (handle semantics, like most tensor libraries); use
/// clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const float> data() const { return node_->data; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<float> mutable_data() { return node_->data; }
  float item() const;
  float at(std::size_t flat) const { return node_->data.at(flat); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad();

  /// Same values, no history, no grad requirement.
  Tensor detach() const;
  /// Independent deep copy of the values; keeps the requires_grad flag.
  Tensor clone() const;

  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  // Internal access for op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Whether newly created op outputs record history. Thread-local.
bool grad_enabled();

/// Disables history recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Topologically ordered list of primitive applications leading to a tensor.
struct ComputeRecord {
  struct Entry {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
  };
  std::vector<Entry> entries;
  std::vector<std::shared_ptr<detail::Node>> nodes;  // same order as entries

  /// Collects every node reachable from `root` that participates in
  /// differentiation, inputs before consumers.
  static ComputeRecord trace(const Tensor& root);
};

/// Reverse pass: accumulates dLoss/dLeaf into every requires_grad leaf.
/// Repeated calls accumulate. Throws InvalidArgument for non-scalar loss.
void backward(const Tensor& loss);
void backward(const ComputeRecord& record, const Tensor& loss);

namespace detail {

// Builds an op output; attaches history only when grad mode is on and some
// input requires grad. Checks the committed values are finite.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace lg
