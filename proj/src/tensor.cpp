#include "learngene/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace lg {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw InvalidArgument("tensor: shape " + shape_str(shape) + " does not match " +
                          std::to_string(data.size()) + " values");
  }
  for (float v : data) {
    if (!std::isfinite(v)) throw NumericError("tensor: non-finite value");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

float Tensor::item() const {
  if (numel() != 1) throw InvalidArgument("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->data, node_->requires_grad); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

ComputeRecord ComputeRecord::trace(const Tensor& root) {
  ComputeRecord record;
  if (!root.defined() || !root.requires_grad()) return record;
  // Iterative post-order DFS so deep graphs do not overflow the stack.
  std::unordered_set<const detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  std::vector<detail::Node*> order;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // Rebuild shared ownership from the parents' input lists.
  std::unordered_map<const detail::Node*, std::shared_ptr<detail::Node>> owners;
  owners.emplace(root.node().get(), root.node());
  for (auto* node : order) {
    for (const auto& in : node->inputs) owners.emplace(in.get(), in);
  }
  for (auto* node : order) {
    ComputeRecord::Entry entry;
    entry.op = node->op;
    entry.output_id = node->id;
    for (const auto& in : node->inputs) entry.input_ids.push_back(in->id);
    record.entries.push_back(std::move(entry));
    record.nodes.push_back(owners.at(node));
  }
  return record;
}

void backward(const Tensor& loss) { backward(ComputeRecord::trace(loss), loss); }

void backward(const ComputeRecord& record, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw InvalidArgument("backward: loss must be a scalar");
  }
  if (!loss.requires_grad()) return;
  for (const auto& node : record.nodes) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0f);
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0f;
  for (auto it = record.nodes.rbegin(); it != record.nodes.rend(); ++it) {
    detail::Node& node = **it;
    if (node.is_leaf() || !node.backward) continue;
    for (const auto& in : node.inputs) {
      if (in->requires_grad) in->ensure_grad();
    }
    node.backward(node);
  }
  for (const auto& node : record.nodes) {
    if (node->is_leaf()) continue;
    for (float g : node->grad) {
      if (!std::isfinite(g)) throw NumericError(std::string("backward: non-finite gradient in ") + node->op);
    }
  }
}

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  for (float v : data) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": produced a non-finite value");
  }
  auto node = new_node(std::move(shape), std::move(data), false);
  node->op = op;
  if (grad_enabled()) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& t : inputs) node->inputs.push_back(t.node());
      node->backward = std::move(backward_fn);
    }
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace detail

}  // namespace lg
