#include "arwb/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "arwb/errors.hpp"

namespace arwb {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
  impl_->data = std::make_shared<std::vector<float>>();
}

Tensor::Tensor(Shape shape, float fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  impl_->data = std::make_shared<std::vector<float>>(arwb::numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto d : shape)
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  if (arwb::numel(shape) != values.size())
    throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  impl_->data = std::make_shared<std::vector<float>>(std::move(values));
  impl_->shape = std::move(shape);
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return (*impl_->data)[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::vector<float> Tensor::grad() const {
  if (impl_->grad.empty()) return std::vector<float>(numel(), 0.0f);
  return impl_->grad;
}

void Tensor::accumulate_grad(std::span<const float> g) const {
  auto& dst = impl_->grad;
  if (dst.empty()) {
    dst.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = std::make_shared<std::vector<float>>(*impl_->data);
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::reshape(Shape shape) const {
  if (arwb::numel(shape) != numel())
    throw DimensionError("cannot reshape " + shape_str(impl_->shape) + " to " + shape_str(shape));
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = impl_->data;
  Tensor out(std::move(impl));
  if (impl_->requires_grad) {
    out.impl_->requires_grad = true;
    Tensor self = *this;
    out.impl_->node = std::make_shared<detail::Node>(
        detail::Node{{self}, [self](std::span<const float> g) mutable { self.accumulate_grad(g); }});
  }
  return out;
}

Tensor Tensor::make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                           std::function<void(std::span<const float>)> backward) {
  Tensor out(std::move(shape), std::move(values));
  const bool track = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    out.impl_->requires_grad = true;
    out.impl_->node =
        std::make_shared<detail::Node>(detail::Node{std::move(inputs), std::move(backward)});
  }
  return out;
}

Tape Tape::record(const Tensor& root) {
  Tape tape;
  tape.root_ = root;
  // Iterative post-order DFS gives a topological order.
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.id());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto& node = t.impl_->node;
    if (node && next < node->inputs.size()) {
      const Tensor child = node->inputs[next++];
      if (child.requires_grad() && seen.insert(child.id()).second) stack.emplace_back(child, 0);
      continue;
    }
    tape.order_.push_back(t);
    stack.pop_back();
  }
  return tape;
}

void Tape::backward() {
  for (auto& t : order_)
    if (!t.is_leaf()) t.impl_->grad.clear();
  root_.impl_->grad.assign(root_.numel(), 1.0f);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto& impl = *it->impl_;
    if (!impl.node || impl.grad.empty()) continue;
    impl.node->backward(impl.grad);
  }
}

void backward(const Tensor& root) {
  if (root.numel() != 1)
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  if (!root.requires_grad()) throw ContractError("backward root is not recorded on a tape");
  Tape::record(root).backward();
}

}  // namespace arwb
