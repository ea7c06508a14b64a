#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace arwb {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  std::vector<float> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> node;  // producer; null for leaves
};

// One recorded primitive. `backward` receives the gradient of the output and
// accumulates into the inputs through Tensor::accumulate_grad.
struct Node {
  std::vector<Tensor> inputs;
  std::function<void(std::span<const float>)> backward;
};

}  // namespace detail

/// Dense row-major float32 tensor with optional participation in reverse-mode
/// differentiation.
///
/// Copies share storage (handle semantics). Tensors produced without any
/// requires_grad input carry no tape node and are safe to read from many
/// threads. Use clone() for an independent copy and detach() for a view of
/// the same storage that does not participate in differentiation.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data->size(); }
  bool empty() const { return impl_->data->empty(); }

  std::span<const float> data() const { return *impl_->data; }
  /// Writable access. Only meaningful on leaves (inputs and parameters).
  std::span<float> mutable_data() { return *impl_->data; }
  float operator[](std::size_t i) const { return (*impl_->data)[i]; }
  float& operator[](std::size_t i) { return (*impl_->data)[i]; }
  float item() const;

  /// Element of a rank-3 H x W x C tensor.
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return (*impl_->data)[(y * impl_->shape[1] + x) * impl_->shape[2] + c];
  }
  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return (*impl_->data)[(y * impl_->shape[1] + x) * impl_->shape[2] + c];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return impl_->node == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; zeros of the right size when no backward reached it.
  std::vector<float> grad() const;
  void zero_grad() { impl_->grad.clear(); }
  void accumulate_grad(std::span<const float> g) const;

  Tensor detach() const;
  Tensor clone() const;

  /// Same storage under a new shape with the same element count; records a
  /// pass-through node when this tensor participates in differentiation.
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_->data == other.impl_->data; }
  const detail::TensorImpl* id() const { return impl_.get(); }

  /// Builds the output of a primitive. When any input requires grad the
  /// output records a node with the supplied backward closure.
  static Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                            std::function<void(std::span<const float>)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  friend class Tape;
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Topologically ordered record of the primitives that produced a root.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  /// Node order: every entry's inputs appear before it.
  const std::vector<Tensor>& nodes() const { return order_; }

  /// Runs the reverse sweep. Leaf gradients accumulate; intermediate
  /// gradients are reset at the start of every sweep.
  void backward();

 private:
  Tensor root_;
  std::vector<Tensor> order_;
};

/// Populates grad of every requires_grad leaf reachable from `root` with
/// d root / d leaf (accumulating into existing gradients).
void backward(const Tensor& root);

}  // namespace arwb
