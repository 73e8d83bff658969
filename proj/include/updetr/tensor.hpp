#pragma once

// Dense row-major 64-bit tensors and a reverse-mode differentiation tape.
//
// Operations record themselves on the thread's active Tape (installed with a
// TapeScope) whenever at least one input requires a gradient. Without an
// active tape every operation is a plain forward computation.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace updetr {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Only for parameter initialisation and optimizer updates, never while a
  // tape that references this tensor is alive.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_buffer();
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no gradient history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

/// Receives d(loss)/d(output) and accumulates into the inputs' gradients.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

class Tape {
 public:
  void record(const Tensor& output, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

 private:
  friend void backward(const Tensor& loss, Tape& tape);

  struct Entry {
    std::shared_ptr<TensorNode> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

/// Installs a tape as the calling thread's active tape for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Returns the active tape if any input requires a gradient, else nullptr.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs);

/// Gradient buffer of a node, allocated (zero-filled) on first use.
std::span<double> grad_of(TensorNode& node);

/// Populates grad() of every requires_grad tensor reachable from `loss`.
/// Gradients accumulate into existing buffers.
void backward(const Tensor& loss, Tape& tape);

}  // namespace updetr
