#include "updetr/tensor.hpp"

#include <sstream>

#include "updetr/error.hpp"

namespace updetr {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->data[0];
}

std::span<double> Tensor::grad_buffer() { return grad_of(*node_); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

void Tape::record(const Tensor& output, BackwardFn fn) {
  entries_.push_back({output.node(), std::move(fn)});
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return nullptr;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->defined() && t->requires_grad()) return g_active_tape;
  return nullptr;
}

std::span<double> grad_of(TensorNode& node) {
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
  return node.grad;
}

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  if (!loss.requires_grad()) throw ContractError("backward: loss does not require a gradient");
  bool on_tape = false;
  for (const auto& e : tape.entries_) on_tape = on_tape || e.output == loss.node();
  if (!on_tape && !tape.entries_.empty())
    throw ContractError("backward: loss was not produced on this tape");

  grad_of(*loss.node())[0] += 1.0;
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->fn(it->output->grad);
  }
}

}  // namespace updetr
