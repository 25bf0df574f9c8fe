#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "booknet/tensor.hpp"

namespace booknet::grad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape
/// lives and has not been cleared.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
};

/// Backward closure of one recorded op. It reads the gradient of node `self`
/// and accumulates into the gradients of its inputs.
using BackwardFn = std::function<void(Tape&, std::size_t self)>;

/// Ordered record of executed ops. Replaying it in reverse creation order is
/// a valid topological order, since every op's inputs are recorded before it.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Leaf that never receives gradient.
  Var constant(Tensor value);
  /// Owned leaf that receives gradient (read it back with grad()).
  Var leaf(Tensor value);
  /// Leaf aliasing an external parameter; backward accumulates into
  /// `param.grad`. The parameter must outlive the tape.
  Var watch(Tensor& param);

  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn backward);

  const Tensor& value(Var v) const { return value(v.id); }
  const Tensor& value(std::size_t id) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Mutable gradient buffer of a node, zero-allocated on first access.
  std::vector<double>& grad(Var v) { return grad(v.id); }
  std::vector<double>& grad(std::size_t id);
  /// Gradient of a node, or nullptr if nothing reached it.
  const std::vector<double>* grad_if(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and replays the record in reverse.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(std::size_t id) const { return nodes_[id].op; }

  /// Debug hook: scales the incoming gradient of every `op` node before its
  /// backward runs, so a gradient check against this tape must fail.
  void set_fault(std::string op, double factor);

  /// Index of the first node (in replay order) holding a non-finite
  /// gradient, or size() if all are finite.
  std::size_t first_nonfinite_grad() const;

 private:
  struct Node {
    std::string op;
    Tensor owned;
    Tensor* external = nullptr;
    bool needs_grad = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  Var push(Node node);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::string fault_op_;
  double fault_factor_ = 1.0;
};

}  // namespace booknet::grad
