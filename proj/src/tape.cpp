#include "booknet/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace booknet::grad {

const Tensor& Var::value() const { return tape->value(id); }
const Shape& Var::shape() const { return tape->value(id).shape; }
std::size_t Var::dim(std::size_t axis) const { return tape->value(id).dim(axis); }
std::size_t Var::numel() const { return tape->value(id).numel(); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.op = "leaf";
  n.owned = std::move(value);
  n.needs_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::watch(Tensor& param) {
  Node n;
  n.op = "param";
  n.external = &param;
  n.needs_grad = grad_enabled_;
  return push(std::move(n));
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  Node n;
  n.op = op;
  n.owned = std::move(value);
  bool any = false;
  for (const Var& in : inputs) {
    if (in.tape != this) throw std::logic_error(std::string(op) + ": operand from another tape");
    any = any || nodes_[in.id].needs_grad;
  }
  n.needs_grad = grad_enabled_ && any;
  if (n.needs_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

std::vector<double>& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.external) {
    if (n.external->grad.size() != n.external->data.size()) n.external->zero_grad();
    return n.external->grad;
  }
  if (n.grad.empty()) n.grad.assign(n.owned.numel(), 0.0);
  return n.grad;
}

const std::vector<double>* Tape::grad_if(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.external) return n.external->grad.empty() ? nullptr : &n.external->grad;
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss from another tape");
  if (value(loss).numel() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " + shape_str(value(loss).shape));
  }
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss.id)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    if (!fault_op_.empty() && n.op == fault_op_) {
      for (double& g : n.grad) g *= fault_factor_;
    }
    n.backward(*this, i);
  }
}

void Tape::set_fault(std::string op, double factor) {
  fault_op_ = std::move(op);
  fault_factor_ = factor;
}

std::size_t Tape::first_nonfinite_grad() const {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    const Node& n = nodes_[i];
    const std::vector<double>& g = n.external ? n.external->grad : n.grad;
    for (double x : g) {
      if (!std::isfinite(x)) return i;
    }
  }
  return nodes_.size();
}

}  // namespace booknet::grad
