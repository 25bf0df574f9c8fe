#include "booknet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace booknet::grad {
namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& t : inputs) vars.push_back(tape.constant(t));
  return f(tape, vars).value()[0];
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options) {
  Tape tape;
  if (!options.fault_op.empty()) tape.set_fault(options.fault_op, options.fault_factor);
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  Var loss = f(tape, vars);
  if (loss.numel() != 1) throw DimensionError("grad_check: function must return a scalar");
  tape.backward(loss);
  const std::size_t bad = tape.first_nonfinite_grad();
  if (bad < tape.size()) {
    throw GradCheckFailure("non-finite gradient at node " + std::to_string(bad) + " (op '" + tape.op_name(bad) + "')");
  }

  std::vector<std::vector<double>> analytic;
  for (const Var& v : vars) {
    const auto* g = tape.grad_if(v);
    analytic.push_back(g ? *g : std::vector<double>(v.numel(), 0.0));
  }

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  std::vector<Tensor> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t j : coords) {
      const double x = inputs[i].data[j];
      const double h = options.eps * std::max(1.0, std::abs(x));
      probe[i].data[j] = x + h;
      const double fp = evaluate(f, probe);
      probe[i].data[j] = x - h;
      const double fm = evaluate(f, probe);
      probe[i].data[j] = x;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i][j];
      const double rel = relative_error(a, numeric, options.floor);
      ++report.coords_checked;
      report.max_abs_err = std::max(report.max_abs_err, std::abs(a - numeric));
      if (rel > report.max_rel_err || !std::isfinite(rel)) {
        report.max_rel_err = std::isfinite(rel) ? rel : INFINITY;
        report.worst_input = i;
        report.worst_index = j;
      }
    }
  }
  report.passed = report.max_rel_err < options.tol;
  return report;
}

}  // namespace booknet::grad
