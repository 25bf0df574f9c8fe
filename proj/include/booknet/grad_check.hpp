#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "booknet/tape.hpp"

namespace booknet::grad {

/// Scalar-valued function of some tape inputs. Must be deterministic.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckOptions {
  /// Step is eps * max(1, |x_i|).
  double eps = 1e-5;
  double tol = 1e-4;
  /// Relative error denominator floor, so that near-zero gradients are
  /// compared absolutely.
  double floor = 1e-6;
  /// Check at most this many coordinates per input (0 = all), chosen with a
  /// fixed-seed shuffle.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 7;
  /// Debug fault injection forwarded to Tape::set_fault.
  std::string fault_op;
  double fault_factor = 1.0;
};

struct GradCheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  std::size_t coords_checked = 0;
};

/// Raised when the tape gradient itself is non-finite.
class GradCheckFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Compares tape gradients of `f` against central finite differences.
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace booknet::grad
