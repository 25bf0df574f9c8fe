#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "booknet/grad_check.hpp"
#include "booknet/model.hpp"

namespace booknet::grad {

struct SuiteOptions {
  bool end_to_end = true;
  /// Coordinates checked per parameter tensor in the end-to-end case.
  std::size_t end_to_end_coords = 4;
  double op_tol = 1e-4;
  double end_to_end_tol = 1e-3;
  /// Debug fault injection, forwarded to every check.
  std::string fault_op;
  double fault_factor = 1.0;
};

struct SuiteEntry {
  std::string name;
  double tol = 0.0;
  GradCheckReport report;
  /// Set when the tape gradient itself was non-finite.
  std::string error;
  bool passed() const { return error.empty() && report.passed; }
};

/// 32x32 model with every dimension at its minimum useful size.
model::BookNetConfig gradcheck_config();

/// Finite-difference checks of every differentiable op, then the full model
/// with the multi-task loss on a batch of two images.
std::vector<SuiteEntry> run_gradient_suite(const SuiteOptions& options = {});

}  // namespace booknet::grad
