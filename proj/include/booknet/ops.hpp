#pragma once

#include <cstddef>
#include <vector>

#include "booknet/tape.hpp"

namespace booknet::grad {

// Elementwise. Operands must have identical shapes; there is no broadcasting
// except the explicit bias ops below.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);

/// x[..., C] + b[C], bias broadcast over every leading index.
Var add_bias(Var x, Var b);

/// a[m x k] * b[k x n].
Var matmul(Var a, Var b);
/// 2-D transpose.
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat(const std::vector<Var>& parts, std::size_t axis);
std::vector<Var> split(Var a, std::size_t axis, const std::vector<std::size_t>& sizes);

/// Normalizes over the last axis, then applies per-channel gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax(Var x, std::size_t axis);

/// y = x W^T + b with x[L x in], W[out x in], b[out]. `b` may be invalid.
Var linear(Var x, Var w, Var b = {});

/// Cross-correlation of x[C_in x H x W] with w[C_out x C_in x k x k] (k odd);
/// `b` (per output channel) may be invalid.
Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding);

/// Scaled dot-product attention split into `heads` column groups:
/// softmax(q_h k_h^T / sqrt(d)) v_h per head, heads concatenated.
/// q[L_q x C], k[L_k x C], v[L_k x C].
Var attention(Var q, Var k, Var v, std::size_t heads);

struct AttentionVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Full multi-head attention: input projections, attention core, output
/// projection. Returns L_q x C.
Var multi_head_attention(Var q, Var k, Var v, const AttentionVars& p, std::size_t heads);

Var sum(Var a);
Var mean(Var a);
Var sum_squares(Var a);
/// mean |pred - target| over all elements; target is not differentiated.
Var mean_abs_diff(Var pred, const Tensor& target);

}  // namespace booknet::grad
