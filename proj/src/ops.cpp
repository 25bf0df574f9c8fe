#include "booknet/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

namespace booknet::grad {
namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::logic_error("operation on an empty Var");
  return *a.tape;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var a, std::size_t rank) {
  if (a.value().rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

void accumulate(Tape& t, Var into, const std::vector<double>& g, double factor = 1.0) {
  if (!t.needs_grad(into)) return;
  std::vector<double>& dst = t.grad(into);
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += factor * g[i];
}

CMapR as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapR(t.data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

CMapR as_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return CMapR(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MapR as_matrix_mut(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MapR(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  out.requires_grad = false;
  out.grad.clear();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv[i];
  return tape_of(a).record("add", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    accumulate(t, a, g);
    accumulate(t, b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av[i] - bv[i];
  return tape_of(a).record("sub", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    accumulate(t, a, g);
    accumulate(t, b, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av[i] * bv[i];
  return tape_of(a).record("mul", std::move(out), {a, b}, [a, b](Tape& t, std::size_t self) {
    const auto g = t.grad(self);
    const auto& av = t.value(a).data;
    const auto& bv = t.value(b).data;
    if (t.needs_grad(a)) {
      auto& da = t.grad(a);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& db = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out(a.shape());
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av[i] * s;
  return tape_of(a).record("scale", std::move(out), {a}, [a, s](Tape& t, std::size_t self) {
    accumulate(t, a, t.grad(self), s);
  });
}

Var relu(Var a) {
  Tensor out(a.shape());
  const auto& av = a.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av[i] > 0.0 ? av[i] : 0.0;
  return tape_of(a).record("relu", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(self);
    const auto& av = t.value(a).data;
    auto& da = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) da[i] += g[i];
    }
  });
}

Var add_bias(Var x, Var b) {
  require_rank("add_bias", b, 1);
  const std::size_t c = b.dim(0);
  if (x.shape().back() != c) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  Tensor out(x.shape());
  const auto& xv = x.value().data;
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = xv[i] + bv[i % c];
  return tape_of(x).record("add_bias", std::move(out), {x, b}, [x, b, c](Tape& t, std::size_t self) {
    const auto& g = t.grad(self);
    accumulate(t, x, g);
    if (t.needs_grad(b)) {
      auto& db = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) db[i % c] += g[i];
    }
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out({m, n});
  as_matrix_mut(out.data, m, n).noalias() = as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  return tape_of(a).record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::size_t self) {
    const auto g = as_matrix(t.grad(self), m, n);
    if (t.needs_grad(a)) {
      as_matrix_mut(t.grad(a), m, k).noalias() += g * as_matrix(t.value(b), k, n).transpose();
    }
    if (t.needs_grad(b)) {
      as_matrix_mut(t.grad(b), k, n).noalias() += as_matrix(t.value(a), m, k).transpose() * g;
    }
  });
}

Var transpose(Var a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  as_matrix_mut(out.data, n, m) = as_matrix(a.value(), m, n).transpose();
  return tape_of(a).record("transpose", std::move(out), {a}, [a, m, n](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    as_matrix_mut(t.grad(a), m, n) += as_matrix(t.grad(self), n, m).transpose();
  });
}

Var reshape(Var a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  return tape_of(a).record("reshape", std::move(out), {a}, [a](Tape& t, std::size_t self) {
    accumulate(t, a, t.grad(self));
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no operands");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
    if (!ok) throw DimensionError("concat: incompatible " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  Tensor out(out_shape);
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * os.inner;
    const auto& pv = p.value().data;
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pv.begin() + o * block, block, out.data.begin() + o * os.extent * os.inner + offset * os.inner);
    }
    offset += p.dim(axis);
  }
  return tape_of(parts[0]).record(
      "concat", std::move(out), parts, [parts, offsets, os, axis](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (!t.needs_grad(parts[i])) continue;
          const std::size_t block = t.value(parts[i]).shape[axis] * os.inner;
          auto& dp = t.grad(parts[i]);
          for (std::size_t o = 0; o < os.outer; ++o) {
            const double* src = g.data() + o * os.extent * os.inner + offsets[i] * os.inner;
            double* dst = dp.data() + o * block;
            for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
          }
        }
      });
}

std::vector<Var> split(Var a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  const Shape shape = a.shape();
  if (axis >= shape.size()) {
    throw DimensionError("split: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  std::size_t total = 0;
  for (std::size_t s : sizes) total += s;
  if (total != shape[axis]) {
    throw DimensionError("split: sizes do not cover axis " + std::to_string(axis) + " of " + shape_str(shape));
  }
  const AxisSplit as = split_at(shape, axis);
  std::vector<Var> result;
  std::size_t offset = 0;
  for (std::size_t s : sizes) {
    Shape ps = shape;
    ps[axis] = s;
    Tensor out(ps);
    const std::size_t block = s * as.inner;
    const auto& av = a.value().data;
    for (std::size_t o = 0; o < as.outer; ++o) {
      std::copy_n(av.begin() + o * as.extent * as.inner + offset * as.inner, block, out.data.begin() + o * block);
    }
    result.push_back(tape_of(a).record(
        "split", std::move(out), {a}, [a, as, offset, block](Tape& t, std::size_t self) {
          if (!t.needs_grad(a)) return;
          const auto& g = t.grad(self);
          auto& da = t.grad(a);
          for (std::size_t o = 0; o < as.outer; ++o) {
            double* dst = da.data() + o * as.extent * as.inner + offset * as.inner;
            const double* src = g.data() + o * block;
            for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
          }
        }));
    offset += s;
  }
  return result;
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_rank("layer_norm", gain, 1);
  require_rank("layer_norm", bias, 1);
  const std::size_t c = x.shape().back();
  if (gain.dim(0) != c || bias.dim(0) != c) {
    throw DimensionError("layer_norm: gain/bias do not match channels of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  Tensor out(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto& xv = x.value().data;
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*xhat)[r * c + j] = h;
      out.data[r * c + j] = h * gv[j] + bv[j];
    }
  }
  return tape_of(x).record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, c, rows, xhat, inv_std](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& gv = t.value(gain).data;
        if (t.needs_grad(gain)) {
          auto& dg = t.grad(gain);
          for (std::size_t i = 0; i < g.size(); ++i) dg[i % c] += g[i] * (*xhat)[i];
        }
        if (t.needs_grad(bias)) {
          auto& db = t.grad(bias);
          for (std::size_t i = 0; i < g.size(); ++i) db[i % c] += g[i];
        }
        if (!t.needs_grad(x)) return;
        auto& dx = t.grad(x);
        std::vector<double> dh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = g[r * c + j] * gv[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[r * c + j];
          }
          mean_dh /= static_cast<double>(c);
          mean_dh_h /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            dx[r * c + j] += (*inv_std)[r] * (dh[j] - mean_dh - (*xhat)[r * c + j] * mean_dh_h);
          }
        }
      });
}

Var softmax(Var x, std::size_t axis) {
  const Shape& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  const AxisSplit s = split_at(shape, axis);
  Tensor out(shape);
  const auto& xv = x.value().data;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out.data[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out.data[base + j * s.inner] /= z;
    }
  }
  const std::size_t self_id = tape_of(x).size();
  return tape_of(x).record("softmax", std::move(out), {x}, [x, s, self_id](Tape& t, std::size_t self) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(self);
    const auto& y = t.value(self_id).data;
    auto& dx = t.grad(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t i = base + j * s.inner;
          dx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const std::size_t l = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: weight " + shape_str(w.shape()) + " does not accept " + shape_str(x.shape()));
  }
  if (b.valid() && (b.value().rank() != 1 || b.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  Tensor out({l, out_dim});
  auto y = as_matrix_mut(out.data, l, out_dim);
  y.noalias() = as_matrix(x.value(), l, in) * as_matrix(w.value(), out_dim, in).transpose();
  if (b.valid()) {
    const auto& bv = b.value().data;
    for (std::size_t r = 0; r < l; ++r) {
      for (std::size_t j = 0; j < out_dim; ++j) out.data[r * out_dim + j] += bv[j];
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  return tape_of(x).record("linear", std::move(out), inputs, [x, w, b, l, in, out_dim](Tape& t, std::size_t self) {
    const auto g = as_matrix(t.grad(self), l, out_dim);
    if (t.needs_grad(x)) {
      as_matrix_mut(t.grad(x), l, in).noalias() += g * as_matrix(t.value(w), out_dim, in);
    }
    if (t.needs_grad(w)) {
      as_matrix_mut(t.grad(w), out_dim, in).noalias() += g.transpose() * as_matrix(t.value(x), l, in);
    }
    if (b.valid() && t.needs_grad(b)) {
      auto& db = t.grad(b);
      for (std::size_t r = 0; r < l; ++r) {
        for (std::size_t j = 0; j < out_dim; ++j) db[j] += g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j));
      }
    }
  });
}

Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
  require_rank("conv2d", x, 3);
  require_rank("conv2d", w, 4);
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin || w.dim(3) != k) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " does not accept input " + shape_str(x.shape()));
  }
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  }
  if (b.valid() && (b.value().rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " does not match " + std::to_string(cout) + " outputs");
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
  const std::size_t patch = cin * k * k;
  const std::size_t npix = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(patch * npix, 0.0);
  const auto& xv = x.value().data;
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols->data() + ((c * k + ky) * k + kx) * npix;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(wd)) continue;
            row[oy * wo + ox] = xv[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  Tensor out({cout, ho, wo});
  as_matrix_mut(out.data, cout, npix).noalias() = as_matrix(w.value(), cout, patch) * as_matrix(*cols, patch, npix);
  if (b.valid()) {
    const auto& bv = b.value().data;
    for (std::size_t o = 0; o < cout; ++o) {
      for (std::size_t p = 0; p < npix; ++p) out.data[o * npix + p] += bv[o];
    }
  }
  std::vector<Var> inputs{x, w};
  if (b.valid()) inputs.push_back(b);
  Tape& t0 = tape_of(x);
  if (!t0.grad_enabled()) cols.reset();
  return t0.record(
      "conv2d", std::move(out), inputs,
      [x, w, b, cols, cin, h, wd, cout, k, stride, padding, ho, wo, patch, npix](Tape& t, std::size_t self) {
        const auto g = as_matrix(t.grad(self), cout, npix);
        if (t.needs_grad(w)) {
          as_matrix_mut(t.grad(w), cout, patch).noalias() += g * as_matrix(*cols, patch, npix).transpose();
        }
        if (b.valid() && t.needs_grad(b)) {
          auto& db = t.grad(b);
          for (std::size_t o = 0; o < cout; ++o) {
            db[o] += g.row(static_cast<Eigen::Index>(o)).sum();
          }
        }
        if (!t.needs_grad(x)) return;
        std::vector<double> dcols(patch * npix);
        as_matrix_mut(dcols, patch, npix).noalias() = as_matrix(t.value(w), cout, patch).transpose() * g;
        auto& dx = t.grad(x);
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const double* row = dcols.data() + ((c * k + ky) * k + kx) * npix;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                  dx[(c * h + static_cast<std::size_t>(iy)) * wd + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
                }
              }
            }
          }
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t heads) {
  require_rank("attention", q, 2);
  require_rank("attention", k, 2);
  require_rank("attention", v, 2);
  const std::size_t lq = q.dim(0), c = q.dim(1), lk = k.dim(0);
  if (k.dim(1) != c || v.dim(1) != c || v.dim(0) != lk) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("attention: " + std::to_string(c) + " channels not divisible by " + std::to_string(heads) +
                      " heads");
  }
  const std::size_t d = c / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const auto qm = as_matrix(q.value(), lq, c);
  const auto km = as_matrix(k.value(), lk, c);
  const auto vm = as_matrix(v.value(), lk, c);
  auto probs = std::make_shared<std::vector<double>>(heads * lq * lk);
  Tensor out({lq, c});
  auto om = as_matrix_mut(out.data, lq, c);
  for (std::size_t hi = 0; hi < heads; ++hi) {
    const auto col = static_cast<Eigen::Index>(hi * d);
    const auto dd = static_cast<Eigen::Index>(d);
    auto p = as_matrix_mut(*probs, heads * lq, lk).middleRows(static_cast<Eigen::Index>(hi * lq),
                                                             static_cast<Eigen::Index>(lq));
    p.noalias() = s * (qm.middleCols(col, dd) * km.middleCols(col, dd).transpose());
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      const double mx = p.row(r).maxCoeff();
      p.row(r) = (p.row(r).array() - mx).exp();
      p.row(r) /= p.row(r).sum();
    }
    om.middleCols(col, dd).noalias() = p * vm.middleCols(col, dd);
  }
  Tape& t0 = tape_of(q);
  if (!t0.grad_enabled()) probs.reset();
  return t0.record("attention", std::move(out), {q, k, v},
                   [q, k, v, lq, lk, c, d, heads, s, probs](Tape& t, std::size_t self) {
                     const auto g = as_matrix(t.grad(self), lq, c);
                     const auto qm = as_matrix(t.value(q), lq, c);
                     const auto km = as_matrix(t.value(k), lk, c);
                     const auto vm = as_matrix(t.value(v), lk, c);
                     const auto dd = static_cast<Eigen::Index>(d);
                     MatR dp, ds;
                     for (std::size_t hi = 0; hi < heads; ++hi) {
                       const auto col = static_cast<Eigen::Index>(hi * d);
                       const auto p = as_matrix(*probs, heads * lq, lk)
                                          .middleRows(static_cast<Eigen::Index>(hi * lq), static_cast<Eigen::Index>(lq));
                       const auto gh = g.middleCols(col, dd);
                       if (t.needs_grad(v)) {
                         as_matrix_mut(t.grad(v), lk, c).middleCols(col, dd).noalias() += p.transpose() * gh;
                       }
                       if (!t.needs_grad(q) && !t.needs_grad(k)) continue;
                       dp.noalias() = gh * vm.middleCols(col, dd).transpose();
                       ds = p.array() * (dp.colwise() - (dp.array() * p.array()).rowwise().sum().matrix()).array();
                       if (t.needs_grad(q)) {
                         as_matrix_mut(t.grad(q), lq, c).middleCols(col, dd).noalias() += s * (ds * km.middleCols(col, dd));
                       }
                       if (t.needs_grad(k)) {
                         as_matrix_mut(t.grad(k), lk, c).middleCols(col, dd).noalias() +=
                             s * (ds.transpose() * qm.middleCols(col, dd));
                       }
                     }
                   });
}

Var multi_head_attention(Var q, Var k, Var v, const AttentionVars& p, std::size_t heads) {
  const std::size_t c = q.shape().back();
  if (heads == 0 || c % heads != 0) {
    throw ConfigError("multi_head_attention: " + std::to_string(c) + " channels not divisible by " +
                      std::to_string(heads) + " heads");
  }
  Var qp = linear(q, p.wq, p.bq);
  Var kp = linear(k, p.wk, p.bk);
  Var vp = linear(v, p.wv, p.bv);
  return linear(attention(qp, kp, vp, heads), p.wo, p.bo);
}

Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value().data) acc += x;
  return tape_of(a).record("sum", Tensor({1}, acc), {a}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    const double g = t.grad(self)[0];
    for (double& d : t.grad(a)) d += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

Var sum_squares(Var a) {
  double acc = 0.0;
  for (double x : a.value().data) acc += x * x;
  return tape_of(a).record("sum_squares", Tensor({1}, acc), {a}, [a](Tape& t, std::size_t self) {
    if (!t.needs_grad(a)) return;
    const double g = t.grad(self)[0];
    const auto& av = t.value(a).data;
    auto& da = t.grad(a);
    for (std::size_t i = 0; i < av.size(); ++i) da[i] += 2.0 * g * av[i];
  });
}

Var mean_abs_diff(Var pred, const Tensor& target) {
  if (pred.shape() != target.shape) {
    throw DimensionError("mean_abs_diff: shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape));
  }
  const auto& pv = pred.value().data;
  const double n = static_cast<double>(pv.size());
  auto sign = std::make_shared<std::vector<double>>(pv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double diff = pv[i] - target.data[i];
    acc += std::abs(diff);
    (*sign)[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  }
  return tape_of(pred).record("mean_abs_diff", Tensor({1}, acc / n), {pred},
                              [pred, sign, n](Tape& t, std::size_t self) {
                                if (!t.needs_grad(pred)) return;
                                const double g = t.grad(self)[0] / n;
                                auto& dp = t.grad(pred);
                                for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += g * (*sign)[i];
                              });
}

}  // namespace booknet::grad
