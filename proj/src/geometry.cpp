#include "booknet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>

#include "booknet/checkpoint.hpp"

namespace booknet::geometry {
namespace {

// Sample positions within this many pixels of a grid point are snapped onto
// it, so exact grids reproduce pixel values exactly.
constexpr double kSnapPx = 1e-7;

struct AxisTap {
  std::size_t i0 = 0, i1 = 0;
  double f = 0.0;
  /// d(pixel position) / d(normalized coordinate); zero where clamped.
  double d = 0.0;
};

AxisTap axis_tap(double n, std::size_t extent) {
  AxisTap t;
  if (extent == 1) return t;
  const double hi = static_cast<double>(extent - 1);
  double p = (n + 1.0) * 0.5 * hi;
  t.d = 0.5 * hi;
  if (!(p > 0.0)) {
    p = 0.0;
    t.d = 0.0;
  } else if (p >= hi) {
    p = hi;
    t.d = 0.0;
  }
  const double r = std::round(p);
  if (std::abs(p - r) <= kSnapPx) p = r;
  t.i0 = std::min(static_cast<std::size_t>(p), extent - 2);
  t.i1 = t.i0 + 1;
  t.f = p - static_cast<double>(t.i0);
  return t;
}

void require_flow_tensor(const Shape& s, const char* op) {
  if (s.size() != 3 || s[0] != 2) {
    throw DimensionError(std::string(op) + ": flow must be [2 x H x W], got " + shape_str(s));
  }
}

void require_image(const Shape& s, const char* op) {
  if (s.size() != 3) throw DimensionError(std::string(op) + ": image must be [C x H x W], got " + shape_str(s));
}

void sample_forward(const Tensor& src, const Tensor& flow, Tensor& out) {
  const std::size_t c = src.shape[0], hs = src.shape[1], ws = src.shape[2];
  const std::size_t h = flow.shape[1], w = flow.shape[2];
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const AxisTap tx = axis_tap(flow.data[y * w + x], ws);
      const AxisTap ty = axis_tap(flow.data[plane + y * w + x], hs);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* s = src.data.data() + ch * hs * ws;
        double top = s[ty.i0 * ws + tx.i0];
        double bot = top;
        if (ws > 1) top = (1.0 - tx.f) * top + tx.f * s[ty.i0 * ws + tx.i1];
        if (hs > 1) {
          bot = s[ty.i1 * ws + tx.i0];
          if (ws > 1) bot = (1.0 - tx.f) * bot + tx.f * s[ty.i1 * ws + tx.i1];
          top = (1.0 - ty.f) * top + ty.f * bot;
        }
        out.data[ch * plane + y * w + x] = top;
      }
    }
  }
}

std::size_t clamp_index(long i, std::size_t n) {
  return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1));
}

void softmax9(const double* logits, std::size_t stride, double* w) {
  double mx = logits[0];
  for (std::size_t k = 1; k < kUpsampleTaps; ++k) mx = std::max(mx, logits[k * stride]);
  double z = 0.0;
  for (std::size_t k = 0; k < kUpsampleTaps; ++k) {
    w[k] = std::exp(logits[k * stride] - mx);
    z += w[k];
  }
  for (std::size_t k = 0; k < kUpsampleTaps; ++k) w[k] /= z;
}

void check_upsample_shapes(const Shape& coarse, const Shape& logits) {
  require_flow_tensor(coarse, "convex_upsample");
  if (logits.size() != 3 || logits[0] != kUpsampleChannels || logits[1] != coarse[1] || logits[2] != coarse[2]) {
    throw DimensionError("convex_upsample: weight grid " + shape_str(logits) + " does not match coarse flow " +
                         shape_str(coarse));
  }
}

// Fills `out` [2 x 8h x 8w] and the per-pixel softmax weights (may be null).
void upsample_forward(const Tensor& coarse, const Tensor& logits, Tensor& out, double* weights_out) {
  const std::size_t h = coarse.shape[1], w = coarse.shape[2];
  const std::size_t f = kUpsampleFactor;
  const std::size_t fh = h * f, fw = w * f;
  const std::size_t cell = h * w;
  double wk[kUpsampleTaps];
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t dy = 0; dy < f; ++dy) {
        for (std::size_t dx = 0; dx < f; ++dx) {
          const std::size_t sub = dy * f + dx;
          softmax9(logits.data.data() + sub * cell + i * w + j, f * f * cell, wk);
          const std::size_t oy = i * f + dy, ox = j * f + dx;
          for (std::size_t ch = 0; ch < 2; ++ch) {
            double acc = 0.0;
            for (std::size_t k = 0; k < kUpsampleTaps; ++k) {
              const std::size_t ny = clamp_index(static_cast<long>(i) + static_cast<long>(k / 3) - 1, h);
              const std::size_t nx = clamp_index(static_cast<long>(j) + static_cast<long>(k % 3) - 1, w);
              acc += wk[k] * coarse.data[ch * cell + ny * w + nx];
            }
            out.data[ch * fh * fw + oy * fw + ox] = acc;
          }
          if (weights_out) std::copy_n(wk, kUpsampleTaps, weights_out + (oy * fw + ox) * kUpsampleTaps);
        }
      }
    }
  }
}

}  // namespace

WarpFlow::WarpFlow(std::size_t height, std::size_t width) : coords_({2, height, width}) {}

WarpFlow::WarpFlow(Tensor coords) : coords_(std::move(coords)) {
  require_flow_tensor(coords_.shape, "WarpFlow");
  coords_.requires_grad = false;
  coords_.grad.clear();
}

WarpFlow WarpFlow::identity(std::size_t height, std::size_t width) {
  WarpFlow f(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const double v = to_normalized(static_cast<double>(y), height);
    for (std::size_t x = 0; x < width; ++x) f.set(y, x, to_normalized(static_cast<double>(x), width), v);
  }
  return f;
}

double WarpFlow::out_of_range_fraction() const {
  const std::size_t plane = height() * width();
  std::size_t n = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (std::abs(coords_.data[i]) > 1.0 || std::abs(coords_.data[plane + i]) > 1.0) ++n;
  }
  return static_cast<double>(n) / static_cast<double>(plane);
}

Tensor bilinear_sample(const Tensor& source, const WarpFlow& flow) {
  require_image(source.shape, "bilinear_sample");
  Tensor out({source.shape[0], flow.height(), flow.width()});
  sample_forward(source, flow.coords(), out);
  return out;
}

grad::Var bilinear_sample(grad::Var source, grad::Var flow) {
  require_image(source.shape(), "bilinear_sample");
  require_flow_tensor(flow.shape(), "bilinear_sample");
  const std::size_t c = source.dim(0), hs = source.dim(1), ws = source.dim(2);
  const std::size_t h = flow.dim(1), w = flow.dim(2);
  Tensor out({c, h, w});
  sample_forward(source.value(), flow.value(), out);
  return source.tape->record(
      "bilinear_sample", std::move(out), {source, flow}, [source, flow, c, hs, ws, h, w](grad::Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& src = t.value(source);
        const Tensor& fl = t.value(flow);
        const std::size_t plane = h * w;
        const bool want_src = t.needs_grad(source);
        const bool want_flow = t.needs_grad(flow);
        std::vector<double>* dsrc = want_src ? &t.grad(source) : nullptr;
        std::vector<double>* dflow = want_flow ? &t.grad(flow) : nullptr;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const std::size_t p = y * w + x;
            const AxisTap tx = axis_tap(fl.data[p], ws);
            const AxisTap ty = axis_tap(fl.data[plane + p], hs);
            const double wx1 = ws > 1 ? tx.f : 0.0, wx0 = 1.0 - wx1;
            const double wy1 = hs > 1 ? ty.f : 0.0, wy0 = 1.0 - wy1;
            double du = 0.0, dv = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double go = g[ch * plane + p];
              const std::size_t base = ch * hs * ws;
              const double a = src.data[base + ty.i0 * ws + tx.i0];
              const double b = ws > 1 ? src.data[base + ty.i0 * ws + tx.i1] : a;
              const double cc = hs > 1 ? src.data[base + ty.i1 * ws + tx.i0] : a;
              const double d = (hs > 1 && ws > 1) ? src.data[base + ty.i1 * ws + tx.i1] : (hs > 1 ? cc : b);
              if (dsrc) {
                (*dsrc)[base + ty.i0 * ws + tx.i0] += go * wy0 * wx0;
                if (ws > 1) (*dsrc)[base + ty.i0 * ws + tx.i1] += go * wy0 * wx1;
                if (hs > 1) (*dsrc)[base + ty.i1 * ws + tx.i0] += go * wy1 * wx0;
                if (hs > 1 && ws > 1) (*dsrc)[base + ty.i1 * ws + tx.i1] += go * wy1 * wx1;
              }
              du += go * (wy0 * (b - a) + wy1 * (d - cc));
              dv += go * (wx0 * (cc - a) + wx1 * (d - b));
            }
            if (dflow) {
              (*dflow)[p] += du * tx.d;
              (*dflow)[plane + p] += dv * ty.d;
            }
          }
        }
      });
}

std::array<double, kUpsampleTaps> UpsampleWeights::weights(std::size_t i, std::size_t j, std::size_t dy,
                                                           std::size_t dx) const {
  std::array<double, kUpsampleTaps> w{};
  const std::size_t cell = height() * width();
  softmax9(logits.data.data() + (dy * kUpsampleFactor + dx) * cell + i * width() + j,
           kUpsampleFactor * kUpsampleFactor * cell, w.data());
  return w;
}

WarpFlow convex_upsample(const WarpFlow& coarse, const UpsampleWeights& weights) {
  check_upsample_shapes(coarse.coords().shape, weights.logits.shape);
  Tensor out({2, coarse.height() * kUpsampleFactor, coarse.width() * kUpsampleFactor});
  upsample_forward(coarse.coords(), weights.logits, out, nullptr);
  return WarpFlow(std::move(out));
}

grad::Var convex_upsample(grad::Var coarse, grad::Var logits) {
  check_upsample_shapes(coarse.shape(), logits.shape());
  const std::size_t h = coarse.dim(1), w = coarse.dim(2);
  const std::size_t fh = h * kUpsampleFactor, fw = w * kUpsampleFactor;
  Tensor out({2, fh, fw});
  auto mix = std::make_shared<std::vector<double>>(fh * fw * kUpsampleTaps);
  upsample_forward(coarse.value(), logits.value(), out, mix->data());
  grad::Tape& tape = *coarse.tape;
  if (!tape.grad_enabled()) mix.reset();
  return tape.record(
      "convex_upsample", std::move(out), {coarse, logits}, [coarse, logits, h, w, fh, fw, mix](grad::Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const Tensor& cv = t.value(coarse);
        const std::size_t cell = h * w;
        const std::size_t f = kUpsampleFactor;
        std::vector<double>* dc = t.needs_grad(coarse) ? &t.grad(coarse) : nullptr;
        std::vector<double>* dl = t.needs_grad(logits) ? &t.grad(logits) : nullptr;
        for (std::size_t oy = 0; oy < fh; ++oy) {
          for (std::size_t ox = 0; ox < fw; ++ox) {
            const std::size_t i = oy / f, j = ox / f, sub = (oy % f) * f + (ox % f);
            const double* wk = mix->data() + (oy * fw + ox) * kUpsampleTaps;
            const double g0 = g[oy * fw + ox], g1 = g[fh * fw + oy * fw + ox];
            double gc[kUpsampleTaps];
            double dot = 0.0;
            for (std::size_t k = 0; k < kUpsampleTaps; ++k) {
              const std::size_t ny = clamp_index(static_cast<long>(i) + static_cast<long>(k / 3) - 1, h);
              const std::size_t nx = clamp_index(static_cast<long>(j) + static_cast<long>(k % 3) - 1, w);
              const std::size_t n = ny * w + nx;
              if (dc) {
                (*dc)[n] += wk[k] * g0;
                (*dc)[cell + n] += wk[k] * g1;
              }
              gc[k] = g0 * cv.data[n] + g1 * cv.data[cell + n];
              dot += wk[k] * gc[k];
            }
            if (dl) {
              for (std::size_t k = 0; k < kUpsampleTaps; ++k) {
                (*dl)[(k * f * f + sub) * cell + i * w + j] += wk[k] * (gc[k] - dot);
              }
            }
          }
        }
      });
}

WarpFlow resize_flow(const WarpFlow& flow, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw DimensionError("resize_flow: target extents must be positive");
  return WarpFlow(bilinear_sample(flow.coords(), WarpFlow::identity(height, width)));
}

Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width) {
  require_image(image.shape, "resize_image");
  if (height == 0 || width == 0) throw DimensionError("resize_image: target extents must be positive");
  if (image.shape[1] == height && image.shape[2] == width) return image;
  return bilinear_sample(image, WarpFlow::identity(height, width));
}

std::pair<WarpFlow, WarpFlow> split_full_flow(const WarpFlow& full) {
  const std::size_t h = full.height(), w = full.width();
  if (w % 2 != 0) throw DimensionError("split_full_flow: width " + std::to_string(w) + " is odd");
  const std::size_t half = w / 2;
  WarpFlow left(h, half), right(h, half);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < half; ++x) {
      left.set(y, x, full.u(y, x), full.v(y, x));
      right.set(y, x, full.u(y, x + half), full.v(y, x + half));
    }
  }
  return {std::move(left), std::move(right)};
}

WarpFlow stitch_pages(const WarpFlow& left, const WarpFlow& right) {
  if (left.height() != right.height() || left.width() != right.width()) {
    throw DimensionError("stitch_pages: page flows differ in extents");
  }
  const std::size_t h = left.height(), half = left.width();
  WarpFlow full(h, 2 * half);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < half; ++x) {
      full.set(y, x, left.u(y, x), left.v(y, x));
      full.set(y, x + half, right.u(y, x), right.v(y, x));
    }
  }
  return full;
}

WarpFlow compose(const WarpFlow& outer, const WarpFlow& inner) {
  return WarpFlow(bilinear_sample(outer.coords(), inner));
}

namespace {

// Bilinear interpolant of a flow at a continuous pixel position, linearly
// extrapolated beyond the grid, with its Jacobian w.r.t. (px, py).
struct MapEval {
  double u, v, du_dx, du_dy, dv_dx, dv_dy;
};

MapEval eval_map(const WarpFlow& f, double px, double py) {
  const std::size_t h = f.height(), w = f.width();
  const auto cell = [](double p, std::size_t n) {
    if (n == 1) return std::pair<std::size_t, double>{0, 0.0};
    const long i = std::clamp(static_cast<long>(std::floor(p)), 0L, static_cast<long>(n) - 2);
    return std::pair<std::size_t, double>{static_cast<std::size_t>(i), p - static_cast<double>(i)};
  };
  const auto [x0, fx] = cell(px, w);
  const auto [y0, fy] = cell(py, h);
  const std::size_t x1 = w > 1 ? x0 + 1 : x0, y1 = h > 1 ? y0 + 1 : y0;
  MapEval e{};
  const Tensor& c = f.coords();
  for (std::size_t ch = 0; ch < 2; ++ch) {
    const double a = c.at(ch, y0, x0), b = c.at(ch, y0, x1), cc = c.at(ch, y1, x0), d = c.at(ch, y1, x1);
    const double val = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * cc + fx * d);
    const double ddx = (1 - fy) * (b - a) + fy * (d - cc);
    const double ddy = (1 - fx) * (cc - a) + fx * (d - b);
    if (ch == 0) {
      e.u = val;
      e.du_dx = ddx;
      e.du_dy = ddy;
    } else {
      e.v = val;
      e.dv_dx = ddx;
      e.dv_dy = ddy;
    }
  }
  return e;
}

}  // namespace

InversionResult invert_flow(const WarpFlow& forward, const InversionOptions& options) {
  const std::size_t h = forward.height(), w = forward.width();
  const std::size_t oh = options.height ? options.height : h;
  const std::size_t ow = options.width ? options.width : w;
  // Residuals are measured in pixels of an oh x ow target.
  const double su = 0.5 * static_cast<double>(ow > 1 ? ow - 1 : 1);
  const double sv = 0.5 * static_cast<double>(oh > 1 ? oh - 1 : 1);

  InversionResult result;
  result.inverse = WarpFlow(oh, ow);
  result.inside.assign(oh * ow, 0);
  std::size_t considered = 0, failed = 0, inside_count = 0;
  double residual_sum = 0.0;

  for (std::size_t qy = 0; qy < oh; ++qy) {
    for (std::size_t qx = 0; qx < ow; ++qx) {
      const double tu = to_normalized(static_cast<double>(qx), ow);
      const double tv = to_normalized(static_cast<double>(qy), oh);
      // Start from the same normalized position in the domain.
      double px = to_pixel(tu, w), py = to_pixel(tv, h);
      MapEval e = eval_map(forward, px, py);
      double res = std::hypot((e.u - tu) * su, (e.v - tv) * sv);
      for (int it = 0; it < options.iterations && res > options.tol_px; ++it) {
        const double ru = e.u - tu, rv = e.v - tv;
        const double det = e.du_dx * e.dv_dy - e.du_dy * e.dv_dx;
        if (!std::isfinite(det) || std::abs(det) < 1e-300) break;
        const double sx = (e.dv_dy * ru - e.du_dy * rv) / det;
        const double sy = (-e.dv_dx * ru + e.du_dx * rv) / det;
        double step = 1.0;
        bool improved = false;
        for (int ls = 0; ls < 20; ++ls) {
          const MapEval trial = eval_map(forward, px - step * sx, py - step * sy);
          const double tr = std::hypot((trial.u - tu) * su, (trial.v - tv) * sv);
          if (tr < res) {
            px -= step * sx;
            py -= step * sy;
            e = trial;
            res = tr;
            improved = true;
            break;
          }
          step *= 0.5;
        }
        if (!improved) break;
      }
      const double margin = 1e-6;
      const bool in_domain = px >= -margin && px <= static_cast<double>(w - 1) + margin && py >= -margin &&
                             py <= static_cast<double>(h - 1) + margin;
      const bool near_domain = px >= -1.0 && px <= static_cast<double>(w) && py >= -1.0 && py <= static_cast<double>(h);
      result.inverse.set(qy, qx, to_normalized(px, w), to_normalized(py, h));
      if (near_domain) {
        ++considered;
        if (!(res <= options.tol_px)) ++failed;
      }
      if (in_domain) {
        result.inside[qy * ow + qx] = 1;
        ++inside_count;
        residual_sum += res;
        result.max_residual_px = std::max(result.max_residual_px, res);
      }
    }
  }
  result.mean_residual_px = inside_count ? residual_sum / static_cast<double>(inside_count) : 0.0;
  result.nonconverged_fraction = considered ? static_cast<double>(failed) / static_cast<double>(considered) : 0.0;
  if (result.nonconverged_fraction > options.max_failure_fraction) {
    throw InversionError("invert_flow: " + std::to_string(result.nonconverged_fraction * 100.0) +
                         "% of pixels did not converge");
  }
  return result;
}

std::vector<std::uint8_t> encode_flow(const WarpFlow& flow) {
  std::vector<std::uint8_t> out{'B', 'K', 'F', 'L'};
  le::put_u32(out, kFlowFileVersion);
  le::put_u32(out, static_cast<std::uint32_t>(flow.height()));
  le::put_u32(out, static_cast<std::uint32_t>(flow.width()));
  out.reserve(out.size() + flow.height() * flow.width() * 8);
  for (std::size_t y = 0; y < flow.height(); ++y) {
    for (std::size_t x = 0; x < flow.width(); ++x) {
      le::put_f32(out, static_cast<float>(flow.u(y, x)));
      le::put_f32(out, static_cast<float>(flow.v(y, x)));
    }
  }
  return out;
}

WarpFlow decode_flow(const std::vector<std::uint8_t>& bytes) {
  le::Reader r(bytes);
  if (r.str(4) != "BKFL") throw IoError("not a BKFL flow file");
  const std::uint32_t version = r.u32();
  if (version != kFlowFileVersion) throw IoError("unsupported flow file version " + std::to_string(version));
  const std::uint32_t h = r.u32(), w = r.u32();
  if (h == 0 || w == 0) throw IoError("flow file has zero extent");
  WarpFlow flow(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = r.f32();
      const double v = r.f32();
      flow.set(y, x, u, v);
    }
  }
  if (!r.done()) throw IoError("trailing bytes in flow file");
  return flow;
}

void save_flow(const std::filesystem::path& path, const WarpFlow& flow) { write_file_bytes(path, encode_flow(flow)); }

WarpFlow load_flow(const std::filesystem::path& path) { return decode_flow(read_file_bytes(path)); }

}  // namespace booknet::geometry
