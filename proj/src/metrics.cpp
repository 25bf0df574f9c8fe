#include "booknet/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "booknet/geometry.hpp"
#include "booknet/image.hpp"

namespace booknet::metrics {
namespace {

constexpr std::size_t kWindow = 11;
constexpr double kSigma = 1.5;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double s = 0.0;
  for (std::size_t i = 0; i < kWindow; ++i) {
    const double x = static_cast<double>(i) - 5.0;
    g[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

// Separable Gaussian filter keeping only fully covered positions.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w) {
  static const auto g = gaussian_window();
  const std::size_t ow = w - kWindow + 1, oh = h - kWindow + 1;
  std::vector<double> tmp(h * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * img[y * w + x + k];
      tmp[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow, 0.0);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < kWindow; ++k) acc += g[k] * tmp[(y + k) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

struct SsimTerms {
  double cs = 0.0, ssim = 0.0;
};

SsimTerms ssim_level(const std::vector<double>& a, const std::vector<double>& b, std::size_t h, std::size_t w) {
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto mu_a = filter_valid(a, h, w), mu_b = filter_valid(b, h, w);
  const auto s_aa = filter_valid(aa, h, w), s_bb = filter_valid(bb, h, w), s_ab = filter_valid(ab, h, w);
  double cs_sum = 0.0, ssim_sum = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double va = s_aa[i] - mu_a[i] * mu_a[i];
    const double vb = s_bb[i] - mu_b[i] * mu_b[i];
    const double cov = s_ab[i] - mu_a[i] * mu_b[i];
    const double cs = (2.0 * cov + c2) / (va + vb + c2);
    const double l = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
    cs_sum += cs;
    ssim_sum += l * cs;
  }
  const double n = static_cast<double>(mu_a.size());
  return {cs_sum / n, ssim_sum / n};
}

std::vector<double> halve(const std::vector<double>& img, std::size_t h, std::size_t w) {
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      out[y * ow + x] = 0.25 * (img[2 * y * w + 2 * x] + img[2 * y * w + 2 * x + 1] + img[(2 * y + 1) * w + 2 * x] +
                                img[(2 * y + 1) * w + 2 * x + 1]);
    }
  return out;
}

void require_gray(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected [H x W] grayscale, got " + shape_str(t.shape));
}

Tensor as_gray(const Tensor& t) {
  if (t.rank() == 2) return t;
  return image::to_gray(t);
}

// Pairwise summation, so the result does not depend on accumulation order
// details beyond the (fixed) input order.
double pairwise_sum(const double* v, std::size_t n) {
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  return pairwise_sum(v, n / 2) + pairwise_sum(v + n / 2, n - n / 2);
}

double mean_of(const std::vector<double>& v) { return v.empty() ? 0.0 : pairwise_sum(v.data(), v.size()) / v.size(); }

}  // namespace

double mssim(const Tensor& a, const Tensor& b, const std::array<double, 5>& weights) {
  require_gray(a, "mssim");
  require_gray(b, "mssim");
  if (a.shape != b.shape) throw DimensionError("mssim: extent mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  std::size_t h = a.shape[0], w = a.shape[1];
  if (std::min(h, w) < kMssimMinSide) {
    throw MetricError("mssim: images must be at least " + std::to_string(kMssimMinSide) + " px on the short side");
  }
  std::vector<double> x = a.data, y = b.data;
  double result = 1.0;
  for (std::size_t level = 0; level < weights.size(); ++level) {
    const SsimTerms t = ssim_level(x, y, h, w);
    if (level + 1 < weights.size()) {
      result *= std::pow(std::max(t.cs, 0.0), weights[level]);
      x = halve(x, h, w);
      y = halve(y, h, w);
      h /= 2;
      w /= 2;
    } else {
      result *= std::pow(std::max(t.ssim, 0.0), weights[level]);
    }
  }
  return std::clamp(result, 0.0, 1.0);
}

std::size_t Correspondence::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

struct Gray {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
  double at(long y, long x) const { return v[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]; }
};

// NCC between the block of `a` at (y0, x0) and the block of `b` offset by
// (oy, ox); `a` statistics are precomputed.
double block_ncc(const Gray& a, const Gray& b, long y0, long x0, long n, long oy, long ox, double mean_a, double norm_a) {
  double sb = 0.0, sbb = 0.0, sab = 0.0;
  for (long y = 0; y < n; ++y) {
    const double* ra = &a.v[static_cast<std::size_t>(y0 + y) * a.w + static_cast<std::size_t>(x0)];
    const double* rb = &b.v[static_cast<std::size_t>(y0 + y + oy) * b.w + static_cast<std::size_t>(x0 + ox)];
    for (long x = 0; x < n; ++x) {
      sb += rb[x];
      sbb += rb[x] * rb[x];
      sab += (ra[x] - mean_a) * rb[x];
    }
  }
  const double cnt = static_cast<double>(n * n);
  const double var_b = sbb - sb * sb / cnt;
  if (var_b <= 1e-9 * cnt) return -1.0;
  return sab / (norm_a * std::sqrt(var_b));
}

double parabola_vertex(double l, double c, double r) {
  const double den = l - 2.0 * c + r;
  if (!(den < 0.0)) return 0.0;
  return std::clamp(0.5 * (l - r) / den, -0.5, 0.5);
}

struct BlockField {
  std::size_t rows = 0, cols = 0;
  long step = 0, size = 0;
  std::vector<double> dx, dy;
  std::vector<std::uint8_t> valid;
};

// Dense field by bilinear interpolation between block centers.
void densify(const BlockField& f, std::size_t h, std::size_t w, std::vector<double>& dx, std::vector<double>& dy) {
  dx.assign(h * w, 0.0);
  dy.assign(h * w, 0.0);
  if (f.rows == 0 || f.cols == 0) return;
  const double half = 0.5 * static_cast<double>(f.size - 1);
  for (std::size_t y = 0; y < h; ++y) {
    const double gy = std::clamp((static_cast<double>(y) - half) / static_cast<double>(f.step), 0.0,
                                 static_cast<double>(f.rows - 1));
    const std::size_t y0 = std::min(static_cast<std::size_t>(gy), f.rows > 1 ? f.rows - 2 : 0);
    const std::size_t y1 = std::min(y0 + 1, f.rows - 1);
    const double ty = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < w; ++x) {
      const double gx = std::clamp((static_cast<double>(x) - half) / static_cast<double>(f.step), 0.0,
                                   static_cast<double>(f.cols - 1));
      const std::size_t x0 = std::min(static_cast<std::size_t>(gx), f.cols > 1 ? f.cols - 2 : 0);
      const std::size_t x1 = std::min(x0 + 1, f.cols - 1);
      const double tx = gx - static_cast<double>(x0);
      const auto lerp2 = [&](const std::vector<double>& v) {
        return (1 - ty) * ((1 - tx) * v[y0 * f.cols + x0] + tx * v[y0 * f.cols + x1]) +
               ty * ((1 - tx) * v[y1 * f.cols + x0] + tx * v[y1 * f.cols + x1]);
      };
      dx[y * w + x] = lerp2(f.dx);
      dy[y * w + x] = lerp2(f.dy);
    }
  }
}

BlockField match_level(const Gray& a, const Gray& b, const std::vector<double>& prior_dx,
                       const std::vector<double>& prior_dy, const RegistrationOptions& o) {
  BlockField f;
  const long n = static_cast<long>(std::min<std::size_t>(o.block, std::min(a.h, a.w)));
  f.size = n;
  f.step = std::max<long>(1, n / 2);
  const long h = static_cast<long>(a.h), w = static_cast<long>(a.w);
  f.rows = static_cast<std::size_t>((h - n) / f.step + 1);
  f.cols = static_cast<std::size_t>((w - n) / f.step + 1);
  f.dx.assign(f.rows * f.cols, 0.0);
  f.dy.assign(f.rows * f.cols, 0.0);
  f.valid.assign(f.rows * f.cols, 0);
  const double cnt = static_cast<double>(n * n);
  for (std::size_t r = 0; r < f.rows; ++r) {
    for (std::size_t c = 0; c < f.cols; ++c) {
      const long y0 = static_cast<long>(r) * f.step, x0 = static_cast<long>(c) * f.step;
      const std::size_t center = static_cast<std::size_t>(y0 + n / 2) * a.w + static_cast<std::size_t>(x0 + n / 2);
      const double pdx = prior_dx[center], pdy = prior_dy[center];
      const std::size_t k = r * f.cols + c;
      f.dx[k] = pdx;
      f.dy[k] = pdy;
      double sa = 0.0, saa = 0.0;
      for (long y = 0; y < n; ++y)
        for (long x = 0; x < n; ++x) {
          const double v = a.at(y0 + y, x0 + x);
          sa += v;
          saa += v * v;
        }
      const double var_a = saa - sa * sa / cnt;
      if (var_a <= 1e-9 * cnt) continue;
      const double mean_a = sa / cnt, norm_a = std::sqrt(var_a);
      const long cx = std::lround(pdx), cy = std::lround(pdy);
      const long span = 2 * o.search + 1;
      std::vector<double> score(static_cast<std::size_t>(span * span), -2.0);
      double best = -2.0;
      long bx = 0, by = 0;
      for (long oy = cy - o.search; oy <= cy + o.search; ++oy) {
        if (y0 + oy < 0 || y0 + oy + n > h) continue;
        for (long ox = cx - o.search; ox <= cx + o.search; ++ox) {
          if (x0 + ox < 0 || x0 + ox + n > w) continue;
          const double s = block_ncc(a, b, y0, x0, n, oy, ox, mean_a, norm_a);
          score[static_cast<std::size_t>((oy - cy + o.search) * span + (ox - cx + o.search))] = s;
          if (s > best) {
            best = s;
            bx = ox;
            by = oy;
          }
        }
      }
      if (best < o.min_ncc) continue;
      double sx = 0.0, sy = 0.0;
      // An exact match is taken at face value; otherwise refine to subpixel.
      if (best < 1.0 - 1e-12) {
        const auto at = [&](long oy, long ox) -> double {
          if (std::abs(oy - cy) > o.search || std::abs(ox - cx) > o.search) return -2.0;
          return score[static_cast<std::size_t>((oy - cy + o.search) * span + (ox - cx + o.search))];
        };
        const double l = at(by, bx - 1), rr = at(by, bx + 1), u = at(by - 1, bx), d = at(by + 1, bx);
        if (l > -2.0 && rr > -2.0) sx = parabola_vertex(l, best, rr);
        if (u > -2.0 && d > -2.0) sy = parabola_vertex(u, best, d);
      }
      f.dx[k] = static_cast<double>(bx) + sx;
      f.dy[k] = static_cast<double>(by) + sy;
      f.valid[k] = 1;
    }
  }
  return f;
}

double median(std::vector<double> v) {
  const auto mid = v.begin() + static_cast<long>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}

// Drops matches that disagree with their neighbourhood by more than a pixel,
// then fills unmatched blocks from matched neighbours so they do not seed the
// next level with stale priors.
void clean_field(BlockField& f) {
  const long rows = static_cast<long>(f.rows), cols = static_cast<long>(f.cols);
  const auto neighbours = [&](long r, long c, const std::vector<std::uint8_t>& ok, std::vector<double>& xs,
                              std::vector<double>& ys) {
    xs.clear();
    ys.clear();
    for (long dr = -1; dr <= 1; ++dr)
      for (long dc = -1; dc <= 1; ++dc) {
        const long rr = r + dr, cc = c + dc;
        if ((dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= rows || cc >= cols) continue;
        const auto k = static_cast<std::size_t>(rr * cols + cc);
        if (!ok[k]) continue;
        xs.push_back(f.dx[k]);
        ys.push_back(f.dy[k]);
      }
  };
  std::vector<double> xs, ys;
  std::vector<std::uint8_t> keep = f.valid;
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      const auto k = static_cast<std::size_t>(r * cols + c);
      if (!f.valid[k]) continue;
      neighbours(r, c, f.valid, xs, ys);
      if (xs.size() < 3) continue;
      if (std::hypot(f.dx[k] - median(xs), f.dy[k] - median(ys)) > 1.0) keep[k] = 0;
    }
  f.valid = keep;
  std::vector<std::uint8_t> known = f.valid;
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<std::uint8_t> next = known;
    for (long r = 0; r < rows; ++r)
      for (long c = 0; c < cols; ++c) {
        const auto k = static_cast<std::size_t>(r * cols + c);
        if (known[k]) continue;
        neighbours(r, c, known, xs, ys);
        if (xs.empty()) continue;
        f.dx[k] = median(xs);
        f.dy[k] = median(ys);
        next[k] = 1;
        changed = true;
      }
    known = std::move(next);
  }
}

Gray halve_gray(const Gray& g) {
  Gray out;
  out.h = g.h / 2;
  out.w = g.w / 2;
  out.v = halve(g.v, g.h, g.w);
  return out;
}

}  // namespace

Correspondence compute_correspondence(const Tensor& rectified, const Tensor& reference, const RegistrationOptions& o) {
  const Tensor ra = as_gray(rectified), rb = as_gray(reference);
  if (ra.shape != rb.shape) {
    throw DimensionError("compute_correspondence: extent mismatch " + shape_str(ra.shape) + " vs " + shape_str(rb.shape));
  }
  std::vector<Gray> pa{{ra.shape[0], ra.shape[1], ra.data}}, pb{{rb.shape[0], rb.shape[1], rb.data}};
  for (std::size_t l = 1; l < o.levels; ++l) {
    // Coarser levels need room for a few blocks, or every match hits the border.
    if (std::min(pa.back().h, pa.back().w) / 2 < 3 * o.block) break;
    pa.push_back(halve_gray(pa.back()));
    pb.push_back(halve_gray(pb.back()));
  }
  std::vector<double> dx(pa.back().h * pa.back().w, 0.0), dy = dx;
  BlockField field;
  for (std::size_t li = pa.size(); li-- > 0;) {
    const Gray& a = pa[li];
    if (dx.size() != a.h * a.w) {
      // Upsample the coarser estimate to this level.
      const Gray& prev = pa[li + 1];
      std::vector<double> ux(a.h * a.w), uy(a.h * a.w);
      for (std::size_t y = 0; y < a.h; ++y)
        for (std::size_t x = 0; x < a.w; ++x) {
          const std::size_t py = std::min(y / 2, prev.h - 1), px = std::min(x / 2, prev.w - 1);
          ux[y * a.w + x] = 2.0 * dx[py * prev.w + px];
          uy[y * a.w + x] = 2.0 * dy[py * prev.w + px];
        }
      dx = std::move(ux);
      dy = std::move(uy);
    }
    field = match_level(a, pb[li], dx, dy, o);
    clean_field(field);
    densify(field, a.h, a.w, dx, dy);
  }
  Correspondence c;
  c.height = ra.shape[0];
  c.width = ra.shape[1];
  c.dx = std::move(dx);
  c.dy = std::move(dy);
  c.valid.assign(c.height * c.width, 0);
  // A pixel is valid when the finest-level block nearest to it matched.
  const double half = 0.5 * static_cast<double>(field.size - 1);
  for (std::size_t y = 0; y < c.height; ++y)
    for (std::size_t x = 0; x < c.width; ++x) {
      const auto r = static_cast<std::size_t>(std::clamp<long>(
          std::lround((static_cast<double>(y) - half) / field.step), 0, static_cast<long>(field.rows) - 1));
      const auto q = static_cast<std::size_t>(std::clamp<long>(
          std::lround((static_cast<double>(x) - half) / field.step), 0, static_cast<long>(field.cols) - 1));
      c.valid[y * c.width + x] = field.valid[r * field.cols + q];
    }
  c.degenerate = c.valid_count() == 0;
  return c;
}

double ld(const Correspondence& c) {
  std::vector<double> norms;
  for (std::size_t i = 0; i < c.valid.size(); ++i) {
    if (c.valid[i]) norms.push_back(std::hypot(c.dx[i], c.dy[i]));
  }
  if (norms.empty()) throw MetricError("ld: empty validity mask");
  return mean_of(norms);
}

Tensor sobel_magnitude(const Tensor& gray) {
  require_gray(gray, "sobel_magnitude");
  const long h = static_cast<long>(gray.shape[0]), w = static_cast<long>(gray.shape[1]);
  const auto px = [&](long y, long x) {
    return gray.data[static_cast<std::size_t>(std::clamp(y, 0L, h - 1) * w + std::clamp(x, 0L, w - 1))];
  };
  Tensor out({gray.shape[0], gray.shape[1]});
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out.data[static_cast<std::size_t>(y * w + x)] = std::hypot(gx, gy);
    }
  return out;
}

AlignedDistortion ad(const Correspondence& c, const Tensor& reference) {
  const Tensor ref = as_gray(reference);
  if (ref.shape != Shape{c.height, c.width}) throw DimensionError("ad: reference does not match correspondence extents");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < c.valid.size(); ++i)
    if (c.valid[i]) idx.push_back(i);
  if (idx.empty()) throw MetricError("ad: empty validity mask");

  // d(x) = (sR - I)(x - m) + t, unknowns (a, b, tx, ty) with sR - I = [[a, -b], [b, a]].
  double mx = 0.0, my = 0.0;
  for (std::size_t i : idx) {
    mx += static_cast<double>(i % c.width);
    my += static_cast<double>(i / c.width);
  }
  mx /= static_cast<double>(idx.size());
  my /= static_cast<double>(idx.size());
  Eigen::Matrix4d ata = Eigen::Matrix4d::Zero();
  Eigen::Vector4d atb = Eigen::Vector4d::Zero();
  for (std::size_t i : idx) {
    const double x = static_cast<double>(i % c.width) - mx, y = static_cast<double>(i / c.width) - my;
    const Eigen::Vector4d rx(x, -y, 1.0, 0.0), ry(y, x, 0.0, 1.0);
    ata += rx * rx.transpose() + ry * ry.transpose();
    atb += rx * c.dx[i] + ry * c.dy[i];
  }
  AlignedDistortion result;
  Eigen::Vector4d sol = Eigen::Vector4d::Zero();
  const double spread = ata(0, 0);
  if (spread > 1e-9 * static_cast<double>(idx.size())) {
    sol = ata.ldlt().solve(atb);
  } else {
    result.translation_only = true;
    sol(2) = atb(2) / static_cast<double>(idx.size());
    sol(3) = atb(3) / static_cast<double>(idx.size());
  }
  const Tensor grad_mag = sobel_magnitude(ref);
  std::vector<double> wr, ws;
  for (std::size_t i : idx) {
    const double x = static_cast<double>(i % c.width) - mx, y = static_cast<double>(i / c.width) - my;
    const double fx = sol(0) * x - sol(1) * y + sol(2);
    const double fy = sol(1) * x + sol(0) * y + sol(3);
    const double wgt = grad_mag.data[i];
    wr.push_back(wgt * std::hypot(c.dx[i] - fx, c.dy[i] - fy));
    ws.push_back(wgt);
  }
  const double wsum = pairwise_sum(ws.data(), ws.size());
  if (wsum <= 0.0) throw MetricError("ad: reference has no gradient on valid pixels");
  result.value = pairwise_sum(wr.data(), wr.size()) / wsum;
  return result;
}

std::vector<char32_t> decode_utf8(const std::string& s) {
  std::vector<char32_t> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = 0xFFFD;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    bool ok = i + len <= s.size();
    for (std::size_t k = 1; ok && k < len; ++k) {
      const auto b = static_cast<unsigned char>(s[i + k]);
      if ((b >> 6) != 0x2) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::size_t edit_distance(const std::string& hyp, const std::string& ref) {
  const auto a = decode_utf8(hyp), b = decode_utf8(ref);
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double cer(const std::string& hyp, const std::string& ref) {
  const std::size_t n = decode_utf8(ref).size();
  if (n == 0) throw MetricError("cer: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(n);
}

ImageReport evaluate_pair(const Tensor& rectified, const Tensor& reference) {
  Tensor ref = as_gray(reference);
  Tensor rect = as_gray(rectified);
  if (rect.shape != ref.shape) {
    Tensor r3({1, rect.shape[0], rect.shape[1]}, rect.data);
    Tensor resized = geometry::resize_image(r3, ref.shape[0], ref.shape[1]);
    rect = Tensor({ref.shape[0], ref.shape[1]}, resized.data);
  }
  ImageReport r;
  r.mssim = mssim(rect, ref);
  const Correspondence c = compute_correspondence(rect, ref);
  if (c.degenerate) throw MetricError("registration found no textured blocks");
  r.ld = ld(c);
  const AlignedDistortion a = ad(c, ref);
  r.ad = a.value;
  r.ad_translation_only = a.translation_only;
  return r;
}

MetricReport aggregate(std::vector<ImageReport> images, std::vector<std::string> skipped) {
  MetricReport m;
  m.images = std::move(images);
  m.skipped = std::move(skipped);
  std::vector<double> s, l, a, e, c;
  for (const auto& r : m.images) {
    s.push_back(r.mssim);
    l.push_back(r.ld);
    a.push_back(r.ad);
    if (r.ed) e.push_back(static_cast<double>(*r.ed));
    if (r.cer) c.push_back(*r.cer);
  }
  m.mssim = mean_of(s);
  m.ld = mean_of(l);
  m.ad = mean_of(a);
  if (!e.empty()) m.ed = mean_of(e);
  if (!c.empty()) m.cer = mean_of(c);
  return m;
}

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

MetricReport evaluate_set(const std::filesystem::path& pairs_manifest) {
  nlohmann::json j;
  try {
    std::ifstream in(pairs_manifest);
    if (!in) throw IoError("cannot open " + pairs_manifest.string());
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("cannot parse " + pairs_manifest.string() + ": " + e.what());
  }
  if (!j.is_array()) throw IoError("pairs manifest must be a JSON array");
  const auto base = pairs_manifest.parent_path();
  const auto resolve = [&](const std::string& p) {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  std::vector<ImageReport> images;
  std::vector<std::string> skipped;
  for (const auto& e : j) {
    const std::string id = e.at("id").get<std::string>();
    try {
      const Tensor rect = image::read_png(resolve(e.at("rectified_path").get<std::string>()));
      const Tensor ref = image::read_png(resolve(e.at("reference_path").get<std::string>()));
      ImageReport r = evaluate_pair(rect, ref);
      r.id = id;
      if (e.contains("transcript_ref") && e.contains("transcript_hyp")) {
        const std::string tr = read_text(resolve(e.at("transcript_ref").get<std::string>()));
        const std::string th = read_text(resolve(e.at("transcript_hyp").get<std::string>()));
        r.ed = edit_distance(th, tr);
        if (!tr.empty()) r.cer = cer(th, tr);
      }
      images.push_back(std::move(r));
    } catch (const IoError& err) {
      skipped.push_back(id + ": " + err.what());
    } catch (const MetricError& err) {
      skipped.push_back(id + ": " + err.what());
    }
  }
  return aggregate(std::move(images), std::move(skipped));
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  const auto row = [](const auto& x) {
    nlohmann::json o{{"mssim", x.mssim}, {"ld", x.ld}, {"ad", x.ad}};
    if (x.cer) o["cer"] = *x.cer;
    if (x.ed) o["ed"] = *x.ed;
    return o;
  };
  j["aggregate"] = row(r);
  j["aggregate"]["count"] = r.images.size();
  j["images"] = nlohmann::json::array();
  for (const auto& im : r.images) {
    nlohmann::json o = row(im);
    o["id"] = im.id;
    if (im.ad_translation_only) o["ad_translation_only"] = true;
    j["images"].push_back(o);
  }
  j["skipped"] = r.skipped;
  return j;
}

std::string format_table(const MetricReport& r) {
  std::ostringstream out;
  const auto opt = [](const auto& v, int prec) {
    std::ostringstream s;
    if (v) {
      s << std::fixed << std::setprecision(prec) << static_cast<double>(*v);
    } else {
      s << "-";
    }
    return s.str();
  };
  out << std::left << std::setw(16) << "id" << std::right << std::setw(10) << "MSSIM" << std::setw(10) << "LD"
      << std::setw(10) << "AD" << std::setw(10) << "CER" << std::setw(10) << "ED" << "\n";
  const auto line = [&](const std::string& id, double s, double l, double a, const std::string& c,
                        const std::string& e) {
    out << std::left << std::setw(16) << id << std::right << std::fixed << std::setprecision(4) << std::setw(10) << s
        << std::setprecision(2) << std::setw(10) << l << std::setprecision(4) << std::setw(10) << a << std::setw(10)
        << c << std::setw(10) << e << "\n";
  };
  for (const auto& im : r.images) line(im.id, im.mssim, im.ld, im.ad, opt(im.cer, 4), opt(im.ed, 0));
  line("mean", r.mssim, r.ld, r.ad, opt(r.cer, 4), opt(r.ed, 2));
  for (const auto& s : r.skipped) out << "skipped " << s << "\n";
  return out.str();
}

}  // namespace booknet::metrics
