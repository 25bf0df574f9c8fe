#include "booknet/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include "booknet/image.hpp"
#include "booknet/metrics.hpp"

namespace booknet::synthgen {

using json = nlohmann::json;

void ContentSpec::validate() const {
  if (margin_x < 0.0 || margin_y < 0.0 || 2.0 * margin_x >= 1.0 || 2.0 * margin_y >= 1.0) {
    throw ConfigError("content: margins exceed the page");
  }
  if (!(line_spacing > 0.0) || !(line_fill > 0.0) || line_fill > 1.0) {
    throw ConfigError("content: line spacing and fill must be positive, fill at most 1");
  }
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // Always draws, so collapsing one range does not shift the others.
  const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return lo == hi ? lo : lo + (hi - lo) * t;
}

// Page-relative box (fractions of page width/height) to spread coordinates.
Rect page_rect(int page, double x0, double y0, double x1, double y1, std::array<double, 3> color) {
  const double off = page == 0 ? -1.0 : 0.0;
  return {off + x0, -1.0 + 2.0 * y0, off + x1, -1.0 + 2.0 * y1, color};
}

}  // namespace

Layout make_layout(std::uint64_t seed, const ContentSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(splitmix(seed ^ 0xC0FFEEULL));
  Layout layout;
  const double base = uniform(rng, 0.88, 0.98);
  layout.paper = {base, base - uniform(rng, 0.0, 0.03), base - uniform(rng, 0.02, 0.07)};
  const double ink_level = uniform(rng, 0.05, 0.22);
  const std::array<double, 3> ink{ink_level, ink_level, ink_level + uniform(rng, 0.0, 0.05)};
  if (spec.line_count == 0) return layout;

  const double text_w = 1.0 - 2.0 * spec.margin_x;
  const double bar_h = spec.line_fill * spec.line_spacing;
  const int capacity = static_cast<int>((1.0 - 2.0 * spec.margin_y - bar_h) / spec.line_spacing) + 1;
  const int lines = spec.line_count < 0 ? capacity : std::min(spec.line_count, capacity);
  for (int page = 0; page < 2; ++page) {
    int figure_start = -1, figure_lines = 0;
    if (lines >= 8 && uniform(rng, 0.0, 1.0) < spec.figure_probability) {
      figure_lines = static_cast<int>(uniform(rng, 4.0, std::min(10.0, lines * 0.5)));
      figure_start = static_cast<int>(uniform(rng, 0.0, static_cast<double>(lines - figure_lines)));
    }
    for (int li = 0; li < lines; ++li) {
      const double y0 = spec.margin_y + li * spec.line_spacing;
      if (li == figure_start) {
        const double y1 = y0 + (figure_lines - 1) * spec.line_spacing + bar_h;
        const double inset = uniform(rng, 0.0, 0.2) * text_w;
        const double fx0 = spec.margin_x + inset, fx1 = 1.0 - spec.margin_x - inset;
        const double gray = uniform(rng, 0.55, 0.85);
        const double frame = 0.006;
        layout.rects.push_back(page_rect(page, fx0, y0, fx1, y1, ink));
        layout.rects.push_back(page_rect(page, fx0 + frame, y0 + frame, fx1 - frame, y1 - frame,
                                         {gray, gray * 0.97, gray * 0.94}));
        // A few interior strokes so figures carry structure.
        const int strokes = static_cast<int>(uniform(rng, 2.0, 6.0));
        for (int s = 0; s < strokes; ++s) {
          const double sy = uniform(rng, y0 + 0.1 * (y1 - y0), y1 - 0.1 * (y1 - y0));
          const double sx0 = uniform(rng, fx0 + 0.05, (fx0 + fx1) / 2);
          const double sx1 = uniform(rng, (fx0 + fx1) / 2, fx1 - 0.05);
          layout.rects.push_back(page_rect(page, sx0, sy, sx1, sy + 0.008, ink));
        }
      }
      if (figure_start >= 0 && li >= figure_start && li < figure_start + figure_lines) continue;
      const bool paragraph_end = uniform(rng, 0.0, 1.0) < 0.15;
      const double line_end = spec.margin_x + text_w * (paragraph_end ? uniform(rng, 0.3, 0.8) : 1.0);
      double x = spec.margin_x;
      while (x < line_end) {
        const double len = uniform(rng, 0.03, 0.12);
        const double x1 = std::min(x + len, line_end);
        if (x1 - x > 0.01) layout.rects.push_back(page_rect(page, x, y0, x1, y0 + bar_h, ink));
        x = x1 + uniform(rng, 0.012, 0.02);
      }
    }
    if (spec.page_numbers) {
      const double y0 = 1.0 - spec.margin_y * 0.6;
      layout.rects.push_back(page_rect(page, 0.48, y0, 0.52, y0 + bar_h, ink));
    }
  }
  return layout;
}

std::array<double, 3> shade(const Layout& layout, double u, double v) {
  std::array<double, 3> c = layout.paper;
  for (const Rect& r : layout.rects) {
    if (u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1) c = r.color;
  }
  return c;
}

namespace {

// Row buckets over v so shading only scans nearby rects.
class LayoutIndex {
 public:
  explicit LayoutIndex(const Layout& layout) : layout_(layout), buckets_(kBuckets) {
    for (std::size_t i = 0; i < layout.rects.size(); ++i) {
      const Rect& r = layout.rects[i];
      const std::size_t b0 = bucket(r.y0), b1 = bucket(r.y1);
      for (std::size_t b = b0; b <= b1; ++b) buckets_[b].push_back(i);
    }
  }

  std::array<double, 3> operator()(double u, double v) const {
    std::array<double, 3> c = layout_.paper;
    for (std::size_t i : buckets_[bucket(v)]) {
      const Rect& r = layout_.rects[i];
      if (u >= r.x0 && u < r.x1 && v >= r.y0 && v < r.y1) c = r.color;
    }
    return c;
  }

 private:
  static constexpr std::size_t kBuckets = 256;
  static std::size_t bucket(double v) {
    const double t = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
    return std::min(static_cast<std::size_t>(t * kBuckets), kBuckets - 1);
  }
  const Layout& layout_;
  std::vector<std::vector<std::size_t>> buckets_;
};

constexpr int kSuper = 3;

double sub_offset(int i) { return (static_cast<double>(i) - (kSuper - 1) / 2.0) / kSuper; }

}  // namespace

Tensor render_layout(const Layout& layout, std::size_t height, std::size_t width) {
  const LayoutIndex index(layout);
  Tensor out({3, height, width});
  const double n = kSuper * kSuper;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const double u = geometry::to_normalized(static_cast<double>(x) + sub_offset(sx), width);
          const double v = geometry::to_normalized(static_cast<double>(y) + sub_offset(sy), height);
          const auto c = index(u, v);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) out.at(k, y, x) = acc[k] / n;
    }
  return out;
}

Tensor gen_content(std::uint64_t seed, const ContentSpec& spec, std::size_t height, std::size_t width) {
  return render_layout(make_layout(seed, spec), height, width);
}

DeformationRanges DeformationRanges::none() {
  DeformationRanges r;
  r.curl_amplitude = r.valley_depth = r.arc = r.shrink = r.rotation_deg = r.translation = r.perspective =
      r.shade_depth = r.gain_ramp = Range{0.0, 0.0};
  r.curl_exponent = Range{2.0, 2.0};
  r.valley_width = Range{0.05, 0.05};
  return r;
}

void DeformationRanges::validate() const {
  const auto check = [](const Range& r, const char* name, double lo, double hi) {
    if (!(r.lo <= r.hi) || r.lo < lo || r.hi > hi) {
      throw ConfigError(std::string("deformation range ") + name + " must satisfy " + std::to_string(lo) +
                        " <= lo <= hi <= " + std::to_string(hi));
    }
  };
  check(curl_amplitude, "curl_amplitude", 0.0, 0.9);
  check(curl_exponent, "curl_exponent", 1.0, 10.0);
  check(valley_depth, "valley_depth", 0.0, 0.95);
  check(valley_width, "valley_width", 1e-3, 1.0);
  check(arc, "arc", -0.5, 0.5);
  check(shrink, "shrink", 0.0, 0.5);
  check(rotation_deg, "rotation_deg", -30.0, 30.0);
  check(translation, "translation", -0.5, 0.5);
  check(perspective, "perspective", -0.3, 0.3);
  check(shade_depth, "shade_depth", 0.0, 0.9);
  check(gain_ramp, "gain_ramp", -0.5, 0.5);
}

namespace {

json range_json(const Range& r) { return json::array({r.lo, r.hi}); }
Range range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

json to_json(const DeformationRanges& r) {
  return json{{"curl_amplitude", range_json(r.curl_amplitude)}, {"curl_exponent", range_json(r.curl_exponent)},
              {"valley_depth", range_json(r.valley_depth)},     {"valley_width", range_json(r.valley_width)},
              {"arc", range_json(r.arc)},                       {"shrink", range_json(r.shrink)},
              {"rotation_deg", range_json(r.rotation_deg)},     {"translation", range_json(r.translation)},
              {"perspective", range_json(r.perspective)},       {"shade_depth", range_json(r.shade_depth)},
              {"gain_ramp", range_json(r.gain_ramp)}};
}

DeformationRanges ranges_from_json(const json& j) {
  DeformationRanges r;
  try {
    r.curl_amplitude = range_from(j.at("curl_amplitude"));
    r.curl_exponent = range_from(j.at("curl_exponent"));
    r.valley_depth = range_from(j.at("valley_depth"));
    r.valley_width = range_from(j.at("valley_width"));
    r.arc = range_from(j.at("arc"));
    r.shrink = range_from(j.at("shrink"));
    r.rotation_deg = range_from(j.at("rotation_deg"));
    r.translation = range_from(j.at("translation"));
    r.perspective = range_from(j.at("perspective"));
    r.shade_depth = range_from(j.at("shade_depth"));
    r.gain_ramp = range_from(j.at("gain_ramp"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("deformation ranges: ") + e.what());
  }
  r.validate();
  return r;
}

json to_json(const DeformationParams& p) {
  return json{{"curl_a_left", p.curl_a_left},   {"curl_k_left", p.curl_k_left},   {"curl_a_right", p.curl_a_right},
              {"curl_k_right", p.curl_k_right}, {"valley_depth", p.valley_depth}, {"valley_width", p.valley_width},
              {"arc", p.arc},                   {"homography", p.homography},     {"background", p.background},
              {"shade_depth", p.shade_depth},   {"gain_ramp", p.gain_ramp},       {"seed", p.seed}};
}

DeformationParams params_from_json(const json& j) {
  DeformationParams p;
  try {
    j.at("curl_a_left").get_to(p.curl_a_left);
    j.at("curl_k_left").get_to(p.curl_k_left);
    j.at("curl_a_right").get_to(p.curl_a_right);
    j.at("curl_k_right").get_to(p.curl_k_right);
    j.at("valley_depth").get_to(p.valley_depth);
    j.at("valley_width").get_to(p.valley_width);
    j.at("arc").get_to(p.arc);
    j.at("homography").get_to(p.homography);
    j.at("background").get_to(p.background);
    j.at("shade_depth").get_to(p.shade_depth);
    j.at("gain_ramp").get_to(p.gain_ramp);
    j.at("seed").get_to(p.seed);
  } catch (const json::exception& e) {
    throw IoError(std::string("deformation params: ") + e.what());
  }
  return p;
}

json to_json(const ContentSpec& c) {
  return json{{"margin_x", c.margin_x},         {"margin_y", c.margin_y},
              {"line_spacing", c.line_spacing}, {"line_fill", c.line_fill},
              {"line_count", c.line_count},     {"figure_probability", c.figure_probability},
              {"page_numbers", c.page_numbers}};
}

ContentSpec content_from_json(const json& j) {
  ContentSpec c;
  try {
    j.at("margin_x").get_to(c.margin_x);
    j.at("margin_y").get_to(c.margin_y);
    j.at("line_spacing").get_to(c.line_spacing);
    j.at("line_fill").get_to(c.line_fill);
    j.at("line_count").get_to(c.line_count);
    j.at("figure_probability").get_to(c.figure_probability);
    j.at("page_numbers").get_to(c.page_numbers);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("content spec: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

// Monotonicity margins: the curl and valley derivatives stay >= 1 - bound.
constexpr double kMaxCurlSlope = 0.95;
constexpr double kMaxValleyDepth = 0.95;

bool admissible(const DeformationParams& p) {
  return p.curl_a_left * p.curl_k_left < kMaxCurlSlope && p.curl_a_right * p.curl_k_right < kMaxCurlSlope &&
         p.valley_depth < kMaxValleyDepth;
}

std::array<double, 9> build_homography(double shrink, double rot_deg, double tx, double ty, double p1, double p2) {
  const double s = 1.0 - shrink;
  const double th = rot_deg * std::numbers::pi / 180.0;
  const double c = s * std::cos(th), sn = s * std::sin(th);
  // [sR t; 0 1] * [I 0; p^T 1]
  return {c + tx * p1, -sn + tx * p2, tx, sn + ty * p1, c + ty * p2, ty, p1, p2, 1.0};
}

}  // namespace

DeformationParams sample_deformation(std::uint64_t seed, const DeformationRanges& r) {
  r.validate();
  std::mt19937_64 rng(splitmix(seed ^ 0xDEF0ULL));
  for (int attempt = 0; attempt < 100; ++attempt) {
    DeformationParams p;
    p.seed = seed;
    p.curl_a_left = uniform(rng, r.curl_amplitude.lo, r.curl_amplitude.hi);
    p.curl_k_left = uniform(rng, r.curl_exponent.lo, r.curl_exponent.hi);
    p.curl_a_right = uniform(rng, r.curl_amplitude.lo, r.curl_amplitude.hi);
    p.curl_k_right = uniform(rng, r.curl_exponent.lo, r.curl_exponent.hi);
    p.valley_depth = uniform(rng, r.valley_depth.lo, r.valley_depth.hi);
    p.valley_width = uniform(rng, r.valley_width.lo, r.valley_width.hi);
    p.arc = uniform(rng, r.arc.lo, r.arc.hi);
    const double shrink = uniform(rng, r.shrink.lo, r.shrink.hi);
    const double rot = uniform(rng, r.rotation_deg.lo, r.rotation_deg.hi);
    const double tx = uniform(rng, r.translation.lo, r.translation.hi);
    const double ty = uniform(rng, r.translation.lo, r.translation.hi);
    const double p1 = uniform(rng, r.perspective.lo, r.perspective.hi);
    const double p2 = uniform(rng, r.perspective.lo, r.perspective.hi);
    p.homography = build_homography(shrink, rot, tx, ty, p1, p2);
    const double bg = uniform(rng, 0.05, 0.45);
    p.background = {bg, bg * uniform(rng, 0.8, 1.1), bg * uniform(rng, 0.7, 1.1)};
    p.shade_depth = uniform(rng, r.shade_depth.lo, r.shade_depth.hi);
    p.gain_ramp = uniform(rng, r.gain_ramp.lo, r.gain_ramp.hi);
    if (admissible(p)) return p;
  }
  throw RangeError("sample_deformation: 100 consecutive parameter sets failed the bijectivity constraints");
}

namespace {

// Distance-from-spine profile: curl then valley compression. Increasing,
// with g(0) = 0.
double curl_profile(double s, double a, double k) {
  if (a == 0.0) return s;
  return s > 1.0 ? s - a : s - a * (1.0 - std::pow(1.0 - s, k));
}

double curl_slope(double s, double a, double k) {
  if (a == 0.0 || s > 1.0) return 1.0;
  return 1.0 - a * k * std::pow(1.0 - s, k - 1.0);
}

double spine_profile(const DeformationParams& p, double s, double a, double k, double* slope) {
  const double s1 = curl_profile(s, a, k);
  double d = curl_slope(s, a, k);
  double s2 = s1;
  if (p.valley_depth != 0.0) {
    const double t = std::tanh(s1 / p.valley_width);
    s2 = s1 - p.valley_depth * p.valley_width * t;
    d *= 1.0 - p.valley_depth * (1.0 - t * t);
  }
  if (slope) *slope = d;
  return s2;
}

double invert_spine_profile(const DeformationParams& p, double target, double a, double k) {
  if (a == 0.0 && p.valley_depth == 0.0) return target;
  // g(s) <= s and g(s) >= s - a - depth*width, so the root is bracketed.
  double lo = target, hi = target + a + p.valley_depth * p.valley_width;
  double s = target;
  for (int it = 0; it < 100; ++it) {
    double slope = 1.0;
    const double f = spine_profile(p, s, a, k, &slope) - target;
    if (f > 0.0) {
      hi = s;
    } else {
      lo = s;
    }
    if (std::abs(f) < 1e-15 || hi - lo < 1e-15) break;
    double next = s - f / slope;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    s = next;
  }
  return s;
}

std::array<double, 2> apply_h(const std::array<double, 9>& h, double u, double v) {
  const double w = h[6] * u + h[7] * v + h[8];
  return {(h[0] * u + h[1] * v + h[2]) / w, (h[3] * u + h[4] * v + h[5]) / w};
}

std::array<double, 9> invert_h(const std::array<double, 9>& h) {
  const double a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7], i = h[8];
  std::array<double, 9> inv{e * i - f * hh, c * hh - b * i, b * f - c * e, f * g - d * i, a * i - c * g,
                            c * d - a * f,  d * hh - e * g, b * g - a * hh, a * e - b * d};
  const double s = inv[8];
  for (double& x : inv) x /= s;
  return inv;
}

bool is_identity_h(const std::array<double, 9>& h) {
  return h == std::array<double, 9>{1, 0, 0, 0, 1, 0, 0, 0, 1};
}

double illumination(const DeformationParams& p, double u) {
  return (1.0 - p.shade_depth * std::exp(-std::abs(u) / 0.12)) * (1.0 + p.gain_ramp * u);
}

}  // namespace

std::array<double, 2> forward_map(const DeformationParams& p, double u, double v) {
  const bool right = u >= 0.0;
  const double a = right ? p.curl_a_right : p.curl_a_left;
  const double k = right ? p.curl_k_right : p.curl_k_left;
  const double s = spine_profile(p, std::abs(u), a, k, nullptr);
  const double u2 = right ? s : -s;
  const double v2 = p.arc == 0.0 ? v : v + p.arc * (1.0 - u2 * u2);
  if (is_identity_h(p.homography)) return {u2, v2};
  return apply_h(p.homography, u2, v2);
}

std::array<double, 2> inverse_map(const DeformationParams& p, double u, double v) {
  std::array<double, 2> q{u, v};
  if (!is_identity_h(p.homography)) q = apply_h(invert_h(p.homography), u, v);
  const double u2 = q[0];
  const double v1 = p.arc == 0.0 ? q[1] : q[1] - p.arc * (1.0 - u2 * u2);
  const bool right = u2 >= 0.0;
  const double a = right ? p.curl_a_right : p.curl_a_left;
  const double k = right ? p.curl_k_right : p.curl_k_left;
  const double s = invert_spine_profile(p, std::abs(u2), a, k);
  return {right ? s : -s, v1};
}

BookSample render_sample(const Layout& layout, const DeformationParams& p, std::size_t height, std::size_t width) {
  if (width % 2 != 0) throw DimensionError("render_sample: width must be even");
  const LayoutIndex index(layout);
  BookSample s;
  s.full = geometry::WarpFlow(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const auto m = forward_map(p, geometry::to_normalized(static_cast<double>(x), width),
                                 geometry::to_normalized(static_cast<double>(y), height));
      s.full.set(y, x, m[0], m[1]);
    }
  std::tie(s.left, s.right) = geometry::split_full_flow(s.full);
  s.flat = render_layout(layout, height, width);
  s.distorted = Tensor({3, height, width});
  s.mask = Tensor({1, height, width});
  const double n = kSuper * kSuper;
  // The page covers the flat image's pixel footprint, half a pixel past the
  // outermost centres.
  const double edge_u = 1.0 + 1.0 / static_cast<double>(width - 1);
  const double edge_v = 1.0 + 1.0 / static_cast<double>(height - 1);
  const auto page_color = [&](const std::array<double, 2>& r, std::array<double, 3>& c) {
    if (std::abs(r[0]) > edge_u || std::abs(r[1]) > edge_v) return false;
    c = index(r[0], r[1]);
    const double g = illumination(p, r[0]);
    for (double& ch : c) ch *= g;
    return true;
  };
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      std::array<double, 3> acc{};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const auto r = inverse_map(p, geometry::to_normalized(static_cast<double>(x) + sub_offset(sx), width),
                                     geometry::to_normalized(static_cast<double>(y) + sub_offset(sy), height));
          std::array<double, 3> c = p.background;
          page_color(r, c);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (int k = 0; k < 3; ++k) s.distorted.at(k, y, x) = acc[k] / n;
      const auto r = inverse_map(p, geometry::to_normalized(static_cast<double>(x), width),
                                 geometry::to_normalized(static_cast<double>(y), height));
      s.mask.at(0, y, x) = (std::abs(r[0]) <= 1.0 && std::abs(r[1]) <= 1.0) ? 1.0 : 0.0;
    }
  return s;
}

namespace {

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) {
    h = (g - b) / d;
  } else if (mx == g) {
    h = 2.0 + (b - r) / d;
  } else {
    h = 4.0 + (r - g) / d;
  }
  h /= 6.0;
  h -= std::floor(h);
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  h = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

}  // namespace

Tensor hsv_adjust(const Tensor& rgb, double hue, double saturation, double value) {
  if (rgb.rank() != 3 || rgb.shape[0] != 3) throw DimensionError("hsv_adjust: expected [3 x H x W]");
  Tensor out = rgb;
  const std::size_t plane = rgb.shape[1] * rgb.shape[2];
  for (std::size_t i = 0; i < plane; ++i) {
    double h, s, v;
    rgb_to_hsv(rgb.data[i], rgb.data[plane + i], rgb.data[2 * plane + i], h, s, v);
    h += hue;
    s = std::clamp(s * saturation, 0.0, 1.0);
    v = std::clamp(v * value, 0.0, 1.0);
    double r, g, b;
    hsv_to_rgb(h, s, v, r, g, b);
    out.data[i] = std::clamp(r, 0.0, 1.0);
    out.data[plane + i] = std::clamp(g, 0.0, 1.0);
    out.data[2 * plane + i] = std::clamp(b, 0.0, 1.0);
  }
  return out;
}

Tensor hsv_jitter(const Tensor& rgb, std::uint64_t seed, const HsvRanges& r) {
  std::mt19937_64 rng(splitmix(seed ^ 0x45A7ULL));
  const double hue = uniform(rng, -r.hue, r.hue);
  const double sat = uniform(rng, r.saturation.lo, r.saturation.hi);
  const double val = uniform(rng, r.value.lo, r.value.hi);
  return hsv_adjust(rgb, hue, sat, val);
}

Tensor rectified_mask(const BookSample& s) {
  const Tensor sampled = geometry::bilinear_sample(s.mask, s.full);
  Tensor m({s.full.height(), s.full.width()});
  for (std::size_t y = 0; y < s.full.height(); ++y)
    for (std::size_t x = 0; x < s.full.width(); ++x) {
      const bool in = std::abs(s.full.u(y, x)) <= 1.0 && std::abs(s.full.v(y, x)) <= 1.0;
      m.at(y, x) = (in && sampled.at(0, y, x) >= 0.5) ? 1.0 : 0.0;
    }
  return m;
}

double masked_mssim(const Tensor& a, const Tensor& b, const Tensor& mask) {
  Tensor ga = a.rank() == 2 ? a : image::to_gray(a);
  const Tensor gb = b.rank() == 2 ? b : image::to_gray(b);
  if (ga.shape != gb.shape || mask.numel() != ga.numel()) throw DimensionError("masked_mssim: extent mismatch");
  for (std::size_t i = 0; i < ga.numel(); ++i) {
    if (mask.data[i] < 0.5) ga.data[i] = gb.data[i];
  }
  return metrics::mssim(ga, gb);
}

double round_trip_mssim(const BookSample& s) {
  const Tensor rect = geometry::bilinear_sample(image::quantize8(s.distorted), s.full);
  return masked_mssim(rect, image::quantize8(s.flat), rectified_mask(s));
}

json to_json(const GenerateOptions& o) {
  return json{{"count", o.count},
              {"seed", o.seed},
              {"height", o.height},
              {"width", o.width},
              {"ranges", to_json(o.ranges)},
              {"content", to_json(o.content)},
              {"min_round_trip_mssim", o.min_round_trip_mssim},
              {"max_rejections", o.max_rejections}};
}

std::uint64_t sample_seed(std::uint64_t base, std::size_t index, std::size_t attempt) {
  return splitmix(splitmix(base) ^ (static_cast<std::uint64_t>(index) << 20) ^ static_cast<std::uint64_t>(attempt));
}

BookSample regenerate(const ManifestEntry& e, const ContentSpec& content, std::size_t height, std::size_t width) {
  return render_sample(make_layout(e.seed, content), e.params, height, width);
}

namespace {

// The gate needs MSSIM's minimum extent; small samples are checked on a
// re-render at an integer multiple of their size.
double gate_score(const Layout& layout, const DeformationParams& p, const BookSample& s) {
  const std::size_t h = s.full.height(), w = s.full.width();
  const std::size_t side = std::min(h, w);
  if (side >= metrics::kMssimMinSide) return round_trip_mssim(s);
  const std::size_t f = (metrics::kMssimMinSide + side - 1) / side;
  return round_trip_mssim(render_sample(layout, p, h * f, w * f));
}

std::string sample_id(std::size_t i) {
  std::ostringstream s;
  s << "s" << std::setw(5) << std::setfill('0') << i;
  return s.str();
}

}  // namespace

GenerateReport generate_dataset(const GenerateOptions& o, const std::filesystem::path& out_dir) {
  o.ranges.validate();
  o.content.validate();
  std::filesystem::create_directories(out_dir);
  GenerateReport report;
  std::vector<std::filesystem::path> written;
  json manifest{{"version", 1}, {"count", o.count}, {"generator", to_json(o)}, {"ranges", to_json(o.ranges)}};
  manifest["entries"] = json::array();
  try {
    for (std::size_t i = 0; i < o.count; ++i) {
      ManifestEntry e;
      e.id = sample_id(i);
      BookSample s;
      for (std::size_t attempt = 0;; ++attempt) {
        if (attempt > o.max_rejections) {
          throw RangeError("sample " + e.id + ": no admissible draw within the rejection budget");
        }
        e.seed = sample_seed(o.seed, i, attempt);
        const Layout layout = make_layout(e.seed, o.content);
        e.params = sample_deformation(e.seed, o.ranges);
        s = render_sample(layout, e.params, o.height, o.width);
        bool ok = true;
        try {
          geometry::InversionOptions inv;
          inv.tol_px = 0.1;
          geometry::invert_flow(s.full, inv);
        } catch (const geometry::InversionError&) {
          ok = false;
        }
        if (ok) {
          e.round_trip_mssim = gate_score(layout, e.params, s);
          ok = e.round_trip_mssim > o.min_round_trip_mssim;
        }
        if (ok) break;
        ++e.rejected;
      }
      report.rejected += e.rejected;
      const auto write = [&](const std::string& suffix, auto&& fn) {
        const auto path = out_dir / (e.id + suffix);
        if (!std::filesystem::exists(path)) written.push_back(path);
        fn(path);
        return path.filename().string();
      };
      json files;
      files["distorted"] = write("_distorted.png", [&](const auto& p) { image::write_png(p, s.distorted); });
      files["flat"] = write("_flat.png", [&](const auto& p) { image::write_png(p, s.flat); });
      files["mask"] = write("_mask.png", [&](const auto& p) { image::write_png(p, s.mask); });
      files["full"] = write("_full.bkfl", [&](const auto& p) { geometry::save_flow(p, s.full); });
      files["left"] = write("_left.bkfl", [&](const auto& p) { geometry::save_flow(p, s.left); });
      files["right"] = write("_right.bkfl", [&](const auto& p) { geometry::save_flow(p, s.right); });
      manifest["entries"].push_back(json{{"id", e.id},
                                         {"seed", e.seed},
                                         {"files", files},
                                         {"params", to_json(e.params)},
                                         {"rejected", e.rejected},
                                         {"round_trip_mssim", e.round_trip_mssim}});
      report.entries.push_back(std::move(e));
    }
    manifest["rejected"] = report.rejected;
    const auto mpath = out_dir / "manifest.json";
    written.push_back(mpath);
    std::ofstream out(mpath);
    if (!out) throw IoError("cannot write " + mpath.string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + mpath.string());
  } catch (...) {
    std::error_code ec;
    for (const auto& p : written) std::filesystem::remove(p, ec);
    throw;
  }
  return report;
}

std::vector<LoadedSample> load_dataset(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open " + mpath.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("cannot parse " + mpath.string() + ": " + e.what());
  }
  std::vector<LoadedSample> out;
  for (const auto& e : m.at("entries")) {
    LoadedSample s;
    s.id = e.at("id").get<std::string>();
    s.seed = e.at("seed").get<std::uint64_t>();
    const auto& f = e.at("files");
    s.distorted = image::read_png(dir / f.at("distorted").get<std::string>());
    s.flat = image::read_png(dir / f.at("flat").get<std::string>());
    const Tensor mask = image::read_png(dir / f.at("mask").get<std::string>());
    s.mask = Tensor({1, mask.shape[1], mask.shape[2]},
                    std::vector<double>(mask.data.begin(), mask.data.begin() + mask.shape[1] * mask.shape[2]));
    s.full = geometry::load_flow(dir / f.at("full").get<std::string>());
    s.left = geometry::load_flow(dir / f.at("left").get<std::string>());
    s.right = geometry::load_flow(dir / f.at("right").get<std::string>());
    s.params = params_from_json(e.at("params"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace booknet::synthgen
