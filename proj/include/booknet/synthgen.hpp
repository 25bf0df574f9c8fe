#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "booknet/geometry.hpp"
#include "booknet/tensor.hpp"

namespace booknet::synthgen {

/// Procedural page layout. Lengths are fractions of a page's width (x) or
/// height (y); the spread holds two pages side by side.
struct ContentSpec {
  double margin_x = 0.10, margin_y = 0.08;
  double line_spacing = 0.045;
  /// Text bar height as a fraction of the line spacing.
  double line_fill = 0.35;
  /// Lines per page; negative fills the text block.
  int line_count = -1;
  double figure_probability = 0.35;
  bool page_numbers = true;

  void validate() const;
};

struct Rect {
  double x0, y0, x1, y1;  // normalized spread coordinates
  std::array<double, 3> color;
};

struct Layout {
  std::array<double, 3> paper;
  std::vector<Rect> rects;  // painted in order over the paper
};

Layout make_layout(std::uint64_t seed, const ContentSpec& spec);
/// Color of the layout at a normalized spread coordinate.
std::array<double, 3> shade(const Layout& layout, double u, double v);
/// Flat spread [3 x H x W], 3x3 supersampled.
Tensor render_layout(const Layout& layout, std::size_t height, std::size_t width);
Tensor gen_content(std::uint64_t seed, const ContentSpec& spec, std::size_t height, std::size_t width);

struct Range {
  double lo = 0.0, hi = 0.0;
};

struct DeformationRanges {
  Range curl_amplitude{0.0, 0.22};
  Range curl_exponent{1.5, 3.5};
  Range valley_depth{0.0, 0.45};
  Range valley_width{0.03, 0.10};
  Range arc{-0.06, 0.06};
  /// 1 - uniform scale of the camera homography.
  Range shrink{0.05, 0.18};
  Range rotation_deg{-3.0, 3.0};
  Range translation{-0.04, 0.04};
  Range perspective{-0.05, 0.05};
  Range shade_depth{0.0, 0.12};
  Range gain_ramp{-0.05, 0.05};

  /// All ranges collapsed to zero: the identity deformation.
  static DeformationRanges none();
  void validate() const;
};

nlohmann::json to_json(const DeformationRanges& r);
DeformationRanges ranges_from_json(const nlohmann::json& j);

struct DeformationParams {
  double curl_a_left = 0.0, curl_k_left = 1.0;
  double curl_a_right = 0.0, curl_k_right = 1.0;
  double valley_depth = 0.0, valley_width = 0.05;
  double arc = 0.0;
  /// Row-major 3x3 with h[8] = 1.
  std::array<double, 9> homography{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::array<double, 3> background{0.2, 0.2, 0.2};
  double shade_depth = 0.0, gain_ramp = 0.0;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const DeformationParams& p);

class RangeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Uniform draws; parameter sets violating monotonicity are redrawn
/// (RangeError after 100 consecutive rejections).
DeformationParams sample_deformation(std::uint64_t seed, const DeformationRanges& ranges);

/// The authored rectified -> distorted map at a normalized coordinate.
std::array<double, 2> forward_map(const DeformationParams& p, double u, double v);
/// Its inverse, distorted -> rectified.
std::array<double, 2> inverse_map(const DeformationParams& p, double u, double v);

struct BookSample {
  Tensor distorted;  // [3 x H x W]
  Tensor flat;       // [3 x H x W]
  geometry::WarpFlow full, left, right;
  Tensor mask;  // [1 x H x W], page pixels of the distorted image
};

BookSample render_sample(const Layout& layout, const DeformationParams& p, std::size_t height, std::size_t width);

struct HsvRanges {
  double hue = 0.0;  // +- turns
  Range saturation{1.0, 1.0};
  Range value{1.0, 1.0};
};

/// Shifts hue by `hue` turns and scales saturation/value, clamping to [0, 1].
Tensor hsv_adjust(const Tensor& rgb, double hue, double saturation, double value);
Tensor hsv_jitter(const Tensor& rgb, std::uint64_t seed, const HsvRanges& ranges);

/// Validity of the rectified domain: pixels whose flow lands inside the
/// distorted frame on page pixels.
Tensor rectified_mask(const BookSample& s);
/// MSSIM of `a` against `b` where pixels outside the mask are taken from b.
double masked_mssim(const Tensor& a, const Tensor& b, const Tensor& mask);
/// Round trip: flat content vs. the distorted image warped by its own gt.
double round_trip_mssim(const BookSample& s);

struct GenerateOptions {
  std::size_t count = 0;
  std::uint64_t seed = 0;
  std::size_t height = 288, width = 288;
  DeformationRanges ranges;
  ContentSpec content;
  double min_round_trip_mssim = 0.90;
  /// Redraws allowed per sample before giving up.
  std::size_t max_rejections = 100;
};

nlohmann::json to_json(const GenerateOptions& o);

struct ManifestEntry {
  std::string id;
  std::uint64_t seed = 0;
  DeformationParams params;
  std::size_t rejected = 0;
  double round_trip_mssim = 0.0;
};

struct GenerateReport {
  std::vector<ManifestEntry> entries;
  std::size_t rejected = 0;
};

/// Per-sample seed for sample `index`, attempt `attempt`.
std::uint64_t sample_seed(std::uint64_t base, std::size_t index, std::size_t attempt);
/// Re-renders entry `e` (e.g. at another resolution).
BookSample regenerate(const ManifestEntry& e, const ContentSpec& content, std::size_t height, std::size_t width);

GenerateReport generate_dataset(const GenerateOptions& options, const std::filesystem::path& out_dir);

struct LoadedSample {
  std::string id;
  std::uint64_t seed = 0;
  Tensor distorted, flat, mask;
  geometry::WarpFlow full, left, right;
  DeformationParams params;
};

/// Reads every manifest entry back from disk.
std::vector<LoadedSample> load_dataset(const std::filesystem::path& dir);
DeformationParams params_from_json(const nlohmann::json& j);
ContentSpec content_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ContentSpec& c);

}  // namespace booknet::synthgen
