#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "booknet/tape.hpp"
#include "booknet/tensor.hpp"

namespace booknet::geometry {

inline constexpr std::size_t kUpsampleFactor = 8;
inline constexpr std::size_t kUpsampleTaps = 9;
inline constexpr std::size_t kUpsampleChannels = kUpsampleFactor * kUpsampleFactor * kUpsampleTaps;

/// Normalized coordinate in [-1, 1] to a pixel coordinate; -1 and +1 are the
/// centers of the first and last pixel.
inline double to_pixel(double n, std::size_t extent) {
  return (n + 1.0) * 0.5 * static_cast<double>(extent - 1);
}
inline double to_normalized(double p, std::size_t extent) {
  return extent > 1 ? -1.0 + 2.0 * p / static_cast<double>(extent - 1) : 0.0;
}

/// Dense backward-sampling field: for every target pixel, the normalized
/// (u, v) coordinate to read from the source image. Stored channel-planar as
/// a [2 x H x W] tensor (u plane, then v plane).
class WarpFlow {
 public:
  WarpFlow() = default;
  WarpFlow(std::size_t height, std::size_t width);
  explicit WarpFlow(Tensor coords);

  static WarpFlow identity(std::size_t height, std::size_t width);

  std::size_t height() const { return coords_.shape[1]; }
  std::size_t width() const { return coords_.shape[2]; }
  double u(std::size_t y, std::size_t x) const { return coords_.at(0, y, x); }
  double v(std::size_t y, std::size_t x) const { return coords_.at(1, y, x); }
  void set(std::size_t y, std::size_t x, double u, double v) {
    coords_.at(0, y, x) = u;
    coords_.at(1, y, x) = v;
  }

  const Tensor& coords() const { return coords_; }
  Tensor& coords() { return coords_; }

  /// Share of pixels with |u| > 1 or |v| > 1. Such pixels are kept as-is and
  /// border-clamped only when sampling.
  double out_of_range_fraction() const;
  bool all_finite() const { return coords_.all_finite(); }

  bool operator==(const WarpFlow& other) const { return coords_.shape == other.coords_.shape && coords_.data == other.coords_.data; }

 private:
  Tensor coords_;
};

/// Bilinear interpolation of `source` [C x Hs x Ws] at every flow coordinate,
/// border-clamped. Returns [C x H x W].
Tensor bilinear_sample(const Tensor& source, const WarpFlow& flow);
/// Differentiable variant; `flow` is a [2 x H x W] coordinate tensor.
grad::Var bilinear_sample(grad::Var source, grad::Var flow);

/// Per-cell softmaxed mixture weights for convex upsampling.
/// Logit channel layout: tap * 64 + dy * 8 + dx, taps in row-major 3x3 order.
struct UpsampleWeights {
  Tensor logits;  // [576 x h x w]

  std::size_t height() const { return logits.shape[1]; }
  std::size_t width() const { return logits.shape[2]; }
  std::array<double, kUpsampleTaps> weights(std::size_t i, std::size_t j, std::size_t dy, std::size_t dx) const;
};

/// Each fine pixel is a convex combination of the 3x3 coarse neighborhood of
/// its cell (border neighbors replicated). Output is 8h x 8w.
WarpFlow convex_upsample(const WarpFlow& coarse, const UpsampleWeights& weights);
grad::Var convex_upsample(grad::Var coarse, grad::Var logits);

WarpFlow resize_flow(const WarpFlow& flow, std::size_t height, std::size_t width);
/// Bilinear (align-corners) resampling of a [C x H x W] image.
Tensor resize_image(const Tensor& image, std::size_t height, std::size_t width);

/// Column halves of a full-spread flow; width must be even.
std::pair<WarpFlow, WarpFlow> split_full_flow(const WarpFlow& full);
WarpFlow stitch_pages(const WarpFlow& left, const WarpFlow& right);

/// (outer o inner)(x) = outer(inner(x)), evaluated by bilinear sampling.
WarpFlow compose(const WarpFlow& outer, const WarpFlow& inner);

class InversionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct InversionOptions {
  int iterations = 40;
  /// Convergence tolerance in target pixels.
  double tol_px = 1e-3;
  /// Extents of the inverse grid; 0 means same as the forward map.
  std::size_t height = 0, width = 0;
  /// Allowed share of in-domain pixels that fail to converge.
  double max_failure_fraction = 0.005;
};

struct InversionResult {
  WarpFlow inverse;
  /// 1 where the preimage lies inside the forward map's domain.
  std::vector<std::uint8_t> inside;
  double max_residual_px = 0.0;
  double mean_residual_px = 0.0;
  double nonconverged_fraction = 0.0;
};

/// Inverts a map given on a grid: returns G with forward(G(q)) = q, solved
/// per pixel by damped Newton on the bilinear interpolant of `forward`
/// (linearly extrapolated outside its domain).
InversionResult invert_flow(const WarpFlow& forward, const InversionOptions& options = {});

inline constexpr std::uint32_t kFlowFileVersion = 1;

// BKFL layout, little-endian: "BKFL" | version u32 | H u32 | W u32 |
// H*W*2 f32, row-major, u before v.
std::vector<std::uint8_t> encode_flow(const WarpFlow& flow);
WarpFlow decode_flow(const std::vector<std::uint8_t>& bytes);
void save_flow(const std::filesystem::path& path, const WarpFlow& flow);
WarpFlow load_flow(const std::filesystem::path& path);

}  // namespace booknet::geometry
