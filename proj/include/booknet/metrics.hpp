#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "booknet/tensor.hpp"

namespace booknet::metrics {

/// Pyramid level weights, finest first. They sum to 1.0001 and are used as-is.
inline constexpr std::array<double, 5> kMssimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr std::size_t kMssimMinSide = 176;

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Multi-scale SSIM of two [H x W] grayscale images with values in [0, 1].
double mssim(const Tensor& a, const Tensor& b, const std::array<double, 5>& weights = kMssimWeights);

struct Correspondence {
  std::size_t height = 0, width = 0;
  /// Per pixel displacement d with rectified(x) ~ reference(x + d), in pixels.
  std::vector<double> dx, dy;
  std::vector<std::uint8_t> valid;
  /// Set when the inputs had no usable texture.
  bool degenerate = false;

  std::size_t valid_count() const;
};

struct RegistrationOptions {
  std::size_t levels = 4;
  std::size_t block = 16;
  int search = 12;
  double min_ncc = 0.3;
};

/// Coarse-to-fine block NCC registration of two equal-size grayscale images.
Correspondence compute_correspondence(const Tensor& rectified, const Tensor& reference,
                                      const RegistrationOptions& options = {});

/// Mean displacement norm over valid pixels.
double ld(const Correspondence& c);

struct AlignedDistortion {
  double value = 0.0;
  /// The similarity fit was rank deficient; only translation was removed.
  bool translation_only = false;
};

/// Removes the least-squares similarity transform, then averages the residual
/// norm weighted by the reference Sobel magnitude.
AlignedDistortion ad(const Correspondence& c, const Tensor& reference);
/// Sobel gradient magnitude of [H x W], replicated borders.
Tensor sobel_magnitude(const Tensor& gray);

/// Levenshtein distance over Unicode scalar values of UTF-8 strings.
std::size_t edit_distance(const std::string& hyp, const std::string& ref);
double cer(const std::string& hyp, const std::string& ref);
std::vector<char32_t> decode_utf8(const std::string& s);

struct ImageReport {
  std::string id;
  double mssim = 0.0, ld = 0.0, ad = 0.0;
  std::optional<std::size_t> ed;
  std::optional<double> cer;
  bool ad_translation_only = false;
  bool registration_degenerate = false;
};

struct MetricReport {
  std::vector<ImageReport> images;
  std::vector<std::string> skipped;
  double mssim = 0.0, ld = 0.0, ad = 0.0;
  std::optional<double> ed, cer;
};

/// Scores one rectified image against its reference (both [3 x H x W] or
/// [H x W]); the rectified image is resized to the reference extents.
ImageReport evaluate_pair(const Tensor& rectified, const Tensor& reference);
MetricReport aggregate(std::vector<ImageReport> images, std::vector<std::string> skipped);

/// Pairs manifest: [{id, rectified_path, reference_path, transcript_ref?,
/// transcript_hyp?}]. Relative paths resolve against the manifest directory.
MetricReport evaluate_set(const std::filesystem::path& pairs_manifest);

nlohmann::json to_json(const MetricReport& r);
/// Aligned text table, columns MSSIM LD AD CER ED.
std::string format_table(const MetricReport& r);

}  // namespace booknet::metrics
