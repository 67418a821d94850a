// SPDX-License-Identifier: Apache-2.0
//
// Edge-enhanced and high-frequency-enhanced views of an RGB image, and the
// PPM / view-sidecar file formats.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <vector>

namespace tmkd::views {

/// Single-channel H x W raster, row-major.
template <typename T>
struct Plane {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  T& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

using Channel = Plane<double>;
using EdgeMap = Plane<std::uint8_t>;

/// 8-bit RGB image, pixels interleaved (HWC).
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(std::size_t h, std::size_t w) : height(h), width(w), pixels(h * w * 3, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c, std::size_t ch) { return pixels[(r * width + c) * 3 + ch]; }
  std::uint8_t at(std::size_t r, std::size_t c, std::size_t ch) const { return pixels[(r * width + c) * 3 + ch]; }
  Channel channel(std::size_t ch) const;

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

enum class ViewKind { rgb, edge, hf };
std::string_view to_string(ViewKind kind);

/// Float view in [0, 1], interleaved like RgbImage.
struct ViewImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  ViewKind kind = ViewKind::rgb;
};

struct ViewGenConfig {
  double canny_low = 100.0;
  double canny_high = 200.0;
  double alpha_e = 1.5;
  double alpha_hf = 1.5;
  double gaussian_sigma = 1.0;
  int gaussian_kernel = 5;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

struct MultiView {
  ViewImage rgb;
  ViewImage edge;
  ViewImage hf;
};

/// Half-sample symmetric index (…cba|abc…|cba…); valid for any integer i.
std::size_t reflect_index(long long i, std::size_t n);

/// Canny edge map of one channel with values in [0, 255].
///
/// Smoothing uses the classic 5x5 integer approximation of a sigma = 1.4
/// Gaussian (weights sum to 159), gradients are 3x3 Sobel, both with
/// reflect padding. Magnitudes are L2; non-maximum suppression uses four
/// direction bins and keeps a pixel when it is strictly greater than its
/// neighbour behind the gradient and not smaller than the one ahead, so a
/// symmetric ramp yields a one-pixel line. Hysteresis: magnitude > high is
/// strong, > low is weak, weak pixels survive when 8-connected to a strong
/// one. On integer-valued input every intermediate is an exact integer.
EdgeMap canny_channel(const Channel& channel, double low, double high);

/// Normalised 1-D Gaussian taps of odd length `size`.
std::vector<double> gaussian_kernel_1d(double sigma, int size);

/// Separable Gaussian blur with reflect padding. A constant channel is
/// returned bit-identical.
Channel gaussian_blur(const Channel& channel, double sigma, int kernel);

ViewImage rgb_view(const RgbImage& img);
ViewImage edge_view(const RgbImage& img, const ViewGenConfig& cfg);
ViewImage hf_view(const RgbImage& img, const ViewGenConfig& cfg);
MultiView make_views(const RgbImage& img, const ViewGenConfig& cfg);

/// round(v * 255) per value.
RgbImage quantize(const ViewImage& view);

RgbImage parse_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const RgbImage& img);
RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

/// `<stem>.views.f64`: "TMKV", u32 version = 1, u32 H, u32 W, then the rgb,
/// edge and hf views as H*W*3 little-endian float64 each.
std::vector<std::uint8_t> encode_view_sidecar(const MultiView& views);
MultiView parse_view_sidecar(std::span<const std::uint8_t> bytes);
void write_view_sidecar(const MultiView& views, const std::filesystem::path& path);
MultiView read_view_sidecar(const std::filesystem::path& path);

}  // namespace tmkd::views
