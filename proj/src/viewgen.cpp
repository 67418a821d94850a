// SPDX-License-Identifier: Apache-2.0
#include "tmkd/viewgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "tmkd/binio.hpp"
#include "tmkd/errors.hpp"

namespace tmkd::views {

namespace {

// 5x5 integer approximation of a sigma = 1.4 Gaussian; weights sum to 159.
constexpr int kCannySmooth[5][5] = {
    {2, 4, 5, 4, 2},
    {4, 9, 12, 9, 4},
    {5, 12, 15, 12, 5},
    {4, 9, 12, 9, 4},
    {2, 4, 5, 4, 2},
};
constexpr double kCannySmoothSum = 159.0;

inline long long as_ll(std::size_t v) { return static_cast<long long>(v); }

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

ViewImage blank_view(const RgbImage& img, ViewKind kind) {
  ViewImage v;
  v.height = img.height;
  v.width = img.width;
  v.kind = kind;
  v.values.resize(img.pixels.size());
  return v;
}

void require_valid(const RgbImage& img) {
  if (img.height == 0 || img.width == 0 || img.pixels.size() != img.height * img.width * 3) {
    throw ContractError("RGB image has inconsistent dimensions");
  }
}

}  // namespace

Channel RgbImage::channel(std::size_t ch) const {
  Channel out(height, width);
  for (std::size_t i = 0; i < height * width; ++i) out.values[i] = pixels[i * 3 + ch];
  return out;
}

std::string_view to_string(ViewKind kind) {
  switch (kind) {
    case ViewKind::rgb: return "rgb";
    case ViewKind::edge: return "edge";
    case ViewKind::hf: return "hf";
  }
  return "?";
}

void ViewGenConfig::validate() const {
  if (!(canny_low > 0.0 && canny_low < canny_high)) {
    throw ConfigError("canny thresholds must satisfy 0 < low < high");
  }
  if (alpha_e < 0.0 || alpha_hf < 0.0) throw ConfigError("view alphas must be >= 0");
  if (!(gaussian_sigma > 0.0)) throw ConfigError("gaussian sigma must be > 0");
  if (gaussian_kernel < 3 || gaussian_kernel % 2 == 0) {
    throw ConfigError("gaussian kernel must be odd and >= 3");
  }
}

std::size_t reflect_index(long long i, std::size_t n) {
  const long long period = 2 * as_ll(n);
  long long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < as_ll(n) ? m : period - 1 - m);
}

EdgeMap canny_channel(const Channel& channel, double low, double high) {
  const std::size_t h = channel.height, w = channel.width;
  if (h < 5 || w < 5) {
    throw DimensionError("canny needs at least 5x5 pixels, got " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  if (!(low > 0.0 && low < high)) throw ConfigError("canny thresholds must satisfy 0 < low < high");
  for (double v : channel.values) {
    if (!(v >= 0.0 && v <= 255.0)) throw ContractError("canny input outside [0, 255]");
  }
  auto px = [&](const Channel& p, long long r, long long c) {
    return p.at(reflect_index(r, h), reflect_index(c, w));
  };

  // Smoothed image scaled by 159 (kept unnormalised so integer input stays exact).
  Channel smooth(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int i = -2; i <= 2; ++i)
        for (int j = -2; j <= 2; ++j) acc += kCannySmooth[i + 2][j + 2] * px(channel, as_ll(r) + i, as_ll(c) + j);
      smooth.at(r, c) = acc;
    }
  }

  Channel gx(h, w), gy(h, w), mag2(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const long long R = as_ll(r), C = as_ll(c);
      const double tl = px(smooth, R - 1, C - 1), tc = px(smooth, R - 1, C), tr = px(smooth, R - 1, C + 1);
      const double ml = px(smooth, R, C - 1), mr = px(smooth, R, C + 1);
      const double bl = px(smooth, R + 1, C - 1), bc = px(smooth, R + 1, C), br = px(smooth, R + 1, C + 1);
      const double dx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
      const double dy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
      gx.at(r, c) = dx;
      gy.at(r, c) = dy;
      mag2.at(r, c) = dx * dx + dy * dy;
    }
  }

  const double lo2 = (low * kCannySmoothSum) * (low * kCannySmoothSum);
  const double hi2 = (high * kCannySmoothSum) * (high * kCannySmoothSum);

  // 0 = suppressed, 1 = weak, 2 = strong
  Plane<std::uint8_t> state(h, w, 0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double m = mag2.at(r, c);
      if (!(m > lo2)) continue;
      const double ax = std::abs(gx.at(r, c)), ay = std::abs(gy.at(r, c));
      // Bin edges at 22.5 and 67.5 degrees: ay < tan(22.5) ax  <=>  (ax + ay)^2 < 2 ax^2.
      int dr = 0, dc = 0;
      if ((ax + ay) * (ax + ay) < 2.0 * ax * ax) {
        dc = 1;
      } else if ((ax + ay) * (ax + ay) < 2.0 * ay * ay) {
        dr = 1;
      } else if ((gx.at(r, c) > 0.0) == (gy.at(r, c) > 0.0)) {
        dr = 1;
        dc = 1;
      } else {
        dr = 1;
        dc = -1;
      }
      const double behind = px(mag2, as_ll(r) - dr, as_ll(c) - dc);
      const double ahead = px(mag2, as_ll(r) + dr, as_ll(c) + dc);
      if (m > behind && m >= ahead) state.at(r, c) = m > hi2 ? 2 : 1;
    }
  }

  EdgeMap edges(h, w, 0);
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < h * w; ++i) {
    if (state.values[i] == 2) {
      edges.values[i] = 255;
      stack.push_back(i);
    }
  }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const long long r = as_ll(i / w), c = as_ll(i % w);
    for (long long dr = -1; dr <= 1; ++dr) {
      for (long long dc = -1; dc <= 1; ++dc) {
        const long long rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= as_ll(h) || cc >= as_ll(w)) continue;
        const std::size_t j = static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc);
        if (state.values[j] == 1 && edges.values[j] == 0) {
          edges.values[j] = 255;
          stack.push_back(j);
        }
      }
    }
  }
  return edges;
}

std::vector<double> gaussian_kernel_1d(double sigma, int size) {
  if (size < 1 || size % 2 == 0) throw ConfigError("gaussian kernel size must be odd, got " + std::to_string(size));
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be > 0");
  const int radius = size / 2;
  std::vector<double> k(static_cast<std::size_t>(size));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= total;
  return k;
}

Channel gaussian_blur(const Channel& channel, double sigma, int kernel) {
  const auto k = gaussian_kernel_1d(sigma, kernel);
  const int radius = kernel / 2;
  const std::size_t h = channel.height, w = channel.width;
  // Each pass computes x + sum_i k_i (x_i - x), equal to sum_i k_i x_i
  // because the taps sum to one, and exact on flat regions.
  Channel tmp(h, w), out(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = channel.at(r, c);
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * (channel.at(r, reflect_index(as_ll(c) + i, w)) - x);
      tmp.at(r, c) = x + acc;
    }
  }
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = tmp.at(r, c);
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * (tmp.at(reflect_index(as_ll(r) + i, h), c) - x);
      out.at(r, c) = x + acc;
    }
  }
  return out;
}

ViewImage rgb_view(const RgbImage& img) {
  require_valid(img);
  auto v = blank_view(img, ViewKind::rgb);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) v.values[i] = img.pixels[i] / 255.0;
  return v;
}

ViewImage edge_view(const RgbImage& img, const ViewGenConfig& cfg) {
  require_valid(img);
  auto v = blank_view(img, ViewKind::edge);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const auto edges = canny_channel(img.channel(ch), cfg.canny_low, cfg.canny_high);
    for (std::size_t i = 0; i < img.height * img.width; ++i) {
      const double base = img.pixels[i * 3 + ch] / 255.0;
      v.values[i * 3 + ch] = clip01(base + cfg.alpha_e * (edges.values[i] / 255.0));
    }
  }
  return v;
}

ViewImage hf_view(const RgbImage& img, const ViewGenConfig& cfg) {
  require_valid(img);
  auto v = blank_view(img, ViewKind::hf);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const auto chan = img.channel(ch);
    const auto blurred = gaussian_blur(chan, cfg.gaussian_sigma, cfg.gaussian_kernel);
    for (std::size_t i = 0; i < img.height * img.width; ++i) {
      // Signed residual; the clip bounds the result.
      const double residual = chan.values[i] - blurred.values[i];
      v.values[i * 3 + ch] = clip01(chan.values[i] / 255.0 + cfg.alpha_hf * (residual / 255.0));
    }
  }
  return v;
}

MultiView make_views(const RgbImage& img, const ViewGenConfig& cfg) {
  cfg.validate();
  return {rgb_view(img), edge_view(img, cfg), hf_view(img, cfg)};
}

RgbImage quantize(const ViewImage& view) {
  RgbImage img(view.height, view.width);
  for (std::size_t i = 0; i < view.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(clip01(view.values[i]) * 255.0));
  }
  return img;
}

// ---- PPM ----------------------------------------------------------------

namespace {

void skip_space_and_comments(std::span<const std::uint8_t> b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
}

std::size_t read_header_int(std::span<const std::uint8_t> b, std::size_t& pos, const char* field) {
  skip_space_and_comments(b, pos);
  if (pos >= b.size()) throw ParseError(std::string("PPM header truncated before ") + field, pos);
  if (!std::isdigit(b[pos])) throw ParseError(std::string("PPM header: expected ") + field, pos);
  const std::size_t start = pos;
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    if (v > 1u << 24) throw ParseError(std::string("PPM header: ") + field + " too large", start);
    ++pos;
  }
  return v;
}

}  // namespace

RgbImage parse_ppm(std::span<const std::uint8_t> b) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != '6') throw ParseError("not a binary PPM (expected magic P6)", 0);
  std::size_t pos = 2;
  const std::size_t width = read_header_int(b, pos, "width");
  const std::size_t height = read_header_int(b, pos, "height");
  const std::size_t maxval_at = pos;
  const std::size_t maxval = read_header_int(b, pos, "maxval");
  if (width == 0 || height == 0) throw ParseError("PPM has zero width or height", maxval_at);
  if (maxval != 255) {
    throw UnsupportedFormat("PPM maxval " + std::to_string(maxval) + " unsupported (only 255)", maxval_at);
  }
  if (pos >= b.size() || !std::isspace(b[pos])) throw ParseError("PPM header: missing separator after maxval", pos);
  ++pos;
  const std::size_t payload = width * height * 3;
  if (b.size() - pos < payload) {
    throw ParseError("PPM payload truncated: need " + std::to_string(payload) + " bytes, have " +
                         std::to_string(b.size() - pos),
                     b.size());
  }
  RgbImage img(height, width);
  std::copy_n(b.begin() + static_cast<std::ptrdiff_t>(pos), payload, img.pixels.begin());
  return img;
}

std::vector<std::uint8_t> encode_ppm(const RgbImage& img) {
  require_valid(img);
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

RgbImage read_ppm(const std::filesystem::path& path) { return parse_ppm(binio::read_file(path)); }

void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
  binio::write_file(path, encode_ppm(img));
}

// ---- view sidecar ---------------------------------------------------------

std::vector<std::uint8_t> encode_view_sidecar(const MultiView& views) {
  binio::Writer w;
  w.bytes("TMKV");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(views.rgb.height));
  w.u32(static_cast<std::uint32_t>(views.rgb.width));
  for (const auto* v : {&views.rgb, &views.edge, &views.hf}) {
    if (v->height != views.rgb.height || v->width != views.rgb.width) {
      throw DimensionError("view sidecar: views differ in size");
    }
    for (double x : v->values) w.f64(x);
  }
  return w.take();
}

MultiView parse_view_sidecar(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (r.bytes(4, "magic") != "TMKV") throw ParseError("bad view sidecar magic", 0);
  const auto version_at = r.offset();
  if (r.u32("version") != 1) throw UnsupportedFormat("unsupported view sidecar version", version_at);
  const std::size_t h = r.u32("height");
  const std::size_t w = r.u32("width");
  MultiView mv;
  for (auto [v, kind] : {std::pair{&mv.rgb, ViewKind::rgb}, std::pair{&mv.edge, ViewKind::edge},
                         std::pair{&mv.hf, ViewKind::hf}}) {
    v->height = h;
    v->width = w;
    v->kind = kind;
    v->values.resize(h * w * 3);
    for (auto& x : v->values) x = r.f64("view value");
  }
  return mv;
}

void write_view_sidecar(const MultiView& views, const std::filesystem::path& path) {
  binio::write_file(path, encode_view_sidecar(views));
}

MultiView read_view_sidecar(const std::filesystem::path& path) {
  return parse_view_sidecar(binio::read_file(path));
}

}  // namespace tmkd::views
