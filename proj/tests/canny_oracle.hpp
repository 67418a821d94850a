// Brute-force Canny reference for tests: integer arithmetic on an explicitly
// padded copy, atan2 direction bins, sqrt magnitudes, recursive hysteresis.
// Deliberately shares no code with src/viewgen.cpp.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<std::int64_t>>;

// Symmetric (edge-repeating) padding by `pad` on every side.
inline Grid pad_symmetric(const Grid& g, int pad) {
  const int h = static_cast<int>(g.size()), w = static_cast<int>(g[0].size());
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
  };
  Grid out(h + 2 * pad, std::vector<std::int64_t>(w + 2 * pad));
  for (int r = 0; r < h + 2 * pad; ++r)
    for (int c = 0; c < w + 2 * pad; ++c) out[r][c] = g[mirror(r - pad, h)][mirror(c - pad, w)];
  return out;
}

inline Grid convolve_valid(const Grid& padded, const std::vector<std::vector<int>>& k) {
  const int kh = static_cast<int>(k.size()), kw = static_cast<int>(k[0].size());
  const int h = static_cast<int>(padded.size()) - kh + 1, w = static_cast<int>(padded[0].size()) - kw + 1;
  Grid out(h, std::vector<std::int64_t>(w, 0));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) out[r][c] += k[i][j] * padded[r + i][c + j];
  return out;
}

/// Returns an H x W map with values 0 / 255.
inline std::vector<std::vector<int>> canny(const Grid& img, double low, double high) {
  const std::vector<std::vector<int>> gauss = {
      {2, 4, 5, 4, 2}, {4, 9, 12, 9, 4}, {5, 12, 15, 12, 5}, {4, 9, 12, 9, 4}, {2, 4, 5, 4, 2}};
  const std::vector<std::vector<int>> sobel_x = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  const std::vector<std::vector<int>> sobel_y = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  const int h = static_cast<int>(img.size()), w = static_cast<int>(img[0].size());

  Grid smooth = convolve_valid(pad_symmetric(img, 2), gauss);  // scaled by 159
  Grid sp = pad_symmetric(smooth, 1);
  Grid gx = convolve_valid(sp, sobel_x);
  Grid gy = convolve_valid(sp, sobel_y);

  std::vector<std::vector<double>> mag(h, std::vector<double>(w));
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      mag[r][c] = std::sqrt(static_cast<double>(gx[r][c] * gx[r][c] + gy[r][c] * gy[r][c])) / 159.0;

  auto mirror = [](int i, int n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - 1 - i : i); };
  std::vector<std::vector<int>> cls(h, std::vector<int>(w, 0));
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!(mag[r][c] > low)) continue;
      double angle = std::atan2(static_cast<double>(gy[r][c]), static_cast<double>(gx[r][c])) * 180.0 /
                     std::numbers::pi;
      if (angle < 0) angle += 180.0;
      int dr, dc;
      if (angle < 22.5 || angle >= 157.5) {
        dr = 0, dc = 1;
      } else if (angle < 67.5) {
        dr = 1, dc = 1;
      } else if (angle < 112.5) {
        dr = 1, dc = 0;
      } else {
        dr = 1, dc = -1;
      }
      const double behind = mag[mirror(r - dr, h)][mirror(c - dc, w)];
      const double ahead = mag[mirror(r + dr, h)][mirror(c + dc, w)];
      if (mag[r][c] > behind && mag[r][c] >= ahead) cls[r][c] = mag[r][c] > high ? 2 : 1;
    }
  }

  std::vector<std::vector<int>> out(h, std::vector<int>(w, 0));
  std::function<void(int, int)> grow = [&](int r, int c) {
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        const int rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
        if (cls[rr][cc] >= 1 && out[rr][cc] == 0) {
          out[rr][cc] = 255;
          grow(rr, cc);
        }
      }
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (cls[r][c] == 2 && out[r][c] == 0) {
        out[r][c] = 255;
        grow(r, c);
      }
  return out;
}

}  // namespace oracle
