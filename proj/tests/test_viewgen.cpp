#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "canny_oracle.hpp"
#include "test_images.hpp"
#include "tmkd/errors.hpp"
#include "tmkd/rng.hpp"
#include "tmkd/viewgen.hpp"

using namespace tmkd;
using namespace tmkd::views;

namespace {

oracle::Grid to_grid(const Channel& ch) {
  oracle::Grid g(ch.height, std::vector<std::int64_t>(ch.width));
  for (std::size_t r = 0; r < ch.height; ++r)
    for (std::size_t c = 0; c < ch.width; ++c) g[r][c] = static_cast<std::int64_t>(ch.at(r, c));
  return g;
}

bool matches_oracle(const Channel& ch, double low, double high) {
  const auto got = canny_channel(ch, low, high);
  const auto want = oracle::canny(to_grid(ch), low, high);
  for (std::size_t r = 0; r < ch.height; ++r)
    for (std::size_t c = 0; c < ch.width; ++c)
      if (got.at(r, c) != want[r][c]) return false;
  return true;
}

// Direct 2-D convolution with the outer-product kernel and symmetric padding.
Channel blur_direct(const Channel& ch, double sigma, int size) {
  const int rad = size / 2;
  std::vector<double> g(static_cast<std::size_t>(size));
  double tot = 0.0;
  for (int i = -rad; i <= rad; ++i) tot += g[i + rad] = std::exp(-(i * i) / (2 * sigma * sigma));
  auto mirror = [](long long i, long long n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - 1 - i;
    return static_cast<std::size_t>(i);
  };
  Channel out(ch.height, ch.width);
  const auto H = static_cast<long long>(ch.height), W = static_cast<long long>(ch.width);
  for (long long r = 0; r < H; ++r)
    for (long long c = 0; c < W; ++c) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i)
        for (int j = -rad; j <= rad; ++j)
          acc += (g[i + rad] / tot) * (g[j + rad] / tot) * ch.at(mirror(r + i, H), mirror(c + j, W));
      out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  return out;
}

Channel random_channel(Rng& rng, std::size_t h, std::size_t w, int lo = 0, int hi = 255) {
  Channel ch(h, w);
  for (auto& v : ch.values) v = lo + static_cast<double>(rng.index(static_cast<std::uint64_t>(hi - lo + 1)));
  return ch;
}

RgbImage constant_image(std::size_t h, std::size_t w, std::uint8_t v) {
  RgbImage img(h, w);
  std::fill(img.pixels.begin(), img.pixels.end(), v);
  return img;
}

}  // namespace

TEST_CASE("reflect padding is half-sample symmetric") {
  CHECK(reflect_index(-1, 5) == 0);
  CHECK(reflect_index(-2, 5) == 1);
  CHECK(reflect_index(5, 5) == 4);
  CHECK(reflect_index(6, 5) == 3);
  CHECK(reflect_index(11, 5) == 1);
  CHECK(reflect_index(-7, 2) == 1);
}

TEST_CASE("canny_channel degenerate inputs") {
  CHECK(canny_channel(Channel(8, 8, 0.0), 100, 200).values == std::vector<std::uint8_t>(64, 0));
  for (double v : {1.0, 77.0, 255.0}) {
    CHECK(canny_channel(Channel(9, 7, v), 100, 200).values == std::vector<std::uint8_t>(63, 0));
  }
  CHECK_THROWS_AS(canny_channel(Channel(4, 8, 0.0), 100, 200), DimensionError);
  CHECK_THROWS_AS(canny_channel(Channel(8, 8, 0.0), 200, 100), ConfigError);
}

TEST_CASE("canny_channel vertical step yields one vertical line") {
  Channel ch(8, 8, 0.0);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 4; c < 8; ++c) ch.at(r, c) = 255.0;
  const auto edges = canny_channel(ch, 100, 200);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t c = 0; c < 8; ++c) CHECK(edges.at(r, c) == (c == 3 ? 255 : 0));
  CHECK(matches_oracle(ch, 100, 200));
}

TEST_CASE("canny_channel matches the brute-force oracle") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const std::size_t h = 8 + seed % 13, w = 8 + (seed * 7) % 19;
    const auto img = seed % 3 == 0 ? testimg::uniform_noise(seed, h, w) : testimg::structured(seed, h, w);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      CAPTURE(seed);
      CHECK(matches_oracle(img.channel(ch), 100, 200));
      CHECK(matches_oracle(img.channel(ch), 20, 60));
    }
  }
}

TEST_CASE("canny output is binary and invariant to a constant offset") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto img = testimg::structured(static_cast<std::uint64_t>(trial), 16, 16);
    auto ch = img.channel(0);
    for (auto& v : ch.values) v = std::min(v, 200.0);
    const auto e = canny_channel(ch, 50, 120);
    for (auto v : e.values) CHECK((v == 0 || v == 255));
    const double offset = static_cast<double>(rng.index(56));
    for (auto& v : ch.values) v += offset;
    // Gradients are unchanged exactly, so the thresholds see identical magnitudes.
    CHECK(canny_channel(ch, 50, 120).values == e.values);
  }
}

TEST_CASE("edge_view") {
  SUBCASE("no edges gives I/255 exactly") {
    const auto img = constant_image(8, 8, 200);
    const auto v = edge_view(img, ViewGenConfig{});
    for (std::size_t i = 0; i < v.values.size(); ++i) CHECK(v.values[i] == img.pixels[i] / 255.0);
  }
  SUBCASE("value 200 on an edge saturates") {
    RgbImage img(8, 8);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch) img.at(r, c, ch) = c >= 4 ? 255 : 0;
    img.at(2, 3, 0) = 200;
    const auto e = canny_channel(img.channel(0), 100, 200);
    REQUIRE(e.at(2, 3) == 255);
    const auto v = edge_view(img, ViewGenConfig{});
    CHECK(v.values[(2 * 8 + 3) * 3] == std::min(1.0, 200.0 / 255.0 + 1.5 * 1.0));
    CHECK(v.values[(2 * 8 + 3) * 3] == 1.0);
  }
}

TEST_CASE("gaussian_blur") {
  SUBCASE("constant channel is returned unchanged") {
    const Channel ch(7, 9, 123.456);
    CHECK(gaussian_blur(ch, 1.0, 5).values == ch.values);
    CHECK(gaussian_blur(ch, 2.5, 7).values == ch.values);
  }
  SUBCASE("impulse response is the kernel") {
    Channel ch(9, 9, 0.0);
    ch.at(4, 4) = 1.0;
    const auto k = gaussian_kernel_1d(1.0, 5);
    const auto out = gaussian_blur(ch, 1.0, 5);
    for (std::size_t r = 0; r < 9; ++r)
      for (std::size_t c = 0; c < 9; ++c) {
        const bool in = r >= 2 && r <= 6 && c >= 2 && c <= 6;
        const double want = in ? k[r - 2] * k[c - 2] : 0.0;
        CHECK(std::abs(out.at(r, c) - want) <= 1e-15);
      }
  }
  SUBCASE("matches direct convolution and preserves the mean") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t h = 3 + rng.index(20), w = 3 + rng.index(20);
      const auto ch = random_channel(rng, h, w);
      const double sigma = rng.uniform(0.3, 2.0);
      const int size = 3 + 2 * static_cast<int>(rng.index(3));
      const auto got = gaussian_blur(ch, sigma, size);
      const auto want = blur_direct(ch, sigma, size);
      double mean_in = 0, mean_out = 0, mean_oracle = 0;
      for (std::size_t i = 0; i < ch.values.size(); ++i) {
        CHECK(std::abs(got.values[i] - want.values[i]) <= 1e-9);
        mean_in += ch.values[i];
        mean_out += got.values[i];
        mean_oracle += want.values[i];
      }
      const double n = static_cast<double>(ch.values.size());
      CHECK(std::abs(mean_out / n - mean_in / n) <= 1e-9);
      CHECK(std::abs(mean_oracle / n - mean_in / n) <= 1e-9);
    }
  }
  SUBCASE("even kernel and bad sigma are config errors") {
    CHECK_THROWS_AS(gaussian_blur(Channel(5, 5, 1.0), 1.0, 4), ConfigError);
    CHECK_THROWS_AS(gaussian_blur(Channel(5, 5, 1.0), 0.0, 5), ConfigError);
  }
  SUBCASE("small sigma approaches identity monotonically") {
    Rng rng(8);
    const auto ch = random_channel(rng, 16, 16);
    double prev = 1e300;
    for (double sigma : {2.0, 1.0, 0.7, 0.5, 0.3, 0.2, 0.1}) {
      const auto out = gaussian_blur(ch, sigma, 3);
      double dev = 0.0;
      for (std::size_t i = 0; i < ch.values.size(); ++i) dev = std::max(dev, std::abs(out.values[i] - ch.values[i]));
      CHECK(dev < prev);
      prev = dev;
    }
    CHECK(prev < 1e-6);
  }
}

TEST_CASE("hf_view") {
  SUBCASE("constant image has zero residual") {
    const auto img = constant_image(6, 6, 77);
    const auto v = hf_view(img, ViewGenConfig{});
    for (std::size_t i = 0; i < v.values.size(); ++i) CHECK(v.values[i] == 77 / 255.0);
  }
  SUBCASE("single bright pixel") {
    RgbImage img(9, 9);
    for (std::size_t ch = 0; ch < 3; ++ch) img.at(4, 4, ch) = 255;
    const auto v = hf_view(img, ViewGenConfig{});
    const auto blurred = blur_direct(img.channel(0), 1.0, 5);
    const double want_center = std::clamp(1.0 + 1.5 * (255.0 - blurred.at(4, 4)) / 255.0, 0.0, 1.0);
    CHECK(v.values[(4 * 9 + 4) * 3] == doctest::Approx(want_center).epsilon(1e-12));
    // A neighbour: dark pixel minus positive blur is negative, so the clip floors it.
    const double want_nb = std::clamp(0.0 + 1.5 * (0.0 - blurred.at(4, 5)) / 255.0, 0.0, 1.0);
    CHECK(v.values[(4 * 9 + 5) * 3] == want_nb);
  }
}

TEST_CASE("views stay in [0,1] and alpha = 0 reduces to I/255") {
  Rng rng(1234);
  for (int trial = 0; trial < 100; ++trial) {
    const auto img = testimg::uniform_noise(static_cast<std::uint64_t>(trial), 5 + rng.index(12), 5 + rng.index(12));
    ViewGenConfig cfg;
    cfg.alpha_e = rng.uniform(0, 4);
    cfg.alpha_hf = rng.uniform(0, 4);
    cfg.canny_low = rng.uniform(10, 150);
    cfg.canny_high = cfg.canny_low + rng.uniform(1, 150);
    cfg.gaussian_sigma = rng.uniform(0.3, 3);
    const auto mv = make_views(img, cfg);
    for (const auto* v : {&mv.rgb, &mv.edge, &mv.hf})
      for (double x : v->values) CHECK((x >= 0.0 && x <= 1.0));
  }
  ViewGenConfig zero;
  zero.alpha_e = 0.0;
  zero.alpha_hf = 0.0;
  const auto img = testimg::structured(5, 12, 12);
  const auto mv = make_views(img, zero);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    CHECK(mv.edge.values[i] == img.pixels[i] / 255.0);
    CHECK(mv.hf.values[i] == img.pixels[i] / 255.0);
  }
}

TEST_CASE("config validation") {
  ViewGenConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.gaussian_kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.canny_low = 250;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("ppm") {
  SUBCASE("round trip") {
    const auto img = testimg::uniform_noise(99, 16, 16);
    CHECK(parse_ppm(encode_ppm(img)) == img);
    const auto path = std::filesystem::temp_directory_path() / "tmkd_rt.ppm";
    write_ppm(img, path);
    CHECK(read_ppm(path) == img);
    std::filesystem::remove(path);
  }
  SUBCASE("header comments are skipped") {
    std::string s = "P6\n# made by hand\n2 1\n# max\n255\n";
    s += std::string("\x01\x02\x03\x04\x05\x06", 6);
    const auto img = parse_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
    CHECK(img.width == 2);
    CHECK(img.at(0, 1, 2) == 6);
  }
  SUBCASE("wrong magic") {
    std::string s = "P5\n2 2\n255\n";
    s += std::string(4, '\0');
    CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(s.begin(), s.end())), ParseError);
  }
  SUBCASE("16-bit maxval is unsupported") {
    std::string s = "P6\n2 2\n65535\n";
    s += std::string(24, '\0');
    CHECK_THROWS_AS(parse_ppm(std::vector<std::uint8_t>(s.begin(), s.end())), UnsupportedFormat);
  }
  SUBCASE("truncated payload reports the byte offset") {
    std::string s = "P6\n2 2\n255\n";
    s += std::string(5, '\0');
    try {
      parse_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == s.size());
    }
  }
  SUBCASE("malformed header") {
    std::string s = "P6\n2 x\n255\n";
    try {
      parse_ppm(std::vector<std::uint8_t>(s.begin(), s.end()));
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.offset() == 5);
    }
  }
}

TEST_CASE("view sidecar round trip and quantisation") {
  const auto img = testimg::structured(3, 10, 12);
  const auto mv = make_views(img, ViewGenConfig{});
  const auto bytes = encode_view_sidecar(mv);
  CHECK(bytes.size() == 16 + 3 * 10 * 12 * 3 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TMKV");
  const auto back = parse_view_sidecar(bytes);
  CHECK(back.rgb.values == mv.rgb.values);
  CHECK(back.edge.values == mv.edge.values);
  CHECK(back.hf.values == mv.hf.values);
  CHECK(back.hf.kind == ViewKind::hf);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  CHECK_THROWS_AS(parse_view_sidecar(cut), ParseError);
  CHECK(quantize(mv.rgb) == img);
}
