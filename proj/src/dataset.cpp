// SPDX-License-Identifier: Apache-2.0
#include "tmkd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "tmkd/errors.hpp"
#include "tmkd/rng.hpp"

namespace tmkd::data {
namespace {

constexpr const char* kShapes[] = {"circle", "square", "triangle", "cross", "diamond", "ring"};
constexpr const char* kTextures[] = {"coarse", "fine"};

bool inside(std::size_t shape, double dx, double dy, double s) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return dx * dx + dy * dy <= s * s;
    case 1: return std::max(ax, ay) <= 0.85 * s;
    case 2: return dy >= -s && dy <= 0.7 * s && ax <= 0.6 * (dy + s);
    case 3: return (ax <= s / 3.0 && ay <= s) || (ay <= s / 3.0 && ax <= s);
    case 4: return ax + ay <= s;
    default: {
      const double r2 = dx * dx + dy * dy;
      return r2 <= s * s && r2 >= 0.25 * s * s;
    }
  }
}

views::RgbImage draw_sample(std::size_t label, std::size_t size, Rng& rng) {
  const std::size_t shape = label / 2;
  const bool fine = label % 2 == 1;
  const double n = static_cast<double>(size);

  double bg[3], fg[3];
  for (int ch = 0; ch < 3; ++ch) {
    bg[ch] = rng.uniform(20.0, 120.0);
    fg[ch] = bg[ch] + rng.uniform(70.0, 120.0);
  }
  const double s = rng.uniform(0.30, 0.40) * n;
  const double cx = (n - 1.0) / 2.0 + rng.uniform(-1.5, 1.5);
  const double cy = (n - 1.0) / 2.0 + rng.uniform(-1.5, 1.5);
  const double amp = rng.uniform(18.0, 32.0);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const std::size_t parity = rng.index(2);

  views::RgbImage img(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const bool in = inside(shape, dx, dy, s);
      double tex = 0.0;
      if (in) {
        if (fine) {
          tex = ((x + y + parity) % 2 == 0) ? amp : -amp;
        } else {
          const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
          tex = amp * std::sin(2.0 * std::numbers::pi * u / 8.0 + phase);
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        const double v = (in ? fg[ch] : bg[ch]) + tex + 6.0 * rng.normal();
        img.at(y, x, static_cast<std::size_t>(ch)) = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
      }
    }
  }
  return img;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

void SyntheticDatasetSpec::validate() const {
  if (n_classes < 2 || n_classes > 12) throw ConfigError("synthetic n_classes must be in [2, 12]");
  if (samples_per_class < 5) throw ConfigError("synthetic samples_per_class must be at least 5");
  if (image_size < 12 || image_size > 64) throw ConfigError("synthetic image_size must be in [12, 64]");
}

std::vector<std::string> synthetic_class_names(std::size_t n_classes) {
  std::vector<std::string> names;
  for (std::size_t k = 0; k < n_classes; ++k) names.push_back(std::string(kShapes[k / 2]) + "_" + kTextures[k % 2]);
  return names;
}

Dataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.class_names = synthetic_class_names(spec.n_classes);
  const std::size_t n_test = spec.samples_per_class / 5;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      Rng rng(mix_seed(spec.seed, k * 1000003ULL + i));
      Sample s;
      s.label = k;
      s.image = draw_sample(k, spec.image_size, rng);
      char id[64];
      std::snprintf(id, sizeof id, "c%02zu_%05zu", k, i);
      s.id = id;
      (i < spec.samples_per_class - n_test ? ds.train : ds.test).push_back(std::move(s));
    }
  }
  return ds;
}

std::vector<std::size_t> class_histogram(const std::vector<Sample>& samples, std::size_t n_classes) {
  std::vector<std::size_t> h(n_classes, 0);
  for (const auto& s : samples) {
    if (s.label >= n_classes) throw ContractError("sample label out of range");
    ++h[s.label];
  }
  return h;
}

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "classes.txt", std::ios::binary);
    for (const auto& c : ds.class_names) f << c << '\n';
    if (!f) throw std::runtime_error("cannot write " + (dir / "classes.txt").string());
  }
  std::ofstream split(dir / "split.csv", std::ios::binary);
  split << "id,label,split\n";
  for (const auto* part : {&ds.train, &ds.test}) {
    const char* name = part == &ds.train ? "train" : "test";
    for (const auto& s : *part) {
      split << s.id << ',' << s.label << ',' << name << '\n';
      views::write_ppm(s.image, dir / (s.id + ".ppm"));
    }
  }
  if (!split) throw std::runtime_error("cannot write " + (dir / "split.csv").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  std::ifstream classes(dir / "classes.txt");
  if (!classes) throw std::runtime_error("cannot open " + (dir / "classes.txt").string());
  for (std::string line; std::getline(classes, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) ds.class_names.push_back(line);
  }
  std::ifstream split(dir / "split.csv");
  if (!split) throw std::runtime_error("cannot open " + (dir / "split.csv").string());
  std::string line;
  std::getline(split, line);
  std::size_t lineno = 1;
  while (std::getline(split, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != 3) throw ParseError("split.csv: expected 3 columns on line " + std::to_string(lineno), lineno);
    Sample s;
    s.id = cells[0];
    try {
      s.label = std::stoul(cells[1]);
    } catch (const std::exception&) {
      throw ParseError("split.csv: bad label on line " + std::to_string(lineno), lineno);
    }
    if (s.label >= ds.class_names.size()) throw ParseError("split.csv: label out of range on line " + std::to_string(lineno), lineno);
    if (cells[2] != "train" && cells[2] != "test") {
      throw ParseError("split.csv: unknown split '" + cells[2] + "' on line " + std::to_string(lineno), lineno);
    }
    s.image = views::read_ppm(dir / (s.id + ".ppm"));
    (cells[2] == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

ViewMatrix build_view_matrix(const std::vector<Sample>& samples, const views::ViewGenConfig& cfg,
                             const std::filesystem::path& sidecar_dir) {
  cfg.validate();
  if (samples.empty()) throw ContractError("no samples to build views from");
  const std::size_t d = samples.front().image.pixels.size();
  std::vector<double> rgb, edge, hf;
  rgb.reserve(samples.size() * d);
  edge.reserve(samples.size() * d);
  hf.reserve(samples.size() * d);
  ViewMatrix m;
  for (const auto& s : samples) {
    if (s.image.pixels.size() != d) throw DimensionError("samples differ in image size: " + s.id);
    views::MultiView mv;
    const auto sidecar = sidecar_dir.empty() ? std::filesystem::path{} : sidecar_dir / (s.id + ".views.f64");
    if (!sidecar.empty() && std::filesystem::exists(sidecar)) {
      mv = views::read_view_sidecar(sidecar);
      if (mv.rgb.height != s.image.height || mv.rgb.width != s.image.width) {
        throw DimensionError("sidecar " + sidecar.string() + " does not match its image size");
      }
    } else {
      mv = views::make_views(s.image, cfg);
    }
    rgb.insert(rgb.end(), mv.rgb.values.begin(), mv.rgb.values.end());
    edge.insert(edge.end(), mv.edge.values.begin(), mv.edge.values.end());
    hf.insert(hf.end(), mv.hf.values.begin(), mv.hf.values.end());
    m.labels.push_back(s.label);
  }
  const std::size_t n = samples.size();
  m.rgb = Tensor({n, d}, std::move(rgb));
  m.edge = Tensor({n, d}, std::move(edge));
  m.hf = Tensor({n, d}, std::move(hf));
  return m;
}

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5348554646ULL + epoch));
  rng.shuffle(order);
  return order;
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size,
                                                   std::size_t min_batch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    std::vector<std::size_t> b(order.begin() + static_cast<std::ptrdiff_t>(i),
                               order.begin() + static_cast<std::ptrdiff_t>(end));
    if (b.size() < min_batch && !out.empty()) {
      out.back().insert(out.back().end(), b.begin(), b.end());
    } else {
      out.push_back(std::move(b));
    }
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (auto r : rows) {
    if (r >= x.dim(0)) throw DimensionError("gather_rows: row out of range");
    out.insert(out.end(), x.data().begin() + static_cast<std::ptrdiff_t>(r * d),
               x.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
  }
  return Tensor({rows.size(), d}, std::move(out));
}

}  // namespace tmkd::data
