// SPDX-License-Identifier: Apache-2.0
//
// Synthetic shape/texture dataset, its on-disk layout, and the flattened
// view matrices the trainer consumes.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tmkd/tensor.hpp"
#include "tmkd/viewgen.hpp"

namespace tmkd::data {

struct Sample {
  std::string id;
  views::RgbImage image;
  std::size_t label = 0;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Class k draws outline shape k / 2 and texture k % 2 (coarse or fine):
/// circle_coarse, circle_fine, square_coarse, square_fine, triangle_coarse, ...
/// Position, size, colours, texture phase and pixel noise are random.
struct SyntheticDatasetSpec {
  std::size_t n_classes = 4;
  std::size_t samples_per_class = 200;
  std::size_t image_size = 16;
  std::uint64_t seed = 7;

  /// n_classes in [2, 12], samples_per_class >= 5, image_size in [12, 64].
  void validate() const;
};

std::vector<std::string> synthetic_class_names(std::size_t n_classes);

/// Deterministic in the spec; 80/20 split stratified per class.
Dataset generate_synthetic_dataset(const SyntheticDatasetSpec& spec);

std::vector<std::size_t> class_histogram(const std::vector<Sample>& samples, std::size_t n_classes);

/// DIR/classes.txt (one name per line), DIR/split.csv (id,label,split) and
/// DIR/<id>.ppm.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

/// Row i holds sample i's view flattened HWC.
struct ViewMatrix {
  Tensor rgb;
  Tensor edge;
  Tensor hf;
  std::vector<std::size_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return rgb.dim(1); }
};

/// Views of every sample. When `sidecar_dir` is non-empty, "<id>.views.f64"
/// files found there are used instead of recomputing the views.
ViewMatrix build_view_matrix(const std::vector<Sample>& samples, const views::ViewGenConfig& cfg,
                             const std::filesystem::path& sidecar_dir = {});

/// Shuffled sample order for one epoch; a pure function of its arguments.
std::vector<std::size_t> epoch_permutation(std::uint64_t seed, std::size_t epoch, std::size_t n);

/// Mini-batches over `order`. A trailing batch smaller than `min_batch` is
/// merged into the one before it.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size,
                                                   std::size_t min_batch = 2);

/// Frozen copy of the given rows of a [N x d] tensor.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace tmkd::data
