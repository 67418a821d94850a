// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented `key = value` run configuration with dotted keys and `#`
// comments, plus the resolved snapshot every CLI run writes.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tmkd/dataset.hpp"
#include "tmkd/distill.hpp"
#include "tmkd/train.hpp"
#include "tmkd/viewgen.hpp"

namespace tmkd::config {

/// Raw entries in file order. Duplicate keys and lines without `=` are a
/// ParseError whose offset is the 1-based line number.
using Entries = std::vector<std::pair<std::string, std::string>>;

Entries parse_entries(std::string_view text);
Entries load_entries(const std::filesystem::path& path);

struct RunConfig {
  data::SyntheticDatasetSpec data;
  std::string data_dir;  // empty: generate the synthetic dataset in memory
  views::ViewGenConfig views;
  train::TrainConfig pretrain = default_pretrain();
  train::TrainConfig train;
  distill::DistillConfig distill;
  train::ModelConfig model;
  std::string teacher_checkpoint;
  std::string embeddings;

  static train::TrainConfig default_pretrain();
  /// Logits only, RGB view only.
  bool is_vanilla_kd() const;
  void validate() const;
};

/// Applies entries over `base`. Unknown keys and unparsable values are a
/// ConfigError naming the key.
RunConfig apply(const Entries& entries, RunConfig base = {});
RunConfig load(const std::filesystem::path& path);

/// Every effective value, one key per line, in a form apply() reads back.
std::string render(const RunConfig& cfg);

/// All recognised keys, in render order.
std::vector<std::string> known_keys();

}  // namespace tmkd::config
