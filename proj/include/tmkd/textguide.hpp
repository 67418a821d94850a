// SPDX-License-Identifier: Apache-2.0
//
// Prompt embeddings, the weight generator that turns the three view-prompt
// embeddings of a class into fusion weights, and the weighted fusion of the
// teacher's per-view features.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tmkd/gradcheck.hpp"
#include "tmkd/rng.hpp"
#include "tmkd/tensor.hpp"
#include "tmkd/viewgen.hpp"

namespace tmkd::text {

using views::ViewKind;

constexpr ViewKind kAllViews[3] = {ViewKind::rgb, ViewKind::edge, ViewKind::hf};

/// "class_name/view_kind"
std::string embedding_key(const std::string& class_name, ViewKind kind);

/// Named float32 vectors of one shared dimension, in insertion order.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }

  /// Throws ContractError on a duplicate key or a dimension mismatch.
  void add(std::string key, std::vector<float> values);
  const std::vector<float>* find(const std::string& key) const;
  const std::vector<std::pair<std::string, std::vector<float>>>& entries() const { return entries_; }

  friend bool operator==(const EmbeddingTable& a, const EmbeddingTable& b) {
    return a.dim_ == b.dim_ && a.entries_ == b.entries_;
  }

 private:
  std::size_t dim_;
  std::vector<std::pair<std::string, std::vector<float>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// TMKD-EMB v1: "TMKD", u32 version = 1, u32 count, u32 dim, then `count`
/// records of u16 key length, UTF-8 key, dim x float32 (all little-endian).
/// Errors carry the failing record index as their offset.
EmbeddingTable parse_embeddings(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_embeddings(const EmbeddingTable& table);
EmbeddingTable load_embeddings(const std::filesystem::path& path);
void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);

struct ClassEmbeddings {
  std::vector<float> rgb;
  std::vector<float> edge;
  std::vector<float> hf;

  const std::vector<float>& get(ViewKind kind) const;
};

/// Throws LookupError naming the first missing "class/view" key.
ClassEmbeddings lookup_class_embeddings(const EmbeddingTable& table, const std::string& class_name);

/// Keys a table is missing for `classes`, in (class, rgb/edge/hf) order.
std::vector<std::string> missing_keys(const EmbeddingTable& table, const std::vector<std::string>& classes);

struct PromptTemplateSet {
  std::string rgb = "a photo of a {class}";
  std::string edge = "an edge enhanced image of a {class}";
  std::string hf = "a high-frequency enhanced image of a {class}";

  void validate() const;
  /// Template for `kind` with "{class}" replaced; whitespace is collapsed
  /// and the class name lowercased.
  std::string instantiate(const std::string& class_name, ViewKind kind) const;
};

/// Deterministic unit-norm stand-ins for encoder output: each vector is
/// seeded by a hash of its prompt string. Used for hermetic fixtures.
EmbeddingTable pseudo_embeddings(const std::vector<std::string>& classes, const PromptTemplateSet& templates,
                                 std::size_t dim, std::uint64_t seed);

/// Two-layer generator: w = softmax(W2 relu(W1 [t_rgb; t_edge; t_hf] + b1) + b2).
struct WeightNet {
  Tensor w1;  // [hidden x 3*embed_dim]
  Tensor b1;  // [hidden]
  Tensor w2;  // [3 x hidden]
  Tensor b2;  // [3]

  /// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static WeightNet create(std::size_t embed_dim, std::size_t hidden, Rng& rng);

  std::size_t embed_dim() const { return w1.dim(1) / 3; }
  std::size_t hidden() const { return w1.dim(0); }
  std::vector<NamedTensor> parameters(const std::string& prefix = "weightnet.") const;
};

/// Fusion weights for a batch. Embedding tensors are [B x d] (or [d] for a
/// single sample). The softmax runs over `active` views only, so the result
/// is [B x active.size()] with rows summing to one.
Tensor weightnet_forward(Tape& tape, const WeightNet& net, const Tensor& t_rgb, const Tensor& t_edge,
                         const Tensor& t_hf, const std::vector<ViewKind>& active = {ViewKind::rgb, ViewKind::edge, ViewKind::hf});

/// sum_v w[:, v] * features[v]. `weights` is [B x V] (or [V]), each feature
/// [B x d] (or [d]); the result keeps the features' shape.
Tensor fuse_features(Tape& tape, const Tensor& weights, const std::vector<Tensor>& features);

struct FusionWeights {
  double w_rgb = 0.0;
  double w_edge = 0.0;
  double w_hf = 0.0;
};

/// Row `row` of a weight tensor laid out over `active`; inactive views get 0.
FusionWeights fusion_weights_row(const Tensor& weights, std::size_t row, const std::vector<ViewKind>& active);

/// Stacks float32 vectors into a frozen [rows x dim] float64 tensor.
Tensor stack_rows(const std::vector<const std::vector<float>*>& rows);

}  // namespace tmkd::text
