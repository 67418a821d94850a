// SPDX-License-Identifier: Apache-2.0
//
// Teacher and student MLPs over flattened views, the affine projectors used
// by the distillation losses, and the TMKD-CKPT checkpoint format.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tmkd/gradcheck.hpp"
#include "tmkd/rng.hpp"
#include "tmkd/tensor.hpp"

namespace tmkd::models {

enum class Role { teacher, student };

struct Linear {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  std::size_t in() const { return weight.dim(1); }
  std::size_t out() const { return weight.dim(0); }
};

/// d_in -> hidden[0] -> ... -> hidden.back() (= d_feat) -> n_classes.
/// Every hidden layer is affine + relu; the classifier is affine only.
struct MlpNet {
  Role role = Role::student;
  std::vector<Linear> hidden;
  Linear classifier;

  /// Hidden weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), classifier weights
  /// ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
  static MlpNet create(Role role, std::size_t d_in, const std::vector<std::size_t>& hidden_sizes,
                       std::size_t n_classes, Rng& rng);

  std::size_t d_in() const { return hidden.front().in(); }
  std::size_t d_feat() const { return classifier.in(); }
  std::size_t n_classes() const { return classifier.out(); }

  /// Names are "layer<i>.weight|bias" and "classifier.weight|bias".
  std::vector<NamedTensor> parameters(const std::string& prefix = "") const;
  /// Frozen tensors record nothing on the tape.
  void set_frozen(bool frozen);
};

struct Output {
  Tensor feature;  // post-relu activation of the last hidden layer
  Tensor logits;
};

/// `x` is [B x d_in] or [d_in]; outputs keep the same leading shape.
Output forward(Tape& tape, const MlpNet& net, const Tensor& x);

/// Single affine map d_src -> d_common.
struct Projector {
  Linear map;

  static Projector create(std::size_t d_src, std::size_t d_common, Rng& rng);
  Tensor apply(Tape& tape, const Tensor& x) const;
  std::vector<NamedTensor> parameters(const std::string& prefix) const;
};

struct TeacherViews {
  Output rgb;
  Output edge;
  Output hf;
};

/// The same teacher applied to each view independently. An undefined view
/// tensor is a ContractError.
TeacherViews teacher_multiview_forward(Tape& tape, const MlpNet& teacher, const Tensor& rgb,
                                       const Tensor& edge, const Tensor& hf);

/// The teacher's classifier layer applied to a fused feature.
Tensor teacher_logits_from_fused(Tape& tape, const MlpNet& teacher, const Tensor& fused);

/// Parameter-wise checksum (FNV-1a over the raw float64 bytes).
std::uint64_t checksum(const std::vector<NamedTensor>& params);

// TMKD-CKPT v1: "TMKC", u32 version = 1, u32 count, then per tensor u16 name
// length, name, u8 rank, rank x u32 dims, float64 payload (little-endian).
std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors);
/// Returned tensors are plain (no gradient). ParseError carries byte offsets.
std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `params` matched by name and shape. Throws
/// LookupError for a missing name and DimensionError for a shape mismatch.
void assign(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& checkpoint);

/// Rebuilds an MlpNet from "<prefix>layer<i>" / "<prefix>classifier" tensors.
MlpNet net_from_checkpoint(const std::vector<NamedTensor>& checkpoint, const std::string& prefix, Role role);

}  // namespace tmkd::models
