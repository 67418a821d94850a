// SPDX-License-Identifier: Apache-2.0
//
// Distillation losses: temperature-scaled feature KL against the perturbed
// fused teacher feature, logit KD, and a symmetric text-guided InfoNCE.
#pragma once

#include <cstdint>

#include "tmkd/rng.hpp"
#include "tmkd/tensor.hpp"

namespace tmkd::distill {

struct DistillConfig {
  double tau_f = 2.0;
  double tau_l = 4.0;
  double tau_crd = 2.0;
  double alpha = 2.0;        // logit KD weight
  double beta = 0.01;        // CRD weight
  double gamma_loss = 0.1;   // feature KD weight
  double gamma_noise = 0.01; // teacher feature noise scale
  std::uint64_t seed = 0;
  /// Multiply the logit KD term by tau_l^2 (off: the term is a plain KL).
  bool scale_logit_kd_by_tau_sq = false;
  /// Add a plain cross-entropy term on the ground-truth labels.
  bool with_ce = false;
  double ce_weight = 1.0;

  /// Throws ConfigError for non-positive temperatures or negative weights.
  void validate() const;
};

/// F + gamma_noise * eps with eps ~ N(0, 1) drawn from `rng`. The noise is a
/// constant on the tape, so gradients still flow into F. gamma_noise == 0
/// returns F itself and draws nothing.
Tensor perturb_teacher_feature(Tape& tape, const Tensor& fused, double gamma_noise, Rng& rng);

/// tau_f^2 * KL(softmax(F_tilde / tau_f) || softmax(F_s / tau_f)), rows
/// averaged. Inputs are [d] or [B x d].
Tensor feature_loss(Tape& tape, const Tensor& student_proj, const Tensor& teacher_tilde, double tau_f);

/// KL(softmax(z_t / tau_l) || softmax(z_s / tau_l)), rows averaged, times
/// tau_l^2 when `scale_by_tau_sq`.
Tensor logit_loss(Tape& tape, const Tensor& z_t, const Tensor& z_s, double tau_l, bool scale_by_tau_sq = false);

/// Symmetric in-batch InfoNCE over s_ij = z_s^i . z_text^j:
/// -(1/B) sum_i [log softmax_j(s_ij / tau)_i + log softmax_j(s_ji / tau)_i].
/// Rows must be unit-norm within 1e-6 and B >= 2 (ContractError otherwise).
Tensor crd_loss(Tape& tape, const Tensor& z_s, const Tensor& z_text, double tau);

/// Loss terms of one step; an undefined tensor means the term is disabled.
struct LossParts {
  Tensor feat;
  Tensor logit;
  Tensor crd;
  Tensor ce;
};

struct LossReport {
  double l_feat = 0.0;
  double l_logit = 0.0;
  double l_crd = 0.0;
  double l_ce = 0.0;
  double l_all = 0.0;
  double grad_norm = 0.0;  // filled by the trainer after backward
};

struct TotalLoss {
  Tensor loss;
  LossReport report;
};

/// alpha * L_logit + beta * L_crd + gamma_loss * L_feat (+ ce_weight * CE).
/// Terms that are undefined or carry a zero weight are left off the graph, so
/// with beta = gamma_loss = 0 the graph is exactly alpha * L_logit.
TotalLoss total_loss(Tape& tape, const DistillConfig& cfg, const LossParts& parts);

}  // namespace tmkd::distill
