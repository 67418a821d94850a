// SPDX-License-Identifier: Apache-2.0
#include "tmkd/distill.hpp"

#include <cmath>
#include <string>

#include "tmkd/errors.hpp"

namespace tmkd::distill {
namespace {

Tensor as_rows(Tape& tape, const Tensor& t) {
  if (t.rank() == 1) return ops::reshape(tape, t, {1, t.dim(0)});
  if (t.rank() == 2) return t;
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
}

void require_nonneg(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    throw ConfigError(std::string(name) + " must be nonnegative, got " + std::to_string(v));
  }
}

// KL(softmax(t / tau) || softmax(s / tau)).
Tensor tempered_kl(Tape& tape, const Tensor& teacher, const Tensor& student, double tau, const char* op) {
  if (teacher.shape() != student.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(student.shape()) + " vs " +
                         shape_str(teacher.shape()));
  }
  const double inv = 1.0 / tau;
  auto target = ops::softmax(tape, ops::scale(tape, as_rows(tape, teacher), inv), -1);
  auto log_q = ops::log_softmax(tape, ops::scale(tape, as_rows(tape, student), inv), -1);
  return ops::kl_div(tape, target, log_q);
}

}  // namespace

void DistillConfig::validate() const {
  require_positive(tau_f, "tau_f");
  require_positive(tau_l, "tau_l");
  require_positive(tau_crd, "tau_crd");
  require_nonneg(alpha, "alpha");
  require_nonneg(beta, "beta");
  require_nonneg(gamma_loss, "gamma_loss");
  require_nonneg(gamma_noise, "gamma_noise");
  require_nonneg(ce_weight, "ce_weight");
}

Tensor perturb_teacher_feature(Tape& tape, const Tensor& fused, double gamma_noise, Rng& rng) {
  require_nonneg(gamma_noise, "gamma_noise");
  if (gamma_noise == 0.0) return fused;
  std::vector<double> eps(fused.numel());
  for (auto& e : eps) e = gamma_noise * rng.normal();
  return ops::add(tape, fused, Tensor(fused.shape(), std::move(eps)));
}

Tensor feature_loss(Tape& tape, const Tensor& student_proj, const Tensor& teacher_tilde, double tau_f) {
  require_positive(tau_f, "tau_f");
  return ops::scale(tape, tempered_kl(tape, teacher_tilde, student_proj, tau_f, "feature_loss"), tau_f * tau_f);
}

Tensor logit_loss(Tape& tape, const Tensor& z_t, const Tensor& z_s, double tau_l, bool scale_by_tau_sq) {
  require_positive(tau_l, "tau_l");
  auto kl = tempered_kl(tape, z_t, z_s, tau_l, "logit_loss");
  return scale_by_tau_sq ? ops::scale(tape, kl, tau_l * tau_l) : kl;
}

Tensor crd_loss(Tape& tape, const Tensor& z_s, const Tensor& z_text, double tau) {
  require_positive(tau, "tau_crd");
  if (z_s.rank() != 2 || z_s.shape() != z_text.shape()) {
    throw DimensionError("crd_loss: expected two [B x d] batches of equal shape, got " + shape_str(z_s.shape()) +
                         " and " + shape_str(z_text.shape()));
  }
  const std::size_t b = z_s.dim(0), d = z_s.dim(1);
  if (b < 2) throw ContractError("crd_loss: batch of " + std::to_string(b) + " has no negatives (need B >= 2)");
  for (const auto* z : {&z_s, &z_text}) {
    for (std::size_t r = 0; r < b; ++r) {
      double ss = 0.0;
      for (std::size_t k = 0; k < d; ++k) ss += (*z)[r * d + k] * (*z)[r * d + k];
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
        throw ContractError("crd_loss: row " + std::to_string(r) + " is not unit-norm (norm " +
                            std::to_string(std::sqrt(ss)) + ")");
      }
    }
  }
  auto s = ops::scale(tape, ops::matmul(tape, z_s, ops::transpose(tape, z_text)), 1.0 / tau);
  auto rows = ops::trace(tape, ops::log_softmax(tape, s, 1));
  auto cols = ops::trace(tape, ops::log_softmax(tape, s, 0));
  return ops::scale(tape, ops::add(tape, rows, cols), -1.0 / static_cast<double>(b));
}

TotalLoss total_loss(Tape& tape, const DistillConfig& cfg, const LossParts& parts) {
  TotalLoss out;
  auto& rep = out.report;
  Tensor sum;
  auto term = [&](const Tensor& t, double weight, double& slot) {
    if (!t.defined()) return;
    slot = t.item();
    if (weight == 0.0) return;
    auto w = ops::scale(tape, t, weight);
    sum = sum.defined() ? ops::add(tape, sum, w) : w;
  };
  term(parts.logit, cfg.alpha, rep.l_logit);
  term(parts.crd, cfg.beta, rep.l_crd);
  term(parts.feat, cfg.gamma_loss, rep.l_feat);
  if (cfg.with_ce) term(parts.ce, cfg.ce_weight, rep.l_ce);
  out.loss = sum.defined() ? sum : Tensor::scalar(0.0);
  rep.l_all = out.loss.item();
  return out;
}

}  // namespace tmkd::distill
