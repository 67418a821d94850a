// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tmkd/tensor.hpp"

namespace tmkd {

/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
double relative_error(double analytic, double numeric);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

using NamedTensor = std::pair<std::string, Tensor>;

/// Compares tape gradients of `loss_fn` against central finite differences
/// for every element of every tensor in `params`. `loss_fn` must rebuild the
/// graph from the current parameter values on each call.
GradCheckResult check_gradients(const std::vector<NamedTensor>& params,
                                const std::function<Tensor(Tape&)>& loss_fn,
                                double step = 1e-5);

struct GradcheckTermReport {
  std::string term;
  double worst_rel_error = 0.0;
  std::string worst_param;
};

struct GradcheckReport {
  std::vector<GradcheckTermReport> terms;  // l_feat, l_logit, l_crd, l_all
  std::size_t trials = 0;
  std::size_t screened = 0;  // trials re-drawn: a relu near its kink or a dead feature row
  bool passed = false;
  std::string failing_param;
  std::string failing_term;
};

/// Finite-difference suite over a small randomly initialised end-to-end
/// distillation graph (student, projectors, weight net; noise off).
GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t trials, double tol);

std::string format_report(const GradcheckReport& report, double tol);

}  // namespace tmkd
