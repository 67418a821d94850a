// SPDX-License-Identifier: Apache-2.0
#include "tmkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tmkd/errors.hpp"
#include "tmkd/train.hpp"

namespace tmkd {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult check_gradients(const std::vector<NamedTensor>& params,
                                const std::function<Tensor(Tape&)>& loss_fn,
                                double step) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
    for (const auto& [name, t] : params) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
    }
    tape.clear();
  }

  auto eval = [&]() {
    Tape tape;
    return loss_fn(tape).item();
  };

  GradCheckResult res;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double up = eval();
      data[i] = orig - step;
      const double down = eval();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[p][i], numeric);
      ++res.checked;
      if (err > res.max_rel_error || res.worst_param.empty()) {
        res.max_rel_error = err;
        res.worst_param = params[p].first;
        res.worst_index = i;
        res.analytic = analytic[p][i];
        res.numeric = numeric;
      }
    }
  }
  return res;
}

namespace {

struct Trial {
  models::MlpNet teacher;
  train::Trainables model;
  train::StepBatch batch;
  double relu_margin = 0.0;
};

Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor({rows, cols}, std::move(v));
}

Trial make_trial(Rng& rng, const train::ModelConfig& mcfg) {
  constexpr std::size_t kIn = 8, kClasses = 3, kEmbed = 4, kBatch = 5;
  Trial t;
  t.teacher = models::MlpNet::create(models::Role::teacher, kIn, mcfg.teacher_hidden, kClasses, rng);
  t.model = train::Trainables::create(kIn, kClasses, t.teacher.d_feat(), kEmbed, mcfg, rng);
  auto& b = t.batch;
  b.x = random_matrix(rng, kBatch, kIn, 0.0, 1.0);
  Tape tape;
  b.f_rgb = models::forward(tape, t.teacher, b.x).feature.detach();
  b.f_edge = models::forward(tape, t.teacher, random_matrix(rng, kBatch, kIn, 0.0, 1.0)).feature.detach();
  b.f_hf = models::forward(tape, t.teacher, random_matrix(rng, kBatch, kIn, 0.0, 1.0)).feature.detach();
  std::vector<std::vector<float>> emb(3 * kClasses, std::vector<float>(kEmbed));
  for (auto& e : emb)
    for (auto& x : e) x = static_cast<float>(rng.normal());
  std::vector<const std::vector<float>*> tr, te, th;
  for (std::size_t i = 0; i < kBatch; ++i) {
    const std::size_t y = rng.index(kClasses);
    b.labels.push_back(y);
    tr.push_back(&emb[3 * y]);
    te.push_back(&emb[3 * y + 1]);
    th.push_back(&emb[3 * y + 2]);
  }
  b.t_rgb = text::stack_rows(tr);
  b.t_edge = text::stack_rows(te);
  b.t_hf = text::stack_rows(th);
  return t;
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t trials, double tol) {
  train::ModelConfig mcfg;
  mcfg.teacher_hidden = {8, 6};
  mcfg.student_hidden = {8};
  mcfg.d_common = 3;
  mcfg.weightnet_hidden = 5;
  const train::TrainConfig cfg;
  distill::DistillConfig full;
  full.gamma_noise = 0.0;

  struct Term {
    const char* name;
    double alpha, beta, gamma;
  };
  const Term terms[] = {{"l_feat", 0.0, 0.0, 1.0},
                        {"l_logit", 1.0, 0.0, 0.0},
                        {"l_crd", 0.0, 1.0, 0.0},
                        {"l_all", full.alpha, full.beta, full.gamma_loss}};

  GradcheckReport report;
  for (const auto& term : terms) report.terms.push_back({term.name, 0.0, ""});
  report.trials = trials;
  Rng rng(mix_seed(seed, 0x4752414443ULL));
  // A relu input within this distance of zero can flip sign under the finite-difference step.
  constexpr double kMargin = 1e-4;
  for (std::size_t done = 0; done < trials;) {
    Trial t = make_trial(rng, mcfg);
    const auto params = t.model.all_parameters();
    Rng unused(0);
    try {
      Tape probe;
      auto out = train::step_loss(probe, t.teacher, t.model, t.batch, cfg, full, mcfg, unused);
      if (probe.relu_margin() < kMargin) {
        ++report.screened;
        continue;
      }
      // The KD target is a stop-gradient constant; finite differences must see it fixed too.
      t.batch.z_t = out.z_t.detach();
    } catch (const NumericError&) {
      // every student unit dead on some row: nothing to normalise
      ++report.screened;
      continue;
    }
    for (std::size_t k = 0; k < std::size(terms); ++k) {
      distill::DistillConfig d = full;
      d.alpha = terms[k].alpha;
      d.beta = terms[k].beta;
      d.gamma_loss = terms[k].gamma;
      // A zero weight drops a term from the graph.
      auto loss = [&](Tape& tape) {
        Rng r(0);
        return train::step_loss(tape, t.teacher, t.model, t.batch, cfg, d, mcfg, r).total.loss;
      };
      const auto res = check_gradients(params, loss);
      auto& slot = report.terms[k];
      if (res.max_rel_error > slot.worst_rel_error || slot.worst_param.empty()) {
        slot.worst_rel_error = res.max_rel_error;
        slot.worst_param = res.worst_param;
      }
    }
    ++done;
  }
  report.passed = true;
  for (const auto& term : report.terms) {
    if (!(term.worst_rel_error < tol)) {
      report.passed = false;
      if (report.failing_term.empty()) {
        report.failing_term = term.term;
        report.failing_param = term.worst_param;
      }
    }
  }
  return report;
}

std::string format_report(const GradcheckReport& report, double tol) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "gradcheck: %zu trials (%zu degenerate draws skipped), tol %.1e\n", report.trials,
                report.screened, tol);
  std::string s = buf;
  for (const auto& t : report.terms) {
    std::snprintf(buf, sizeof buf, "  %-8s worst rel err %.3e  (%s)\n", t.term.c_str(), t.worst_rel_error,
                  t.worst_param.c_str());
    s += buf;
  }
  s += report.passed ? "PASS\n" : "FAIL: " + report.failing_term + " at " + report.failing_param + "\n";
  return s;
}

}  // namespace tmkd
