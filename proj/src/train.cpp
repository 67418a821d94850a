// SPDX-License-Identifier: Apache-2.0
#include "tmkd/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "tmkd/errors.hpp"

namespace tmkd::train {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(decay_factor > 0.0)) throw ConfigError("decay_factor must be positive");
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if (decay_epochs[i] >= epochs) {
      throw ConfigError("decay epoch " + std::to_string(decay_epochs[i]) + " is not below epochs " +
                        std::to_string(epochs));
    }
    if (i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) throw ConfigError("decay epochs must be strictly increasing");
  }
}

std::vector<ViewKind> TrainConfig::active_views() const {
  std::vector<ViewKind> v = {ViewKind::rgb};
  if (use_edge_view) v.push_back(ViewKind::edge);
  if (use_hf_view) v.push_back(ViewKind::hf);
  return v;
}

double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  if (epoch < cfg.warmup_epochs) {
    return cfg.lr * static_cast<double>(epoch + 1) / static_cast<double>(cfg.warmup_epochs);
  }
  double lr = cfg.lr;
  for (auto d : cfg.decay_epochs)
    if (epoch >= d) lr *= cfg.decay_factor;
  return lr;
}

void sgd_step(const std::vector<NamedTensor>& params, SgdState& state, const TrainConfig& cfg, std::size_t epoch) {
  if (state.velocity.empty()) {
    for (const auto& [name, t] : params) state.velocity.emplace_back(t.numel(), 0.0);
  }
  if (state.velocity.size() != params.size()) throw ContractError("optimizer state does not match the parameter list");
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw ContractError("parameter '" + name + "' has no gradient");
  }
  const double lr = learning_rate(cfg, epoch);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    auto data = t.mutable_data();
    auto grad = t.grad();
    auto& v = state.velocity[p];
    for (std::size_t i = 0; i < data.size(); ++i) {
      v[i] = cfg.momentum * v[i] + (grad[i] + cfg.weight_decay * data[i]);
      data[i] = data[i] - lr * v[i];
    }
  }
}

Trainables Trainables::create(std::size_t d_in, std::size_t n_classes, std::size_t teacher_d_feat,
                              std::size_t embed_dim, const ModelConfig& mcfg, Rng& rng) {
  Trainables m;
  m.student = models::MlpNet::create(models::Role::student, d_in, mcfg.student_hidden, n_classes, rng);
  const std::size_t d_s = m.student.d_feat();
  m.feat_proj = models::Projector::create(d_s, teacher_d_feat, rng);
  m.crd_student = models::Projector::create(d_s, mcfg.d_common, rng);
  m.crd_text = models::Projector::create(embed_dim, mcfg.d_common, rng);
  m.weightnet = text::WeightNet::create(embed_dim, mcfg.weightnet_hidden, rng);
  return m;
}

std::vector<NamedTensor> Trainables::all_parameters() const {
  auto out = student.parameters("student.");
  for (auto& p : feat_proj.parameters("feat_proj")) out.push_back(p);
  for (auto& p : crd_student.parameters("crd_student")) out.push_back(p);
  for (auto& p : crd_text.parameters("crd_text")) out.push_back(p);
  for (auto& p : weightnet.parameters("weightnet.")) out.push_back(p);
  return out;
}

bool feat_enabled(const TrainConfig& cfg, const distill::DistillConfig& dcfg) {
  return cfg.use_feat_loss && dcfg.gamma_loss > 0.0;
}

bool crd_enabled(const TrainConfig& cfg, const distill::DistillConfig& dcfg) {
  return cfg.use_crd_loss && dcfg.beta > 0.0;
}

std::vector<NamedTensor> trainable_parameters(const Trainables& m, const TrainConfig& cfg,
                                              const distill::DistillConfig& dcfg) {
  auto out = m.student.parameters("student.");
  const bool feat = feat_enabled(cfg, dcfg);
  if (feat) {
    for (auto& p : m.feat_proj.parameters("feat_proj")) out.push_back(p);
  }
  if (crd_enabled(cfg, dcfg)) {
    for (auto& p : m.crd_student.parameters("crd_student")) out.push_back(p);
    for (auto& p : m.crd_text.parameters("crd_text")) out.push_back(p);
  }
  if (cfg.active_views().size() > 1 && feat) {
    for (auto& p : m.weightnet.parameters("weightnet.")) out.push_back(p);
  }
  return out;
}

StepOutput step_loss(Tape& tape, const models::MlpNet& teacher, const Trainables& m, const StepBatch& batch,
                     const TrainConfig& cfg, const distill::DistillConfig& dcfg, const ModelConfig& mcfg,
                     Rng& noise_rng) {
  const auto active = cfg.active_views();
  const std::size_t b = batch.x.dim(0);
  auto student = models::forward(tape, m.student, batch.x);

  std::vector<Tensor> feats;
  for (auto k : active) {
    const Tensor& f = k == ViewKind::rgb ? batch.f_rgb : (k == ViewKind::edge ? batch.f_edge : batch.f_hf);
    if (!f.defined()) throw ContractError("teacher features missing for an active view");
    feats.push_back(f);
  }
  StepOutput out;
  Tensor fused;
  if (active.size() == 1) {
    out.weights = Tensor::full({b, 1}, 1.0);
    fused = feats[0];
  } else {
    out.weights = text::weightnet_forward(tape, m.weightnet, batch.t_rgb, batch.t_edge, batch.t_hf, active);
    fused = text::fuse_features(tape, out.weights, feats);
  }

  distill::LossParts parts;
  // Teacher logits are a fixed target: the weight net learns through the
  // feature term only.
  if (batch.z_t.defined()) {
    out.z_t = batch.z_t;
  } else {
    const Tensor source = mcfg.teacher_logits == TeacherLogits::fused ? fused.detach() : batch.f_rgb;
    out.z_t = models::teacher_logits_from_fused(tape, teacher, source);
  }
  parts.logit = distill::logit_loss(tape, out.z_t, student.logits, dcfg.tau_l, dcfg.scale_logit_kd_by_tau_sq);
  if (feat_enabled(cfg, dcfg)) {
    auto tilde = distill::perturb_teacher_feature(tape, fused, dcfg.gamma_noise, noise_rng);
    parts.feat = distill::feature_loss(tape, m.feat_proj.apply(tape, student.feature), tilde, dcfg.tau_f);
  }
  if (crd_enabled(cfg, dcfg)) {
    auto z_s = ops::l2_normalize(tape, m.crd_student.apply(tape, student.feature));
    auto z_text = ops::l2_normalize(tape, m.crd_text.apply(tape, batch.t_rgb));
    parts.crd = distill::crd_loss(tape, z_s, z_text, dcfg.tau_crd);
  }
  if (dcfg.with_ce) parts.ce = ops::nll(tape, ops::log_softmax(tape, student.logits, -1), batch.labels);
  out.total = distill::total_loss(tape, dcfg, parts);
  return out;
}

EvalResult evaluate_logits(const Tensor& logits, const std::vector<std::size_t>& labels, std::size_t k) {
  if (logits.rank() != 2) throw DimensionError("evaluate: logits must be [N x C]");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (n == 0) throw ContractError("evaluate: empty dataset");
  if (labels.size() != n) throw DimensionError("evaluate: label count differs from logit rows");
  if (k == 0 || k > c) throw ConfigError("top-k with k = " + std::to_string(k) + " over " + std::to_string(c) + " classes");
  std::size_t hit1 = 0, hitk = 0;
  std::vector<std::size_t> per_class(c, 0), correct(c, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = labels[i];
    if (y >= c) throw ContractError("evaluate: label out of range");
    const double v = logits[i * c + y];
    std::size_t rank = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const double u = logits[i * c + j];
      if (u > v || (u == v && j < y)) ++rank;
    }
    ++per_class[y];
    if (rank == 0) {
      ++hit1;
      ++correct[y];
    }
    if (rank < k) ++hitk;
  }
  EvalResult r;
  r.k = k;
  r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(n);
  r.topk = 100.0 * static_cast<double>(hitk) / static_cast<double>(n);
  double recall = 0.0;
  std::size_t present = 0;
  for (std::size_t j = 0; j < c; ++j) {
    if (per_class[j] == 0) continue;
    recall += static_cast<double>(correct[j]) / static_cast<double>(per_class[j]);
    ++present;
  }
  r.macro_recall = 100.0 * recall / static_cast<double>(present);
  return r;
}

namespace {

Tensor infer_logits(const models::MlpNet& net, const Tensor& x) {
  Tape tape;
  return models::forward(tape, net, x).logits.detach();
}

}  // namespace

EvalResult evaluate(const models::MlpNet& net, const Tensor& x, const std::vector<std::size_t>& labels) {
  return evaluate_logits(infer_logits(net, x), labels, std::min<std::size_t>(5, net.n_classes()));
}

ClassifierLog train_classifier(models::MlpNet& net, const Tensor& x, const std::vector<std::size_t>& labels,
                               const Tensor& x_test, const std::vector<std::size_t>& test_labels,
                               const TrainConfig& cfg) {
  cfg.validate();
  auto params = net.parameters();
  SgdState state;
  ClassifierLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = data::epoch_permutation(cfg.seed, epoch, x.dim(0));
    double total = 0.0;
    std::size_t batches = 0;
    for (const auto& idx : data::make_batches(order, cfg.batch_size, 1)) {
      std::vector<std::size_t> y;
      for (auto i : idx) y.push_back(labels[i]);
      Tape tape;
      auto logits = models::forward(tape, net, data::gather_rows(x, idx)).logits;
      auto loss = ops::nll(tape, ops::log_softmax(tape, logits, -1), y);
      const double value = loss.item();
      if (!std::isfinite(value)) throw DivergenceError("classifier loss is not finite", epoch);
      tape.backward(loss);
      sgd_step(params, state, cfg, epoch);
      total += value;
      ++batches;
    }
    log.epoch_loss.push_back(total / static_cast<double>(batches));
    log.train_top1.push_back(evaluate(net, x, labels).top1);
    if (x_test.defined()) log.test_top1.push_back(evaluate(net, x_test, test_labels).top1);
  }
  return log;
}

namespace {

struct ViewFeatures {
  Tensor rgb, edge, hf;
};

ViewFeatures teacher_features(const models::MlpNet& teacher, const data::ViewMatrix& v, const TrainConfig& cfg) {
  Tape tape;
  ViewFeatures f;
  f.rgb = models::forward(tape, teacher, v.rgb).feature.detach();
  if (cfg.use_edge_view) f.edge = models::forward(tape, teacher, v.edge).feature.detach();
  if (cfg.use_hf_view) f.hf = models::forward(tape, teacher, v.hf).feature.detach();
  return f;
}

std::vector<text::ClassEmbeddings> class_embeddings(const text::EmbeddingTable& table,
                                                    const std::vector<std::string>& classes, bool per_class) {
  std::vector<text::ClassEmbeddings> out;
  for (const auto& c : classes) out.push_back(text::lookup_class_embeddings(table, c));
  if (!per_class) {
    text::ClassEmbeddings mean{std::vector<float>(table.dim(), 0.0f), std::vector<float>(table.dim(), 0.0f),
                               std::vector<float>(table.dim(), 0.0f)};
    for (auto kind : text::kAllViews) {
      std::vector<double> acc(table.dim(), 0.0);
      for (const auto& e : out)
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e.get(kind)[i];
      auto& dst = kind == ViewKind::rgb ? mean.rgb : (kind == ViewKind::edge ? mean.edge : mean.hf);
      for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<float>(acc[i] / static_cast<double>(out.size()));
    }
    std::fill(out.begin(), out.end(), mean);
  }
  return out;
}

double grad_norm(const std::vector<NamedTensor>& params) {
  double ss = 0.0;
  for (const auto& [name, t] : params)
    if (t.has_grad())
      for (double g : t.grad()) ss += g * g;
  return std::sqrt(ss);
}

std::vector<NamedTensor> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : params) out.emplace_back(name, t.detach());
  return out;
}

}  // namespace

DistillRun run_distillation(const DistillInputs& in, const TrainConfig& cfg, const distill::DistillConfig& dcfg,
                   const ModelConfig& mcfg, const StepObserver& observer) {
  cfg.validate();
  dcfg.validate();
  if (in.train.size() == 0 || in.test.size() == 0) throw ContractError("distill needs nonempty train and test splits");
  if (in.train.dim() != in.teacher.d_in()) throw DimensionError("teacher input size does not match the views");
  const auto missing = text::missing_keys(in.table, in.class_names);
  if (!missing.empty()) {
    std::string list;
    for (const auto& k : missing) list += (list.empty() ? "" : ", ") + k;
    throw LookupError(list);
  }
  const bool any_term = dcfg.alpha > 0.0 || feat_enabled(cfg, dcfg) || crd_enabled(cfg, dcfg) ||
                        (dcfg.with_ce && dcfg.ce_weight > 0.0);
  if (!any_term) throw ConfigError("every loss term is disabled or has zero weight");

  const auto active = cfg.active_views();
  in.teacher.set_frozen(true);
  const auto teacher_params = in.teacher.parameters("teacher.");
  DistillRun run;
  run.teacher_checksum = models::checksum(teacher_params);

  const auto tf = teacher_features(in.teacher, in.train, cfg);
  const auto emb = class_embeddings(in.table, in.class_names, mcfg.per_class_weights);
  const std::size_t n_classes = in.class_names.size();

  Rng init_rng(mix_seed(cfg.seed, 0x494e4954ULL));
  run.model = Trainables::create(in.train.dim(), n_classes, in.teacher.d_feat(), in.table.dim(), mcfg, init_rng);
  Rng noise_rng(mix_seed(dcfg.seed, 0x4e4f495345ULL));
  const auto params = trainable_parameters(run.model, cfg, dcfg);
  const std::size_t min_batch = crd_enabled(cfg, dcfg) ? 2 : 1;
  SgdState state;
  double best = -1.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochMetrics row;
    row.epoch = epoch;
    double w_sum[3] = {0.0, 0.0, 0.0};
    std::size_t seen = 0, step = 0;
    const auto batches = data::make_batches(data::epoch_permutation(cfg.seed, epoch, in.train.size()),
                                            cfg.batch_size, min_batch);
    for (const auto& idx : batches) {
      StepBatch batch;
      batch.x = data::gather_rows(in.train.rgb, idx);
      batch.f_rgb = data::gather_rows(tf.rgb, idx);
      if (tf.edge.defined()) batch.f_edge = data::gather_rows(tf.edge, idx);
      if (tf.hf.defined()) batch.f_hf = data::gather_rows(tf.hf, idx);
      std::vector<const std::vector<float>*> tr, te, th;
      for (auto i : idx) {
        const auto y = in.train.labels[i];
        batch.labels.push_back(y);
        tr.push_back(&emb[y].rgb);
        te.push_back(&emb[y].edge);
        th.push_back(&emb[y].hf);
      }
      batch.t_rgb = text::stack_rows(tr);
      batch.t_edge = text::stack_rows(te);
      batch.t_hf = text::stack_rows(th);

      Tape tape;
      auto out = step_loss(tape, in.teacher, run.model, batch, cfg, dcfg, mcfg, noise_rng);
      const auto& rep = out.total.report;
      if (!std::isfinite(rep.l_all)) throw DivergenceError("distillation loss is not finite", epoch);
      tape.backward(out.total.loss);
      out.total.report.grad_norm = grad_norm(params);
      sgd_step(params, state, cfg, epoch);
      if (observer) observer(epoch, step, run.model);
      ++step;

      row.l_feat += rep.l_feat;
      row.l_logit += rep.l_logit;
      row.l_crd += rep.l_crd;
      row.l_all += rep.l_all;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto w = text::fusion_weights_row(out.weights, r, active);
        w_sum[0] += w.w_rgb;
        w_sum[1] += w.w_edge;
        w_sum[2] += w.w_hf;
      }
      seen += idx.size();
    }
    const double nb = static_cast<double>(batches.size());
    row.l_feat /= nb;
    row.l_logit /= nb;
    row.l_crd /= nb;
    row.l_all /= nb;
    row.w_rgb = w_sum[0] / static_cast<double>(seen);
    row.w_edge = w_sum[1] / static_cast<double>(seen);
    row.w_hf = w_sum[2] / static_cast<double>(seen);
    row.train_top1 = evaluate(run.model.student, in.train.rgb, in.train.labels).top1;
    const auto test = evaluate(run.model.student, in.test.rgb, in.test.labels);
    row.test_top1 = test.top1;
    row.test_top5 = test.topk;
    row.macro_recall = test.macro_recall;
    run.log.push_back(row);
    if (row.test_top1 > best) {
      best = row.test_top1;
      run.best_epoch = epoch;
      run.best_checkpoint = snapshot(run.model.all_parameters());
    }
    if (models::checksum(teacher_params) != run.teacher_checksum) {
      throw std::logic_error("teacher parameters changed during distillation");
    }
  }

  const auto logits = infer_logits(run.model.student, in.test.rgb);
  std::vector<double> mean(n_classes * n_classes, 0.0);
  std::vector<std::size_t> count(n_classes, 0);
  for (std::size_t i = 0; i < in.test.size(); ++i) {
    const auto y = in.test.labels[i];
    ++count[y];
    for (std::size_t c = 0; c < n_classes; ++c) mean[y * n_classes + c] += logits[i * n_classes + c];
  }
  for (std::size_t y = 0; y < n_classes; ++y)
    for (std::size_t c = 0; c < n_classes; ++c)
      if (count[y]) mean[y * n_classes + c] /= static_cast<double>(count[y]);
  run.class_mean_logits = Tensor({n_classes, n_classes}, std::move(mean));
  return run;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  std::string s = buf;
  if (s == "-0.000000") s = "0.000000";
  return s;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

// The three weights at 6 decimals, rounded by largest remainder so the
// printed row still sums to exactly 1. Independent rounding can be off by
// 1.5e-6.
std::string weight_cells(const EpochMetrics& r) {
  const double w[3] = {r.w_rgb, r.w_edge, r.w_hf};
  if (std::abs(w[0] + w[1] + w[2] - 1.0) > 1e-9) return fixed6(w[0]) + "," + fixed6(w[1]) + "," + fixed6(w[2]);
  long long units[3];
  double frac[3];
  long long total = 0;
  for (int i = 0; i < 3; ++i) {
    const double scaled = w[i] * 1e6;
    units[i] = static_cast<long long>(std::floor(scaled));
    frac[i] = scaled - static_cast<double>(units[i]);
    total += units[i];
  }
  for (long long left = 1000000 - total; left > 0; --left) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (frac[i] > frac[best]) best = i;
    ++units[best];
    frac[best] = -1.0;
  }
  std::string out;
  for (int i = 0; i < 3; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%lld.%06lld", i ? "," : "", units[i] / 1000000, units[i] % 1000000);
    out += buf;
  }
  return out;
}

}  // namespace

void write_metrics_csv(const std::vector<EpochMetrics>& log, const std::filesystem::path& path) {
  std::string s =
      "epoch,l_feat,l_logit,l_crd,l_all,train_top1,test_top1,test_top5,macro_recall,w_rgb,w_edge,w_hf\n";
  for (const auto& r : log) {
    s += std::to_string(r.epoch);
    for (double v : {r.l_feat, r.l_logit, r.l_crd, r.l_all, r.train_top1, r.test_top1, r.test_top5, r.macro_recall})
      s += "," + fixed6(v);
    s += "," + weight_cells(r) + "\n";
  }
  write_text(path, s);
}

void write_weights_csv(const std::vector<EpochMetrics>& log, const std::filesystem::path& path) {
  std::string s = "epoch,w_rgb,w_edge,w_hf\n";
  for (const auto& r : log) {
    s += std::to_string(r.epoch) + "," + weight_cells(r) + "\n";
  }
  write_text(path, s);
}

void write_logits_csv(const Tensor& class_mean_logits, const std::vector<std::string>& class_names,
                      const std::filesystem::path& path) {
  const std::size_t c = class_mean_logits.dim(1);
  std::string s = "class";
  for (std::size_t j = 0; j < c; ++j) s += ",logit_" + std::to_string(j);
  s += "\n";
  for (std::size_t i = 0; i < class_mean_logits.dim(0); ++i) {
    s += i < class_names.size() ? class_names[i] : std::to_string(i);
    for (std::size_t j = 0; j < c; ++j) s += "," + fixed6(class_mean_logits.at(i, j));
    s += "\n";
  }
  write_text(path, s);
}

}  // namespace tmkd::train
