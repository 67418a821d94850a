// SPDX-License-Identifier: Apache-2.0
//
// SGD with warmup and step decay, teacher pretraining, the TMKD distillation
// loop, evaluation, and the run CSVs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tmkd/dataset.hpp"
#include "tmkd/distill.hpp"
#include "tmkd/models.hpp"
#include "tmkd/textguide.hpp"

namespace tmkd::train {

using views::ViewKind;

struct TrainConfig {
  double lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t warmup_epochs = 5;
  std::vector<std::size_t> decay_epochs = {15, 25};
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  bool use_edge_view = true;
  bool use_hf_view = true;
  bool use_feat_loss = true;
  bool use_crd_loss = true;

  void validate() const;
  std::vector<ViewKind> active_views() const;
};

/// base * (epoch + 1) / warmup during warmup, then base * decay_factor^k
/// where k counts the decay epochs already reached.
double learning_rate(const TrainConfig& cfg, std::size_t epoch);

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// v = momentum * v + (g + weight_decay * p); p -= lr(epoch) * v.
/// A parameter without a gradient is a ContractError.
void sgd_step(const std::vector<NamedTensor>& params, SgdState& state, const TrainConfig& cfg, std::size_t epoch);

enum class TeacherLogits { fused, rgb };

struct ModelConfig {
  std::vector<std::size_t> teacher_hidden = {256, 128};
  std::vector<std::size_t> student_hidden = {64};
  std::size_t d_common = 64;
  std::size_t weightnet_hidden = 64;
  /// false: every sample uses the class-mean prompt embeddings, giving one
  /// global weight triple.
  bool per_class_weights = true;
  TeacherLogits teacher_logits = TeacherLogits::fused;
};

/// Everything the distillation step updates.
struct Trainables {
  models::MlpNet student;
  models::Projector feat_proj;    // student d_feat -> teacher d_feat
  models::Projector crd_student;  // student d_feat -> d_common
  models::Projector crd_text;     // embedding dim -> d_common
  text::WeightNet weightnet;

  static Trainables create(std::size_t d_in, std::size_t n_classes, std::size_t teacher_d_feat, std::size_t embed_dim,
                           const ModelConfig& mcfg, Rng& rng);
  std::vector<NamedTensor> all_parameters() const;
};

bool feat_enabled(const TrainConfig& cfg, const distill::DistillConfig& dcfg);
bool crd_enabled(const TrainConfig& cfg, const distill::DistillConfig& dcfg);

/// The tensors that receive a gradient under the given flags. The weight net
/// learns only through the feature term, so it is included only when that
/// term is on and more than one view is active.
std::vector<NamedTensor> trainable_parameters(const Trainables& m, const TrainConfig& cfg,
                                              const distill::DistillConfig& dcfg);

struct StepBatch {
  Tensor x;                    // student input: rgb view rows
  Tensor f_rgb, f_edge, f_hf;  // cached teacher features (undefined when the view is off)
  Tensor t_rgb, t_edge, t_hf;  // prompt embeddings of each sample's class
  std::vector<std::size_t> labels;
  /// Teacher logits to use as the KD target instead of computing them from
  /// the fused feature. Lets a gradient check hold the target fixed.
  Tensor z_t;
};

struct StepOutput {
  distill::TotalLoss total;
  Tensor weights;  // [B x active views]
  Tensor z_t;      // the (constant) KD target used
};

/// Forward graph of one distillation step.
StepOutput step_loss(Tape& tape, const models::MlpNet& teacher, const Trainables& m, const StepBatch& batch,
                     const TrainConfig& cfg, const distill::DistillConfig& dcfg, const ModelConfig& mcfg,
                     Rng& noise_rng);

struct EvalResult {
  double top1 = 0.0;
  double topk = 0.0;
  double macro_recall = 0.0;
  std::size_t k = 0;
};

/// Top-k by logit rank, ties broken toward the lower class index. k > C is a
/// ConfigError. Accuracies are percentages.
EvalResult evaluate_logits(const Tensor& logits, const std::vector<std::size_t>& labels, std::size_t k);
/// k = min(5, C).
EvalResult evaluate(const models::MlpNet& net, const Tensor& x, const std::vector<std::size_t>& labels);

struct ClassifierLog {
  std::vector<double> epoch_loss;
  std::vector<double> train_top1;
  std::vector<double> test_top1;
};

/// Cross-entropy training of `net` on rows of `x`. Throws DivergenceError on
/// a non-finite loss.
ClassifierLog train_classifier(models::MlpNet& net, const Tensor& x, const std::vector<std::size_t>& labels,
                               const Tensor& x_test, const std::vector<std::size_t>& test_labels,
                               const TrainConfig& cfg);

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_feat = 0.0;
  double l_logit = 0.0;
  double l_crd = 0.0;
  double l_all = 0.0;
  double train_top1 = 0.0;
  double test_top1 = 0.0;
  double test_top5 = 0.0;
  double macro_recall = 0.0;
  double w_rgb = 0.0;
  double w_edge = 0.0;
  double w_hf = 0.0;
};

struct DistillRun {
  std::vector<EpochMetrics> log;
  std::vector<NamedTensor> best_checkpoint;
  std::size_t best_epoch = 0;
  Tensor class_mean_logits;  // [C x C], final student on the test split
  Trainables model;
  std::uint64_t teacher_checksum = 0;
};

struct DistillInputs {
  models::MlpNet& teacher;  // frozen by run_distillation()
  const data::ViewMatrix& train;
  const data::ViewMatrix& test;
  const text::EmbeddingTable& table;
  const std::vector<std::string>& class_names;
};

/// Called after every optimizer step with (epoch, step index, run so far).
using StepObserver = std::function<void(std::size_t, std::size_t, const Trainables&)>;

DistillRun run_distillation(const DistillInputs& in, const TrainConfig& cfg, const distill::DistillConfig& dcfg,
                   const ModelConfig& mcfg, const StepObserver& observer = {});

/// "%.6f" with negative zero printed as zero.
std::string fixed6(double v);

void write_metrics_csv(const std::vector<EpochMetrics>& log, const std::filesystem::path& path);
void write_weights_csv(const std::vector<EpochMetrics>& log, const std::filesystem::path& path);
void write_logits_csv(const Tensor& class_mean_logits, const std::vector<std::string>& class_names,
                      const std::filesystem::path& path);

}  // namespace tmkd::train
