// SPDX-License-Identifier: Apache-2.0
//
// tmkd: preprocess, synth, pretrain, distill, eval, gradcheck, export-run.
// Exit codes: 0 success, 1 verification failure, 2 input or contract error,
// 3 numeric divergence.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "tmkd/config.hpp"
#include "tmkd/errors.hpp"
#include "tmkd/gradcheck.hpp"
#include "tmkd/models.hpp"
#include "tmkd/textguide.hpp"
#include "tmkd/train.hpp"

namespace fs = std::filesystem;
using namespace tmkd;

namespace {

constexpr int kOk = 0, kVerifyFailed = 1, kInputError = 2, kDiverged = 3;

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw std::runtime_error(std::string(what) + " not found: " + p.string());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- preprocess

struct PreprocessOpts {
  std::string input, output;
  views::ViewGenConfig views;
};

int run_preprocess(const PreprocessOpts& o) {
  require_file(o.input, "input directory");
  o.views.validate();
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(o.input))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  fs::create_directories(o.output);
  std::size_t ok = 0;
  std::vector<std::string> failures;
  for (const auto& f : files) {
    try {
      const auto img = views::read_ppm(f);
      const auto mv = views::make_views(img, o.views);
      const fs::path out = fs::path(o.output) / f.stem();
      views::write_ppm(views::quantize(mv.rgb), out.string() + ".rgb.ppm");
      views::write_ppm(views::quantize(mv.edge), out.string() + ".edge.ppm");
      views::write_ppm(views::quantize(mv.hf), out.string() + ".hf.ppm");
      views::write_view_sidecar(mv, out.string() + ".views.f64");
      std::printf("%s: %zux%zu -> 3 views + sidecar\n", f.filename().c_str(), img.width, img.height);
      ++ok;
    } catch (const std::exception& e) {
      failures.push_back(f.filename().string() + ": " + e.what());
    }
  }
  std::printf("%zu files processed\n", ok);
  for (const auto& f : failures) std::fprintf(stderr, "error: %s\n", f.c_str());
  return failures.empty() ? kOk : kInputError;
}

// ---------------------------------------------------------------- data

struct LoadedData {
  data::Dataset ds;
  data::ViewMatrix train, test;
};

LoadedData load_data(const config::RunConfig& cfg) {
  LoadedData d;
  fs::path sidecars;
  if (cfg.data_dir.empty()) {
    d.ds = data::generate_synthetic_dataset(cfg.data);
  } else {
    require_file(fs::path(cfg.data_dir) / "split.csv", "dataset split");
    d.ds = data::read_dataset(cfg.data_dir);
    sidecars = cfg.data_dir;
  }
  if (d.ds.train.empty() || d.ds.test.empty()) throw ContractError("dataset needs nonempty train and test splits");
  d.train = data::build_view_matrix(d.ds.train, cfg.views, sidecars);
  d.test = data::build_view_matrix(d.ds.test, cfg.views, sidecars);
  return d;
}

config::RunConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  require_file(path, "config file");
  return config::load(path);
}

// ---------------------------------------------------------------- synth

struct SynthOpts {
  std::string config_path, output;
  std::optional<std::size_t> n_classes, per_class, image_size;
  std::optional<std::uint64_t> seed;
};

int run_synth(const SynthOpts& o) {
  auto cfg = load_config(o.config_path);
  if (o.n_classes) cfg.data.n_classes = *o.n_classes;
  if (o.per_class) cfg.data.samples_per_class = *o.per_class;
  if (o.image_size) cfg.data.image_size = *o.image_size;
  if (o.seed) cfg.data.seed = *o.seed;
  const auto ds = data::generate_synthetic_dataset(cfg.data);
  data::write_dataset(ds, o.output);
  write_text(fs::path(o.output) / "config.resolved", config::render(cfg));
  std::printf("%zu classes, %zu train, %zu test -> %s\n", ds.class_names.size(), ds.train.size(), ds.test.size(),
              o.output.c_str());
  return kOk;
}

// ---------------------------------------------------------------- pretrain

struct PretrainOpts {
  std::string config_path, run_name = "teacher", runs_dir = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
};

int run_pretrain(const PretrainOpts& o) {
  auto cfg = load_config(o.config_path);
  if (o.seed) cfg.pretrain.seed = *o.seed;
  if (o.epochs) cfg.pretrain.epochs = *o.epochs;
  cfg.validate();
  const fs::path dir = fs::path(o.runs_dir) / o.run_name;
  fs::create_directories(dir);
  write_text(dir / "config.resolved", config::render(cfg));

  const auto d = load_data(cfg);
  Rng rng(mix_seed(cfg.pretrain.seed, 0x5445414348ULL));
  auto teacher = models::MlpNet::create(models::Role::teacher, d.train.dim(), cfg.model.teacher_hidden,
                                        d.ds.class_names.size(), rng);
  const auto log = train::train_classifier(teacher, d.train.rgb, d.train.labels, d.test.rgb, d.test.labels, cfg.pretrain);
  std::string csv = "epoch,loss,train_top1,test_top1\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e) {
    csv += std::to_string(e) + "," + train::fixed6(log.epoch_loss[e]) + "," + train::fixed6(log.train_top1[e]) + "," +
           train::fixed6(log.test_top1[e]) + "\n";
  }
  write_text(dir / "pretrain.csv", csv);
  models::save_checkpoint(teacher.parameters("teacher."), dir / "teacher.ckpt");
  std::printf("teacher: train top-1 %s, test top-1 %s -> %s\n", train::fixed6(log.train_top1.back()).c_str(),
              train::fixed6(log.test_top1.back()).c_str(), (dir / "teacher.ckpt").c_str());
  return kOk;
}

// ---------------------------------------------------------------- distill

struct DistillOpts {
  std::string config_path, embeddings, run_name, runs_dir = "runs", teacher;
  bool no_edge = false, no_hf = false, no_feat = false, no_crd = false, with_ce = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
};

int run_distill(const DistillOpts& o) {
  auto cfg = load_config(o.config_path);
  if (!o.embeddings.empty()) cfg.embeddings = o.embeddings;
  if (!o.teacher.empty()) cfg.teacher_checkpoint = o.teacher;
  if (o.no_edge) cfg.train.use_edge_view = false;
  if (o.no_hf) cfg.train.use_hf_view = false;
  if (o.no_feat) cfg.train.use_feat_loss = false;
  if (o.no_crd) cfg.train.use_crd_loss = false;
  if (o.with_ce) cfg.distill.with_ce = true;
  if (o.seed) cfg.train.seed = cfg.distill.seed = *o.seed;
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.lr) cfg.train.lr = *o.lr;
  cfg.validate();
  if (cfg.embeddings.empty()) throw ConfigError("distill needs --embeddings (or distill.embeddings)");
  if (cfg.teacher_checkpoint.empty()) throw ConfigError("distill needs --teacher (or pretrain.checkpoint)");

  const fs::path dir = fs::path(o.runs_dir) / o.run_name;
  fs::create_directories(dir);
  write_text(dir / "config.resolved", config::render(cfg));

  require_file(cfg.embeddings, "embedding file");
  require_file(cfg.teacher_checkpoint, "teacher checkpoint");
  const auto table = text::load_embeddings(cfg.embeddings);
  auto teacher = models::net_from_checkpoint(models::load_checkpoint(cfg.teacher_checkpoint), "teacher.",
                                             models::Role::teacher);
  const auto d = load_data(cfg);
  if (teacher.n_classes() != d.ds.class_names.size()) {
    throw DimensionError("teacher has " + std::to_string(teacher.n_classes()) + " classes, dataset has " +
                         std::to_string(d.ds.class_names.size()));
  }
  const auto missing = text::missing_keys(table, d.ds.class_names);
  if (!missing.empty()) {
    std::fprintf(stderr, "error: embedding file lacks %zu keys:\n", missing.size());
    for (const auto& k : missing) std::fprintf(stderr, "  %s\n", k.c_str());
    return kInputError;
  }

  train::DistillInputs in{teacher, d.train, d.test, table, d.ds.class_names};
  const auto run = train::run_distillation(in, cfg.train, cfg.distill, cfg.model);
  train::write_metrics_csv(run.log, dir / "metrics.csv");
  train::write_weights_csv(run.log, dir / "weights.csv");
  train::write_logits_csv(run.class_mean_logits, d.ds.class_names, dir / "logits.csv");
  models::save_checkpoint(run.best_checkpoint, dir / "best.ckpt");
  models::save_checkpoint(run.model.all_parameters(), dir / "final.ckpt");
  const auto& last = run.log.back();
  std::printf("%s: final test top-1 %s, best %s at epoch %zu -> %s\n", cfg.is_vanilla_kd() ? "vanilla KD" : "TMKD",
              train::fixed6(last.test_top1).c_str(), train::fixed6(run.log[run.best_epoch].test_top1).c_str(),
              run.best_epoch, dir.c_str());
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalOpts {
  std::string checkpoint, data_dir, config_path;
};

int run_eval(const EvalOpts& o) {
  auto cfg = load_config(o.config_path);
  cfg.data_dir = o.data_dir;
  require_file(o.checkpoint, "checkpoint");
  const auto ckpt = models::load_checkpoint(o.checkpoint);
  std::string prefix;
  for (const char* p : {"student.", "teacher.", ""}) {
    if (std::any_of(ckpt.begin(), ckpt.end(), [&](const NamedTensor& t) { return t.first == std::string(p) + "layer0.weight"; })) {
      prefix = p;
      break;
    }
  }
  const auto net = models::net_from_checkpoint(ckpt, prefix, prefix == "student." ? models::Role::student
                                                                                  : models::Role::teacher);
  const auto d = load_data(cfg);
  if (net.d_in() != d.test.dim()) throw DimensionError("checkpoint input size does not match the dataset images");
  const auto r = train::evaluate(net, d.test.rgb, d.test.labels);
  std::printf("top1 %s top%zu %s macro_recall %s\n", train::fixed6(r.top1).c_str(), r.k, train::fixed6(r.topk).c_str(),
              train::fixed6(r.macro_recall).c_str());
  return kOk;
}

// ---------------------------------------------------------------- gradcheck

struct GradcheckOpts {
  std::uint64_t seed = 0;
  std::size_t trials = 20;
  double tol = 1e-4;
};

int run_gradcheck_cmd(const GradcheckOpts& o) {
  const auto report = run_gradcheck(o.seed, o.trials, o.tol);
  std::fputs(format_report(report, o.tol).c_str(), stdout);
  return report.passed ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------- export-run

struct ExportOpts {
  std::string run, runs_dir = "runs", output;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::stringstream ss(read_text(p));
  for (std::string line; std::getline(ss, line);) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string select_columns(const std::vector<std::vector<std::string>>& rows, const std::vector<std::string>& cols) {
  std::vector<std::size_t> idx;
  for (const auto& c : cols) {
    const auto it = std::find(rows[0].begin(), rows[0].end(), c);
    if (it == rows[0].end()) throw ParseError("metrics.csv lacks column " + c, 0);
    idx.push_back(static_cast<std::size_t>(it - rows[0].begin()));
  }
  std::string out;
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < idx.size(); ++i) out += (i ? "," : "") + r.at(idx[i]);
    out += "\n";
  }
  return out;
}

int run_export(const ExportOpts& o) {
  const fs::path dir = fs::path(o.runs_dir) / o.run;
  const fs::path out = o.output.empty() ? dir / "export" : fs::path(o.output);
  for (const char* f : {"metrics.csv", "logits.csv", "config.resolved"}) require_file(dir / f, "run file");
  const auto metrics = read_csv(dir / "metrics.csv");
  if (metrics.empty()) throw ParseError("metrics.csv is empty", 0);
  fs::create_directories(out);
  write_text(out / "weights.csv", select_columns(metrics, {"epoch", "w_rgb", "w_edge", "w_hf"}));
  write_text(out / "losses.csv", select_columns(metrics, {"epoch", "l_feat", "l_logit", "l_crd", "l_all"}));
  write_text(out / "accuracy.csv",
             select_columns(metrics, {"epoch", "train_top1", "test_top1", "test_top5", "macro_recall"}));
  for (const char* f : {"metrics.csv", "logits.csv", "config.resolved"}) {
    fs::copy_file(dir / f, out / f, fs::copy_options::overwrite_existing);
  }
  std::printf("exported %s -> %s\n", o.run.c_str(), out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-guided multi-view knowledge distillation"};
  app.require_subcommand(1);

  PreprocessOpts pre;
  auto* c_pre = app.add_subcommand("preprocess", "Write RGB, edge and high-frequency views plus float sidecars");
  c_pre->add_option("--input", pre.input, "Directory of .ppm images")->required();
  c_pre->add_option("--output", pre.output, "Output directory")->required();
  c_pre->add_option("--alpha-e", pre.views.alpha_e, "Edge enhancement strength")->capture_default_str();
  c_pre->add_option("--alpha-hf", pre.views.alpha_hf, "High-frequency enhancement strength")->capture_default_str();
  c_pre->add_option("--canny-low", pre.views.canny_low)->capture_default_str();
  c_pre->add_option("--canny-high", pre.views.canny_high)->capture_default_str();
  c_pre->add_option("--sigma", pre.views.gaussian_sigma, "Gaussian sigma of the low-pass")->capture_default_str();
  c_pre->add_option("--kernel", pre.views.gaussian_kernel, "Odd Gaussian kernel size")->capture_default_str();

  SynthOpts syn;
  auto* c_syn = app.add_subcommand("synth", "Generate the synthetic shape/texture dataset");
  c_syn->add_option("--output", syn.output)->required();
  c_syn->add_option("--config", syn.config_path, "Config file (data.* keys)");
  c_syn->add_option("--n-classes", syn.n_classes);
  c_syn->add_option("--samples-per-class", syn.per_class);
  c_syn->add_option("--image-size", syn.image_size);
  c_syn->add_option("--seed", syn.seed);

  PretrainOpts pt;
  auto* c_pt = app.add_subcommand("pretrain", "Train the teacher with cross-entropy on RGB views");
  c_pt->add_option("--config", pt.config_path);
  c_pt->add_option("--run-name", pt.run_name)->capture_default_str();
  c_pt->add_option("--runs-dir", pt.runs_dir)->capture_default_str();
  c_pt->add_option("--seed", pt.seed);
  c_pt->add_option("--epochs", pt.epochs);

  DistillOpts ds;
  auto* c_ds = app.add_subcommand("distill", "Distil the teacher into the student");
  c_ds->add_option("--config", ds.config_path);
  c_ds->add_option("--embeddings", ds.embeddings, "TMKD-EMB file");
  c_ds->add_option("--teacher", ds.teacher, "Teacher checkpoint (overrides pretrain.checkpoint)");
  c_ds->add_option("--run-name", ds.run_name)->required();
  c_ds->add_option("--runs-dir", ds.runs_dir)->capture_default_str();
  c_ds->add_flag("--no-edge", ds.no_edge, "Drop the edge view");
  c_ds->add_flag("--no-hf", ds.no_hf, "Drop the high-frequency view");
  c_ds->add_flag("--no-feat", ds.no_feat, "Drop the feature KD term");
  c_ds->add_flag("--no-crd", ds.no_crd, "Drop the contrastive term");
  c_ds->add_flag("--with-ce", ds.with_ce, "Add a ground-truth cross-entropy term");
  c_ds->add_option("--seed", ds.seed, "Sets train.seed and distill.seed");
  c_ds->add_option("--epochs", ds.epochs);
  c_ds->add_option("--lr", ds.lr);

  EvalOpts ev;
  auto* c_ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  c_ev->add_option("--checkpoint", ev.checkpoint)->required();
  c_ev->add_option("--data", ev.data_dir)->required();
  c_ev->add_option("--config", ev.config_path, "Config file (views.* keys)");

  GradcheckOpts gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference check of the full loss graph");
  c_gc->add_option("--seed", gc.seed)->capture_default_str();
  c_gc->add_option("--trials", gc.trials)->capture_default_str();
  c_gc->add_option("--tol", gc.tol)->capture_default_str();

  ExportOpts ex;
  auto* c_ex = app.add_subcommand("export-run", "Bundle a run's CSVs into a plot-ready directory");
  c_ex->add_option("--run", ex.run)->required();
  c_ex->add_option("--runs-dir", ex.runs_dir)->capture_default_str();
  c_ex->add_option("--output", ex.output, "Default: runs/<run>/export");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kInputError;
  }

  try {
    if (*c_pre) return run_preprocess(pre);
    if (*c_syn) return run_synth(syn);
    if (*c_pt) return run_pretrain(pt);
    if (*c_ds) return run_distill(ds);
    if (*c_ev) return run_eval(ev);
    if (*c_gc) return run_gradcheck_cmd(gc);
    if (*c_ex) return run_export(ex);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kDiverged;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    // config, contract, dimension, lookup, parse and file errors
    std::fprintf(stderr, "error: %s\n", e.what());
    return kInputError;
  }
  return kInputError;
}
