// SPDX-License-Identifier: Apache-2.0
#include "tmkd/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tmkd/errors.hpp"

namespace tmkd::config {
namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot read '" + value + "' as " + expected);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a nonnegative integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

std::vector<std::size_t> to_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(to_u64(key, item)));
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::string fmt(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

struct Binding {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Binding num(std::string key, T RunConfig::*section, double T::*field) {
  return {key, [=](const RunConfig& c) { return fmt(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = to_double(key, v); }};
}

template <class T, class I>
Binding integer(std::string key, T RunConfig::*section, I T::*field) {
  return {key, [=](const RunConfig& c) { return std::to_string(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = static_cast<I>(to_u64(key, v)); }};
}

template <class T>
Binding flag(std::string key, T RunConfig::*section, bool T::*field) {
  return {key, [=](const RunConfig& c) { return fmt(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = to_bool(key, v); }};
}

template <class T>
Binding list(std::string key, T RunConfig::*section, std::vector<std::size_t> T::*field) {
  return {key, [=](const RunConfig& c) { return fmt(c.*section.*field); },
          [=](RunConfig& c, const std::string& v) { c.*section.*field = to_list(key, v); }};
}

Binding text(std::string key, std::string RunConfig::*field) {
  return {key, [=](const RunConfig& c) { return c.*field; }, [=](RunConfig& c, const std::string& v) { c.*field = v; }};
}

void schedule_bindings(std::vector<Binding>& b, const std::string& prefix, train::TrainConfig RunConfig::*s) {
  using T = train::TrainConfig;
  b.push_back(num(prefix + "lr", s, &T::lr));
  b.push_back(num(prefix + "momentum", s, &T::momentum));
  b.push_back(num(prefix + "weight_decay", s, &T::weight_decay));
  b.push_back(integer(prefix + "epochs", s, &T::epochs));
  b.push_back(integer(prefix + "batch_size", s, &T::batch_size));
  b.push_back(integer(prefix + "warmup_epochs", s, &T::warmup_epochs));
  b.push_back(list(prefix + "decay_epochs", s, &T::decay_epochs));
  b.push_back(num(prefix + "decay_factor", s, &T::decay_factor));
  b.push_back(integer(prefix + "seed", s, &T::seed));
}

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> all = [] {
    std::vector<Binding> b;
    using D = data::SyntheticDatasetSpec;
    b.push_back(integer("data.n_classes", &RunConfig::data, &D::n_classes));
    b.push_back(integer("data.samples_per_class", &RunConfig::data, &D::samples_per_class));
    b.push_back(integer("data.image_size", &RunConfig::data, &D::image_size));
    b.push_back(integer("data.seed", &RunConfig::data, &D::seed));
    b.push_back(text("data.dir", &RunConfig::data_dir));

    using V = views::ViewGenConfig;
    b.push_back(num("views.alpha_e", &RunConfig::views, &V::alpha_e));
    b.push_back(num("views.alpha_hf", &RunConfig::views, &V::alpha_hf));
    b.push_back(num("views.canny_low", &RunConfig::views, &V::canny_low));
    b.push_back(num("views.canny_high", &RunConfig::views, &V::canny_high));
    b.push_back(num("views.sigma", &RunConfig::views, &V::gaussian_sigma));
    b.push_back({"views.kernel", [](const RunConfig& c) { return std::to_string(c.views.gaussian_kernel); },
                 [](RunConfig& c, const std::string& v) {
                   c.views.gaussian_kernel = static_cast<int>(to_u64("views.kernel", v));
                 }});

    using M = train::ModelConfig;
    b.push_back(list("model.teacher_hidden", &RunConfig::model, &M::teacher_hidden));
    b.push_back(list("model.student_hidden", &RunConfig::model, &M::student_hidden));
    b.push_back(integer("model.d_common", &RunConfig::model, &M::d_common));
    b.push_back(integer("model.weightnet_hidden", &RunConfig::model, &M::weightnet_hidden));
    b.push_back(flag("model.per_class_weights", &RunConfig::model, &M::per_class_weights));
    b.push_back({"model.teacher_logits",
                 [](const RunConfig& c) {
                   return std::string(c.model.teacher_logits == train::TeacherLogits::fused ? "fused" : "rgb");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "fused") c.model.teacher_logits = train::TeacherLogits::fused;
                   else if (v == "rgb") c.model.teacher_logits = train::TeacherLogits::rgb;
                   else bad_value("model.teacher_logits", v, "fused or rgb");
                 }});

    schedule_bindings(b, "pretrain.", &RunConfig::pretrain);
    b.push_back(text("pretrain.checkpoint", &RunConfig::teacher_checkpoint));

    using T = train::TrainConfig;
    schedule_bindings(b, "train.", &RunConfig::train);
    b.push_back(flag("train.use_edge_view", &RunConfig::train, &T::use_edge_view));
    b.push_back(flag("train.use_hf_view", &RunConfig::train, &T::use_hf_view));
    b.push_back(flag("train.use_feat_loss", &RunConfig::train, &T::use_feat_loss));
    b.push_back(flag("train.use_crd_loss", &RunConfig::train, &T::use_crd_loss));

    using DC = distill::DistillConfig;
    b.push_back(num("distill.tau_f", &RunConfig::distill, &DC::tau_f));
    b.push_back(num("distill.tau_l", &RunConfig::distill, &DC::tau_l));
    b.push_back(num("distill.tau_crd", &RunConfig::distill, &DC::tau_crd));
    b.push_back(num("distill.alpha", &RunConfig::distill, &DC::alpha));
    b.push_back(num("distill.beta", &RunConfig::distill, &DC::beta));
    b.push_back(num("distill.gamma_loss", &RunConfig::distill, &DC::gamma_loss));
    b.push_back(num("distill.gamma_noise", &RunConfig::distill, &DC::gamma_noise));
    b.push_back(integer("distill.seed", &RunConfig::distill, &DC::seed));
    b.push_back(flag("distill.scale_logit_kd_by_tau_sq", &RunConfig::distill, &DC::scale_logit_kd_by_tau_sq));
    b.push_back(flag("distill.with_ce", &RunConfig::distill, &DC::with_ce));
    b.push_back(num("distill.ce_weight", &RunConfig::distill, &DC::ce_weight));
    b.push_back(text("distill.embeddings", &RunConfig::embeddings));
    return b;
  }();
  return all;
}

}  // namespace

Entries parse_entries(std::string_view text) {
  Entries out;
  std::map<std::string, std::size_t> seen;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(lineno) + ": expected key = value", lineno);
    auto key = trim(std::string_view(content).substr(0, eq));
    auto value = trim(std::string_view(content).substr(eq + 1));
    if (key.empty()) throw ParseError("config line " + std::to_string(lineno) + ": empty key", lineno);
    if (auto it = seen.find(key); it != seen.end()) {
      throw ParseError("config line " + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                           std::to_string(it->second),
                       lineno);
    }
    seen[key] = lineno;
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

Entries load_entries(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_entries(ss.str());
}

train::TrainConfig RunConfig::default_pretrain() {
  train::TrainConfig c;
  c.lr = 0.01;
  c.warmup_epochs = 0;
  c.seed = 99;
  return c;
}

bool RunConfig::is_vanilla_kd() const {
  return !train.use_edge_view && !train.use_hf_view && !train::feat_enabled(train, distill) &&
         !train::crd_enabled(train, distill) && !distill.with_ce;
}

void RunConfig::validate() const {
  data.validate();
  views.validate();
  pretrain.validate();
  train.validate();
  distill.validate();
  if (model.teacher_hidden.empty() || model.student_hidden.empty()) {
    throw ConfigError("model.teacher_hidden and model.student_hidden need at least one layer");
  }
  if (model.d_common == 0 || model.weightnet_hidden == 0) throw ConfigError("model widths must be positive");
}

RunConfig apply(const Entries& entries, RunConfig base) {
  std::map<std::string, const Binding*> by_key;
  for (const auto& b : bindings()) by_key[b.key] = &b;
  for (const auto& [key, value] : entries) {
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second->set(base, value);
  }
  return base;
}

RunConfig load(const std::filesystem::path& path) { return apply(load_entries(path)); }

std::string render(const RunConfig& cfg) {
  std::string s = "# resolved configuration\n";
  if (cfg.is_vanilla_kd()) s += "# mode: vanilla KD (logit term only, RGB view only)\n";
  std::string section;
  for (const auto& b : bindings()) {
    const auto dot = b.key.find('.');
    const auto head = b.key.substr(0, dot);
    if (head != section) {
      if (!section.empty()) s += "\n";
      section = head;
    }
    s += b.key + " = " + b.get(cfg) + "\n";
  }
  return s;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& b : bindings()) out.push_back(b.key);
  return out;
}

}  // namespace tmkd::config
