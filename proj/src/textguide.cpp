// SPDX-License-Identifier: Apache-2.0
#include "tmkd/textguide.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "tmkd/binio.hpp"
#include "tmkd/errors.hpp"

namespace tmkd::text {

std::string embedding_key(const std::string& class_name, ViewKind kind) {
  return class_name + "/" + std::string(views::to_string(kind));
}

void EmbeddingTable::add(std::string key, std::vector<float> values) {
  if (dim_ == 0) throw ContractError("embedding table has dimension 0");
  if (values.size() != dim_) {
    throw ContractError("embedding '" + key + "' has dimension " + std::to_string(values.size()) +
                        ", table expects " + std::to_string(dim_));
  }
  if (index_.count(key)) throw ContractError("duplicate embedding key '" + key + "'");
  index_.emplace(key, entries_.size());
  entries_.emplace_back(std::move(key), std::move(values));
}

const std::vector<float>* EmbeddingTable::find(const std::string& key) const {
  auto it = index_.find(key);
  return it == index_.end() ? nullptr : &entries_[it->second].second;
}

EmbeddingTable parse_embeddings(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  // Header problems are reported at record index 0.
  std::string magic;
  try {
    magic = r.bytes(4, "magic");
  } catch (const ParseError&) {
  }
  if (magic != "TMKD") throw ParseError("bad embedding file magic (expected TMKD)", 0);
  std::uint32_t version = 0, count = 0, dim = 0;
  try {
    version = r.u32("version");
    if (version != 1) throw UnsupportedFormat("unsupported embedding file version " + std::to_string(version), 0);
    count = r.u32("count");
    dim = r.u32("dim");
  } catch (const UnsupportedFormat&) {
    throw;
  } catch (const ParseError&) {
    throw ParseError("embedding file header truncated", 0);
  }
  if (dim == 0) throw ParseError("embedding dimension is zero", 0);
  EmbeddingTable table(dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string key;
    std::vector<float> values(dim);
    try {
      const auto len = r.u16("key length");
      key = r.bytes(len, "key");
      for (auto& v : values) v = r.f32("embedding value");
    } catch (const ParseError&) {
      throw ParseError("embedding record " + std::to_string(i) + " truncated (header declares " +
                           std::to_string(count) + " records)",
                       i);
    }
    if (table.find(key)) throw ParseError("duplicate embedding key '" + key + "' in record " + std::to_string(i), i);
    table.add(std::move(key), std::move(values));
  }
  return table;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingTable& table) {
  binio::Writer w;
  w.bytes("TMKD");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(table.size()));
  w.u32(static_cast<std::uint32_t>(table.dim()));
  for (const auto& [key, values] : table.entries()) {
    if (key.size() > 0xFFFF) throw ContractError("embedding key longer than 65535 bytes");
    w.u16(static_cast<std::uint16_t>(key.size()));
    w.bytes(key);
    for (float v : values) w.f32(v);
  }
  return w.take();
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  return parse_embeddings(binio::read_file(path));
}

void write_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  binio::write_file(path, encode_embeddings(table));
}

const std::vector<float>& ClassEmbeddings::get(ViewKind kind) const {
  switch (kind) {
    case ViewKind::rgb: return rgb;
    case ViewKind::edge: return edge;
    case ViewKind::hf: return hf;
  }
  return rgb;
}

ClassEmbeddings lookup_class_embeddings(const EmbeddingTable& table, const std::string& class_name) {
  ClassEmbeddings out;
  for (auto [kind, dst] : {std::pair{ViewKind::rgb, &out.rgb}, std::pair{ViewKind::edge, &out.edge},
                           std::pair{ViewKind::hf, &out.hf}}) {
    const auto key = embedding_key(class_name, kind);
    const auto* v = table.find(key);
    if (!v) throw LookupError(key);
    *dst = *v;
  }
  return out;
}

std::vector<std::string> missing_keys(const EmbeddingTable& table, const std::vector<std::string>& classes) {
  std::vector<std::string> out;
  for (const auto& c : classes)
    for (auto kind : kAllViews)
      if (!table.find(embedding_key(c, kind))) out.push_back(embedding_key(c, kind));
  return out;
}

void PromptTemplateSet::validate() const {
  for (const auto* t : {&rgb, &edge, &hf}) {
    const auto first = t->find("{class}");
    if (first == std::string::npos || t->find("{class}", first + 1) != std::string::npos) {
      throw ConfigError("prompt template must contain {class} exactly once: '" + *t + "'");
    }
  }
}

std::string PromptTemplateSet::instantiate(const std::string& class_name, ViewKind kind) const {
  std::string name;
  for (char ch : class_name) name += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  const std::string& tpl = kind == ViewKind::rgb ? rgb : (kind == ViewKind::edge ? edge : hf);
  std::string s = tpl;
  const auto pos = s.find("{class}");
  if (pos == std::string::npos) throw ConfigError("prompt template lacks {class}");
  s.replace(pos, 7, name);
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = !out.empty();
      continue;
    }
    if (space) out += ' ';
    space = false;
    out += ch;
  }
  return out;
}

EmbeddingTable pseudo_embeddings(const std::vector<std::string>& classes, const PromptTemplateSet& templates,
                                 std::size_t dim, std::uint64_t seed) {
  templates.validate();
  EmbeddingTable table(dim);
  for (const auto& c : classes) {
    if (c.empty()) throw ContractError("empty class name");
    for (auto kind : kAllViews) {
      const auto prompt = templates.instantiate(c, kind);
      std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
      for (unsigned char ch : prompt) {
        h ^= ch;
        h *= 0x100000001b3ULL;
      }
      Rng rng(mix_seed(seed, h));
      std::vector<double> v(dim);
      double ss = 0.0;
      for (auto& x : v) {
        x = rng.normal();
        ss += x * x;
      }
      const double norm = std::sqrt(ss);
      std::vector<float> f(dim);
      for (std::size_t i = 0; i < dim; ++i) f[i] = static_cast<float>(v[i] / norm);
      table.add(embedding_key(c, kind), std::move(f));
    }
  }
  return table;
}

WeightNet WeightNet::create(std::size_t embed_dim, std::size_t hidden, Rng& rng) {
  auto uniform = [&](std::size_t rows, std::size_t cols) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
    std::vector<double> v(rows * cols);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::parameter({rows, cols}, std::move(v));
  };
  WeightNet net;
  net.w1 = uniform(hidden, 3 * embed_dim);
  net.b1 = Tensor::parameter({hidden}, std::vector<double>(hidden, 0.0));
  net.w2 = uniform(3, hidden);
  net.b2 = Tensor::parameter({3}, std::vector<double>(3, 0.0));
  return net;
}

std::vector<NamedTensor> WeightNet::parameters(const std::string& prefix) const {
  return {{prefix + "w1", w1}, {prefix + "b1", b1}, {prefix + "w2", w2}, {prefix + "b2", b2}};
}

namespace {

Tensor as_matrix(Tape& tape, const Tensor& t) {
  if (t.rank() == 2) return t;
  if (t.rank() == 1) return ops::reshape(tape, t, {1, t.dim(0)});
  throw DimensionError("expected a vector or matrix, got " + shape_str(t.shape()));
}

std::size_t view_index(ViewKind kind) { return static_cast<std::size_t>(kind); }

}  // namespace

Tensor weightnet_forward(Tape& tape, const WeightNet& net, const Tensor& t_rgb, const Tensor& t_edge,
                         const Tensor& t_hf, const std::vector<ViewKind>& active) {
  if (active.empty()) throw ConfigError("weight net needs at least one active view");
  const bool single = t_rgb.rank() == 1;
  const auto d = net.embed_dim();
  for (const auto* t : {&t_rgb, &t_edge, &t_hf}) {
    if (t->shape().back() != d) {
      throw DimensionError("weight net expects embeddings of dim " + std::to_string(d) + ", got " +
                           shape_str(t->shape()));
    }
  }
  auto cat = ops::concat(tape, {as_matrix(tape, t_rgb), as_matrix(tape, t_edge), as_matrix(tape, t_hf)});
  auto hidden = ops::relu(tape, ops::linear(tape, cat, net.w1, net.b1));
  auto logits = ops::linear(tape, hidden, net.w2, net.b2);
  if (active.size() != 3) {
    std::vector<std::size_t> cols;
    for (auto k : active) cols.push_back(view_index(k));
    logits = ops::select_cols(tape, logits, cols);
  }
  auto w = ops::softmax(tape, logits, -1);
  return single ? ops::reshape(tape, w, {active.size()}) : w;
}

Tensor fuse_features(Tape& tape, const Tensor& weights, const std::vector<Tensor>& features) {
  if (features.empty()) throw DimensionError("fuse_features: no features");
  const bool single = features.front().rank() == 1;
  auto w = as_matrix(tape, weights);
  if (w.dim(1) != features.size()) {
    throw DimensionError("fuse_features: " + std::to_string(w.dim(1)) + " weights for " +
                         std::to_string(features.size()) + " views");
  }
  Tensor fused;
  for (std::size_t v = 0; v < features.size(); ++v) {
    auto f = as_matrix(tape, features[v]);
    if (f.shape() != as_matrix(tape, features.front()).shape()) {
      throw DimensionError("fuse_features: view features differ in shape, " + shape_str(features.front().shape()) +
                           " vs " + shape_str(features[v].shape()));
    }
    if (f.dim(0) != w.dim(0)) throw DimensionError("fuse_features: batch size of weights and features differ");
    auto term = ops::scale_rows(tape, f, ops::select_cols(tape, w, {v}));
    fused = v == 0 ? term : ops::add(tape, fused, term);
  }
  return single ? ops::reshape(tape, fused, {fused.dim(1)}) : fused;
}

FusionWeights fusion_weights_row(const Tensor& weights, std::size_t row, const std::vector<ViewKind>& active) {
  const std::size_t v = active.size();
  if (weights.numel() % v != 0 || (row + 1) * v > weights.numel()) {
    throw DimensionError("fusion weights: row out of range");
  }
  FusionWeights fw;
  for (std::size_t i = 0; i < v; ++i) {
    const double x = weights[row * v + i];
    switch (active[i]) {
      case ViewKind::rgb: fw.w_rgb = x; break;
      case ViewKind::edge: fw.w_edge = x; break;
      case ViewKind::hf: fw.w_hf = x; break;
    }
  }
  return fw;
}

Tensor stack_rows(const std::vector<const std::vector<float>*>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t d = rows.front()->size();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  for (const auto* r : rows) {
    if (r->size() != d) throw DimensionError("stack_rows: ragged rows");
    data.insert(data.end(), r->begin(), r->end());
  }
  return Tensor({rows.size(), d}, std::move(data));
}

}  // namespace tmkd::text
