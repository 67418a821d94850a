// SPDX-License-Identifier: Apache-2.0
#include "tmkd/models.hpp"

#include <bit>
#include <cmath>
#include <map>

#include "tmkd/binio.hpp"
#include "tmkd/errors.hpp"

namespace tmkd::models {
namespace {

Linear make_linear(std::size_t in, std::size_t out, double bound, Rng& rng) {
  std::vector<double> w(in * out);
  for (auto& x : w) x = rng.uniform(-bound, bound);
  return {Tensor::parameter({out, in}, std::move(w)), Tensor::parameter({out}, std::vector<double>(out, 0.0))};
}

void push(std::vector<NamedTensor>& out, const std::string& name, const Linear& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

Tensor affine(Tape& tape, const Linear& l, const Tensor& x) { return ops::linear(tape, x, l.weight, l.bias); }

}  // namespace

MlpNet MlpNet::create(Role role, std::size_t d_in, const std::vector<std::size_t>& hidden_sizes,
                      std::size_t n_classes, Rng& rng) {
  if (d_in == 0 || n_classes == 0 || hidden_sizes.empty()) {
    throw ConfigError("an MLP needs d_in > 0, at least one hidden layer and at least one class");
  }
  MlpNet net;
  net.role = role;
  std::size_t in = d_in;
  for (auto h : hidden_sizes) {
    if (h == 0) throw ConfigError("hidden layer of width 0");
    net.hidden.push_back(make_linear(in, h, std::sqrt(6.0 / static_cast<double>(in)), rng));
    in = h;
  }
  net.classifier = make_linear(in, n_classes, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  return net;
}

std::vector<NamedTensor> MlpNet::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < hidden.size(); ++i) push(out, prefix + "layer" + std::to_string(i), hidden[i]);
  push(out, prefix + "classifier", classifier);
  return out;
}

void MlpNet::set_frozen(bool frozen) {
  for (auto& [name, t] : parameters()) {
    Tensor h = t;
    h.set_requires_grad(!frozen);
    h.reset_grad();
  }
}

Output forward(Tape& tape, const MlpNet& net, const Tensor& x) {
  if (!x.defined()) throw ContractError("forward: undefined input");
  const bool single = x.rank() == 1;
  if (x.shape().back() != net.d_in()) {
    throw DimensionError("forward: input " + shape_str(x.shape()) + " does not match d_in " +
                         std::to_string(net.d_in()));
  }
  Tensor h = single ? ops::reshape(tape, x, {1, x.dim(0)}) : x;
  // Views live in [0, 1]; the network sees them mapped to [-1, 1].
  h = ops::add(tape, ops::scale(tape, h, 2.0), Tensor::full({net.d_in()}, -1.0));
  for (const auto& layer : net.hidden) h = ops::relu(tape, affine(tape, layer, h));
  Tensor logits = affine(tape, net.classifier, h);
  if (single) {
    h = ops::reshape(tape, h, {h.dim(1)});
    logits = ops::reshape(tape, logits, {logits.dim(1)});
  }
  return {h, logits};
}

Projector Projector::create(std::size_t d_src, std::size_t d_common, Rng& rng) {
  return {make_linear(d_src, d_common, 1.0 / std::sqrt(static_cast<double>(d_src)), rng)};
}

Tensor Projector::apply(Tape& tape, const Tensor& x) const {
  if (x.rank() == 1) {
    auto y = affine(tape, map, ops::reshape(tape, x, {1, x.dim(0)}));
    return ops::reshape(tape, y, {y.dim(1)});
  }
  return affine(tape, map, x);
}

std::vector<NamedTensor> Projector::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  push(out, prefix, map);
  return out;
}

TeacherViews teacher_multiview_forward(Tape& tape, const MlpNet& teacher, const Tensor& rgb, const Tensor& edge,
                                       const Tensor& hf) {
  if (!rgb.defined() || !edge.defined() || !hf.defined()) {
    throw ContractError("teacher_multiview_forward: all three views are required");
  }
  return {forward(tape, teacher, rgb), forward(tape, teacher, edge), forward(tape, teacher, hf)};
}

Tensor teacher_logits_from_fused(Tape& tape, const MlpNet& teacher, const Tensor& fused) {
  if (fused.shape().back() != teacher.d_feat()) {
    throw DimensionError("teacher_logits_from_fused: feature " + shape_str(fused.shape()) +
                         " does not match teacher d_feat " + std::to_string(teacher.d_feat()));
  }
  if (fused.rank() == 1) {
    auto y = affine(tape, teacher.classifier, ops::reshape(tape, fused, {1, fused.dim(0)}));
    return ops::reshape(tape, y, {y.dim(1)});
  }
  return affine(tape, teacher.classifier, fused);
}

std::uint64_t checksum(const std::vector<NamedTensor>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint8_t b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (const auto& [name, t] : params) {
    for (char c : name) mix(static_cast<std::uint8_t>(c));
    for (double v : t.data()) {
      const auto u = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) mix(static_cast<std::uint8_t>(u >> (8 * i)));
    }
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  binio::Writer w;
  w.bytes("TMKC");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ContractError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.rank() > 255) throw ContractError("tensor rank above 255");
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f64(v);
  }
  return w.take();
}

std::vector<NamedTensor> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  binio::Reader r(bytes);
  if (bytes.size() < 4 || r.bytes(4, "magic") != "TMKC") throw ParseError("bad checkpoint magic (expected TMKC)", 0);
  const auto version = r.u32("version");
  if (version != 1) throw UnsupportedFormat("unsupported checkpoint version " + std::to_string(version), 4);
  const auto count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.u16("name length");
    auto name = r.bytes(len, "name");
    const auto rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) {
      const std::size_t at = r.offset();
      d = r.u32("dimension");
      if (d == 0) throw ParseError("zero dimension in tensor '" + name + "'", at);
    }
    const std::size_t n = shape_numel(shape);
    if (n > r.remaining() / 8) throw ParseError("truncated payload of tensor '" + name + "'", bytes.size());
    std::vector<double> data(n);
    for (auto& v : data) v = r.f64("payload");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw ParseError("trailing bytes after checkpoint", r.offset());
  return out;
}

void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(tensors));
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(binio::read_file(path));
}

void assign(const std::vector<NamedTensor>& params, const std::vector<NamedTensor>& checkpoint) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : checkpoint) by_name[name] = &t;
  for (const auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw LookupError(name);
    if (it->second->shape() != t.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                           ", expected " + shape_str(t.shape()));
    }
    Tensor dst = t;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

MlpNet net_from_checkpoint(const std::vector<NamedTensor>& checkpoint, const std::string& prefix, Role role) {
  std::map<std::string, Tensor> by_name;
  for (const auto& [name, t] : checkpoint) by_name[name] = t;
  auto get = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw LookupError(name);
    return it->second.clone();
  };
  auto layer = [&](const std::string& name) {
    Linear l{get(name + ".weight"), get(name + ".bias")};
    if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.dim(0) != l.weight.dim(0)) {
      throw DimensionError("checkpoint layer '" + name + "' has inconsistent shapes");
    }
    l.weight.set_requires_grad(true);
    l.bias.set_requires_grad(true);
    return l;
  };
  MlpNet net;
  net.role = role;
  for (std::size_t i = 0; by_name.count(prefix + "layer" + std::to_string(i) + ".weight"); ++i) {
    net.hidden.push_back(layer(prefix + "layer" + std::to_string(i)));
    if (i > 0 && net.hidden[i].in() != net.hidden[i - 1].out()) {
      throw DimensionError("checkpoint layers do not chain at layer" + std::to_string(i));
    }
  }
  if (net.hidden.empty()) throw LookupError(prefix + "layer0.weight");
  net.classifier = layer(prefix + "classifier");
  if (net.classifier.in() != net.hidden.back().out()) throw DimensionError("checkpoint classifier does not chain");
  return net;
}

}  // namespace tmkd::models
