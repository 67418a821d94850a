// Plain vanilla-KD training loop over std::vector<double>, written without the
// tape so the distillation trainer can be compared against it bit for bit.
// Every floating-point expression is evaluated in the same order as the
// library kernels it stands in for.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

#include "tmkd/rng.hpp"

namespace kdref {

struct Layer {
  std::size_t in = 0, out = 0;
  std::vector<double> w;  // [out x in]
  std::vector<double> b;  // [out]
};

struct Mlp {
  std::vector<Layer> hidden;
  Layer head;
};

inline Layer init_layer(std::size_t in, std::size_t out, double bound, tmkd::Rng& rng) {
  Layer l{in, out, std::vector<double>(in * out), std::vector<double>(out, 0.0)};
  for (auto& x : l.w) x = rng.uniform(-bound, bound);
  return l;
}

inline Mlp init_mlp(std::size_t d_in, const std::vector<std::size_t>& hidden, std::size_t classes, tmkd::Rng& rng) {
  Mlp m;
  std::size_t in = d_in;
  for (auto h : hidden) {
    m.hidden.push_back(init_layer(in, h, std::sqrt(6.0 / static_cast<double>(in)), rng));
    in = h;
  }
  m.head = init_layer(in, classes, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  return m;
}

// y = x W^T + b for a [rows x in] batch.
inline std::vector<double> affine(const Layer& l, const std::vector<double>& x, std::size_t rows) {
  std::vector<double> y(rows * l.out, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t p = 0; p < l.in; ++p)
      for (std::size_t j = 0; j < l.out; ++j) y[i * l.out + j] += x[i * l.in + p] * l.w[j * l.in + p];
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += l.b[i % l.out];
  return y;
}

struct Trace {
  std::vector<std::vector<double>> inputs;  // input to each layer, head last
  std::vector<std::vector<double>> pre;     // pre-activations of hidden layers
  std::vector<double> logits;
};

inline Trace forward(const Mlp& m, const std::vector<double>& x, std::size_t rows) {
  Trace t;
  std::vector<double> h(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) h[i] = x[i] * 2.0 + -1.0;
  for (const auto& l : m.hidden) {
    t.inputs.push_back(h);
    auto z = affine(l, h, rows);
    t.pre.push_back(z);
    for (auto& v : z)
      if (v < 0.0) v = 0.0;
    h = std::move(z);
  }
  t.inputs.push_back(h);
  t.logits = affine(m.head, h, rows);
  return t;
}

inline void softmax_rows(std::vector<double>& v, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = v.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      x[k] = std::exp(x[k] - mx);
      z += x[k];
    }
    for (std::size_t k = 0; k < n; ++k) x[k] /= z;
  }
}

inline void log_softmax_rows(std::vector<double>& v, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* x = v.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[k]);
    double z = 0.0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp(x[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < n; ++k) x[k] = x[k] - lse;
  }
}

struct Grads {
  std::vector<std::vector<double>> w, b;  // hidden layers then head
};

// Gradient of alpha * KL(softmax(z_t/tau) || softmax(z_s/tau)) averaged over rows.
inline Grads kd_grads(const Mlp& m, const Trace& t, const std::vector<double>& z_t, std::size_t rows, double tau,
                      double alpha) {
  const std::size_t c = m.head.out;
  const double inv = 1.0 / tau;
  std::vector<double> target(z_t.size()), ls(t.logits.size());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = z_t[i] * inv;
  softmax_rows(target, rows, c);
  for (std::size_t i = 0; i < ls.size(); ++i) ls[i] = t.logits[i] * inv;
  log_softmax_rows(ls, rows, c);

  const double up = alpha * (1.0 / static_cast<double>(rows));
  std::vector<double> g(ls.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = -up * target[i];
  for (std::size_t r = 0; r < rows; ++r) {
    double gsum = 0.0;
    for (std::size_t k = 0; k < c; ++k) gsum += g[r * c + k];
    for (std::size_t k = 0; k < c; ++k) g[r * c + k] = g[r * c + k] - std::exp(ls[r * c + k]) * gsum;
  }
  for (auto& v : g) v *= inv;

  const std::size_t n_layers = m.hidden.size() + 1;
  Grads out;
  out.w.resize(n_layers);
  out.b.resize(n_layers);
  for (std::size_t li = n_layers; li-- > 0;) {
    const Layer& l = li == m.hidden.size() ? m.head : m.hidden[li];
    const auto& x = t.inputs[li];
    out.b[li].assign(l.out, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) out.b[li][i % l.out] += g[i];
    std::vector<double> dwt(l.in * l.out, 0.0);  // gradient of W^T, [in x out]
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t p = 0; p < l.in; ++p)
        for (std::size_t j = 0; j < l.out; ++j) dwt[p * l.out + j] += x[i * l.in + p] * g[i * l.out + j];
    out.w[li].assign(l.out * l.in, 0.0);
    for (std::size_t p = 0; p < l.in; ++p)
      for (std::size_t j = 0; j < l.out; ++j) out.w[li][j * l.in + p] = dwt[p * l.out + j];
    if (li == 0) break;
    std::vector<double> dx(rows * l.in, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t p = 0; p < l.in; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < l.out; ++j) acc += g[i * l.out + j] * l.w[j * l.in + p];
        dx[i * l.in + p] = acc;
      }
    const auto& pre = t.pre[li - 1];
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = pre[i] > 0.0 ? dx[i] : 0.0;
    g = std::move(dx);
  }
  return out;
}

struct Sgd {
  double lr = 0.001, momentum = 0.9, weight_decay = 5e-4, decay_factor = 0.1;
  std::size_t warmup = 5;
  std::vector<std::size_t> decay_epochs;

  double rate(std::size_t epoch) const {
    if (epoch < warmup) return lr * static_cast<double>(epoch + 1) / static_cast<double>(warmup);
    double r = lr;
    for (auto d : decay_epochs)
      if (epoch >= d) r *= decay_factor;
    return r;
  }
};

inline void sgd_update(std::vector<double>& p, std::vector<double>& v, const std::vector<double>& g, const Sgd& s,
                       double lr) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = s.momentum * v[i] + (g[i] + s.weight_decay * p[i]);
    p[i] = p[i] - lr * v[i];
  }
}

inline std::vector<std::size_t> permutation(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  tmkd::Rng rng(tmkd::mix_seed(seed, 0x5348554646ULL + epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

inline bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// Flattened parameters in the library's order: layer weight, bias, ..., head.
inline std::vector<std::vector<double>> flatten(const Mlp& m) {
  std::vector<std::vector<double>> out;
  for (const auto& l : m.hidden) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  out.push_back(m.head.w);
  out.push_back(m.head.b);
  return out;
}

}  // namespace kdref
