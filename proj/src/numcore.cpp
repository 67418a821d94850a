// SPDX-License-Identifier: Apache-2.0
#include "tmkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "tmkd/errors.hpp"

namespace tmkd {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  return Tensor(std::move(shape), std::move(data), true);
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) on rank " + std::to_string(rank()));
  return impl_->data.at(row * impl_->shape[1] + col);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  if (!impl_->grad) throw std::logic_error("tensor has no gradient");
  return *impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

Tensor Tensor::clone() const {
  return Tensor(impl_->shape, impl_->data, impl_->requires_grad);
}

void accumulate_grad(TensorImpl& impl, std::span<const double> values) {
  if (!impl.requires_grad) return;
  if (!impl.grad) impl.grad.emplace(impl.data.size(), 0.0);
  auto& g = *impl.grad;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

void Tape::record(std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, Backward backward) {
  if (replayed_) throw std::logic_error("cannot record on a replayed tape; clear() it first");
  nodes_.push_back({std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::reset_grads() {
  for (auto& node : nodes_) {
    node.output->grad.reset();
    for (auto& in : node.inputs) in->grad.reset();
  }
}

void Tape::backward(const Tensor& loss) {
  if (replayed_) {
    throw std::logic_error("tape already replayed; re-run the forward pass");
  }
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss does not depend on any tensor requiring a gradient");
  }
  reset_grads();
  loss.impl()->grad.emplace(1, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad) continue;
    it->backward(*it->output->grad);
  }
  replayed_ = true;
}

void Tape::clear() {
  reset_grads();
  nodes_.clear();
  replayed_ = false;
  relu_margin_ = 1e300;
}

void Tape::note_relu_input(double abs_min) {
  relu_margin_ = std::min(relu_margin_, abs_min);
}

namespace ops {
namespace {

bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (auto* t : ts) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_str(a.shape()));
  }
}

void require_finite(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

// Splits `shape` around `axis` into (outer, n, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape));
  }
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (int i = axis + 1; i < r; ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  Tensor y({m, n}, std::move(out), any_requires_grad({&a, &b}));
  if (y.requires_grad()) {
    auto ai = a.impl(), bi = b.impl();
    tape.record({ai, bi}, y.impl(), [ai, bi, m, k, n](std::span<const double> g) {
      if (ai->requires_grad) {
        // dA = G B^T
        std::vector<double> da(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* brow = bi->data.data() + p * n;
            const double* grow = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + p] = acc;
          }
        }
        accumulate_grad(*ai, da);
      }
      if (bi->requires_grad) {
        // dB = A^T G
        std::vector<double> db(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ai->data[i * k + p];
            double* drow = db.data() + p * n;
            const double* grow = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
        }
        accumulate_grad(*bi, db);
      }
    });
  }
  return y;
}

Tensor transpose(Tape& tape, const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  Tensor y({n, m}, std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ai = a.impl();
    tape.record({ai}, y.impl(), [ai, m, n](std::span<const double> g) {
      std::vector<double> da(m * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da[i * n + j] = g[j * m + i];
      accumulate_grad(*ai, da);
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor y(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), a.requires_grad());
  if (y.requires_grad()) {
    auto ai = a.impl();
    tape.record({ai}, y.impl(), [ai](std::span<const double> g) { accumulate_grad(*ai, g); });
  }
  return y;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  const bool row_broadcast =
      a.shape() != b.shape() && a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1);
  if (!row_broadcast) require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  auto B = b.data();
  const std::size_t n = b.numel();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i % n];
  Tensor y(a.shape(), std::move(out), any_requires_grad({&a, &b}));
  if (y.requires_grad()) {
    auto ai = a.impl(), bi = b.impl();
    tape.record({ai, bi}, y.impl(), [ai, bi, n](std::span<const double> g) {
      accumulate_grad(*ai, g);
      if (!bi->requires_grad) return;
      if (g.size() == n) {
        accumulate_grad(*bi, g);
      } else {
        std::vector<double> db(n, 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) db[i % n] += g[i];
        accumulate_grad(*bi, db);
      }
    });
  }
  return y;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
  Tensor y(a.shape(), std::move(out), any_requires_grad({&a, &b}));
  if (y.requires_grad()) {
    auto ai = a.impl(), bi = b.impl();
    tape.record({ai, bi}, y.impl(), [ai, bi](std::span<const double> g) {
      accumulate_grad(*ai, g);
      if (bi->requires_grad) {
        std::vector<double> db(g.begin(), g.end());
        for (auto& v : db) v = -v;
        accumulate_grad(*bi, db);
      }
    });
  }
  return y;
}

Tensor scale(Tape& tape, const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  Tensor y(a.shape(), std::move(out), a.requires_grad());
  if (y.requires_grad()) {
    auto ai = a.impl();
    tape.record({ai}, y.impl(), [ai, factor](std::span<const double> g) {
      std::vector<double> da(g.begin(), g.end());
      for (auto& v : da) v *= factor;
      accumulate_grad(*ai, da);
    });
  }
  return y;
}

Tensor scale_rows(Tape& tape, const Tensor& x, const Tensor& s) {
  require_rank2(x, "scale_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (s.numel() != m) {
    throw DimensionError("scale_rows: " + shape_str(s.shape()) + " does not give one factor per row of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(m * n);
  auto X = x.data();
  auto S = s.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = X[i * n + j] * S[i];
  Tensor y(x.shape(), std::move(out), any_requires_grad({&x, &s}));
  if (y.requires_grad()) {
    auto xi = x.impl(), si = s.impl();
    tape.record({xi, si}, y.impl(), [xi, si, m, n](std::span<const double> g) {
      if (xi->requires_grad) {
        std::vector<double> dx(m * n);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = g[i * n + j] * si->data[i];
        accumulate_grad(*xi, dx);
      }
      if (si->requires_grad) {
        std::vector<double> ds(m, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ds[i] += g[i * n + j] * xi->data[i * n + j];
        accumulate_grad(*si, ds);
      }
    });
  }
  return y;
}

Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  double margin = 1e300;
  for (auto& v : out) {
    margin = std::min(margin, std::abs(v));
    if (v < 0.0) v = 0.0;
  }
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    tape.note_relu_input(margin);
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi](std::span<const double> g) {
      std::vector<double> dx(g.size());
      // Subgradient 0 at the origin.
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] = xi->data[i] > 0.0 ? g[i] : 0.0;
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor exp(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(X[i]);
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    auto yi = y.impl();
    std::weak_ptr<TensorImpl> yw = yi;
    tape.record({xi}, yi, [xi, yw](std::span<const double> g) {
      auto yp = yw.lock();
      std::vector<double> dx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * yp->data[i];
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor log(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(X[i] > 0.0)) throw NumericError("log: non-positive input at index " + std::to_string(i));
    out[i] = std::log(X[i]);
  }
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi](std::span<const double> g) {
      std::vector<double> dx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] / xi->data[i];
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  Shape lead(first.begin(), first.end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead) {
      throw DimensionError("concat: leading dims differ, " + shape_str(first) + " vs " +
                           shape_str(p.shape()));
    }
    widths.push_back(p.shape().back());
    total += widths.back();
    rg = rg || p.requires_grad();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto P = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(P.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(total);
  Tensor y(std::move(shape), std::move(out), rg);
  if (rg) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    for (const auto& p : parts) ins.push_back(p.impl());
    tape.record(ins, y.impl(), [ins, widths, rows, total](std::span<const double> g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        if (ins[k]->requires_grad) {
          std::vector<double> d(rows * widths[k]);
          for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(g.data() + r * total + off, widths[k], d.data() + r * widths[k]);
          accumulate_grad(*ins[k], d);
        }
        off += widths[k];
      }
    });
  }
  return y;
}

Tensor select_cols(Tape& tape, const Tensor& x, const std::vector<std::size_t>& cols) {
  require_rank2(x, "select_cols");
  const std::size_t m = x.dim(0), n = x.dim(1), k = cols.size();
  if (k == 0) throw DimensionError("select_cols: empty column list");
  for (auto c : cols) {
    if (c >= n) throw DimensionError("select_cols: column " + std::to_string(c) + " out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(m * k);
  auto X = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = X[i * n + cols[j]];
  Tensor y({m, k}, std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi, cols, m, n, k](std::span<const double> g) {
      std::vector<double> dx(m * n, 0.0);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < k; ++j) dx[i * n + cols[j]] += g[i * k + j];
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y({1}, {acc}, x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi](std::span<const double> g) {
      std::vector<double> dx(xi->data.size(), g[0]);
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor mean(Tape& tape, const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y({1}, {acc / n}, x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi, n](std::span<const double> g) {
      std::vector<double> dx(xi->data.size(), g[0] / n);
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor trace(Tape& tape, const Tensor& x) {
  require_rank2(x, "trace");
  const std::size_t n = x.dim(0);
  if (x.dim(1) != n) throw DimensionError("trace: matrix is not square, " + shape_str(x.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i * n + i];
  Tensor y({1}, {acc}, x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    tape.record({xi}, y.impl(), [xi, n](std::span<const double> g) {
      std::vector<double> dx(n * n, 0.0);
      for (std::size_t i = 0; i < n; ++i) dx[i * n + i] = g[0];
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  require_finite(x, "softmax");
  const auto s = split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, X[idx(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) {
        out[idx(k)] = std::exp(X[idx(k)] - mx);
        z += out[idx(k)];
      }
      for (std::size_t k = 0; k < s.n; ++k) out[idx(k)] /= z;
    }
  }
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    std::weak_ptr<TensorImpl> yw = y.impl();
    tape.record({xi}, y.impl(), [xi, yw, s](std::span<const double> g) {
      auto yp = yw.lock();
      const auto& Y = yp->data;
      std::vector<double> dx(Y.size());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + in; };
          double dot = 0.0;
          for (std::size_t k = 0; k < s.n; ++k) dot += g[idx(k)] * Y[idx(k)];
          for (std::size_t k = 0; k < s.n; ++k) dx[idx(k)] = Y[idx(k)] * (g[idx(k)] - dot);
        }
      }
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor log_softmax(Tape& tape, const Tensor& x, int axis) {
  require_finite(x, "log_softmax");
  const auto s = split_axis(x.shape(), axis);
  std::vector<double> out(x.numel());
  auto X = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + in; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.n; ++k) mx = std::max(mx, X[idx(k)]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.n; ++k) z += std::exp(X[idx(k)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < s.n; ++k) out[idx(k)] = X[idx(k)] - lse;
    }
  }
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    std::weak_ptr<TensorImpl> yw = y.impl();
    tape.record({xi}, y.impl(), [xi, yw, s](std::span<const double> g) {
      auto yp = yw.lock();
      const auto& Y = yp->data;
      std::vector<double> dx(Y.size());
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          auto idx = [&](std::size_t k) { return (o * s.n + k) * s.inner + in; };
          double gsum = 0.0;
          for (std::size_t k = 0; k < s.n; ++k) gsum += g[idx(k)];
          for (std::size_t k = 0; k < s.n; ++k) dx[idx(k)] = g[idx(k)] - std::exp(Y[idx(k)]) * gsum;
        }
      }
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor kl_div(Tape& tape, const Tensor& target_probs, const Tensor& log_probs) {
  require_same_shape(target_probs, log_probs, "kl_div");
  const std::size_t n = target_probs.shape().back();
  const std::size_t rows = target_probs.numel() / n;
  auto T = target_probs.data();
  auto L = log_probs.data();
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mass = 0.0;
    double row = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double t = T[r * n + k];
      if (t < 0.0 || std::isnan(t)) {
        throw ContractError("kl_div: target row " + std::to_string(r) + " has a negative or NaN entry");
      }
      mass += t;
      if (t > 0.0) row += t * (std::log(t) - L[r * n + k]);
    }
    if (std::abs(mass - 1.0) > 1e-6) {
      throw ContractError("kl_div: target row " + std::to_string(r) + " sums to " + std::to_string(mass));
    }
    total += row;
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Tensor y({1}, {total * inv_rows}, any_requires_grad({&target_probs, &log_probs}));
  if (y.requires_grad()) {
    auto ti = target_probs.impl(), li = log_probs.impl();
    tape.record({ti, li}, y.impl(), [ti, li, inv_rows](std::span<const double> g) {
      const double up = g[0] * inv_rows;
      const auto& Tv = ti->data;
      const auto& Lv = li->data;
      if (ti->requires_grad) {
        std::vector<double> dt(Tv.size(), 0.0);
        for (std::size_t i = 0; i < Tv.size(); ++i)
          if (Tv[i] > 0.0) dt[i] = up * (std::log(Tv[i]) - Lv[i] + 1.0);
        accumulate_grad(*ti, dt);
      }
      if (li->requires_grad) {
        std::vector<double> dl(Tv.size());
        for (std::size_t i = 0; i < Tv.size(); ++i) dl[i] = -up * Tv[i];
        accumulate_grad(*li, dl);
      }
    });
  }
  return y;
}

Tensor l2_normalize(Tape& tape, const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  auto X = x.data();
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t k = 0; k < n; ++k) ss += X[r * n + k] * X[r * n + k];
    const double norm = std::sqrt(ss);
    if (!(norm > 1e-12)) {
      throw NumericError("l2_normalize: row " + std::to_string(r) + " has near-zero norm");
    }
    norms[r] = norm;
    for (std::size_t k = 0; k < n; ++k) out[r * n + k] = X[r * n + k] / norm;
  }
  Tensor y(x.shape(), std::move(out), x.requires_grad());
  if (y.requires_grad()) {
    auto xi = x.impl();
    std::weak_ptr<TensorImpl> yw = y.impl();
    tape.record({xi}, y.impl(), [xi, yw, norms, n, rows](std::span<const double> g) {
      auto yp = yw.lock();
      const auto& Y = yp->data;
      std::vector<double> dx(Y.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += Y[r * n + k] * g[r * n + k];
        for (std::size_t k = 0; k < n; ++k)
          dx[r * n + k] = (g[r * n + k] - Y[r * n + k] * dot) / norms[r];
      }
      accumulate_grad(*xi, dx);
    });
  }
  return y;
}

Tensor nll(Tape& tape, const Tensor& log_probs, std::span<const std::size_t> labels) {
  require_rank2(log_probs, "nll");
  const std::size_t m = log_probs.dim(0), c = log_probs.dim(1);
  if (labels.size() != m) {
    throw DimensionError("nll: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(m) + " rows");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= c) throw ContractError("nll: label out of range");
    acc -= log_probs[i * c + labels[i]];
  }
  const double inv_m = 1.0 / static_cast<double>(m);
  Tensor y({1}, {acc * inv_m}, log_probs.requires_grad());
  if (y.requires_grad()) {
    auto li = log_probs.impl();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    tape.record({li}, y.impl(), [li, lab, c, inv_m](std::span<const double> g) {
      std::vector<double> dl(li->data.size(), 0.0);
      for (std::size_t i = 0; i < lab.size(); ++i) dl[i * c + lab[i]] = -g[0] * inv_m;
      accumulate_grad(*li, dl);
    });
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not fit weight " +
                         shape_str(weight.shape()));
  }
  return add(tape, matmul(tape, x, transpose(tape, weight)), bias);
}

}  // namespace ops
}  // namespace tmkd
