// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major float64 tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// parameters need (the optimizer mutates the data that the model reads).
// Operations are free functions in tmkd::ops that take the Tape explicitly.
// A node is recorded only when at least one input requires a gradient, so
// frozen-teacher inference costs nothing on the tape.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tmkd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::optional<std::vector<double>> grad;
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);
  /// Leaf tensor that accumulates a gradient.
  static Tensor parameter(Shape shape, std::vector<double> data);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t row, std::size_t col) const;
  /// Value of a one-element tensor.
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return impl_->grad.has_value(); }
  std::span<const double> grad() const;
  void reset_grad() { impl_->grad.reset(); }

  /// Same values, new storage, no gradient.
  Tensor detach() const;
  /// Deep copy preserving the requires_grad flag (but not the gradient).
  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed operations.
///
/// backward() replays the record in reverse. Each call first resets every
/// gradient the tape touches, so gradients always describe the most recent
/// backward pass and never accumulate across passes. A tape can be replayed
/// once; a second backward() without clear() throws std::logic_error.
class Tape {
 public:
  using Backward = std::function<void(std::span<const double> grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs,
              std::shared_ptr<TensorImpl> output, Backward backward);

  void backward(const Tensor& loss);
  /// Drops every node and resets the gradients of all recorded tensors.
  void clear();

  std::size_t size() const noexcept { return nodes_.size(); }
  bool replayed() const noexcept { return replayed_; }

  /// Smallest |x| seen at the input of any relu recorded on this tape.
  /// Finite-difference checks use it to stay away from the kink.
  double relu_margin() const noexcept { return relu_margin_; }
  void note_relu_input(double abs_min);

 private:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    Backward backward;
  };
  void reset_grads();

  std::vector<Node> nodes_;
  bool replayed_ = false;
  double relu_margin_ = 1e300;
};

/// Adds `values` into `impl`'s gradient, allocating zeros first if absent.
/// No-op when `impl` does not require a gradient.
void accumulate_grad(TensorImpl& impl, std::span<const double> values);

namespace ops {

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor transpose(Tape& tape, const Tensor& a);
/// Same data under a new shape with equal element count.
Tensor reshape(Tape& tape, const Tensor& a, Shape shape);

/// Elementwise a + b. `b` may also be rank 1 with length equal to the last
/// dimension of rank-2 `a`, in which case it is added to every row.
Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& a, double factor);
/// y[i, j] = x[i, j] * s[i]; `s` holds one value per row of `x`.
Tensor scale_rows(Tape& tape, const Tensor& x, const Tensor& s);

Tensor relu(Tape& tape, const Tensor& x);
Tensor exp(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);

/// Concatenation along the last axis. All parts share the leading dims.
Tensor concat(Tape& tape, const std::vector<Tensor>& parts);
Tensor select_cols(Tape& tape, const Tensor& x,
                   const std::vector<std::size_t>& cols);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
Tensor trace(Tape& tape, const Tensor& x);

/// Softmax along `axis` (negative counts from the back). Max-subtracted.
Tensor softmax(Tape& tape, const Tensor& x, int axis = -1);
Tensor log_softmax(Tape& tape, const Tensor& x, int axis = -1);

/// KL(target || exp(log_probs)) summed over the last axis and averaged over
/// rows. Target rows must be nonnegative and sum to 1 within 1e-6.
/// Elements with zero target probability contribute zero value and zero
/// gradient (the t·ln t → 0 limit).
Tensor kl_div(Tape& tape, const Tensor& target_probs, const Tensor& log_probs);

/// Row-wise x / ||x||_2. Rows with norm <= 1e-12 are a NumericError.
Tensor l2_normalize(Tape& tape, const Tensor& x);

/// Mean negative log-likelihood: -(1/m) sum_i log_probs[i, labels[i]].
Tensor nll(Tape& tape, const Tensor& log_probs,
           std::span<const std::size_t> labels);

/// x W^T + b with W stored [out x in] and b [out].
Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight,
              const Tensor& bias);

}  // namespace ops
}  // namespace tmkd
