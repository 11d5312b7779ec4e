#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "dadet/common.hpp"

namespace dadet {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // same size as data once requires_grad is set
  bool requires_grad = false;
};
}  // namespace detail

// Dense float32 tensor with shared storage. Copies are shallow: two Tensor
// values may alias the same data and gradient buffers. Gradients are
// allocated lazily when requires_grad is enabled and accumulate across
// backward passes until zero_grad().
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const;
  std::size_t numel() const;

  float* data();
  const float* data() const;
  float* grad();
  const float* grad() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  void zero_grad();

  // Scalar access; throws unless numel() == 1.
  float value() const;
  float at(std::size_t i) const;
  float grad_at(std::size_t i) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Deep copy of values only; result does not require grad.
  Tensor clone_values() const;

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  void require_defined() const;
};

// Records the backward rules of one forward pass and replays them in reverse.
// A tape may run backward once; reuse is a logic error. Distinct tapes share
// no state, so independent tapes on independent threads are safe as long as
// they do not touch the same tensors.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  // When disabled the ops still compute forward values but record nothing and
  // mark their outputs as not requiring grad. Used for inference.
  bool enabled() const { return enabled_; }

  void record(std::function<void()> rule);
  std::size_t size() const { return rules_.size(); }

  // Seeds d(root)/d(root) = seed and propagates. root must be a scalar that
  // requires grad. Throws if backward already ran on this tape.
  void backward(const Tensor& root, float seed = 1.0f);
  bool backward_ran() const { return backward_ran_; }

 private:
  std::vector<std::function<void()>> rules_;
  bool enabled_ = true;
  bool backward_ran_ = false;
};

// --- differentiable primitives ---------------------------------------------
// Each op validates shapes, computes the forward value, and registers its
// backward rule on the tape when any input requires grad.

// Identity forward; negated gradient backward. Scaling of reversed terms is
// applied at the loss level, not here.
Tensor grad_reverse(Tape& tape, const Tensor& x);

// Cross-correlation. x:[N,C,H,W] w:[F,C,kh,kw] b:[F] -> [N,F,H',W'] with
// H' = (H + 2*pad - kh)/stride + 1 (floored). Zero padding.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad);

// a:[N,K] b:[K,M] -> [N,M]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);

// x:[N,D] w:[D,M] b:[M] -> [N,M]
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);  // same shape
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);  // same shape, elementwise
Tensor mul_scalar(Tape& tape, const Tensor& a, float s);
Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);

// Row-wise softmax over the last axis of a 1-D or 2-D tensor, computed with
// max subtraction.
Tensor softmax(Tape& tape, const Tensor& x);

// Mean over all elements -> scalar. Accumulates in double.
Tensor mean(Tape& tape, const Tensor& x);

// x:[N,C,H,W], square window, no padding. Ties route the gradient to the
// first (row-major) maximal element.
Tensor max_pool2d(Tape& tape, const Tensor& x, int k, int stride);

// Collapse to 1-D [numel].
Tensor flatten(Tape& tape, const Tensor& x);

// Same elements, new shape; numel must match.
Tensor reshape(Tape& tape, const Tensor& x, Shape new_shape);

// Stack 1-D tensors of equal length D into [R,D].
Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows);

// Select a subset of rows of a 2-D tensor -> [idx.size(), D].
Tensor take_rows(Tape& tape, const Tensor& x, const std::vector<int>& idx);

// out[j] = x.flat[idx[j]], reshaped to out_shape. Duplicate indices are
// allowed; the backward pass scatter-adds.
Tensor gather(Tape& tape, const Tensor& x, const std::vector<int>& idx, Shape out_shape);

// Binary cross-entropy on logits, one label in {0,1} per element, computed in
// the numerically stable form max(z,0) - z*y + log(1 + exp(-|z|)).
Tensor sigmoid_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<float>& labels, Reduction red);

// logits:[N,C], labels[i] in [0,C). Fused log-softmax + NLL.
Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits,
                             const std::vector<int>& labels, Reduction red);

// Elementwise smooth L1 summed over all elements:
// 0.5*d^2 if |d| < 1 else |d| - 0.5, d = pred - target.
Tensor smooth_l1(Tape& tape, const Tensor& pred, const Tensor& target);

// Central-difference gradient check of a scalar-valued function at x.
// Runs f once with backward to get analytic gradients, then perturbs each
// coordinate by +/-eps (snapped to representable float steps) and compares.
// Returns the maximum relative error, |analytic - numeric| over
// max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const std::function<Tensor(Tape&, const Tensor&)>& f,
                         const Tensor& x, double eps);

}  // namespace dadet
