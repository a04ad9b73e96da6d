#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "etd/errors.hpp"

namespace etd {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward reaches this node
  bool requires_grad = false;

  Index numel() const { return static_cast<Index>(data.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major float64 tensor. Value type over a shared buffer; ops are
// free functions that record backward rules on the active Tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index dim(std::size_t i) const { return impl_->shape[i]; }
  Index ndim() const { return static_cast<Index>(impl_->shape.size()); }
  Index numel() const { return impl_->numel(); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<double>& grad() const;
  void zero_grad();

  // Deep copy of values; grad not copied, requires_grad preserved.
  Tensor clone() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Tape;
};

// Records one entry per op in execution order (hence already topological);
// backward walks the list once, in reverse, from the loss entry.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }

  // dLoss/dNode for every node between loss and the leaves. Accumulates into
  // existing grads; callers zero leaf grads between steps.
  void backward(const Tensor& loss);

  static Tape* current();
  static void record(const Tensor& out, std::function<void()> rule);

 private:
  struct Entry {
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void()> rule;
  };
  std::vector<Entry> entries_;
};

// RAII: make `tape` the active tape on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// RAII: suspend recording (teacher forwards, evaluation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// ---- ops ----

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x [..., k] x w [k, n] (+ bias [n] if defined) -> [..., n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor scale(const Tensor& x, double c);

// x + p broadcast: p.shape must be a suffix of x.shape
Tensor add_suffix(const Tensor& x, const Tensor& p);

// x * m broadcast over suffix; used for neuron ablation masks
Tensor mul_suffix(const Tensor& x, const Tensor& m);

// softmax over the last dimension, max-subtracted
Tensor softmax_rows(const Tensor& x);

// exact-erf GeLU: x * Phi(x)
Tensor gelu(const Tensor& x);

// normalize over the last dimension, then per-coordinate affine
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor mse(const Tensor& a, const Tensor& b);  // scalar
Tensor sum(const Tensor& x);                   // scalar

// table [v, d] gathered by ids -> [batch, seq, d]
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Index batch, Index seq);

// rows [begin, begin+count) of a 2-D tensor
Tensor slice_rows(const Tensor& x, Index begin, Index count);

// q,k [b, s, heads*d_k] -> scaled logits [b, heads, s, s]
Tensor attention_scores(const Tensor& q, const Tensor& k, Index heads);

// p [b, heads, s, s], v [b, s, heads*d_k] -> concatenated head outputs [b, s, heads*d_k]
Tensor attention_mix(const Tensor& p, const Tensor& v);

// mean cross-entropy of softmax(logits) at the given flat positions.
// logits [b, s, v]; positions index into the flattened [b*s] axis.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<Index>& positions,
                            const std::vector<int>& targets);

void check_finite(const Tensor& t, const std::string& what);

}  // namespace etd
