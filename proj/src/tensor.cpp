#include "etd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace etd {

namespace {

thread_local Tape* g_current_tape = nullptr;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double phi_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double phi_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// c[m,n] += a[m,k] * b[k,n]
void mm_nn(const double* a, const double* b, double* c, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (Index p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (Index j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
void mm_nt(const double* a, const double* b, double* c, Index m, Index n, Index k) {
  for (Index i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (Index p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (Index j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void mm_tn(const double* a, const double* b, double* c, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (Index p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (Index j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (Tape::current() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

Index last_dim(const Tensor& t) {
  if (t.ndim() == 0) throw ShapeError("expected tensor with at least one dimension");
  return t.shape().back();
}

using ImplPtr = std::shared_ptr<detail::TensorImpl>;

}  // namespace

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != static_cast<Index>(data.size())) {
    throw ShapeError("tensor data size " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not a scalar, shape " + shape_str(shape()));
  return impl_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw ShapeError("grad(): no gradient present; run backward first");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const Tensor& out, std::function<void()> rule) {
  g_current_tape->entries_.push_back(Entry{out.impl_ptr(), std::move(rule)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  std::ptrdiff_t start = -1;
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(entries_.size()) - 1; i >= 0; --i) {
    if (entries_[static_cast<std::size_t>(i)].out.get() == loss.impl()) {
      start = i;
      break;
    }
  }
  if (start < 0) throw ShapeError("backward: loss was not produced on this tape");
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (std::ptrdiff_t i = start; i >= 0; --i) {
    Entry& e = entries_[static_cast<std::size_t>(i)];
    if (!e.out->grad.empty()) e.rule();
  }
}

TapeScope::TapeScope(Tape& tape) : prev_(g_current_tape) { g_current_tape = &tape; }
TapeScope::~TapeScope() { g_current_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_current_tape) { g_current_tape = nullptr; }
NoGradScope::~NoGradScope() { g_current_tape = prev_; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) {
    throw ShapeError("matmul: expected 2-D operands, got " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  mm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [ai, bi, oi, m, k, n] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        mm_nt(g, bi->data.data(), ai->grad.data(), m, n, k);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        mm_tn(ai->data.data(), g, bi->grad.data(), m, k, n);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.ndim() != 2) throw ShapeError("linear: weight must be 2-D, got " + shape_str(w.shape()));
  const Index k = w.dim(0), n = w.dim(1);
  if (last_dim(x) != k) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != n)) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match output width");
  }
  const Index rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor out = Tensor::zeros(std::move(out_shape));
  mm_nn(x.data().data(), w.data().data(), out.data().data(), rows, k, n);
  if (bias.defined()) {
    double* o = out.data().data();
    const double* bv = bias.data().data();
    for (Index i = 0; i < rows; ++i) {
      double* oi = o + i * n;
      for (Index j = 0; j < n; ++j) oi[j] += bv[j];
    }
  }
  if (recording({&x, &w, &bias})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), wi = w.impl_ptr(), oi = out.impl_ptr();
    ImplPtr biasi = bias.defined() ? bias.impl_ptr() : nullptr;
    Tape::record(out, [xi, wi, biasi, oi, rows, k, n] {
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        mm_nt(g, wi->data.data(), xi->grad.data(), rows, n, k);
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        mm_tn(xi->data.data(), g, wi->grad.data(), rows, k, n);
      }
      if (biasi && biasi->requires_grad) {
        biasi->ensure_grad();
        double* bg = biasi->grad.data();
        for (Index i = 0; i < rows; ++i) {
          const double* gi = g + i * n;
          for (Index j = 0; j < n; ++j) bg[j] += gi[j];
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const Index n = a.numel();
  Tensor out = Tensor::zeros(a.shape());
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double* o = out.data().data();
  for (Index i = 0; i < n; ++i) o[i] = av[i] + bv[i];
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [ai, bi, oi, n] {
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (Index i = 0; i < n; ++i) ai->grad[static_cast<std::size_t>(i)] += g[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (Index i = 0; i < n; ++i) bi->grad[static_cast<std::size_t>(i)] += g[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  const Index n = x.numel();
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  double* o = out.data().data();
  for (Index i = 0; i < n; ++i) o[i] = c * xv[i];
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, oi, c, n] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      for (Index i = 0; i < n; ++i) xi->grad[static_cast<std::size_t>(i)] += c * g[i];
    });
  }
  return out;
}

namespace {

void require_suffix(const Tensor& x, const Tensor& p, const char* op) {
  if (p.ndim() > x.ndim()) throw ShapeError(std::string(op) + ": operand rank exceeds input rank");
  const std::size_t off = x.shape().size() - p.shape().size();
  for (std::size_t i = 0; i < p.shape().size(); ++i) {
    if (x.shape()[off + i] != p.shape()[i]) {
      throw ShapeError(std::string(op) + ": " + shape_str(p.shape()) + " is not a suffix of " +
                       shape_str(x.shape()));
    }
  }
}

}  // namespace

Tensor add_suffix(const Tensor& x, const Tensor& p) {
  require_suffix(x, p, "add_suffix");
  const Index n = x.numel(), pn = p.numel(), blocks = n / pn;
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  const double* pv = p.data().data();
  double* o = out.data().data();
  for (Index b = 0; b < blocks; ++b) {
    const Index base = b * pn;
    for (Index j = 0; j < pn; ++j) o[base + j] = xv[base + j] + pv[j];
  }
  if (recording({&x, &p})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), pi = p.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, pi, oi, blocks, pn] {
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        const Index n = blocks * pn;
        for (Index i = 0; i < n; ++i) xi->grad[static_cast<std::size_t>(i)] += g[i];
      }
      if (pi->requires_grad) {
        pi->ensure_grad();
        double* pg = pi->grad.data();
        for (Index b = 0; b < blocks; ++b) {
          const double* gb = g + b * pn;
          for (Index j = 0; j < pn; ++j) pg[j] += gb[j];
        }
      }
    });
  }
  return out;
}

Tensor mul_suffix(const Tensor& x, const Tensor& m) {
  require_suffix(x, m, "mul_suffix");
  const Index n = x.numel(), pn = m.numel(), blocks = n / pn;
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  const double* mv = m.data().data();
  double* o = out.data().data();
  for (Index b = 0; b < blocks; ++b) {
    const Index base = b * pn;
    for (Index j = 0; j < pn; ++j) o[base + j] = xv[base + j] * mv[j];
  }
  if (recording({&x, &m})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), mi = m.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, mi, oi, blocks, pn] {
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        const double* mv = mi->data.data();
        for (Index b = 0; b < blocks; ++b) {
          const Index base = b * pn;
          for (Index j = 0; j < pn; ++j) xi->grad[static_cast<std::size_t>(base + j)] += g[base + j] * mv[j];
        }
      }
      if (mi->requires_grad) {
        mi->ensure_grad();
        const double* xv = xi->data.data();
        double* mg = mi->grad.data();
        for (Index b = 0; b < blocks; ++b) {
          const Index base = b * pn;
          for (Index j = 0; j < pn; ++j) mg[j] += g[base + j] * xv[base + j];
        }
      }
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  const Index w = last_dim(x);
  if (w < 1) throw ShapeError("softmax_rows: empty last dimension");
  const Index rows = x.numel() / w;
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  double* o = out.data().data();
  for (Index r = 0; r < rows; ++r) {
    const double* xr = xv + r * w;
    double* orow = o + r * w;
    double mx = xr[0];
    for (Index j = 1; j < w; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (Index j = 0; j < w; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      z += orow[j];
    }
    const double inv = 1.0 / z;
    for (Index j = 0; j < w; ++j) orow[j] *= inv;
  }
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, oi, rows, w] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      const double* p = oi->data.data();
      double* xg = xi->grad.data();
      for (Index r = 0; r < rows; ++r) {
        const double* gr = g + r * w;
        const double* pr = p + r * w;
        double dot = 0.0;
        for (Index j = 0; j < w; ++j) dot += gr[j] * pr[j];
        double* xgr = xg + r * w;
        for (Index j = 0; j < w; ++j) xgr[j] += pr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  const Index n = x.numel();
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  double* o = out.data().data();
  for (Index i = 0; i < n; ++i) o[i] = xv[i] * phi_cdf(xv[i]);
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, oi, n] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      const double* xv = xi->data.data();
      for (Index i = 0; i < n; ++i) {
        const double d = phi_cdf(xv[i]) + xv[i] * phi_pdf(xv[i]);
        xi->grad[static_cast<std::size_t>(i)] += g[i] * d;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index w = last_dim(x);
  if (gain.ndim() != 1 || gain.dim(0) != w || bias.ndim() != 1 || bias.dim(0) != w) {
    throw ShapeError("layer_norm: gain/bias must be 1-D of width " + std::to_string(w));
  }
  const Index rows = x.numel() / w;
  Tensor out = Tensor::zeros(x.shape());
  const double* xv = x.data().data();
  const double* gv = gain.data().data();
  const double* bv = bias.data().data();
  double* o = out.data().data();
  for (Index r = 0; r < rows; ++r) {
    const double* xr = xv + r * w;
    double* orow = o + r * w;
    double mean = 0.0;
    for (Index j = 0; j < w; ++j) mean += xr[j];
    mean /= static_cast<double>(w);
    double var = 0.0;
    for (Index j = 0; j < w; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(w);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (Index j = 0; j < w; ++j) orow[j] = gv[j] * (xr[j] - mean) * rstd + bv[j];
  }
  if (recording({&x, &gain, &bias})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, gi, bi, oi, rows, w, eps] {
      const double* g = oi->grad.data();
      const double* xv = xi->data.data();
      const double* gv = gi->data.data();
      const double wf = static_cast<double>(w);
      std::vector<double> xhat(static_cast<std::size_t>(w));
      for (Index r = 0; r < rows; ++r) {
        const double* xr = xv + r * w;
        const double* gr = g + r * w;
        double mean = 0.0;
        for (Index j = 0; j < w; ++j) mean += xr[j];
        mean /= wf;
        double var = 0.0;
        for (Index j = 0; j < w; ++j) {
          const double d = xr[j] - mean;
          var += d * d;
        }
        var /= wf;
        const double rstd = 1.0 / std::sqrt(var + eps);
        for (Index j = 0; j < w; ++j) xhat[static_cast<std::size_t>(j)] = (xr[j] - mean) * rstd;
        if (gi->requires_grad) {
          gi->ensure_grad();
          for (Index j = 0; j < w; ++j) gi->grad[static_cast<std::size_t>(j)] += gr[j] * xhat[static_cast<std::size_t>(j)];
        }
        if (bi->requires_grad) {
          bi->ensure_grad();
          for (Index j = 0; j < w; ++j) bi->grad[static_cast<std::size_t>(j)] += gr[j];
        }
        if (xi->requires_grad) {
          xi->ensure_grad();
          double sum_g = 0.0, sum_gx = 0.0;
          for (Index j = 0; j < w; ++j) {
            const double gg = gr[j] * gv[j];
            sum_g += gg;
            sum_gx += gg * xhat[static_cast<std::size_t>(j)];
          }
          const double mg = sum_g / wf, mgx = sum_gx / wf;
          double* xgr = xi->grad.data() + r * w;
          for (Index j = 0; j < w; ++j) {
            const double gg = gr[j] * gv[j];
            xgr[j] += (gg - mg - xhat[static_cast<std::size_t>(j)] * mgx) * rstd;
          }
        }
      }
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const Index n = a.numel();
  const double* av = a.data().data();
  const double* bv = b.data().data();
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(n));
  if (recording({&a, &b})) {
    out.set_requires_grad(true);
    ImplPtr ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [ai, bi, oi, n] {
      const double g = oi->grad[0];
      const double c = 2.0 * g / static_cast<double>(n);
      const double* av = ai->data.data();
      const double* bv = bi->data.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (Index i = 0; i < n; ++i) ai->grad[static_cast<std::size_t>(i)] += c * (av[i] - bv[i]);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (Index i = 0; i < n; ++i) bi->grad[static_cast<std::size_t>(i)] -= c * (av[i] - bv[i]);
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const Index n = x.numel();
  const double* xv = x.data().data();
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) acc += xv[i];
  Tensor out = Tensor::scalar(acc);
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, oi, n] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const double g = oi->grad[0];
      for (Index i = 0; i < n; ++i) xi->grad[static_cast<std::size_t>(i)] += g;
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Index batch, Index seq) {
  if (table.ndim() != 2) throw ShapeError("embedding_lookup: table must be 2-D");
  if (static_cast<Index>(ids.size()) != batch * seq) {
    throw ShapeError("embedding_lookup: ids size does not match batch*seq");
  }
  const Index v = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= v) throw ShapeError("embedding_lookup: id " + std::to_string(id) + " out of range");
  }
  Tensor out = Tensor::zeros({batch, seq, d});
  const double* tv = table.data().data();
  double* o = out.data().data();
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const double* row = tv + static_cast<Index>(ids[p]) * d;
    double* orow = o + static_cast<Index>(p) * d;
    std::copy(row, row + d, orow);
  }
  if (recording({&table})) {
    out.set_requires_grad(true);
    ImplPtr ti = table.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [ti, oi, ids, d] {
      if (!ti->requires_grad) return;
      ti->ensure_grad();
      const double* g = oi->grad.data();
      for (std::size_t p = 0; p < ids.size(); ++p) {
        double* trow = ti->grad.data() + static_cast<Index>(ids[p]) * d;
        const double* grow = g + static_cast<Index>(p) * d;
        for (Index j = 0; j < d; ++j) trow[j] += grow[j];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, Index begin, Index count) {
  if (x.ndim() != 2) throw ShapeError("slice_rows: expected 2-D input");
  const Index r = x.dim(0), c = x.dim(1);
  if (begin < 0 || count < 0 || begin + count > r) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") exceeds " + std::to_string(r) + " rows");
  }
  Tensor out = Tensor::zeros({count, c});
  std::copy(x.data().begin() + begin * c, x.data().begin() + (begin + count) * c, out.data().begin());
  if (recording({&x})) {
    out.set_requires_grad(true);
    ImplPtr xi = x.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [xi, oi, begin, count, c] {
      if (!xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* xg = xi->grad.data() + begin * c;
      const Index n = count * c;
      for (Index i = 0; i < n; ++i) xg[i] += g[i];
    });
  }
  return out;
}

Tensor attention_scores(const Tensor& q, const Tensor& k, Index heads) {
  if (q.ndim() != 3 || k.ndim() != 3) throw ShapeError("attention_scores: expected [b,s,d] inputs");
  require_same_shape(q, k, "attention_scores");
  const Index b = q.dim(0), s = q.dim(1), d = q.dim(2);
  if (d % heads != 0) throw ShapeError("attention_scores: width not divisible by head count");
  const Index dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor out = Tensor::zeros({b, heads, s, s});
  const double* qv = q.data().data();
  const double* kv = k.data().data();
  double* o = out.data().data();
  for (Index bi = 0; bi < b; ++bi) {
    for (Index h = 0; h < heads; ++h) {
      double* oh = o + ((bi * heads + h) * s) * s;
      for (Index t = 0; t < s; ++t) {
        const double* qr = qv + (bi * s + t) * d + h * dk;
        for (Index u = 0; u < s; ++u) {
          const double* kr = kv + (bi * s + u) * d + h * dk;
          double acc = 0.0;
          for (Index j = 0; j < dk; ++j) acc += qr[j] * kr[j];
          oh[t * s + u] = acc * inv_sqrt_dk;
        }
      }
    }
  }
  if (recording({&q, &k})) {
    out.set_requires_grad(true);
    ImplPtr qi = q.impl_ptr(), ki = k.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [qi, ki, oi, b, heads, s, dk, inv_sqrt_dk] {
      const Index d = heads * dk;
      const double* g = oi->grad.data();
      if (qi->requires_grad) qi->ensure_grad();
      if (ki->requires_grad) ki->ensure_grad();
      for (Index bi = 0; bi < b; ++bi) {
        for (Index h = 0; h < heads; ++h) {
          const double* gh = g + ((bi * heads + h) * s) * s;
          if (qi->requires_grad) {
            for (Index t = 0; t < s; ++t) {
              double* qg = qi->grad.data() + (bi * s + t) * d + h * dk;
              for (Index u = 0; u < s; ++u) {
                const double gv = gh[t * s + u] * inv_sqrt_dk;
                const double* kr = ki->data.data() + (bi * s + u) * d + h * dk;
                for (Index j = 0; j < dk; ++j) qg[j] += gv * kr[j];
              }
            }
          }
          if (ki->requires_grad) {
            for (Index u = 0; u < s; ++u) {
              double* kg = ki->grad.data() + (bi * s + u) * d + h * dk;
              for (Index t = 0; t < s; ++t) {
                const double gv = gh[t * s + u] * inv_sqrt_dk;
                const double* qr = qi->data.data() + (bi * s + t) * d + h * dk;
                for (Index j = 0; j < dk; ++j) kg[j] += gv * qr[j];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor attention_mix(const Tensor& p, const Tensor& v) {
  if (p.ndim() != 4 || v.ndim() != 3) throw ShapeError("attention_mix: expected p [b,a,s,s], v [b,s,d]");
  const Index b = p.dim(0), heads = p.dim(1), s = p.dim(2), d = v.dim(2);
  if (p.dim(3) != s || v.dim(0) != b || v.dim(1) != s || d % heads != 0) {
    throw ShapeError("attention_mix: inconsistent shapes " + shape_str(p.shape()) + " / " +
                     shape_str(v.shape()));
  }
  const Index dk = d / heads;
  Tensor out = Tensor::zeros({b, s, d});
  const double* pv = p.data().data();
  const double* vv = v.data().data();
  double* o = out.data().data();
  for (Index bi = 0; bi < b; ++bi) {
    for (Index h = 0; h < heads; ++h) {
      const double* ph = pv + ((bi * heads + h) * s) * s;
      for (Index t = 0; t < s; ++t) {
        double* orow = o + (bi * s + t) * d + h * dk;
        for (Index u = 0; u < s; ++u) {
          const double w = ph[t * s + u];
          const double* vrow = vv + (bi * s + u) * d + h * dk;
          for (Index j = 0; j < dk; ++j) orow[j] += w * vrow[j];
        }
      }
    }
  }
  if (recording({&p, &v})) {
    out.set_requires_grad(true);
    ImplPtr pi = p.impl_ptr(), vi = v.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [pi, vi, oi, b, heads, s, dk] {
      const Index d = heads * dk;
      const double* g = oi->grad.data();
      if (pi->requires_grad) pi->ensure_grad();
      if (vi->requires_grad) vi->ensure_grad();
      for (Index bi = 0; bi < b; ++bi) {
        for (Index h = 0; h < heads; ++h) {
          if (pi->requires_grad) {
            double* pg = pi->grad.data() + ((bi * heads + h) * s) * s;
            for (Index t = 0; t < s; ++t) {
              const double* grow = g + (bi * s + t) * d + h * dk;
              for (Index u = 0; u < s; ++u) {
                const double* vrow = vi->data.data() + (bi * s + u) * d + h * dk;
                double acc = 0.0;
                for (Index j = 0; j < dk; ++j) acc += grow[j] * vrow[j];
                pg[t * s + u] += acc;
              }
            }
          }
          if (vi->requires_grad) {
            const double* ph = pi->data.data() + ((bi * heads + h) * s) * s;
            for (Index t = 0; t < s; ++t) {
              const double* grow = g + (bi * s + t) * d + h * dk;
              for (Index u = 0; u < s; ++u) {
                const double w = ph[t * s + u];
                double* vg = vi->grad.data() + (bi * s + u) * d + h * dk;
                for (Index j = 0; j < dk; ++j) vg[j] += w * grow[j];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<Index>& positions,
                            const std::vector<int>& targets) {
  if (logits.ndim() != 3) throw ShapeError("masked_cross_entropy: expected logits [b,s,v]");
  if (positions.empty()) throw ConfigError("masked_cross_entropy: no masked positions");
  if (positions.size() != targets.size()) {
    throw ShapeError("masked_cross_entropy: positions/targets size mismatch");
  }
  const Index rows = logits.dim(0) * logits.dim(1);
  const Index v = logits.dim(2);
  const double* lv = logits.data().data();
  const Index np = static_cast<Index>(positions.size());
  // softmax at each masked position is retained for the backward rule
  std::vector<double> probs(static_cast<std::size_t>(np * v));
  double acc = 0.0;
  for (Index i = 0; i < np; ++i) {
    const Index pos = positions[static_cast<std::size_t>(i)];
    const int tgt = targets[static_cast<std::size_t>(i)];
    if (pos < 0 || pos >= rows) throw ShapeError("masked_cross_entropy: position out of range");
    if (tgt < 0 || tgt >= v) throw ShapeError("masked_cross_entropy: target out of range");
    const double* row = lv + pos * v;
    double mx = row[0];
    for (Index j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* prow = probs.data() + i * v;
    for (Index j = 0; j < v; ++j) {
      prow[j] = std::exp(row[j] - mx);
      z += prow[j];
    }
    const double inv = 1.0 / z;
    for (Index j = 0; j < v; ++j) prow[j] *= inv;
    acc += std::log(z) + mx - row[tgt];
  }
  Tensor out = Tensor::scalar(acc / static_cast<double>(np));
  if (recording({&logits})) {
    out.set_requires_grad(true);
    ImplPtr li = logits.impl_ptr(), oi = out.impl_ptr();
    Tape::record(out, [li, oi, positions, targets, probs = std::move(probs), np, v] {
      if (!li->requires_grad) return;
      li->ensure_grad();
      const double c = oi->grad[0] / static_cast<double>(np);
      for (Index i = 0; i < np; ++i) {
        const Index pos = positions[static_cast<std::size_t>(i)];
        const double* prow = probs.data() + i * v;
        double* grow = li->grad.data() + pos * v;
        for (Index j = 0; j < v; ++j) grow[j] += c * prow[j];
        grow[targets[static_cast<std::size_t>(i)]] -= c;
      }
    });
  }
  return out;
}

void check_finite(const Tensor& t, const std::string& what) {
  for (double x : t.data()) {
    if (!std::isfinite(x)) throw NumericError(what + ": non-finite value encountered");
  }
}

}  // namespace etd
