#include "qddetr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace qd {

namespace {

thread_local bool g_grad_enabled = true;

using ImplPtr = std::shared_ptr<TensorImpl>;

bool wants_grad(std::initializer_list<const Tensor*> parents) {
  if (!g_grad_enabled) return false;
  for (const Tensor* p : parents) {
    if (p->requires_grad()) return true;
  }
  return false;
}

ImplPtr new_impl(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  const std::size_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, Real(0));
  impl->requires_grad = requires_grad;
  impl->is_leaf = !requires_grad;
  return impl;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

void check_mask(const Mask& mask, std::size_t numel, std::size_t last, const char* op) {
  if (mask.size() != last && mask.size() != numel) {
    throw MaskError(std::string(op) + ": mask of size " + std::to_string(mask.size()) +
                    " fits neither last axis " + std::to_string(last) + " nor " +
                    std::to_string(numel) + " elements");
  }
}

inline bool mask_at(const Mask& mask, std::size_t row, std::size_t col, std::size_t last) {
  return mask.size() == last ? mask[col] != 0 : mask[row * last + col] != 0;
}

// Generic elementwise unary op: forward f(x), derivative df(x, y).
template <class F, class DF>
Tensor unary(const char* op, const Tensor& x, F f, DF df) {
  auto out = new_impl(x.shape(), wants_grad({&x}));
  auto xs = x.data();
  for (std::size_t i = 0; i < xs.size(); ++i) out->data[i] = f(xs[i]);
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push(op, {x.shared()}, out, [o, px, df] {
      px->ensure_grad();
      for (std::size_t i = 0; i < o->data.size(); ++i) {
        px->grad[i] += o->grad[i] * df(px->data[i], o->data[i]);
      }
    });
  }
  return Tensor(out);
}

Real stable_sigmoid(Real x) {
  if (x >= 0) {
    const Real z = std::exp(-x);
    return Real(1) / (Real(1) + z);
  }
  const Real z = std::exp(x);
  return z / (Real(1) + z);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0, requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  if (shape.size() > 3) throw ShapeError("tensor rank > 3: " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->ensure_grad();
  return Tensor(impl);
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (shape.size() > 3) throw ShapeError("tensor rank > 3: " + shape_str(shape));
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->ensure_grad();
  return Tensor(impl);
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, Real stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng) * stddev);
  return from(std::move(shape), std::move(v), requires_grad);
}

Real Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on) {
    impl_->ensure_grad();
  } else {
    impl_->grad.clear();
  }
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) {
    impl_->ensure_grad();
    std::fill(impl_->grad.begin(), impl_->grad.end(), Real(0));
  }
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(impl);
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  if (impl_->requires_grad) t.set_requires_grad(true);
  return t;
}

// ---- Tape ------------------------------------------------------------------

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

void Tape::reset() {
  records_.clear();
  ++generation_;
}

void Tape::push(const char* op, std::vector<std::shared_ptr<TensorImpl>> parents,
                const std::shared_ptr<TensorImpl>& out, std::function<void()> backward) {
  out->is_leaf = false;
  out->node = static_cast<std::int64_t>(records_.size());
  out->generation = generation_;
  records_.push_back(Record{op, std::move(parents), out, std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  TensorImpl* l = loss.impl();
  if (!l->requires_grad) return;
  if (l->is_leaf) {
    l->ensure_grad();
    l->grad[0] += 1;
    return;
  }
  if (l->generation != generation_ || l->node < 0 ||
      static_cast<std::size_t>(l->node) >= records_.size()) {
    throw ContractError("backward: loss is not on the current tape");
  }
  l->ensure_grad();
  l->grad[0] += 1;
  const auto last = static_cast<std::size_t>(l->node);
  for (std::size_t i = last + 1; i-- > 0;) {
    Record& r = records_[i];
    if (r.output->grad.size() == r.output->data.size() && !r.output->data.empty()) r.backward();
  }
  // Intermediate grads are consumed; clearing them makes repeated backward
  // calls accumulate into leaves additively.
  for (std::size_t i = 0; i <= last; ++i) {
    records_[i].output->grad.clear();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Tensor& loss) { Tape::current().backward(loss); }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  if (b.dim(0) != K) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  auto out = new_impl({M, N}, wants_grad({&a, &b}));
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  Real* C = out->data.data();
  for (std::size_t i = 0; i < M; ++i) {
    Real* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const Real aik = A[i * K + k];
      const Real* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    Tape::current().push("matmul", {a.shared(), b.shared()}, out, [o, pa, pb, M, K, N] {
      const Real* G = o->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        const Real* Bd = pb->data.data();
        for (std::size_t i = 0; i < M; ++i) {
          for (std::size_t k = 0; k < K; ++k) {
            Real s = 0;
            const Real* grow = G + i * N;
            const Real* brow = Bd + k * N;
            for (std::size_t j = 0; j < N; ++j) s += grow[j] * brow[j];
            pa->grad[i * K + k] += s;
          }
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        const Real* Ad = pa->data.data();
        for (std::size_t i = 0; i < M; ++i) {
          const Real* grow = G + i * N;
          for (std::size_t k = 0; k < K; ++k) {
            const Real aik = Ad[i * K + k];
            Real* gb = pb->grad.data() + k * N;
            for (std::size_t j = 0; j < N; ++j) gb[j] += aik * grow[j];
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(0);
  if (b.dim(1) != K) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  auto out = new_impl({M, N}, wants_grad({&a, &b}));
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      Real s = 0;
      for (std::size_t k = 0; k < K; ++k) s += A[i * K + k] * B[j * K + k];
      out->data[i * N + j] = s;
    }
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    Tape::current().push("matmul_nt", {a.shared(), b.shared()}, out, [o, pa, pb, M, K, N] {
      const Real* G = o->grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        const Real* Bd = pb->data.data();
        for (std::size_t i = 0; i < M; ++i) {
          Real* ga = pa->grad.data() + i * K;
          for (std::size_t j = 0; j < N; ++j) {
            const Real g = G[i * N + j];
            const Real* brow = Bd + j * K;
            for (std::size_t k = 0; k < K; ++k) ga[k] += g * brow[k];
          }
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        const Real* Ad = pa->data.data();
        for (std::size_t i = 0; i < M; ++i) {
          const Real* arow = Ad + i * K;
          for (std::size_t j = 0; j < N; ++j) {
            const Real g = G[i * N + j];
            Real* gb = pb->grad.data() + j * K;
            for (std::size_t k = 0; k < K; ++k) gb[k] += g * arow[k];
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  auto out = new_impl({C, R}, wants_grad({&a}));
  auto ad = a.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out->data[c * R + r] = ad[r * C + c];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* pa = a.impl();
    Tape::current().push("transpose", {a.shared()}, out, [o, pa, R, C] {
      pa->ensure_grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) pa->grad[r * C + c] += o->grad[c * R + r];
    });
  }
  return Tensor(out);
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_same_shape(a, b, op);
  auto out = new_impl(a.shape(), wants_grad({&a, &b}));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) out->data[i] = f(ad[i], bd[i]);
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* pa = a.impl();
    TensorImpl* pb = b.impl();
    Tape::current().push(op, {a.shared(), b.shared()}, out, [o, pa, pb, da, db] {
      const std::size_t n = o->data.size();
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pa->grad[i] += o->grad[i] * da(pa->data[i], pb->data[i]);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb->grad[i] += o->grad[i] * db(pa->data[i], pb->data[i]);
      }
    });
  }
  return Tensor(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(1); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return Real(1); },
      [](Real, Real) { return Real(-1); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](Real x, Real y) { return x / y; }, [](Real, Real y) { return Real(1) / y; },
      [](Real x, Real y) { return -x / (y * y); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  return binary(
      "minimum", a, b, [](Real x, Real y) { return std::min(x, y); },
      [](Real x, Real y) { return x <= y ? Real(1) : Real(0); },
      [](Real x, Real y) { return x <= y ? Real(0) : Real(1); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  return binary(
      "maximum", a, b, [](Real x, Real y) { return std::max(x, y); },
      [](Real x, Real y) { return x >= y ? Real(1) : Real(0); },
      [](Real x, Real y) { return x >= y ? Real(0) : Real(1); });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() == 0 || bias.numel() != x.shape().back()) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                     shape_str(x.shape()));
  }
  const std::size_t D = bias.numel();
  auto out = new_impl(x.shape(), wants_grad({&x, &bias}));
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < xd.size(); ++i) out->data[i] = xd[i] + bd[i % D];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    TensorImpl* pb = bias.impl();
    Tape::current().push("add_bias", {x.shared(), bias.shared()}, out, [o, px, pb, D] {
      const std::size_t n = o->data.size();
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) px->grad[i] += o->grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) pb->grad[i % D] += o->grad[i];
      }
    });
  }
  return Tensor(out);
}

Tensor scale(const Tensor& x, Real c) {
  return unary("scale", x, [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

Tensor add_scalar(const Tensor& x, Real c) {
  return unary("add_scalar", x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must have one element, got " + shape_str(s.shape()));
  auto out = new_impl(x.shape(), wants_grad({&x, &s}));
  const Real sv = s.data()[0];
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) out->data[i] = xd[i] * sv;
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    TensorImpl* ps = s.impl();
    Tape::current().push("mul_scalar", {x.shared(), s.shared()}, out, [o, px, ps] {
      const std::size_t n = o->data.size();
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) px->grad[i] += o->grad[i] * ps->data[0];
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        Real g = 0;
        for (std::size_t i = 0; i < n; ++i) g += o->grad[i] * px->data[i];
        ps->grad[0] += g;
      }
    });
  }
  return Tensor(out);
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
  require_rank(x, 2, "scale_rows");
  const std::size_t R = x.dim(0), C = x.dim(1);
  if (s.numel() != R) {
    throw ShapeError("scale_rows: factors " + shape_str(s.shape()) + " vs rows of " + shape_str(x.shape()));
  }
  auto out = new_impl(x.shape(), wants_grad({&x, &s}));
  auto xd = x.data();
  auto sd = s.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out->data[r * C + c] = xd[r * C + c] * sd[r];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    TensorImpl* ps = s.impl();
    Tape::current().push("scale_rows", {x.shared(), s.shared()}, out, [o, px, ps, R, C] {
      if (px->requires_grad) {
        px->ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) px->grad[r * C + c] += o->grad[r * C + c] * ps->data[r];
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        for (std::size_t r = 0; r < R; ++r) {
          Real g = 0;
          for (std::size_t c = 0; c < C; ++c) g += o->grad[r * C + c] * px->data[r * C + c];
          ps->grad[r] += g;
        }
      }
    });
  }
  return Tensor(out);
}

Tensor neg(const Tensor& x) { return scale(x, Real(-1)); }

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](Real v) { return v > 0 ? v : Real(0); },
      [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](Real, Real y) { return y * (Real(1) - y); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](Real v) { return std::abs(v); },
      [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

Tensor reciprocal(const Tensor& x) {
  return unary("reciprocal", x, [](Real v) { return Real(1) / v; }, [](Real, Real y) { return -y * y; });
}

Tensor log1p_exp(const Tensor& x) {
  return unary(
      "log1p_exp", x, [](Real v) { return std::max(v, Real(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Real v, Real) { return stable_sigmoid(v); });
}

Tensor inverse_sigmoid(const Tensor& x, Real eps) {
  return unary(
      "inverse_sigmoid", x,
      [eps](Real v) {
        const Real c = std::clamp(v, eps, Real(1) - eps);
        return std::log(c / (Real(1) - c));
      },
      [eps](Real v, Real) {
        if (v < eps || v > Real(1) - eps) return Real(0);
        return Real(1) / (v * (Real(1) - v));
      });
}

// ---- normalization ---------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x, const Mask* mask) {
  if (x.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
  const std::size_t C = x.shape().back();
  const std::size_t R = x.numel() / std::max<std::size_t>(C, 1);
  if (mask) check_mask(*mask, x.numel(), C, "softmax_lastdim");
  auto out = new_impl(x.shape(), wants_grad({&x}));
  auto xd = x.data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = xd.data() + r * C;
    Real* y = out->data.data() + r * C;
    Real m = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for (std::size_t c = 0; c < C; ++c) {
      if (mask && !mask_at(*mask, r, c, C)) continue;
      m = std::max(m, row[c]);
      any = true;
    }
    if (!any) throw MaskError("softmax_lastdim: row " + std::to_string(r) + " is fully masked");
    Real z = 0;
    for (std::size_t c = 0; c < C; ++c) {
      if (mask && !mask_at(*mask, r, c, C)) {
        y[c] = 0;
        continue;
      }
      y[c] = std::exp(row[c] - m);
      z += y[c];
    }
    for (std::size_t c = 0; c < C; ++c) y[c] /= z;
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("softmax", {x.shared()}, out, [o, px, R, C] {
      px->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        const Real* y = o->data.data() + r * C;
        const Real* g = o->grad.data() + r * C;
        Real dot = 0;
        for (std::size_t c = 0; c < C; ++c) dot += g[c] * y[c];
        for (std::size_t c = 0; c < C; ++c) px->grad[r * C + c] += y[c] * (g[c] - dot);
      }
    });
  }
  return Tensor(out);
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax_lastdim: scalar input");
  const std::size_t C = x.shape().back();
  const std::size_t R = x.numel() / std::max<std::size_t>(C, 1);
  auto out = new_impl(x.shape(), wants_grad({&x}));
  auto xd = x.data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = xd.data() + r * C;
    const Real m = *std::max_element(row, row + C);
    Real z = 0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    const Real lse = m + std::log(z);
    for (std::size_t c = 0; c < C; ++c) out->data[r * C + c] = row[c] - lse;
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("log_softmax", {x.shared()}, out, [o, px, R, C] {
      px->ensure_grad();
      for (std::size_t r = 0; r < R; ++r) {
        Real gs = 0;
        for (std::size_t c = 0; c < C; ++c) gs += o->grad[r * C + c];
        for (std::size_t c = 0; c < C; ++c) {
          px->grad[r * C + c] += o->grad[r * C + c] - std::exp(o->data[r * C + c]) * gs;
        }
      }
    });
  }
  return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t D = x.shape().back();
  if (D == 0 || gamma.numel() != D || beta.numel() != D) {
    throw ShapeError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                     shape_str(beta.shape()) + " vs input " + shape_str(x.shape()));
  }
  const std::size_t R = x.numel() / D;
  auto out = new_impl(x.shape(), wants_grad({&x, &gamma, &beta}));
  std::vector<Real> xhat(x.numel());
  std::vector<Real> inv_std(R);
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  for (std::size_t r = 0; r < R; ++r) {
    const Real* row = xd.data() + r * D;
    Real mu = 0;
    for (std::size_t c = 0; c < D; ++c) mu += row[c];
    mu /= static_cast<Real>(D);
    Real var = 0;
    for (std::size_t c = 0; c < D; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Real>(D);
    const Real is = Real(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < D; ++c) {
      const Real h = (row[c] - mu) * is;
      xhat[r * D + c] = h;
      out->data[r * D + c] = h * gd[c] + bd[c];
    }
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    TensorImpl* pg = gamma.impl();
    TensorImpl* pb = beta.impl();
    Tape::current().push(
        "layer_norm", {x.shared(), gamma.shared(), beta.shared()}, out,
        [o, px, pg, pb, R, D, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
          if (pg->requires_grad) pg->ensure_grad();
          if (pb->requires_grad) pb->ensure_grad();
          if (px->requires_grad) px->ensure_grad();
          std::vector<Real> gh(D);
          for (std::size_t r = 0; r < R; ++r) {
            const Real* g = o->grad.data() + r * D;
            const Real* h = xhat.data() + r * D;
            Real sum_gh = 0, sum_ghh = 0;
            for (std::size_t c = 0; c < D; ++c) {
              if (pg->requires_grad) pg->grad[c] += g[c] * h[c];
              if (pb->requires_grad) pb->grad[c] += g[c];
              gh[c] = g[c] * pg->data[c];
              sum_gh += gh[c];
              sum_ghh += gh[c] * h[c];
            }
            if (!px->requires_grad) continue;
            const Real k = inv_std[r] / static_cast<Real>(D);
            for (std::size_t c = 0; c < D; ++c) {
              px->grad[r * D + c] += k * (static_cast<Real>(D) * gh[c] - sum_gh - h[c] * sum_ghh);
            }
          }
        });
  }
  return Tensor(out);
}

Tensor dropout(const Tensor& x, Real rate, std::mt19937_64& rng) {
  if (rate <= 0) return x;
  if (rate >= 1) throw ContractError("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const Real inv = Real(1) / (Real(1) - rate);
  std::vector<Real> m(x.numel());
  for (auto& v : m) v = keep(rng) ? inv : Real(0);
  return mul(x, Tensor::from(x.shape(), std::move(m)));
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto out = new_impl({}, wants_grad({&x}));
  Real s = 0;
  for (Real v : x.data()) s += v;
  out->data[0] = s;
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("sum", {x.shared()}, out, [o, px] {
      px->ensure_grad();
      for (auto& g : px->grad) g += o->grad[0];
    });
  }
  return Tensor(out);
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), Real(1) / static_cast<Real>(x.numel()));
}

Tensor logsumexp(const Tensor& x, const Mask* mask) {
  require_rank(x, 1, "logsumexp");
  const std::size_t n = x.numel();
  if (mask && mask->size() != n) {
    throw MaskError("logsumexp: mask size " + std::to_string(mask->size()) + " vs " + std::to_string(n));
  }
  auto xd = x.data();
  Real m = -std::numeric_limits<Real>::infinity();
  bool any = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    m = std::max(m, xd[i]);
    any = true;
  }
  if (!any) throw MaskError("logsumexp: no unmasked entries");
  std::vector<Real> w(n, Real(0));
  Real z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    w[i] = std::exp(xd[i] - m);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  auto out = new_impl({}, wants_grad({&x}));
  out->data[0] = m + std::log(z);
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("logsumexp", {x.shared()}, out, [o, px, w = std::move(w)] {
      px->ensure_grad();
      for (std::size_t i = 0; i < w.size(); ++i) px->grad[i] += o->grad[0] * w[i];
    });
  }
  return Tensor(out);
}

// ---- shape manipulation ----------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel() || shape.size() > 3) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto out = new_impl(std::move(shape), wants_grad({&x}));
  std::copy(x.data().begin(), x.data().end(), out->data.begin());
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("reshape", {x.shared()}, out, [o, px] {
      px->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[i] += o->grad[i];
    });
  }
  return Tensor(out);
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  if (x.rank() == 0 || begin + count > x.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t row = x.numel() / std::max<std::size_t>(x.dim(0), 1);
  Shape s = x.shape();
  s[0] = count;
  auto out = new_impl(std::move(s), wants_grad({&x}));
  std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(begin * row), count * row, out->data.begin());
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("slice_rows", {x.shared()}, out, [o, px, begin, row] {
      px->ensure_grad();
      for (std::size_t i = 0; i < o->grad.size(); ++i) px->grad[begin * row + i] += o->grad[i];
    });
  }
  return Tensor(out);
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t R = x.dim(0), C = x.dim(1);
  if (begin + count > C) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  auto out = new_impl({R, count}, wants_grad({&x}));
  auto xd = x.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < count; ++c) out->data[r * count + c] = xd[r * C + begin + c];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("slice_cols", {x.shared()}, out, [o, px, R, C, begin, count] {
      px->ensure_grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < count; ++c) px->grad[r * C + begin + c] += o->grad[r * count + c];
    });
  }
  return Tensor(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) throw ShapeError("concat_rows: scalar input");
  std::size_t rows = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), p.shape().begin() + 1)) {
      throw ShapeError("concat_rows: incompatible " + shape_str(first) + " and " + shape_str(p.shape()));
    }
    rows += p.dim(0);
    any_grad = any_grad || p.requires_grad();
  }
  Shape s = first;
  s[0] = rows;
  auto out = new_impl(std::move(s), any_grad && grad_enabled());
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.numel();
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    std::vector<std::shared_ptr<TensorImpl>> ps;
    std::vector<TensorImpl*> raw;
    for (const auto& p : parts) {
      ps.push_back(p.shared());
      raw.push_back(p.impl());
    }
    Tape::current().push("concat_rows", std::move(ps), out, [o, raw] {
      std::size_t off2 = 0;
      for (TensorImpl* p : raw) {
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->data.size(); ++i) p->grad[i] += o->grad[off2 + i];
        }
        off2 += p->data.size();
      }
    });
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts) {
  for (const auto& p : parts) require_rank(p, 1, "concat");
  return concat_rows(parts);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t R = parts.front().dim(0);
  std::size_t C = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.dim(0) != R) {
      throw ShapeError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " and " +
                       shape_str(p.shape()));
    }
    C += p.dim(1);
    any_grad = any_grad || p.requires_grad();
  }
  auto out = new_impl({R, C}, any_grad && grad_enabled());
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.dim(1);
    auto pd = p.data();
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t c = 0; c < pc; ++c) out->data[r * C + off + c] = pd[r * pc + c];
    off += pc;
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    std::vector<std::shared_ptr<TensorImpl>> ps;
    std::vector<TensorImpl*> raw;
    for (const auto& p : parts) {
      ps.push_back(p.shared());
      raw.push_back(p.impl());
    }
    Tape::current().push("concat_cols", std::move(ps), out, [o, raw, R, C] {
      std::size_t off2 = 0;
      for (TensorImpl* p : raw) {
        const std::size_t pc = p->shape[1];
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < pc; ++c) p->grad[r * pc + c] += o->grad[r * C + off2 + c];
        }
        off2 += pc;
      }
    });
  }
  return Tensor(out);
}

Tensor select(const Tensor& x, std::size_t flat_index) {
  if (flat_index >= x.numel()) {
    throw ShapeError("select: index " + std::to_string(flat_index) + " out of range for " + shape_str(x.shape()));
  }
  auto out = new_impl({}, wants_grad({&x}));
  out->data[0] = x.data()[flat_index];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("select", {x.shared()}, out, [o, px, flat_index] {
      px->ensure_grad();
      px->grad[flat_index] += o->grad[0];
    });
  }
  return Tensor(out);
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx) {
  for (std::size_t i : idx) {
    if (i >= x.numel()) {
      throw ShapeError("gather: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
    }
  }
  auto out = new_impl({idx.size()}, wants_grad({&x}));
  for (std::size_t k = 0; k < idx.size(); ++k) out->data[k] = x.data()[idx[k]];
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("gather", {x.shared()}, out, [o, px, idx] {
      px->ensure_grad();
      for (std::size_t k = 0; k < idx.size(); ++k) px->grad[idx[k]] += o->grad[k];
    });
  }
  return Tensor(out);
}

Tensor stack_scalars(const std::vector<Tensor>& scalars) {
  std::vector<Tensor> parts;
  parts.reserve(scalars.size());
  for (const auto& s : scalars) parts.push_back(reshape(s, {1}));
  return concat(parts);
}

Tensor sinusoidal_embedding(const Tensor& x, std::size_t dim, Real temperature) {
  if (dim == 0 || dim % 2 != 0) throw ShapeError("sinusoidal_embedding: dim must be even and positive");
  const std::size_t n = x.numel();
  std::vector<Real> freq(dim / 2);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    freq[k] = Real(2) * std::numbers::pi_v<Real> /
              std::pow(temperature, Real(2 * k) / static_cast<Real>(dim));
  }
  auto out = new_impl({n, dim}, wants_grad({&x}));
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < dim / 2; ++k) {
      out->data[i * dim + 2 * k] = std::sin(xd[i] * freq[k]);
      out->data[i * dim + 2 * k + 1] = std::cos(xd[i] * freq[k]);
    }
  }
  if (out->requires_grad) {
    TensorImpl* o = out.get();
    TensorImpl* px = x.impl();
    Tape::current().push("sinusoidal_embedding", {x.shared()}, out, [o, px, n, dim, freq] {
      px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        Real g = 0;
        for (std::size_t k = 0; k < dim / 2; ++k) {
          const Real s = o->data[i * dim + 2 * k];
          const Real c = o->data[i * dim + 2 * k + 1];
          g += freq[k] * (o->grad[i * dim + 2 * k] * c - o->grad[i * dim + 2 * k + 1] * s);
        }
        px->grad[i] += g;
      }
    });
  }
  return Tensor(out);
}

// ---- gradient check --------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double step,
                           double tol, double abs_floor) {
  GradCheckReport rep;
  Tape::current().reset();
  for (auto& t : inputs) {
    if (!t.requires_grad()) t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = f();
  backward(y);
  std::vector<std::vector<Real>> analytic;
  for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());
  Tape::current().reset();

  NoGradGuard ng;
  std::size_t flat = 0;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto d = inputs[ti].data();
    for (std::size_t i = 0; i < d.size(); ++i, ++flat) {
      const Real orig = d[i];
      d[i] = static_cast<Real>(orig + step);
      const double fp = static_cast<double>(f().item());
      d[i] = static_cast<Real>(orig - step);
      const double fm = static_cast<double>(f().item());
      d[i] = orig;
      const double numeric = (fp - fm) / (2 * step);
      const double a = static_cast<double>(analytic[ti][i]);
      const double err = std::abs(a - numeric);
      const double rel = err / std::max({std::abs(a), std::abs(numeric), abs_floor});
      rep.max_abs_error = std::max(rep.max_abs_error, err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_index = flat;
      }
      ++rep.checked;
    }
  }
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step, double tol,
                           double abs_floor) {
  return grad_check([&f, &x] { return f(x); }, std::vector<Tensor>{x}, step, tol, abs_floor);
}

}  // namespace qd
