#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qd {

// Element type. Tests and gradient checks build with 64-bit reals; define
// QD_REAL_FLOAT32 for the faster 32-bit training build.
#ifdef QD_REAL_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

// 1 = real position, 0 = padding. Either one entry per row element of the
// last axis (shared by all rows) or one entry per element.
using Mask = std::vector<std::uint8_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct MaskError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // sized like data iff requires_grad and allocated
  bool requires_grad = false;
  bool is_leaf = true;
  std::int64_t node = -1;        // index into the owning tape, -1 for leaves
  std::uint64_t generation = 0;  // tape generation the node index refers to

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, Real stddev, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  std::vector<Real> to_vector() const { return impl_->data; }
  Real item() const;
  Real operator[](std::size_t i) const { return impl_->data[i]; }
  Real at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape.back() + c]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::span<Real> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad();

  // Copy of the values without any tape history.
  Tensor detach() const;
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. One per thread; records appear in execution order and
// backward walks them once in reverse.
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };

  static Tape& current();

  void reset();
  std::size_t size() const { return records_.size(); }
  std::uint64_t generation() const { return generation_; }
  const Record& record(std::size_t i) const { return records_.at(i); }

  // Registers `out` as produced by `op`. No-op when grad recording is off or
  // no parent requires grad.
  void push(const char* op, std::vector<std::shared_ptr<TensorImpl>> parents,
            const std::shared_ptr<TensorImpl>& out, std::function<void()> backward);

  void backward(const Tensor& loss);

 private:
  std::vector<Record> records_;
  std::uint64_t generation_ = 1;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

void backward(const Tensor& loss);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [M×K]·[K×N]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [M×K]·[N×K]ᵀ
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor add_bias(const Tensor& x, const Tensor& bias);  // bias over the last axis
Tensor scale(const Tensor& x, Real c);
Tensor add_scalar(const Tensor& x, Real c);
Tensor mul_scalar(const Tensor& x, const Tensor& s);  // s is a 1-element tensor
Tensor scale_rows(const Tensor& x, const Tensor& s);  // x[R×C] · s[R] per row

Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor log1p_exp(const Tensor& x);  // softplus, stable
// logit(clamp(x, eps, 1-eps)); zero gradient where clamped
Tensor inverse_sigmoid(const Tensor& x, Real eps = Real(1e-4));

Tensor softmax_lastdim(const Tensor& x, const Mask* mask = nullptr);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = Real(1e-5));
Tensor dropout(const Tensor& x, Real rate, std::mt19937_64& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor logsumexp(const Tensor& x, const Mask* mask = nullptr);  // rank-1 -> scalar

Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat(const std::vector<Tensor>& parts);  // rank-1 concatenation
Tensor select(const Tensor& x, std::size_t flat_index);  // -> scalar
Tensor gather(const Tensor& x, const std::vector<std::size_t>& flat_indices);  // -> rank-1

// Sinusoidal embedding of positions x[n] in [0,1] -> [n×dim]:
// even channels sin(2π·x/T^(2k/dim)), odd channels cos(...).
Tensor sinusoidal_embedding(const Tensor& x, std::size_t dim, Real temperature = Real(10000));

Tensor stack_scalars(const std::vector<Tensor>& scalars);

// ---- gradient checking ---------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0;
  double max_abs_error = 0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = true;
};

// Compares autodiff gradients of the scalar f() with central differences
// for every element of every tensor in `inputs`. The relative error uses
// max(|autodiff|, |numeric|, abs_floor) as denominator.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                           double step = 1e-5, double tol = 1e-4, double abs_floor = 1e-3);

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                           double step = 1e-5, double tol = 1e-4, double abs_floor = 1e-3);

}  // namespace qd
