#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "binet/errors.hpp"
#include "binet/random.hpp"

namespace binet {

using Shape = std::vector<int>;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated on first accumulation

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};
}  // namespace detail

// Dense f64 tensor, row-major, with optional reverse-mode gradient
// tracking. Copies are aliasing handles: the same parameter tensor can
// appear many times in a recorded graph and gradients accumulate into
// one buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v) { return from({1}, {v}); }
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const { return impl_->shape[static_cast<size_t>(axis)]; }
  int64_t size() const { return static_cast<int64_t>(impl_->value.size()); }

  double* data() { return impl_->value.data(); }
  const double* data() const { return impl_->value.data(); }
  const std::vector<double>& values() const { return impl_->value; }

  // Scalar fetch; throws unless size() == 1.
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<double> grad() const { return impl_->grad; }
  const std::vector<double>& grad_ref() const { return impl_->grad; }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  // Deep copy of values; the copy is an untracked leaf.
  Tensor clone() const;

  bool same_impl(const Tensor& o) const { return impl_ == o.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_tracked(Shape shape, bool track);
};

// ---------------------------------------------------------------------------
// Recording tape. Ops append nodes as they execute; backward() replays
// in exact reverse order, then clears the tape.
// ---------------------------------------------------------------------------

bool grad_enabled();
void set_grad_enabled(bool v);
std::size_t graph_size();
void clear_graph();

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Accumulates d(loss)/d(leaf) into .grad of every tracked tensor the
// loss depends on, then consumes the graph. loss must be scalar.
void backward(const Tensor& loss);

// Multiply counter for conv/matmul kernels (elementwise ops excluded).
// Bills the nominal kernel cost — conv1d: C_out*C_in*K*T_out, transposed
// conv: C_in*C_out*K*T_in, matmul: M*K*N — i.e. what a backend with
// materialized zero padding would execute.
namespace macs {
void reset();
uint64_t count();
}  // namespace macs

// ---------------------------------------------------------------------------
// Differentiable primitives. All check shapes strictly; the only
// broadcasting is a size-1 tensor against any shape in mul/add/sub.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor concat(const std::vector<Tensor>& xs, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);

Tensor relu(const Tensor& x);
Tensor prelu(const Tensor& x, const Tensor& slope);  // slope: [channels]
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);

// Normalizes over every element, then applies a learned per-channel
// affine. x: [C, F], gamma/beta: [C].
Tensor global_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-8);

// Linear interpolation along the last axis with endpoint alignment:
// output 0 maps to input 0 and output L-1 to input F-1.
Tensor interpolate_time(const Tensor& x, int target_len);
Tensor upsample_nearest_time(const Tensor& x, int target_len);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // rank 2

Tensor narrow_time(const Tensor& x, int start, int len);
Tensor pad_time(const Tensor& x, int left, int right);

// Cross-correlation. input: [C_in, T], weight: [C_out, C_in, K],
// bias: [C_out]. T_out = (T + 2*padding - K) / stride + 1.
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);

// Per-channel convolution. input: [C, T], weight: [C, K], bias: [C].
Tensor depthwise_conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride, int padding);

// Exact adjoint of conv1d with matching hyperparameters.
// input: [C_in, T], weight: [C_in, C_out, K], bias: [C_out].
// T_out = (T - 1)*stride - 2*padding + K.
Tensor conv_transpose1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride, int padding);

// Untracked helpers.
double dot(const Tensor& a, const Tensor& b);
double sum_value(const Tensor& a);

// ---------------------------------------------------------------------------
// Finite-difference checking.
// ---------------------------------------------------------------------------

// Max over elements of |analytic - central| / max(|analytic|, |central|, 1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps);

struct GradProbe {
  std::string name;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

// Same check against randomly probed elements of a parameter set; used
// for whole-model checks where full elementwise sweeps are too slow.
double grad_check_params(const std::function<Tensor()>& loss_fn,
                         const std::vector<std::pair<std::string, Tensor>>& params,
                         int probes, double eps, Rng& rng,
                         std::vector<GradProbe>* out_probes = nullptr);

std::string shape_str(const Shape& s);

}  // namespace binet
