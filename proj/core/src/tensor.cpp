#include "binet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace binet {

namespace {

struct Node {
  std::function<void()> backward;
};

struct Tape {
  std::vector<Node> nodes;
};

Tape& tape() {
  thread_local Tape t;
  return t;
}

thread_local bool g_grad_enabled = true;
thread_local uint64_t g_mac_count = 0;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

void check_positive_dims(const Shape& s, const char* who) {
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] <= 0) {
      throw ShapeError(std::string(who) + ": axis " + std::to_string(i) +
                       " has nonpositive size " + std::to_string(s[i]));
    }
  }
}

void record(std::function<void()> fn) { tape().nodes.push_back({std::move(fn)}); }

bool track(const Tensor& a) { return g_grad_enabled && a.requires_grad(); }

// Accumulate src (scaled) into dst grad.
void axpy(std::vector<double>& dst, const std::vector<double>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Reductions over contiguous or strided spans. The independent
// accumulator lanes break the FP-add dependency chain so these loops
// vectorize without the compiler reassociating on its own; the lane
// layout fixes the summation order, keeping results run-to-run stable.
inline double lanes_total(const double acc[8]) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

double sum_n(const double* a, int64_t n) {
  double acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j];
  double s = lanes_total(acc);
  for (; i < n; ++i) s += a[i];
  return s;
}

double dot_n(const double* a, const double* b, int64_t n) {
  double acc[8] = {};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  double s = lanes_total(acc);
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// sum of a[i] * b[i*stride]
double dot_strided(const double* a, const double* b, int64_t stride, int64_t n) {
  double acc[4] = {};
  int64_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += a[i] * b[i * stride];
    acc[1] += a[i + 1] * b[(i + 1) * stride];
    acc[2] += a[i + 2] * b[(i + 2) * stride];
    acc[3] += a[i + 3] * b[(i + 3) * stride];
  }
  double s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
  for (; i < n; ++i) s += a[i] * b[i * stride];
  return s;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

Tensor make_tracked(Shape shape, bool track) {
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->value.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
  impl->requires_grad = track;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) {
  check_positive_dims(shape, "zeros");
  return make_tracked(std::move(shape), false);
}

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  check_positive_dims(shape, "from");
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("from: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " elements, got " +
                     std::to_string(data.size()));
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->value = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.impl_->value) v = rng.uniform(lo, hi);
  return t;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
  }
  return impl_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw ShapeError("at: rank mismatch");
  }
  int64_t off = 0;
  int axis = 0;
  for (int i : idx) {
    off = off * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->value[static_cast<size_t>(off)];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = impl_->shape;
  impl->value = impl_->value;
  return Tensor(std::move(impl));
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool v) { g_grad_enabled = v; }
std::size_t graph_size() { return tape().nodes.size(); }
void clear_graph() { tape().nodes.clear(); }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss of shape " + shape_str(loss.shape()) +
                        " is not scalar");
  }
  auto& nodes = tape().nodes;
  if (nodes.empty()) {
    throw ContractError("backward: no recorded graph");
  }
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    it->backward();
  }
  nodes.clear();
}

namespace macs {
void reset() { g_mac_count = 0; }
uint64_t count() { return g_mac_count; }
}  // namespace macs

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() == b.shape()) return;
  for (int ax = 0; ax < std::max(a.rank(), b.rank()); ++ax) {
    int da = ax < a.rank() ? a.dim(ax) : -1;
    int db = ax < b.rank() ? b.dim(ax) : -1;
    if (da != db) {
      throw ShapeError(std::string(who) + ": axis " + std::to_string(ax) +
                       " mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) +
                   " vs " + shape_str(b.shape()));
}

// add/sub with identical shapes, or one side scalar (size 1).
template <int Sign>
Tensor add_like(const Tensor& a, const Tensor& b, const char* who) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar) check_same_shape(a, b, who);

  const Tensor& big = a_scalar ? b : a;
  Tensor out = make_tracked(big.shape(), false);
  const int64_t n = out.size();
  double* o = out.data();
  if (a_scalar) {
    const double av = a.data()[0];
    const double* bp = b.data();
    for (int64_t i = 0; i < n; ++i) o[i] = av + Sign * bp[i];
  } else if (b_scalar) {
    const double bv = Sign * b.data()[0];
    const double* ap = a.data();
    for (int64_t i = 0; i < n; ++i) o[i] = ap[i] + bv;
  } else {
    const double* ap = a.data();
    const double* bp = b.data();
    for (int64_t i = 0; i < n; ++i) o[i] = ap[i] + Sign * bp[i];
  }

  if (g_grad_enabled && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, a_scalar, b_scalar] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (a_scalar) {
          double s = 0.0;
          for (double v : g) s += v;
          ai->grad[0] += s;
        } else {
          axpy(ai->grad, g);
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (b_scalar) {
          double s = 0.0;
          for (double v : g) s += v;
          bi->grad[0] += Sign * s;
        } else {
          for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += Sign * g[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_like<1>(a, b, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_like<-1>(a, b, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar) check_same_shape(a, b, "mul");

  const Tensor& big = a_scalar ? b : a;
  Tensor out = make_tracked(big.shape(), false);
  const int64_t n = out.size();
  double* o = out.data();
  const double* ap = a.data();
  const double* bp = b.data();
  if (a_scalar) {
    const double av = ap[0];
    for (int64_t i = 0; i < n; ++i) o[i] = av * bp[i];
  } else if (b_scalar) {
    const double bv = bp[0];
    for (int64_t i = 0; i < n; ++i) o[i] = ap[i] * bv;
  } else {
    for (int64_t i = 0; i < n; ++i) o[i] = ap[i] * bp[i];
  }

  if (g_grad_enabled && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, a_scalar, b_scalar] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      const auto& av = ai->value;
      const auto& bv = bi->value;
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (a_scalar) {
          double s = 0.0;
          for (size_t i = 0; i < g.size(); ++i) s += g[i] * bv[i];
          ai->grad[0] += s;
        } else if (b_scalar) {
          for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bv[0];
        } else {
          for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bv[i];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (b_scalar) {
          double s = 0.0;
          for (size_t i = 0; i < g.size(); ++i) s += g[i] * av[i];
          bi->grad[0] += s;
        } else if (a_scalar) {
          for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * av[0];
        } else {
          for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * av[i];
        }
      }
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& a, double s) {
  Tensor out = make_tracked(a.shape(), false);
  const double* ap = a.data();
  double* o = out.data();
  for (int64_t i = 0; i < a.size(); ++i) o[i] = ap[i] * s;
  if (track(a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi, s] {
      if (oi->grad.empty()) return;
      ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += s * oi->grad[i];
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_tracked(a.shape(), false);
  const double* ap = a.data();
  double* o = out.data();
  for (int64_t i = 0; i < a.size(); ++i) o[i] = ap[i] + s;
  if (track(a)) {
    out.set_requires_grad(true);
    auto ai = a.impl(), oi = out.impl();
    record([ai, oi] {
      if (oi->grad.empty()) return;
      ai->ensure_grad();
      axpy(ai->grad, oi->grad);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner axis mismatch: a axis 1 is " +
                     std::to_string(a.dim(1)) + ", b axis 0 is " +
                     std::to_string(b.dim(0)));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_tracked({m, n}, false);
  const double* ap = a.data();
  const double* bp = b.data();
  double* o = out.data();
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const double av = ap[i * k + l];
      const double* brow = bp + l * n;
      double* orow = o + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  g_mac_count += static_cast<uint64_t>(m) * k * n;

  if (g_grad_enabled && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    record([ai, bi, oi, m, k, n] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        double* da = ai->grad.data();
        const double* bp = bi->value.data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            da[i * k + l] += dot_n(g + i * n, bp + l * n, n);
          }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        double* db = bi->grad.data();
        const double* ap = ai->value.data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const double av = ap[i * k + l];
            const double* grow = g + i * n;
            double* dbrow = db + l * n;
            for (int j = 0; j < n; ++j) dbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// concat / split
// ---------------------------------------------------------------------------

namespace {

// Collapse a shape around `axis` into [outer, axis, tail].
void axis_geometry(const Shape& s, int axis, int64_t& outer, int64_t& tail) {
  outer = 1;
  tail = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) tail *= s[i];
}

}  // namespace

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) {
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s0));
  }
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != static_cast<int>(s0.size())) {
      throw ShapeError("concat: rank mismatch");
    }
    for (int ax = 0; ax < x.rank(); ++ax) {
      if (ax != axis && x.dim(ax) != s0[ax]) {
        throw ShapeError("concat: axis " + std::to_string(ax) + " mismatch: " +
                         shape_str(x.shape()) + " vs " + shape_str(s0));
      }
    }
    total += x.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[axis] = total;
  Tensor out = make_tracked(out_shape, false);

  int64_t outer, tail;
  axis_geometry(out_shape, axis, outer, tail);
  const int64_t out_row = static_cast<int64_t>(total) * tail;
  double* o = out.data();
  int64_t off = 0;
  for (const auto& x : xs) {
    const int64_t block = static_cast<int64_t>(x.dim(axis)) * tail;
    const double* xp = x.data();
    for (int64_t r = 0; r < outer; ++r) {
      std::copy(xp + r * block, xp + (r + 1) * block, o + r * out_row + off);
    }
    off += block;
  }

  bool any = false;
  for (const auto& x : xs) any = any || x.requires_grad();
  if (g_grad_enabled && any) {
    out.set_requires_grad(true);
    std::vector<ImplPtr> ins;
    std::vector<int64_t> blocks;
    for (const auto& x : xs) {
      ins.push_back(x.impl());
      blocks.push_back(static_cast<int64_t>(x.dim(axis)) * tail);
    }
    auto oi = out.impl();
    record([ins, blocks, oi, outer, out_row] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      int64_t off = 0;
      for (size_t idx = 0; idx < ins.size(); ++idx) {
        const int64_t block = blocks[idx];
        if (ins[idx]->requires_grad) {
          ins[idx]->ensure_grad();
          double* d = ins[idx]->grad.data();
          for (int64_t r = 0; r < outer; ++r) {
            const double* src = g + r * out_row + off;
            double* dst = d + r * block;
            for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        off += block;
      }
    });
  }
  return out;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError("split: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  int total = 0;
  for (int s : sizes) {
    if (s <= 0) throw ShapeError("split: nonpositive piece size");
    total += s;
  }
  if (total != x.dim(axis)) {
    throw ShapeError("split: sizes sum to " + std::to_string(total) + " but axis " +
                     std::to_string(axis) + " has " + std::to_string(x.dim(axis)));
  }
  int64_t outer, tail;
  axis_geometry(x.shape(), axis, outer, tail);
  const int64_t in_row = static_cast<int64_t>(x.dim(axis)) * tail;

  std::vector<Tensor> outs;
  const double* xp = x.data();
  int64_t off = 0;
  for (int s : sizes) {
    Shape sh = x.shape();
    sh[axis] = s;
    Tensor piece = make_tracked(sh, false);
    const int64_t block = static_cast<int64_t>(s) * tail;
    double* p = piece.data();
    for (int64_t r = 0; r < outer; ++r) {
      std::copy(xp + r * in_row + off, xp + r * in_row + off + block, p + r * block);
    }
    outs.push_back(piece);
    off += block;
  }

  if (track(x)) {
    std::vector<ImplPtr> outs_impl;
    std::vector<int64_t> blocks;
    for (size_t i = 0; i < outs.size(); ++i) {
      outs[i].set_requires_grad(true);
      outs_impl.push_back(outs[i].impl());
      blocks.push_back(static_cast<int64_t>(sizes[i]) * tail);
    }
    auto xi = x.impl();
    record([xi, outs_impl, blocks, outer, in_row] {
      bool any = false;
      for (const auto& o : outs_impl) any = any || !o->grad.empty();
      if (!any) return;
      xi->ensure_grad();
      double* d = xi->grad.data();
      int64_t off = 0;
      for (size_t idx = 0; idx < outs_impl.size(); ++idx) {
        const int64_t block = blocks[idx];
        if (!outs_impl[idx]->grad.empty()) {
          const double* g = outs_impl[idx]->grad.data();
          for (int64_t r = 0; r < outer; ++r) {
            double* dst = d + r * in_row + off;
            const double* src = g + r * block;
            for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        off += block;
      }
    });
  }
  return outs;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

Tensor reduce_all(const Tensor& x, double scale) {
  double s = 0.0;
  const double* xp = x.data();
  for (int64_t i = 0; i < x.size(); ++i) s += xp[i];
  Tensor out = Tensor::from({1}, {s * scale});
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, scale] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double g = oi->grad[0] * scale;
      for (auto& d : xi->grad) d += g;
    });
  }
  return out;
}

Tensor reduce_axis(const Tensor& x, int axis, bool take_mean, const char* who) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError(std::string(who) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(x.shape()));
  }
  int64_t outer, tail;
  axis_geometry(x.shape(), axis, outer, tail);
  const int n = x.dim(axis);
  const double scale = take_mean ? 1.0 / n : 1.0;

  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);

  Tensor out = make_tracked(out_shape, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t r = 0; r < outer; ++r) {
    for (int64_t t = 0; t < tail; ++t) {
      double s = 0.0;
      for (int j = 0; j < n; ++j) s += xp[(r * n + j) * tail + t];
      o[r * tail + t] = s * scale;
    }
  }

  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, outer, tail, n, scale] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int64_t r = 0; r < outer; ++r)
        for (int j = 0; j < n; ++j) {
          const double* grow = g + r * tail;
          double* drow = d + (r * n + j) * tail;
          for (int64_t t = 0; t < tail; ++t) drow[t] += grow[t] * scale;
        }
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x) { return reduce_all(x, 1.0); }
Tensor mean(const Tensor& x) { return reduce_all(x, 1.0 / static_cast<double>(x.size())); }
Tensor sum(const Tensor& x, int axis) { return reduce_axis(x, axis, false, "sum"); }
Tensor mean(const Tensor& x, int axis) { return reduce_axis(x, axis, true, "mean"); }

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor out = make_tracked(x.shape(), false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t i = 0; i < x.size(); ++i) o[i] = xp[i] > 0.0 ? xp[i] : 0.0;
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        if (xi->value[i] > 0.0) xi->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor prelu(const Tensor& x, const Tensor& slope) {
  if (slope.rank() != 1 || slope.dim(0) != x.dim(0)) {
    throw ShapeError("prelu: slope shape " + shape_str(slope.shape()) +
                     " must be [channels] matching input axis 0 of " +
                     shape_str(x.shape()));
  }
  const int channels = x.dim(0);
  const int64_t row = x.size() / channels;
  Tensor out = make_tracked(x.shape(), false);
  const double* xp = x.data();
  const double* sp = slope.data();
  double* o = out.data();
  for (int c = 0; c < channels; ++c) {
    const double s = sp[c];
    const double* xr = xp + c * row;
    double* orow = o + c * row;
    for (int64_t i = 0; i < row; ++i) orow[i] = xr[i] > 0.0 ? xr[i] : s * xr[i];
  }
  if (g_grad_enabled && (x.requires_grad() || slope.requires_grad())) {
    out.set_requires_grad(true);
    auto xi = x.impl(), si = slope.impl(), oi = out.impl();
    record([xi, si, oi, channels, row] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int c = 0; c < channels; ++c) {
          const double s = si->value[c];
          const double* xr = xi->value.data() + c * row;
          const double* grow = g + c * row;
          double* drow = xi->grad.data() + c * row;
          for (int64_t i = 0; i < row; ++i)
            drow[i] += xr[i] > 0.0 ? grow[i] : s * grow[i];
        }
      }
      if (si->requires_grad) {
        si->ensure_grad();
        for (int c = 0; c < channels; ++c) {
          const double* xr = xi->value.data() + c * row;
          const double* grow = g + c * row;
          double acc = 0.0;
          for (int64_t i = 0; i < row; ++i)
            if (xr[i] <= 0.0) acc += grow[i] * xr[i];
          si->grad[c] += acc;
        }
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out = make_tracked(x.shape(), false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = xp[i];
    o[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                    : std::exp(v) / (1.0 + std::exp(v));
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        const double y = oi->value[i];
        xi->grad[i] += oi->grad[i] * y * (1.0 - y);
      }
    });
  }
  return out;
}

Tensor log(const Tensor& x) {
  Tensor out = make_tracked(x.shape(), false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    if (!(xp[i] > 0.0)) {
      throw DomainError("log: nonpositive argument " + std::to_string(xp[i]) +
                        " at flat index " + std::to_string(i));
    }
    o[i] = std::log(xp[i]);
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i)
        xi->grad[i] += oi->grad[i] / xi->value[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Global layer norm
// ---------------------------------------------------------------------------

Tensor global_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps) {
  if (x.rank() != 2) {
    throw ShapeError("global_layer_norm: expects [C, F], got " + shape_str(x.shape()));
  }
  const int channels = x.dim(0);
  const int64_t frames = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != channels) {
    throw ShapeError("global_layer_norm: gamma axis 0 must be " +
                     std::to_string(channels) + ", got " + shape_str(gamma.shape()));
  }
  if (beta.rank() != 1 || beta.dim(0) != channels) {
    throw ShapeError("global_layer_norm: beta axis 0 must be " +
                     std::to_string(channels) + ", got " + shape_str(beta.shape()));
  }
  const int64_t n = x.size();
  const double* xp = x.data();
  const double mu = sum_n(xp, n) / static_cast<double>(n);
  double acc[8] = {};
  int64_t vi = 0;
  for (; vi + 8 <= n; vi += 8)
    for (int j = 0; j < 8; ++j) {
      const double d = xp[vi + j] - mu;
      acc[j] += d * d;
    }
  double var = lanes_total(acc);
  for (; vi < n; ++vi) {
    const double d = xp[vi] - mu;
    var += d * d;
  }
  var /= static_cast<double>(n);
  const double inv_std = 1.0 / std::sqrt(var + eps);

  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) (*xhat)[i] = (xp[i] - mu) * inv_std;

  Tensor out = make_tracked(x.shape(), false);
  double* o = out.data();
  const double* gp = gamma.data();
  const double* bp = beta.data();
  for (int c = 0; c < channels; ++c) {
    const double gc = gp[c], bc = bp[c];
    const double* xh = xhat->data() + c * frames;
    double* orow = o + c * frames;
    for (int64_t i = 0; i < frames; ++i) orow[i] = gc * xh[i] + bc;
  }

  if (g_grad_enabled &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
    record([xi, gi, bi, oi, xhat, inv_std, channels, frames, n] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      const double* xh = xhat->data();
      // per-channel row reductions feed the bias grad, the gamma grad,
      // and both means of the input grad
      std::vector<double> rowsum(static_cast<size_t>(channels));
      std::vector<double> rowdot(static_cast<size_t>(channels));
      for (int c = 0; c < channels; ++c) {
        rowsum[static_cast<size_t>(c)] = sum_n(g + c * frames, frames);
        rowdot[static_cast<size_t>(c)] = dot_n(g + c * frames, xh + c * frames, frames);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int c = 0; c < channels; ++c) bi->grad[c] += rowsum[static_cast<size_t>(c)];
      }
      if (gi->requires_grad) {
        gi->ensure_grad();
        for (int c = 0; c < channels; ++c) gi->grad[c] += rowdot[static_cast<size_t>(c)];
      }
      if (xi->requires_grad) {
        xi->ensure_grad();
        // dxhat = g * gamma_c ; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / std
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int c = 0; c < channels; ++c) {
          sum_dxh += gi->value[c] * rowsum[static_cast<size_t>(c)];
          sum_dxh_xh += gi->value[c] * rowdot[static_cast<size_t>(c)];
        }
        const double m1 = sum_dxh / static_cast<double>(n);
        const double m2 = sum_dxh_xh / static_cast<double>(n);
        for (int c = 0; c < channels; ++c) {
          const double gc = gi->value[c];
          const double* grow = g + c * frames;
          const double* xrow = xh + c * frames;
          double* drow = xi->grad.data() + c * frames;
          for (int64_t i = 0; i < frames; ++i) {
            drow[i] += (grow[i] * gc - m1 - xrow[i] * m2) * inv_std;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Time-axis resampling, shaping
// ---------------------------------------------------------------------------

namespace {

// Rows = product of all axes except the last.
int64_t leading_rows(const Tensor& x) { return x.size() / x.dim(x.rank() - 1); }

}  // namespace

Tensor interpolate_time(const Tensor& x, int target_len) {
  if (x.rank() < 1) throw ShapeError("interpolate_time: rank-0 input");
  if (target_len < 1) {
    throw ShapeError("interpolate_time: target length " + std::to_string(target_len));
  }
  const int src_len = x.dim(x.rank() - 1);
  const int64_t rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = target_len;

  // Endpoint-aligned sample positions, shared across rows.
  auto idx = std::make_shared<std::vector<int>>(static_cast<size_t>(target_len));
  auto frac = std::make_shared<std::vector<double>>(static_cast<size_t>(target_len));
  for (int j = 0; j < target_len; ++j) {
    double p = 0.0;
    if (target_len > 1 && src_len > 1) {
      p = static_cast<double>(j) * static_cast<double>(src_len - 1) /
          static_cast<double>(target_len - 1);
    }
    int i0 = static_cast<int>(p);
    if (i0 > src_len - 2) i0 = src_len >= 2 ? src_len - 2 : 0;
    (*idx)[j] = i0;
    (*frac)[j] = src_len >= 2 ? p - i0 : 0.0;
  }

  Tensor out = make_tracked(out_shape, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xrow = xp + r * src_len;
    double* orow = o + r * target_len;
    for (int j = 0; j < target_len; ++j) {
      const int i0 = (*idx)[j];
      const double w = (*frac)[j];
      const int i1 = src_len >= 2 ? i0 + 1 : i0;
      orow[j] = (1.0 - w) * xrow[i0] + w * xrow[i1];
    }
  }

  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, idx, frac, rows, src_len, target_len] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = g + r * target_len;
        double* drow = d + r * src_len;
        for (int j = 0; j < target_len; ++j) {
          const int i0 = (*idx)[j];
          const double w = (*frac)[j];
          const int i1 = src_len >= 2 ? i0 + 1 : i0;
          drow[i0] += (1.0 - w) * grow[j];
          drow[i1] += w * grow[j];
        }
      }
    });
  }
  return out;
}

Tensor upsample_nearest_time(const Tensor& x, int target_len) {
  if (target_len < 1) {
    throw ShapeError("upsample_nearest_time: target length " + std::to_string(target_len));
  }
  const int src_len = x.dim(x.rank() - 1);
  const int64_t rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = target_len;

  auto idx = std::make_shared<std::vector<int>>(static_cast<size_t>(target_len));
  for (int j = 0; j < target_len; ++j) {
    int i = static_cast<int>((static_cast<int64_t>(j) * src_len) / target_len);
    if (i > src_len - 1) i = src_len - 1;
    (*idx)[j] = i;
  }

  Tensor out = make_tracked(out_shape, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xrow = xp + r * src_len;
    double* orow = o + r * target_len;
    for (int j = 0; j < target_len; ++j) orow[j] = xrow[(*idx)[j]];
  }

  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, idx, rows, src_len, target_len] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = g + r * target_len;
        double* drow = d + r * src_len;
        for (int j = 0; j < target_len; ++j) drow[(*idx)[j]] += grow[j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_positive_dims(shape, "reshape");
  int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  }
  Tensor out = make_tracked(shape, false);
  std::copy(x.data(), x.data() + x.size(), out.data());
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      axpy(xi->grad, oi->grad);
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError("transpose: expects rank 2, got " + shape_str(x.shape()));
  }
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = make_tracked({cols, rows}, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) o[j * rows + i] = xp[i * cols + j];
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, rows, cols] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) d[i * cols + j] += g[j * rows + i];
    });
  }
  return out;
}

Tensor narrow_time(const Tensor& x, int start, int len) {
  const int src_len = x.dim(x.rank() - 1);
  if (start < 0 || len < 1 || start + len > src_len) {
    throw ShapeError("narrow_time: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for last axis of " +
                     shape_str(x.shape()));
  }
  const int64_t rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = len;
  Tensor out = make_tracked(out_shape, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xp + r * src_len + start, xp + r * src_len + start + len, o + r * len);
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, rows, src_len, start, len] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        double* drow = d + r * src_len + start;
        const double* grow = g + r * len;
        for (int i = 0; i < len; ++i) drow[i] += grow[i];
      }
    });
  }
  return out;
}

Tensor pad_time(const Tensor& x, int left, int right) {
  if (left < 0 || right < 0) throw ShapeError("pad_time: negative padding");
  const int src_len = x.dim(x.rank() - 1);
  const int out_len = src_len + left + right;
  const int64_t rows = leading_rows(x);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 1] = out_len;
  Tensor out = make_tracked(out_shape, false);
  const double* xp = x.data();
  double* o = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy(xp + r * src_len, xp + (r + 1) * src_len, o + r * out_len + left);
  }
  if (track(x)) {
    out.set_requires_grad(true);
    auto xi = x.impl(), oi = out.impl();
    record([xi, oi, rows, src_len, out_len, left] {
      if (oi->grad.empty()) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      double* d = xi->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = g + r * out_len + left;
        double* drow = d + r * src_len;
        for (int i = 0; i < src_len; ++i) drow[i] += grow[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace {

// Valid output range for one kernel tap: indices t with
// 0 <= t*stride + off < limit, clamped to [0, t_count).
void tap_range(int off, int stride, int limit, int t_count, int& t_lo, int& t_hi) {
  t_lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int max_in = limit - 1 - off;
  t_hi = max_in < 0 ? 0 : max_in / stride + 1;
  if (t_hi > t_count) t_hi = t_count;
  if (t_lo > t_hi) t_lo = t_hi;
}

void conv_checks(const Tensor& input, const Tensor& weight, const Tensor& bias,
                 int stride, int padding, const char* who) {
  if (input.rank() != 2) {
    throw ShapeError(std::string(who) + ": input must be [channels, time], got " +
                     shape_str(input.shape()));
  }
  if (weight.rank() != 3) {
    throw ShapeError(std::string(who) + ": weight must be rank 3, got " +
                     shape_str(weight.shape()));
  }
  if (bias.rank() != 1) {
    throw ShapeError(std::string(who) + ": bias must be rank 1, got " +
                     shape_str(bias.shape()));
  }
  if (stride < 1) throw ConfigError(std::string(who) + ": stride must be >= 1");
  if (padding < 0) throw ConfigError(std::string(who) + ": negative padding");
}

}  // namespace

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding) {
  conv_checks(input, weight, bias, stride, padding, "conv1d");
  const int c_in = input.dim(0);
  const int t_in = input.dim(1);
  const int c_out = weight.dim(0);
  const int k = weight.dim(2);
  if (weight.dim(1) != c_in) {
    throw ShapeError("conv1d: weight axis 1 is " + std::to_string(weight.dim(1)) +
                     " but input axis 0 is " + std::to_string(c_in));
  }
  if (bias.dim(0) != c_out) {
    throw ShapeError("conv1d: bias axis 0 is " + std::to_string(bias.dim(0)) +
                     " but weight axis 0 is " + std::to_string(c_out));
  }
  if (t_in + 2 * padding < k) {
    throw ShapeError("conv1d: time axis too short: T=" + std::to_string(t_in) +
                     " pad=" + std::to_string(padding) + " K=" + std::to_string(k));
  }
  const int t_out = (t_in + 2 * padding - k) / stride + 1;

  Tensor out = make_tracked({c_out, t_out}, false);
  const double* in = input.data();
  const double* w = weight.data();
  const double* b = bias.data();
  double* o = out.data();
  for (int oc = 0; oc < c_out; ++oc) {
    double* orow = o + static_cast<int64_t>(oc) * t_out;
    std::fill(orow, orow + t_out, b[oc]);
    for (int ic = 0; ic < c_in; ++ic) {
      const double* irow = in + static_cast<int64_t>(ic) * t_in;
      const double* wrow = w + (static_cast<int64_t>(oc) * c_in + ic) * k;
      for (int kk = 0; kk < k; ++kk) {
        const double wv = wrow[kk];
        const int off = kk - padding;
        int lo, hi;
        tap_range(off, stride, t_in, t_out, lo, hi);
        const int n = hi - lo;
        if (n <= 0) continue;
        const double* src = irow + static_cast<int64_t>(lo) * stride + off;
        double* dst = orow + lo;
        if (stride == 1) {
          for (int i = 0; i < n; ++i) dst[i] += wv * src[i];
        } else {
          for (int i = 0; i < n; ++i) dst[i] += wv * src[static_cast<int64_t>(i) * stride];
        }
      }
    }
  }
  g_mac_count += static_cast<uint64_t>(c_out) * c_in * k * t_out;

  if (g_grad_enabled &&
      (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    auto ii = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
    record([ii, wi, bi, oi, c_in, t_in, c_out, k, t_out, stride, padding] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int oc = 0; oc < c_out; ++oc) {
          bi->grad[oc] += sum_n(g + static_cast<int64_t>(oc) * t_out, t_out);
        }
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        const double* in = ii->value.data();
        for (int oc = 0; oc < c_out; ++oc) {
          const double* grow = g + static_cast<int64_t>(oc) * t_out;
          for (int ic = 0; ic < c_in; ++ic) {
            const double* irow = in + static_cast<int64_t>(ic) * t_in;
            double* dwrow = wi->grad.data() + (static_cast<int64_t>(oc) * c_in + ic) * k;
            for (int kk = 0; kk < k; ++kk) {
              const int off = kk - padding;
              int lo, hi;
              tap_range(off, stride, t_in, t_out, lo, hi);
              const double* src = irow + static_cast<int64_t>(lo) * stride + off;
              const double* gsrc = grow + lo;
              const int n = hi - lo;
              dwrow[kk] += stride == 1 ? dot_n(gsrc, src, n)
                                       : dot_strided(gsrc, src, stride, n);
            }
          }
        }
      }
      if (ii->requires_grad) {
        ii->ensure_grad();
        const double* w = wi->value.data();
        for (int ic = 0; ic < c_in; ++ic) {
          double* drow = ii->grad.data() + static_cast<int64_t>(ic) * t_in;
          for (int oc = 0; oc < c_out; ++oc) {
            const double* grow = g + static_cast<int64_t>(oc) * t_out;
            const double* wrow = w + (static_cast<int64_t>(oc) * c_in + ic) * k;
            for (int kk = 0; kk < k; ++kk) {
              const double wv = wrow[kk];
              const int off = kk - padding;
              int lo, hi;
              tap_range(off, stride, t_in, t_out, lo, hi);
              double* dst = drow + static_cast<int64_t>(lo) * stride + off;
              const double* gsrc = grow + lo;
              const int n = hi - lo;
              if (stride == 1) {
                for (int i = 0; i < n; ++i) dst[i] += wv * gsrc[i];
              } else {
                for (int i = 0; i < n; ++i) dst[static_cast<int64_t>(i) * stride] += wv * gsrc[i];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor depthwise_conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride, int padding) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("depthwise_conv1d: expects input [C, T], weight [C, K], bias [C]");
  }
  if (stride < 1) throw ConfigError("depthwise_conv1d: stride must be >= 1");
  const int channels = input.dim(0);
  const int t_in = input.dim(1);
  const int k = weight.dim(1);
  if (weight.dim(0) != channels || bias.dim(0) != channels) {
    throw ShapeError("depthwise_conv1d: channel axis 0 mismatch: input " +
                     std::to_string(channels) + ", weight " +
                     std::to_string(weight.dim(0)) + ", bias " +
                     std::to_string(bias.dim(0)));
  }
  if (t_in + 2 * padding < k) {
    throw ShapeError("depthwise_conv1d: time axis too short");
  }
  const int t_out = (t_in + 2 * padding - k) / stride + 1;

  Tensor out = make_tracked({channels, t_out}, false);
  const double* in = input.data();
  const double* w = weight.data();
  const double* b = bias.data();
  double* o = out.data();
  for (int c = 0; c < channels; ++c) {
    double* orow = o + static_cast<int64_t>(c) * t_out;
    std::fill(orow, orow + t_out, b[c]);
    const double* irow = in + static_cast<int64_t>(c) * t_in;
    const double* wrow = w + static_cast<int64_t>(c) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double wv = wrow[kk];
      const int off = kk - padding;
      int lo, hi;
      tap_range(off, stride, t_in, t_out, lo, hi);
      const int n = hi - lo;
      if (n <= 0) continue;
      const double* src = irow + static_cast<int64_t>(lo) * stride + off;
      double* dst = orow + lo;
      for (int i = 0; i < n; ++i) dst[i] += wv * src[static_cast<int64_t>(i) * stride];
    }
  }
  g_mac_count += static_cast<uint64_t>(channels) * k * t_out;

  if (g_grad_enabled &&
      (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    auto ii = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
    record([ii, wi, bi, oi, channels, t_in, k, t_out, stride, padding] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      for (int c = 0; c < channels; ++c) {
        const double* grow = g + static_cast<int64_t>(c) * t_out;
        if (bi->requires_grad) {
          bi->ensure_grad();
          bi->grad[c] += sum_n(grow, t_out);
        }
        const double* irow = ii->value.data() + static_cast<int64_t>(c) * t_in;
        const double* wrow = wi->value.data() + static_cast<int64_t>(c) * k;
        for (int kk = 0; kk < k; ++kk) {
          const int off = kk - padding;
          int lo, hi;
          tap_range(off, stride, t_in, t_out, lo, hi);
          const int n = hi - lo;
          if (n <= 0) continue;
          if (wi->requires_grad) {
            wi->ensure_grad();
            wi->grad[static_cast<int64_t>(c) * k + kk] += dot_strided(
                grow + lo, irow + static_cast<int64_t>(lo) * stride + off, stride, n);
          }
          if (ii->requires_grad) {
            ii->ensure_grad();
            double* drow = ii->grad.data() + static_cast<int64_t>(c) * t_in;
            const double wv = wrow[kk];
            for (int i = 0; i < n; ++i)
              drow[static_cast<int64_t>(lo + i) * stride + off] += wv * grow[lo + i];
          }
        }
      }
    });
  }
  return out;
}

Tensor conv_transpose1d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                        int stride, int padding) {
  conv_checks(input, weight, bias, stride, padding, "conv_transpose1d");
  const int c_in = input.dim(0);
  const int t_in = input.dim(1);
  const int c_out = weight.dim(1);
  const int k = weight.dim(2);
  if (weight.dim(0) != c_in) {
    throw ShapeError("conv_transpose1d: weight axis 0 is " +
                     std::to_string(weight.dim(0)) + " but input axis 0 is " +
                     std::to_string(c_in));
  }
  if (bias.dim(0) != c_out) {
    throw ShapeError("conv_transpose1d: bias axis 0 is " + std::to_string(bias.dim(0)) +
                     " but weight axis 1 is " + std::to_string(c_out));
  }
  const int t_out = (t_in - 1) * stride - 2 * padding + k;
  if (t_out < 1) {
    throw ShapeError("conv_transpose1d: output length " + std::to_string(t_out) +
                     " not positive");
  }

  Tensor out = make_tracked({c_out, t_out}, false);
  const double* in = input.data();
  const double* w = weight.data();
  const double* b = bias.data();
  double* o = out.data();
  for (int oc = 0; oc < c_out; ++oc) {
    double* orow = o + static_cast<int64_t>(oc) * t_out;
    std::fill(orow, orow + t_out, b[oc]);
  }
  for (int ic = 0; ic < c_in; ++ic) {
    const double* irow = in + static_cast<int64_t>(ic) * t_in;
    for (int oc = 0; oc < c_out; ++oc) {
      double* orow = o + static_cast<int64_t>(oc) * t_out;
      const double* wrow = w + (static_cast<int64_t>(ic) * c_out + oc) * k;
      for (int kk = 0; kk < k; ++kk) {
        const double wv = wrow[kk];
        const int off = kk - padding;  // out index = t*stride + off
        int lo, hi;
        tap_range(off, stride, t_out, t_in, lo, hi);
        const int n = hi - lo;
        if (n <= 0) continue;
        const double* src = irow + lo;
        double* dst = orow + static_cast<int64_t>(lo) * stride + off;
        if (stride == 1) {
          for (int i = 0; i < n; ++i) dst[i] += wv * src[i];
        } else {
          for (int i = 0; i < n; ++i) dst[static_cast<int64_t>(i) * stride] += wv * src[i];
        }
      }
    }
  }
  g_mac_count += static_cast<uint64_t>(c_in) * c_out * k * t_in;

  if (g_grad_enabled &&
      (input.requires_grad() || weight.requires_grad() || bias.requires_grad())) {
    out.set_requires_grad(true);
    auto ii = input.impl(), wi = weight.impl(), bi = bias.impl(), oi = out.impl();
    record([ii, wi, bi, oi, c_in, t_in, c_out, k, t_out, stride, padding] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int oc = 0; oc < c_out; ++oc) {
          bi->grad[oc] += sum_n(g + static_cast<int64_t>(oc) * t_out, t_out);
        }
      }
      if (wi->requires_grad) {
        wi->ensure_grad();
        const double* in = ii->value.data();
        for (int ic = 0; ic < c_in; ++ic) {
          const double* irow = in + static_cast<int64_t>(ic) * t_in;
          for (int oc = 0; oc < c_out; ++oc) {
            const double* grow = g + static_cast<int64_t>(oc) * t_out;
            double* dwrow = wi->grad.data() + (static_cast<int64_t>(ic) * c_out + oc) * k;
            for (int kk = 0; kk < k; ++kk) {
              const int off = kk - padding;
              int lo, hi;
              tap_range(off, stride, t_out, t_in, lo, hi);
              dwrow[kk] += dot_strided(
                  irow + lo, grow + static_cast<int64_t>(lo) * stride + off, stride,
                  hi - lo);
            }
          }
        }
      }
      if (ii->requires_grad) {
        ii->ensure_grad();
        const double* w = wi->value.data();
        for (int ic = 0; ic < c_in; ++ic) {
          double* drow = ii->grad.data() + static_cast<int64_t>(ic) * t_in;
          for (int oc = 0; oc < c_out; ++oc) {
            const double* grow = g + static_cast<int64_t>(oc) * t_out;
            const double* wrow = w + (static_cast<int64_t>(ic) * c_out + oc) * k;
            for (int kk = 0; kk < k; ++kk) {
              const double wv = wrow[kk];
              const int off = kk - padding;
              int lo, hi;
              tap_range(off, stride, t_out, t_in, lo, hi);
              for (int i = lo; i < hi; ++i)
                drow[i] += wv * grow[static_cast<int64_t>(i) * stride + off];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Helpers and finite differences
// ---------------------------------------------------------------------------

double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: element counts differ: " + std::to_string(a.size()) +
                     " vs " + std::to_string(b.size()));
  }
  return dot_n(a.data(), b.data(), a.size());
}

double sum_value(const Tensor& a) { return sum_n(a.data(), a.size()); }

namespace {

double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

double eval_scalar(const Tensor& t, const char* who) {
  const double v = t.item();
  if (!std::isfinite(v)) {
    throw DomainError(std::string(who) + ": function value is not finite");
  }
  return v;
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw ContractError("grad_check: eps must be in (0, 1e-2]");
  }
  Tensor leaf = x.clone();
  leaf.set_requires_grad(true);
  clear_graph();
  Tensor loss = f(leaf);
  backward(loss);
  std::vector<double> analytic = leaf.grad();
  if (analytic.empty()) analytic.assign(static_cast<size_t>(leaf.size()), 0.0);

  double worst = 0.0;
  NoGradGuard ng;
  double* p = leaf.data();
  for (int64_t i = 0; i < leaf.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + eps;
    const double fp = eval_scalar(f(leaf), "grad_check");
    p[i] = keep - eps;
    const double fm = eval_scalar(f(leaf), "grad_check");
    p[i] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    worst = std::max(worst, rel_err(analytic[static_cast<size_t>(i)], numeric));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& loss_fn,
                         const std::vector<std::pair<std::string, Tensor>>& params,
                         int probes, double eps, Rng& rng,
                         std::vector<GradProbe>* out_probes) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw ContractError("grad_check_params: eps must be in (0, 1e-2]");
  }
  if (params.empty()) throw ContractError("grad_check_params: no parameters");
  for (const auto& [name, t] : params) {
    (void)name;
    Tensor h = t;  // aliasing handle
    h.zero_grad();
  }
  clear_graph();
  Tensor loss = loss_fn();
  backward(loss);

  int64_t total = 0;
  for (auto& [name, t] : params) {
    (void)name;
    total += t.size();
  }

  double worst = 0.0;
  NoGradGuard ng;
  for (int p = 0; p < probes; ++p) {
    int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
    size_t which = 0;
    while (flat >= params[which].second.size()) {
      flat -= params[which].second.size();
      ++which;
    }
    Tensor t = params[which].second;
    const std::vector<double> g = t.grad();
    const double analytic = g.empty() ? 0.0 : g[static_cast<size_t>(flat)];
    double* vp = t.data();
    const double keep = vp[flat];
    vp[flat] = keep + eps;
    const double fp = eval_scalar(loss_fn(), "grad_check_params");
    vp[flat] = keep - eps;
    const double fm = eval_scalar(loss_fn(), "grad_check_params");
    vp[flat] = keep;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err = rel_err(analytic, numeric);
    if (out_probes) {
      out_probes->push_back({params[which].first, flat, analytic, numeric, err});
    }
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace binet
