#include <cmath>
#include <vector>

#include "binet/tensor.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace binet;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

// Runs f under a fresh graph and returns grad of x.
std::vector<double> grad_of(const std::function<Tensor(const Tensor&)>& f, Tensor x) {
  x.set_requires_grad(true);
  x.zero_grad();
  clear_graph();
  backward(f(x));
  return x.grad();
}

bool all_finite(const Tensor& t) {
  for (int64_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(t.data()[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("tensor construction and element access") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.rank() == 2);
  CHECK(z.size() == 6);
  CHECK(z.at({1, 2}) == 0.0);

  Tensor f = Tensor::full({4}, 2.5);
  CHECK(f.at({3}) == 2.5);

  Tensor v = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(v.at({1, 0}) == 3.0);

  CHECK(Tensor::scalar(7.0).item() == 7.0);
  CHECK_THROWS_AS(v.item(), ContractError);
  CHECK_THROWS_AS(Tensor::from({2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("copies alias, clone does not") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = a;
  b.data()[0] = 9.0;
  CHECK(a.at({0}) == 9.0);
  CHECK(a.same_impl(b));

  Tensor c = a.clone();
  c.data()[0] = -1.0;
  CHECK(a.at({0}) == 9.0);
  CHECK_FALSE(a.same_impl(c));
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("elementwise add/sub/mul with strict shapes") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {10, 20, 30, 40});
  CHECK(add(a, b).at({1, 1}) == 44.0);
  CHECK(sub(b, a).at({0, 0}) == 9.0);
  CHECK(mul(a, b).at({1, 0}) == 90.0);

  Tensor s = Tensor::scalar(2.0);
  CHECK(add(a, s).at({0, 1}) == 4.0);
  CHECK(add(s, a).at({0, 1}) == 4.0);
  CHECK(mul(s, a).at({1, 1}) == 8.0);
  CHECK(sub(a, s).at({0, 0}) == -1.0);

  Tensor wrong = Tensor::from({4}, {1, 2, 3, 4});
  CHECK_THROWS_AS(add(a, wrong), ShapeError);
  CHECK_THROWS_AS(mul(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("backward trivials") {
  SUBCASE("sum gives ones") {
    auto g = grad_of([](const Tensor& x) { return sum(x); }, Tensor::from({3}, {5, 6, 7}));
    CHECK(g == std::vector<double>{1, 1, 1});
  }
  SUBCASE("sum of x*x gives 2x") {
    auto g = grad_of([](const Tensor& x) { return sum(mul(x, x)); },
                     Tensor::from({2}, {1, 2}));
    CHECK(g == std::vector<double>{2, 4});
  }
  SUBCASE("mean gives 1/n") {
    auto g = grad_of([](const Tensor& x) { return mean(x); }, Tensor::from({4}, {1, 2, 3, 4}));
    CHECK(g == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  }
  SUBCASE("non-scalar loss rejected") {
    Tensor x = Tensor::from({2}, {1, 2}).set_requires_grad(true);
    Tensor y = add(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
    clear_graph();
  }
  SUBCASE("empty graph rejected") {
    clear_graph();
    CHECK_THROWS_AS(backward(Tensor::scalar(0.0)), ContractError);
  }
}

TEST_CASE("gradient accumulation is exactly additive") {
  Rng rng(11);
  Tensor x = rand_tensor({5}, rng);
  x.set_requires_grad(true);

  auto f = [](const Tensor& t) { return sum(relu(t)); };
  auto g = [](const Tensor& t) { return sum(sigmoid(t)); };

  // Separate backward passes, grads zeroed in between.
  x.zero_grad();
  clear_graph();
  backward(f(x));
  std::vector<double> gf = x.grad();
  x.zero_grad();
  clear_graph();
  backward(g(x));
  std::vector<double> gg = x.grad();

  // One pass over the summed loss.
  x.zero_grad();
  clear_graph();
  backward(add(f(x), g(x)));
  std::vector<double> gsum = x.grad();

  for (size_t i = 0; i < gsum.size(); ++i) CHECK(gsum[i] == gf[i] + gg[i]);

  // Two backward calls without zeroing accumulate the same way.
  x.zero_grad();
  clear_graph();
  backward(f(x));
  backward(g(x));
  for (size_t i = 0; i < gsum.size(); ++i) CHECK(x.grad()[i] == gf[i] + gg[i]);
}

TEST_CASE("no-grad mode records nothing") {
  clear_graph();
  Tensor x = Tensor::from({3}, {1, 2, 3}).set_requires_grad(true);
  {
    NoGradGuard ng;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(graph_size() == 0);
  Tensor y = mul(x, x);
  CHECK(y.requires_grad());
  CHECK(graph_size() == 1);
  clear_graph();
}

TEST_CASE("matmul matches naive triple loop and its gradient checks out") {
  Rng rng(17);
  Tensor a = rand_tensor({3, 4}, rng);
  Tensor b = rand_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) {
      double acc = 0.0;
      for (int l = 0; l < 4; ++l) acc += a.at({i, l}) * b.at({l, j});
      CHECK(c.at({i, j}) == doctest::Approx(acc).epsilon(1e-12));
    }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({3})), ShapeError);

  auto f = [&](const Tensor& x) { return sum(mul(matmul(x, b), matmul(x, b))); };
  CHECK(grad_check(f, a, 1e-5) <= 1e-4);
}

TEST_CASE("concat precedes split as exact inverse") {
  Rng rng(23);
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({2, 5}, rng);
  Tensor c = rand_tensor({2, 1}, rng);
  Tensor joined = concat({a, b, c}, 1);
  CHECK(joined.shape() == Shape{2, 9});
  auto parts = split(joined, 1, {3, 5, 1});
  CHECK(max_abs_diff(parts[0], a) == 0.0);
  CHECK(max_abs_diff(parts[1], b) == 0.0);
  CHECK(max_abs_diff(parts[2], c) == 0.0);

  Tensor j0 = concat({a, Tensor::zeros({1, 3})}, 0);
  CHECK(j0.shape() == Shape{3, 3});

  CHECK_THROWS_AS(concat({a, Tensor::zeros({3, 3})}, 1), ShapeError);
  CHECK_THROWS_AS(split(joined, 1, {3, 5}), ShapeError);
  CHECK_THROWS_AS(concat({}, 0), ShapeError);
}

TEST_CASE("concat/split route gradients to the right slices") {
  Tensor a = Tensor::from({2}, {1, 2}).set_requires_grad(true);
  Tensor b = Tensor::from({3}, {3, 4, 5}).set_requires_grad(true);
  clear_graph();
  Tensor j = concat({a, b}, 0);
  auto parts = split(j, 0, {2, 3});
  // loss touches only the second piece; the first still participates in
  // the concat, so it receives an explicit zero gradient
  backward(sum(mul(parts[1], parts[1])));
  CHECK(a.grad() == std::vector<double>{0, 0});
  CHECK(b.grad() == std::vector<double>{6, 8, 10});
  a.zero_grad();
  b.zero_grad();
}

TEST_CASE("mean of constant tensor is that constant") {
  Tensor c = Tensor::full({2, 4}, 3.25);
  CHECK(mean(c).item() == 3.25);
  CHECK(mean(c, 1).at({0}) == 3.25);
  CHECK(sum(c, 0).at({2}) == 6.5);
}

TEST_CASE("axis reductions agree with manual sums") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = sum(x, 0);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.at({0}) == 5.0);
  CHECK(s0.at({2}) == 9.0);
  Tensor m1 = mean(x, 1);
  CHECK(m1.shape() == Shape{2});
  CHECK(m1.at({0}) == 2.0);
  CHECK(m1.at({1}) == 5.0);
  CHECK_THROWS_AS(sum(x, 2), ShapeError);
}

TEST_CASE("finite differences validate every primitive") {
  Rng rng(31);
  const double eps = 1e-5;
  const double tol = 1e-4;

  Tensor x23 = rand_tensor({2, 3}, rng);
  Tensor y23 = rand_tensor({2, 3}, rng);

  CHECK(grad_check([&](const Tensor& t) { return sum(add(t, y23)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(sub(y23, t)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(t, y23)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(t, t)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(scalar_mul(t, -1.7)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(add_scalar(mul(t, t), 0.5)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return mean(mul(t, t)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mean(mul(t, t), 1)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(sum(mul(t, t), 0)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(sigmoid(t)); }, x23, eps) <= 1e-6);
  CHECK(grad_check([&](const Tensor& t) { return sum(t); }, x23, eps) <= 1e-10);
  CHECK(grad_check([&](const Tensor& t) { return sum(reshape(t, {6})); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(transpose(t), transpose(t))); }, x23, eps) <= tol);

  // relu / prelu probed away from the kink.
  Tensor xk = Tensor::from({2, 3}, {-1.5, 0.7, -0.3, 2.0, -2.2, 1.1});
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(relu(t), relu(t))); }, xk, eps) <= tol);
  Tensor slope = Tensor::from({2}, {0.25, -0.6});
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(prelu(t, slope), prelu(t, slope))); }, xk, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(prelu(xk, t), prelu(xk, t))); }, slope, eps) <= tol);

  Tensor pos = rand_tensor({2, 3}, rng, 0.5, 2.0);
  CHECK(grad_check([&](const Tensor& t) { return sum(log(t)); }, pos, eps) <= tol);

  // scalar broadcast path
  Tensor s = Tensor::scalar(0.8);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(t, x23)); }, s, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(add(x23, t), add(x23, t))); }, s, eps) <= tol);

  // shaping ops
  Tensor x28 = rand_tensor({2, 8}, rng);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(narrow_time(t, 2, 4), narrow_time(t, 2, 4))); }, x28, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(pad_time(t, 3, 1), pad_time(t, 3, 1))); }, x28, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(interpolate_time(t, 13), interpolate_time(t, 13))); }, x28, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(interpolate_time(t, 5), interpolate_time(t, 5))); }, x28, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(upsample_nearest_time(t, 19), upsample_nearest_time(t, 19))); }, x28, eps) <= tol);

  // concat/split
  CHECK(grad_check(
            [&](const Tensor& t) {
              auto parts = split(t, 1, {3, 5});
              return sum(mul(concat({parts[1], parts[0]}, 1), concat({parts[1], parts[0]}, 1)));
            },
            x28, eps) <= tol);

  // normalization
  Tensor gamma = rand_tensor({2}, rng, 0.5, 1.5);
  Tensor beta = rand_tensor({2}, rng, -0.5, 0.5);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(global_layer_norm(t, gamma, beta), y23)); }, x23, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(global_layer_norm(x23, t, beta), y23)); }, gamma, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(global_layer_norm(x23, gamma, t), y23)); }, beta, eps) <= tol);

  // convs
  Tensor cin = rand_tensor({3, 17}, rng);
  Tensor w = rand_tensor({4, 3, 5}, rng);
  Tensor b = rand_tensor({4}, rng);
  auto conv_loss = [&](const Tensor& i, const Tensor& ww, const Tensor& bb) {
    Tensor o = conv1d(i, ww, bb, 2, 2);
    return sum(mul(o, o));
  };
  CHECK(grad_check([&](const Tensor& t) { return conv_loss(t, w, b); }, cin, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return conv_loss(cin, t, b); }, w, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return conv_loss(cin, w, t); }, b, eps) <= tol);

  Tensor wd = rand_tensor({3, 5}, rng);
  Tensor bd = rand_tensor({3}, rng);
  auto dw_loss = [&](const Tensor& i, const Tensor& ww, const Tensor& bb) {
    Tensor o = depthwise_conv1d(i, ww, bb, 2, 2);
    return sum(mul(o, o));
  };
  CHECK(grad_check([&](const Tensor& t) { return dw_loss(t, wd, bd); }, cin, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return dw_loss(cin, t, bd); }, wd, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return dw_loss(cin, wd, t); }, bd, eps) <= tol);

  Tensor wt = rand_tensor({3, 2, 4}, rng);
  Tensor bt = rand_tensor({2}, rng);
  auto tr_loss = [&](const Tensor& i, const Tensor& ww, const Tensor& bb) {
    Tensor o = conv_transpose1d(i, ww, bb, 3, 1);
    return sum(mul(o, o));
  };
  CHECK(grad_check([&](const Tensor& t) { return tr_loss(t, wt, bt); }, cin, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return tr_loss(cin, t, bt); }, wt, eps) <= tol);
  CHECK(grad_check([&](const Tensor& t) { return tr_loss(cin, wt, t); }, bt, eps) <= tol);
}

TEST_CASE("grad_check rejects bad eps and non-finite functions") {
  Tensor x = Tensor::from({2}, {1, 2});
  auto f = [](const Tensor& t) { return sum(t); };
  CHECK_THROWS_AS(grad_check(f, x, 0.0), ContractError);
  CHECK_THROWS_AS(grad_check(f, x, 0.5), ContractError);

  Tensor near_zero = Tensor::from({1}, {1e-9});
  auto flog = [](const Tensor& t) { return sum(log(t)); };
  // stepping below zero makes log throw; stepping to a huge value is fine
  CHECK_THROWS_AS(grad_check(flog, near_zero, 1e-5), DomainError);
}

TEST_CASE("conv1d trivial kernels") {
  SUBCASE("identity 1x1 kernel") {
    Tensor x = Tensor::from({1, 3}, {1, 2, 3});
    Tensor w = Tensor::from({1, 1, 1}, {1});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv1d(x, w, b, 1, 0);
    CHECK(y.shape() == Shape{1, 3});
    CHECK(y.values() == std::vector<double>{1, 2, 3});
  }
  SUBCASE("box filter, stride 2") {
    Tensor x = Tensor::from({1, 4}, {1, 1, 1, 1});
    Tensor w = Tensor::from({1, 1, 2}, {1, 1});
    Tensor b = Tensor::zeros({1});
    Tensor y = conv1d(x, w, b, 2, 0);
    CHECK(y.shape() == Shape{1, 2});
    CHECK(y.values() == std::vector<double>{2, 2});
  }
  SUBCASE("shape errors name the axis") {
    Tensor x = Tensor::from({2, 4}, {1, 1, 1, 1, 1, 1, 1, 1});
    Tensor w = Tensor::from({1, 3, 2}, {1, 1, 1, 1, 1, 1});
    Tensor b = Tensor::zeros({1});
    CHECK_THROWS_WITH_AS(conv1d(x, w, b, 1, 0),
                         doctest::Contains("axis"), ShapeError);
    CHECK_THROWS_AS(conv1d(x, Tensor::from({1, 2, 2}, {1, 1, 1, 1}), Tensor::zeros({2}), 1, 0),
                    ShapeError);
  }
}

TEST_CASE("conv_transpose1d trivial spread") {
  Tensor x = Tensor::from({1, 1}, {1});
  Tensor w = Tensor::from({1, 1, 2}, {1, 1});
  Tensor b = Tensor::zeros({1});
  Tensor y = conv_transpose1d(x, w, b, 1, 0);
  CHECK(y.shape() == Shape{1, 2});
  CHECK(y.values() == std::vector<double>{1, 1});
}

TEST_CASE("conv kernels match the naive loop oracle over 100 random configs") {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const int c_in = 1 + static_cast<int>(rng.next_below(4));
    const int c_out = 1 + static_cast<int>(rng.next_below(4));
    const int k = 1 + static_cast<int>(rng.next_below(6));
    const int stride = 1 + static_cast<int>(rng.next_below(3));
    const int padding = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));
    const int t_min = std::max(1, k - 2 * padding);
    const int t = t_min + static_cast<int>(rng.next_below(24));

    Tensor x = rand_tensor({c_in, t}, rng);
    Tensor w = rand_tensor({c_out, c_in, k}, rng);
    Tensor b = rand_tensor({c_out}, rng);

    Tensor fast = conv1d(x, w, b, stride, padding);
    Tensor slow = testutil::naive_conv1d(x, w, b, stride, padding);
    CHECK(fast.shape() == slow.shape());
    CHECK(max_abs_diff(fast, slow) <= 1e-12);

    Tensor wt = rand_tensor({c_in, c_out, k}, rng);
    Tensor bt = rand_tensor({c_out}, rng);
    if ((t - 1) * stride - 2 * padding + k >= 1) {
      Tensor tfast = conv_transpose1d(x, wt, bt, stride, padding);
      Tensor tslow = testutil::naive_conv_transpose1d(x, wt, bt, stride, padding);
      CHECK(tfast.shape() == tslow.shape());
      CHECK(max_abs_diff(tfast, tslow) <= 1e-12);
    }

    Tensor wd = rand_tensor({c_in, k}, rng);
    Tensor bd = rand_tensor({c_in}, rng);
    Tensor dfast = depthwise_conv1d(x, wd, bd, stride, padding);
    Tensor dslow = testutil::naive_depthwise_conv1d(x, wd, bd, stride, padding);
    CHECK(max_abs_diff(dfast, dslow) <= 1e-12);
  }
}

TEST_CASE("linear primitives satisfy the inner-product adjoint identity") {
  Rng rng(211);
  const double tol = 1e-10;

  // For linear L: <L(x), y> == <x, L^T(y)>, with L^T(y) read off x.grad
  // after backpropagating y through L.
  auto adjoint_vs_backward = [&](const std::function<Tensor(const Tensor&)>& L,
                                 Shape in_shape) {
    Tensor x = rand_tensor(in_shape, rng);
    x.set_requires_grad(true);
    clear_graph();
    Tensor lx = L(x);
    Tensor y = rand_tensor(lx.shape(), rng);
    const double lhs = dot(lx, y);
    backward(sum(mul(lx, y)));
    double rhs = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) rhs += x.grad()[static_cast<size_t>(i)] * x.data()[i];
    CHECK(std::abs(lhs - rhs) <= tol * std::max(1.0, std::abs(lhs)));
    x.zero_grad();
  };

  Tensor w = rand_tensor({4, 3, 5}, rng);
  Tensor zero_b = Tensor::zeros({4});
  adjoint_vs_backward([&](const Tensor& t) { return conv1d(t, w, zero_b, 2, 2); }, {3, 17});
  adjoint_vs_backward([&](const Tensor& t) { return interpolate_time(t, 29); }, {3, 17});
  adjoint_vs_backward([&](const Tensor& t) { return upsample_nearest_time(t, 40); }, {3, 17});
  adjoint_vs_backward([&](const Tensor& t) { return pad_time(t, 2, 5); }, {3, 17});
  adjoint_vs_backward([&](const Tensor& t) { return narrow_time(t, 4, 9); }, {3, 17});
  adjoint_vs_backward([&](const Tensor& t) { return transpose(t); }, {6, 7});
  adjoint_vs_backward([&](const Tensor& t) { return sum(t, 0); }, {6, 7});
  adjoint_vs_backward([&](const Tensor& t) { return mean(t, 1); }, {6, 7});
  Tensor m = rand_tensor({7, 4}, rng);
  adjoint_vs_backward([&](const Tensor& t) { return matmul(t, m); }, {6, 7});

  // conv_transpose1d is the adjoint of conv1d with the same weights:
  // <conv1d(x, W), y> == <x, conv_transpose1d(y, W)> (biases zero).
  for (int trial = 0; trial < 20; ++trial) {
    const int c_in = 1 + static_cast<int>(rng.next_below(3));
    const int c_out = 1 + static_cast<int>(rng.next_below(3));
    const int k = 1 + static_cast<int>(rng.next_below(5));
    const int stride = 1 + static_cast<int>(rng.next_below(3));
    const int padding = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));
    const int t = std::max(1, k - 2 * padding) + 5 + static_cast<int>(rng.next_below(20));
    Tensor x = rand_tensor({c_in, t}, rng);
    Tensor ww = rand_tensor({c_out, c_in, k}, rng);
    Tensor cx = conv1d(x, ww, Tensor::zeros({c_out}), stride, padding);
    if (cx.dim(1) < 1) continue;
    Tensor y = rand_tensor(cx.shape(), rng);
    // weight layout for the transpose direction is [C_in_of_transpose, C_out, K]
    // = [c_out, c_in, k] — the same buffer reinterpreted.
    Tensor wt = Tensor::from({c_out, c_in, k}, std::vector<double>(ww.data(), ww.data() + ww.size()));
    // conv_transpose with stride/padding maps y back to length t?
    // (t_y - 1)*stride - 2*padding + k == t only when the conv had no
    // remainder; skip configs where lengths disagree.
    const int t_back = (cx.dim(1) - 1) * stride - 2 * padding + k;
    if (t_back != t) continue;
    Tensor xty = conv_transpose1d(y, wt, Tensor::zeros({c_in}), stride, padding);
    const double lhs = dot(cx, y);
    const double rhs = dot(x, xty);
    CHECK(std::abs(lhs - rhs) <= 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("conv_transpose1d agrees with the gradient of conv1d") {
  // d/dx <conv1d(x, W), y> == conv_transpose1d(y, W): identical buffers.
  Rng rng(307);
  for (int trial = 0; trial < 20; ++trial) {
    const int c_in = 1 + static_cast<int>(rng.next_below(3));
    const int c_out = 1 + static_cast<int>(rng.next_below(3));
    const int k = 1 + static_cast<int>(rng.next_below(5));
    const int stride = 1 + static_cast<int>(rng.next_below(3));
    const int padding = static_cast<int>(rng.next_below(static_cast<uint64_t>(k)));
    const int t = std::max(1, k - 2 * padding) + 5 + static_cast<int>(rng.next_below(20));
    if ((t + 2 * padding - k) / stride + 1 < 1) continue;
    const int t_back = ((t + 2 * padding - k) / stride) * stride + k - 2 * padding;
    if (t_back != t) continue;

    Tensor x = rand_tensor({c_in, t}, rng);
    x.set_requires_grad(true);
    Tensor ww = rand_tensor({c_out, c_in, k}, rng);
    clear_graph();
    Tensor cx = conv1d(x, ww, Tensor::zeros({c_out}), stride, padding);
    Tensor y = rand_tensor(cx.shape(), rng);
    backward(sum(mul(cx, y)));

    Tensor wt = Tensor::from({c_out, c_in, k},
                             std::vector<double>(ww.data(), ww.data() + ww.size()));
    Tensor manual = conv_transpose1d(y, wt, Tensor::zeros({c_in}), stride, padding);
    double worst = 0.0;
    for (int64_t i = 0; i < manual.size(); ++i)
      worst = std::max(worst, std::abs(manual.data()[i] - x.grad()[static_cast<size_t>(i)]));
    CHECK(worst <= 1e-12);
    x.zero_grad();
  }
}

TEST_CASE("global_layer_norm standardizes over all elements") {
  Rng rng(401);
  Tensor x = rand_tensor({4, 50}, rng, -3.0, 5.0);
  Tensor gamma = Tensor::full({4}, 1.0);
  Tensor beta = Tensor::zeros({4});
  Tensor y = global_layer_norm(x, gamma, beta);
  CHECK(y.shape() == x.shape());
  double mu = sum_value(y) / y.size();
  double var = 0.0;
  for (int64_t i = 0; i < y.size(); ++i) var += (y.data()[i] - mu) * (y.data()[i] - mu);
  var /= y.size();
  CHECK(std::abs(mu) <= 1e-12);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-6));

  Tensor g2 = Tensor::from({4}, {2, 2, 2, 2});
  Tensor b2 = Tensor::from({4}, {1, 1, 1, 1});
  Tensor y2 = global_layer_norm(x, g2, b2);
  for (int64_t i = 0; i < y.size(); ++i)
    CHECK(y2.data()[i] == doctest::Approx(2.0 * y.data()[i] + 1.0).epsilon(1e-12));

  CHECK_THROWS_AS(global_layer_norm(x, Tensor::zeros({3}), beta), ShapeError);
  CHECK_THROWS_AS(global_layer_norm(Tensor::zeros({4}), gamma, beta), ShapeError);
}

TEST_CASE("interpolate_time endpoint alignment") {
  Tensor x = Tensor::from({1, 5}, {0, 1, 2, 3, 4});
  SUBCASE("same length is the identity") {
    Tensor y = interpolate_time(x, 5);
    CHECK(max_abs_diff(x, y) == 0.0);
  }
  SUBCASE("endpoints map to endpoints") {
    Tensor y = interpolate_time(x, 9);
    CHECK(y.at({0, 0}) == 0.0);
    CHECK(y.at({0, 8}) == 4.0);
    // linear ramp stays linear under linear interpolation
    for (int j = 0; j < 9; ++j) CHECK(y.at({0, j}) == doctest::Approx(j * 0.5).epsilon(1e-12));
  }
  SUBCASE("downsample endpoints") {
    Tensor y = interpolate_time(x, 3);
    CHECK(y.at({0, 0}) == 0.0);
    CHECK(y.at({0, 2}) == 4.0);
    CHECK(y.at({0, 1}) == 2.0);
  }
  SUBCASE("single-frame source broadcasts") {
    Tensor one = Tensor::from({2, 1}, {7, 9});
    Tensor y = interpolate_time(one, 4);
    for (int j = 0; j < 4; ++j) {
      CHECK(y.at({0, j}) == 7.0);
      CHECK(y.at({1, j}) == 9.0);
    }
  }
  CHECK_THROWS_AS(interpolate_time(x, 0), ShapeError);
}

TEST_CASE("upsample_nearest_time repeats frames") {
  Tensor x = Tensor::from({1, 3}, {10, 20, 30});
  Tensor y = upsample_nearest_time(x, 6);
  CHECK(y.values() == std::vector<double>{10, 10, 20, 20, 30, 30});
}

TEST_CASE("narrow/pad time round trip") {
  Rng rng(57);
  Tensor x = rand_tensor({3, 10}, rng);
  Tensor padded = pad_time(x, 4, 2);
  CHECK(padded.shape() == Shape{3, 16});
  CHECK(padded.at({1, 0}) == 0.0);
  CHECK(padded.at({1, 15}) == 0.0);
  Tensor back = narrow_time(padded, 4, 10);
  CHECK(max_abs_diff(back, x) == 0.0);
  CHECK_THROWS_AS(narrow_time(x, 8, 5), ShapeError);
  CHECK_THROWS_AS(pad_time(x, -1, 0), ShapeError);
}

TEST_CASE("reshape and transpose") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor r = reshape(x, {3, 2});
  CHECK(r.at({2, 1}) == 6.0);
  CHECK_THROWS_AS(reshape(x, {4, 2}), ShapeError);
  Tensor t = transpose(x);
  CHECK(t.shape() == Shape{3, 2});
  CHECK(t.at({2, 0}) == 3.0);
  CHECK(t.at({0, 1}) == 4.0);
  CHECK_THROWS_AS(transpose(Tensor::zeros({2, 2, 2})), ShapeError);
}

TEST_CASE("log rejects nonpositive input") {
  CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::from({1}, {-3.0})), DomainError);
  CHECK(log(Tensor::scalar(1.0)).item() == 0.0);
}

TEST_CASE("multiply counter bills convs and matmul only") {
  Rng rng(61);
  Tensor x = rand_tensor({3, 20}, rng);
  Tensor w = rand_tensor({5, 3, 4}, rng);
  Tensor b = rand_tensor({5}, rng);

  macs::reset();
  Tensor y = conv1d(x, w, b, 1, 0);  // t_out = 17, no padding: every tap valid
  CHECK(macs::count() == 5ULL * 3 * 4 * 17);

  macs::reset();
  add(y, y);
  mul(y, y);
  relu(y);
  CHECK(macs::count() == 0);

  macs::reset();
  matmul(rand_tensor({3, 4}, rng), rand_tensor({4, 7}, rng));
  CHECK(macs::count() == 3ULL * 4 * 7);

  // padded taps are billed too: the count is the nominal kernel cost
  macs::reset();
  conv1d(x, w, b, 1, 3);
  CHECK(macs::count() == 5ULL * 3 * 4 * (20 + 6 - 4 + 1));

  macs::reset();
  Tensor wt = rand_tensor({3, 2, 4}, rng);
  conv_transpose1d(x, wt, Tensor::zeros({2}), 2, 0);
  CHECK(macs::count() == 3ULL * 2 * 4 * 20);  // C_in*C_out*K*T_in

  macs::reset();
  depthwise_conv1d(x, rand_tensor({3, 4}, rng), Tensor::zeros({3}), 1, 0);
  CHECK(macs::count() == 3ULL * 4 * 17);
}

TEST_CASE("identical seeds give bit-identical tensors and ops") {
  Rng r1(999), r2(999);
  Tensor a1 = Tensor::uniform({4, 9}, r1, -1, 1);
  Tensor a2 = Tensor::uniform({4, 9}, r2, -1, 1);
  CHECK(a1.values() == a2.values());

  Tensor w1 = Tensor::uniform({2, 4, 3}, r1, -0.5, 0.5);
  Tensor w2 = Tensor::uniform({2, 4, 3}, r2, -0.5, 0.5);
  Tensor y1 = conv1d(a1, w1, Tensor::zeros({2}), 1, 1);
  Tensor y2 = conv1d(a2, w2, Tensor::zeros({2}), 1, 1);
  CHECK(y1.values() == y2.values());

  Rng d1(5), d2(5);
  for (int i = 0; i < 100; ++i) CHECK(d1.next_u64() == d2.next_u64());
}

TEST_CASE("derive_seed separates streams") {
  CHECK(derive_seed(42, 0) != derive_seed(42, 1));
  CHECK(derive_seed(42, 0) != derive_seed(43, 0));
  CHECK(derive_seed(42, 7) == derive_seed(42, 7));
}

TEST_CASE("ops leave values finite") {
  Rng rng(71);
  Tensor x = rand_tensor({4, 30}, rng, -10.0, 10.0);
  Tensor w = rand_tensor({6, 4, 5}, rng);
  Tensor y = conv1d(x, w, rand_tensor({6}, rng), 2, 2);
  CHECK(all_finite(y));
  CHECK(all_finite(sigmoid(x)));
  CHECK(all_finite(global_layer_norm(x, Tensor::full({4}, 1.0), Tensor::zeros({4}))));
}
