// Forward-value contracts for the tensor ops, checked against independent
// in-test reference implementations (direct convolution loops, hand cases).
#include <cmath>
#include <vector>

#include "capsdense/ops.hpp"
#include "capsdense/rng.hpp"
#include "capsdense/tape.hpp"
#include "doctest.h"

using namespace capsdense;

namespace {

// Direct-loop convolution reference. Same geometry convention as the
// library: valid keeps fully covered taps; same pads to ceil(in/stride)
// with the odd pad pixel at the bottom/right.
TensorT<double> conv_reference(const TensorT<double>& x, const TensorT<double>& k,
                               const TensorT<double>& bias, int stride, Pad pad) {
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t K = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  int64_t OH, OW, pt, pl;
  if (pad == Pad::valid) {
    OH = (H - kh) / stride + 1;
    OW = (W - kw) / stride + 1;
    pt = pl = 0;
  } else {
    OH = (H + stride - 1) / stride;
    OW = (W + stride - 1) / stride;
    pt = std::max<int64_t>(0, (OH - 1) * stride + kh - H) / 2;
    pl = std::max<int64_t>(0, (OW - 1) * stride + kw - W) / 2;
  }
  TensorT<double> y({N, K, OH, OW});
  for (int64_t n = 0; n < N; ++n)
    for (int64_t f = 0; f < K; ++f)
      for (int64_t oy = 0; oy < OH; ++oy)
        for (int64_t ox = 0; ox < OW; ++ox) {
          double acc = bias.at({f});
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * stride + ky - pt;
                const int64_t ix = ox * stride + kx - pl;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x.at({n, c, iy, ix}) * k.at({f, c, ky, kx});
              }
          y.at({n, f, oy, ox}) = acc;
        }
  return y;
}

TensorT<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorT<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

void check_close(const TensorT<double>& got, const TensorT<double>& want, double tol) {
  REQUIRE(got.shape() == want.shape());
  for (int64_t i = 0; i < got.numel(); ++i) {
    INFO("flat index " << i);
    CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(tol).scale(1.0));
  }
}

}  // namespace

TEST_CASE("conv of all-ones 3x3 by an all-ones 3x3 kernel is 9") {
  auto x = TensorT<double>({1, 1, 3, 3}, 1.0);
  auto k = TensorT<double>({1, 1, 3, 3}, 1.0);
  auto b = TensorT<double>({1}, 0.0);
  auto y = conv2d(x, k, b, 1, Pad::valid);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);
}

TEST_CASE("same-padded identity kernel reproduces the input exactly") {
  Rng rng(11);
  auto x = rand_tensor({2, 3, 5, 7}, rng);
  TensorT<double> k({3, 3, 3, 3}, 0.0);
  for (int64_t f = 0; f < 3; ++f) k.at({f, f, 1, 1}) = 1.0;  // center tap, per channel
  auto b = TensorT<double>({3}, 0.0);
  auto y = conv2d(x, k, b, 1, Pad::same);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("strided valid conv matches the direct-loop reference") {
  Rng rng(12);
  auto x = rand_tensor({1, 2, 5, 5}, rng);
  auto k = rand_tensor({3, 2, 3, 3}, rng);
  auto b = rand_tensor({3}, rng);
  auto y = conv2d(x, k, b, 2, Pad::valid);
  REQUIRE(y.shape() == Shape{1, 3, 2, 2});
  check_close(y, conv_reference(x, k, b, 2, Pad::valid), 1e-5);
}

TEST_CASE("50 randomized conv shapes match the direct-loop reference") {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t N = 1 + rng.uniform_int(2);
    const int64_t C = 1 + rng.uniform_int(3);
    const int64_t K = 1 + rng.uniform_int(4);
    const int64_t kh = 1 + rng.uniform_int(3);
    const int64_t kw = 1 + rng.uniform_int(3);
    const int stride = 1 + static_cast<int>(rng.uniform_int(3));
    const Pad pad = rng.uniform_int(2) == 0 ? Pad::valid : Pad::same;
    const int64_t H = kh + rng.uniform_int(6);
    const int64_t W = kw + rng.uniform_int(6);
    INFO("trial " << trial << ": x [" << N << "," << C << "," << H << "," << W << "] k [" << K
                  << "," << C << "," << kh << "," << kw << "] stride " << stride << " pad "
                  << (pad == Pad::valid ? "valid" : "same"));
    auto x = rand_tensor({N, C, H, W}, rng);
    auto k = rand_tensor({K, C, kh, kw}, rng);
    auto b = rand_tensor({K}, rng);
    check_close(conv2d(x, k, b, stride, pad), conv_reference(x, k, b, stride, pad), 1e-5);
  }
}

TEST_CASE("same padding puts the odd pad pixel at the bottom/right") {
  // 2x2 kernel on 4x4, stride 1, same: one pad pixel total per axis, so the
  // top-left output sees the full 2x2 window and the bottom-right sees only
  // the top-left input corner of its window.
  TensorT<double> x({1, 1, 4, 4}, 1.0);
  TensorT<double> k({1, 1, 2, 2}, 1.0);
  TensorT<double> b({1}, 0.0);
  auto y = conv2d(x, k, b, 1, Pad::same);
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y.at({0, 0, 0, 0}) == 4.0);  // fully covered
  CHECK(y.at({0, 0, 3, 3}) == 1.0);  // 3 taps fall off the bottom/right edge
  CHECK(y.at({0, 0, 0, 3}) == 2.0);
  CHECK(y.at({0, 0, 3, 0}) == 2.0);
}

TEST_CASE("conv rejects mismatched operands with axis detail") {
  TensorT<double> x({1, 2, 5, 5});
  TensorT<double> k({3, 4, 3, 3});
  TensorT<double> b({3});
  CHECK_THROWS_WITH_AS(conv2d(x, k, b, 1, Pad::valid),
                       doctest::Contains("channels"), DimensionError);
  CHECK_THROWS_AS(conv2d(x, TensorT<double>({3, 2, 3, 3}), TensorT<double>({4}), 1, Pad::valid),
                  DimensionError);
  CHECK_THROWS_AS(conv2d(TensorT<double>({1, 2, 2, 2}), TensorT<double>({3, 2, 3, 3}),
                         TensorT<double>({3}), 1, Pad::valid),
                  DimensionError);  // input smaller than the kernel under valid
  CHECK_THROWS_AS(conv2d(TensorT<double>({2, 5, 5}), k, b, 1, Pad::valid), DimensionError);
  CHECK_THROWS_AS(conv2d(x, TensorT<double>({3, 2, 3, 3}), b, 0, Pad::valid), ContractError);
}

TEST_CASE("concat stacks blocks in argument order") {
  auto a = TensorT<double>::from_data({1, 2, 1, 2}, {1, 2, 3, 4});
  auto c = TensorT<double>::from_data({1, 1, 1, 2}, {5, 6});
  auto y = concat_channels<double>({a, c});
  REQUIRE(y.shape() == Shape{1, 3, 1, 2});
  const std::vector<double> want{1, 2, 3, 4, 5, 6};
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == want[static_cast<size_t>(i)]);

  // non-channel axis: rows interleave per outer index
  auto r1 = TensorT<double>::from_data({2, 1}, {1, 2});
  auto r2 = TensorT<double>::from_data({2, 2}, {3, 4, 5, 6});
  auto rows = concat<double>({r1, r2}, 1);
  REQUIRE(rows.shape() == Shape{2, 3});
  const std::vector<double> want2{1, 3, 4, 2, 5, 6};
  for (int64_t i = 0; i < rows.numel(); ++i) CHECK(rows.data()[i] == want2[static_cast<size_t>(i)]);
}

TEST_CASE("summing a concat sends an all-ones gradient to every input") {
  auto a = TensorT<double>::from_data({1, 2, 1, 1}, {1, 2});
  auto c = TensorT<double>::from_data({1, 3, 1, 1}, {3, 4, 5});
  a.set_requires_grad(true);
  c.set_requires_grad(true);
  TapeT<double> tape;
  tape.backward(sum(concat_channels<double>({a, c})));
  REQUIRE(a.has_grad());
  REQUIRE(c.has_grad());
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a.grad()[i] == 1.0);
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(c.grad()[i] == 1.0);
}

TEST_CASE("concat validates ranks, extents, and axis") {
  auto a = TensorT<double>({1, 2, 3, 3});
  CHECK_THROWS_AS(concat<double>({}, 0), ContractError);
  CHECK_THROWS_AS(concat<double>({a, TensorT<double>({1, 2, 3})}, 1), DimensionError);
  CHECK_THROWS_AS(concat<double>({a, TensorT<double>({1, 2, 4, 3})}, 1), DimensionError);
  CHECK_THROWS_AS(concat<double>({a}, 4), DimensionError);
  CHECK_THROWS_WITH_AS(concat_channels<double>({a, TensorT<double>({2, 2, 3, 3})}),
                       doctest::Contains("input 1"), DimensionError);
}

TEST_CASE("softmax of a zero vector is uniform") {
  TensorT<double> x({2, 5}, 0.0);
  auto y = softmax(x, 1);
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
  Rng rng(14);
  for (int axis = 0; axis < 3; ++axis) {
    auto x = rand_tensor({3, 4, 5}, rng, -8.0, 8.0);
    auto y = softmax(x, axis);
    const auto l_outer = [&] {
      int64_t o = 1;
      for (int a = 0; a < axis; ++a) o *= x.dim(a);
      return o;
    }();
    int64_t inner = 1;
    for (int a = axis + 1; a < 3; ++a) inner *= x.dim(a);
    const int64_t n = x.dim(axis);
    for (int64_t o = 0; o < l_outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0;
        for (int64_t t = 0; t < n; ++t) {
          const double v = y.data()[(o * n + t) * inner + in];
          CHECK(v > 0.0);
          CHECK(v < 1.0);
          s += v;
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("l2 norm of (3,4) is 5") {
  auto x = TensorT<double>::from_data({1, 2}, {3.0, 4.0});
  auto y = l2_norm(x, 1);
  REQUIRE(y.shape() == Shape{1});
  CHECK(y.data()[0] == doctest::Approx(5.0).epsilon(1e-6));
}

TEST_CASE("l2 norm of the zero vector is tiny with a finite gradient") {
  TensorT<double> x({1, 4}, 0.0);
  x.set_requires_grad(true);
  TapeT<double> tape;
  auto y = l2_norm(x, 1);
  CHECK(y.data()[0] == doctest::Approx(std::sqrt(1e-9)).epsilon(1e-9));
  tape.backward(sum(y));
  for (int64_t i = 0; i < 4; ++i) CHECK(std::isfinite(x.grad()[i]));
  CHECK_THROWS_AS(l2_norm(x, 2), DimensionError);
  CHECK_THROWS_AS(l2_norm(x, 1, -1.0), ContractError);
}

TEST_CASE("reductions: sum, mean, mse") {
  auto x = TensorT<double>::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(sum(x).item() == 10.0);
  CHECK(mean(x).item() == 2.5);
  auto y = TensorT<double>::from_data({2, 2}, {1, 2, 3, 8});
  CHECK(mse(x, y).item() == doctest::Approx(4.0));  // (0+0+0+16)/4
  CHECK_THROWS_AS(mse(x, TensorT<double>({2, 3})), DimensionError);
}

TEST_CASE("elementwise and matrix ops validate shapes") {
  TensorT<double> a({2, 3}), b({3, 2});
  CHECK_THROWS_AS(add(a, b), DimensionError);
  CHECK_THROWS_AS(sub(a, b), DimensionError);
  CHECK_THROWS_AS(mul(a, b), DimensionError);
  CHECK_THROWS_AS(matmul(a, TensorT<double>({2, 2})), DimensionError);
  CHECK_THROWS_AS(matmul(a, TensorT<double>({3})), DimensionError);
  CHECK_THROWS_AS(add_rowwise(a, TensorT<double>({2})), DimensionError);
  CHECK_THROWS_AS(reshape(a, {7}), DimensionError);
}

TEST_CASE("matmul and linear hand case") {
  auto a = TensorT<double>::from_data({2, 2}, {1, 2, 3, 4});
  auto w = TensorT<double>::from_data({2, 2}, {5, 6, 7, 8});
  auto y = matmul(a, w);
  CHECK(y.at({0, 0}) == 19.0);
  CHECK(y.at({0, 1}) == 22.0);
  CHECK(y.at({1, 0}) == 43.0);
  CHECK(y.at({1, 1}) == 50.0);
  auto b = TensorT<double>::from_data({2}, {0.5, -0.5});
  auto z = linear(a, w, b);
  CHECK(z.at({0, 0}) == 19.5);
  CHECK(z.at({1, 1}) == 49.5);
}

TEST_CASE("capsule regrouping keeps channel blocks together") {
  // 4 conv maps = 2 capsule channels x 2 components on a 1x2 grid. Capsule
  // c*H*W + y*W + x takes its components from consecutive channels.
  auto x = TensorT<double>::from_data({1, 4, 1, 2}, {10, 11,   // channel 0 (cap block 0, comp 0)
                                                     20, 21,   // channel 1 (cap block 0, comp 1)
                                                     30, 31,   // channel 2 (cap block 1, comp 0)
                                                     40, 41}); // channel 3 (cap block 1, comp 1)
  auto caps = caps_from_conv(x, 2);
  REQUIRE(caps.shape() == Shape{1, 4, 2});
  CHECK(caps.at({0, 0, 0}) == 10.0);
  CHECK(caps.at({0, 0, 1}) == 20.0);
  CHECK(caps.at({0, 1, 0}) == 11.0);
  CHECK(caps.at({0, 1, 1}) == 21.0);
  CHECK(caps.at({0, 2, 0}) == 30.0);
  CHECK(caps.at({0, 3, 1}) == 41.0);
  CHECK_THROWS_AS(caps_from_conv(x, 3), DimensionError);
  CHECK_THROWS_AS(caps_from_conv(TensorT<double>({4, 1, 2}), 2), DimensionError);
}

TEST_CASE("broadcast multiply by a trailing-axis mask") {
  auto x = TensorT<double>::from_data({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto m = TensorT<double>::from_data({2, 2}, {1, 0, 0.5, 2});
  auto y = mul_broadcast_last(x, m);
  CHECK(y.at({0, 0, 1}) == 2.0);
  CHECK(y.at({0, 1, 0}) == 0.0);
  CHECK(y.at({1, 0, 1}) == 3.0);
  CHECK(y.at({1, 1, 0}) == 14.0);
  CHECK_THROWS_AS(mul_broadcast_last(x, TensorT<double>({2, 3})), DimensionError);
  CHECK_THROWS_AS(mul_broadcast_last(x, TensorT<double>({2, 2, 2})), DimensionError);
}

TEST_CASE("stop_grad blocks the gradient path but keeps values") {
  TensorT<double> x = TensorT<double>::scalar(3.0);
  x.set_requires_grad(true);
  TapeT<double> tape;
  auto cut = stop_grad(mul(x, x));
  CHECK(cut.item() == 9.0);
  CHECK_FALSE(cut.requires_grad());
  auto y = add(mul(x, x), cut);  // only the live branch contributes
  tape.backward(y);
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("relu and sigmoid values") {
  auto x = TensorT<double>::from_data({4}, {-2.0, 0.0, 1.5, 3.0});
  auto r = relu(x);
  CHECK(r.data()[0] == 0.0);
  CHECK(r.data()[1] == 0.0);
  CHECK(r.data()[2] == 1.5);
  auto s = sigmoid(TensorT<double>::from_data({1}, {0.0}));
  CHECK(s.data()[0] == 0.5);
}
