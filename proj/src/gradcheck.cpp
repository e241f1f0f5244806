#include "capsdense/gradcheck.hpp"

#include "capsdense/capsule.hpp"
#include "capsdense/ops.hpp"
#include "capsdense/rng.hpp"

namespace capsdense {

namespace {

using DT = TensorT<double>;

DT rand_uniform(Rng& rng, Shape shape, double lo, double hi) {
  DT t(shape);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Magnitudes in [lo, hi] with random signs; keeps relu/abs kinks a safe
// distance from every finite-difference probe.
DT rand_signed(Rng& rng, Shape shape, double lo, double hi) {
  DT t(shape);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = rng.uniform(lo, hi) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

// Scalar readout that weights every element differently, so transposed or
// permuted gradients cannot cancel out.
DT readout(const DT& y, uint64_t seed) {
  Rng rng(seed);
  DT w = rand_signed(rng, y.shape(), 0.3, 1.0);
  return capsdense::sum(mul(y, w));
}

constexpr double kH = 1e-4;

}  // namespace

const std::vector<OpGradCase>& op_grad_cases() {
  static const std::vector<OpGradCase> cases = [] {
    std::vector<OpGradCase> v;
    auto add_case = [&v](std::string name, std::function<double()> run) {
      v.push_back(OpGradCase{std::move(name), 1e-3, std::move(run)});
    };

    add_case("relu", [] {
      Rng rng(101);
      DT x = rand_signed(rng, {3, 4}, 0.05, 1.0);
      return finite_diff_check<double>([&] { return readout(relu(x), 1); }, {x}, kH);
    });

    add_case("sigmoid", [] {
      Rng rng(102);
      DT x = rand_signed(rng, {3, 4}, 0.0, 2.0);
      return finite_diff_check<double>([&] { return readout(sigmoid(x), 2); }, {x}, kH);
    });

    add_case("affine", [] {
      Rng rng(103);
      DT x = rand_signed(rng, {2, 5}, 0.0, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(affine(x, 1.7, -0.3), 3); }, {x}, kH);
    });

    add_case("scale", [] {
      Rng rng(104);
      DT x = rand_signed(rng, {7}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return readout(scale(x, -2.5), 4); }, {x}, kH);
    });

    add_case("add", [] {
      Rng rng(105);
      DT a = rand_signed(rng, {3, 2}, 0.0, 1.0), b = rand_signed(rng, {3, 2}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return readout(add(a, b), 5); }, {a, b}, kH);
    });

    add_case("sub", [] {
      Rng rng(106);
      DT a = rand_signed(rng, {3, 2}, 0.0, 1.0), b = rand_signed(rng, {3, 2}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return readout(sub(a, b), 6); }, {a, b}, kH);
    });

    add_case("mul", [] {
      Rng rng(107);
      DT a = rand_signed(rng, {4, 3}, 0.2, 1.0), b = rand_signed(rng, {4, 3}, 0.2, 1.0);
      return finite_diff_check<double>([&] { return readout(mul(a, b), 7); }, {a, b}, kH);
    });

    add_case("mul_same_operand", [] {
      // x used twice: gradients from both slots must accumulate.
      Rng rng(108);
      DT x = rand_signed(rng, {5}, 0.2, 1.0);
      return finite_diff_check<double>([&] { return readout(mul(x, x), 8); }, {x}, kH);
    });

    add_case("add_rowwise", [] {
      Rng rng(109);
      DT x = rand_signed(rng, {3, 4}, 0.0, 1.0), b = rand_signed(rng, {4}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return readout(add_rowwise(x, b), 9); }, {x, b}, kH);
    });

    add_case("matmul", [] {
      Rng rng(110);
      DT a = rand_signed(rng, {3, 4}, 0.1, 1.0), b = rand_signed(rng, {4, 5}, 0.1, 1.0);
      return finite_diff_check<double>([&] { return readout(matmul(a, b), 10); }, {a, b}, kH);
    });

    add_case("conv2d_valid_s2", [] {
      Rng rng(111);
      DT x = rand_signed(rng, {2, 3, 7, 6}, 0.1, 1.0);
      DT k = rand_signed(rng, {4, 3, 3, 3}, 0.1, 0.5);
      DT b = rand_signed(rng, {4}, 0.0, 0.3);
      return finite_diff_check<double>(
          [&] { return readout(conv2d(x, k, b, 2, Pad::valid), 11); }, {x, k, b}, kH);
    });

    add_case("conv2d_same_s1", [] {
      Rng rng(112);
      DT x = rand_signed(rng, {2, 2, 5, 5}, 0.1, 1.0);
      DT k = rand_signed(rng, {3, 2, 3, 3}, 0.1, 0.5);
      DT b = rand_signed(rng, {3}, 0.0, 0.3);
      return finite_diff_check<double>(
          [&] { return readout(conv2d(x, k, b, 1, Pad::same), 12); }, {x, k, b}, kH);
    });

    add_case("conv2d_same_s2_odd_pad", [] {
      Rng rng(113);
      DT x = rand_signed(rng, {1, 2, 6, 6}, 0.1, 1.0);
      DT k = rand_signed(rng, {2, 2, 9, 9}, 0.05, 0.3);
      DT b = rand_signed(rng, {2}, 0.0, 0.3);
      return finite_diff_check<double>(
          [&] { return readout(conv2d(x, k, b, 2, Pad::same), 13); }, {x, k, b}, kH);
    });

    add_case("reshape", [] {
      Rng rng(114);
      DT x = rand_signed(rng, {2, 6}, 0.0, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(reshape(x, {3, 4}), 14); }, {x}, kH);
    });

    add_case("concat", [] {
      Rng rng(115);
      DT a = rand_signed(rng, {2, 2, 3}, 0.0, 1.0);
      DT b = rand_signed(rng, {2, 1, 3}, 0.0, 1.0);
      DT c = rand_signed(rng, {2, 4, 3}, 0.0, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(concat<double>({a, b, c}, 1), 15); }, {a, b, c}, kH);
    });

    add_case("concat_channels", [] {
      Rng rng(116);
      DT a = rand_signed(rng, {2, 3, 4, 4}, 0.0, 1.0);
      DT b = rand_signed(rng, {2, 2, 4, 4}, 0.0, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(concat_channels<double>({a, b}), 16); }, {a, b}, kH);
    });

    add_case("softmax", [] {
      Rng rng(117);
      DT x = rand_signed(rng, {2, 5, 3}, 0.0, 2.0);
      return finite_diff_check<double>([&] { return readout(softmax(x, 1), 17); }, {x}, kH);
    });

    add_case("l2_norm", [] {
      Rng rng(118);
      DT x = rand_signed(rng, {3, 4, 2}, 0.2, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(l2_norm(x, 1, 1e-12), 18); }, {x}, kH);
    });

    add_case("sum", [] {
      Rng rng(119);
      DT x = rand_signed(rng, {4, 3}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return capsdense::sum(x); }, {x}, kH);
    });

    add_case("mse", [] {
      Rng rng(120);
      DT a = rand_signed(rng, {3, 4}, 0.0, 1.0), b = rand_signed(rng, {3, 4}, 0.0, 1.0);
      return finite_diff_check<double>([&] { return mse(a, b); }, {a, b}, kH);
    });

    add_case("mul_broadcast_last", [] {
      Rng rng(121);
      DT x = rand_signed(rng, {2, 3, 4}, 0.2, 1.0);
      DT m = rand_signed(rng, {2, 3}, 0.2, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(mul_broadcast_last(x, m), 21); }, {x, m}, kH);
    });

    add_case("caps_from_conv", [] {
      Rng rng(122);
      DT x = rand_signed(rng, {2, 6, 3, 4}, 0.0, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(caps_from_conv(x, 2), 22); }, {x}, kH);
    });

    add_case("squash", [] {
      Rng rng(123);
      DT s = rand_signed(rng, {3, 4, 5}, 0.1, 1.5);
      return finite_diff_check<double>([&] { return readout(squash(s), 23); }, {s}, kH);
    });

    add_case("squash_near_zero", [] {
      Rng rng(124);
      DT s = rand_signed(rng, {2, 3}, 0.005, 0.02);
      return finite_diff_check<double>([&] { return readout(squash(s), 24); }, {s}, kH);
    });

    add_case("predict", [] {
      Rng rng(125);
      DT u = rand_signed(rng, {2, 3, 2}, 0.1, 1.0);
      DT w = rand_signed(rng, {3, 4, 2, 3}, 0.1, 0.5);
      return finite_diff_check<double>([&] { return readout(predict(u, w), 25); }, {u, w}, kH);
    });

    add_case("route_weighted_sum", [] {
      Rng rng(126);
      DT c = rand_uniform(rng, {2, 3, 4}, 0.1, 0.9);
      DT u = rand_signed(rng, {2, 3, 4, 3}, 0.1, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(route_weighted_sum(c, u), 26); }, {c, u}, kH);
    });

    add_case("route_single_round", [] {
      // With one round the couplings are softmax(0), true constants, so the
      // engine gradient must equal the finite difference exactly.
      Rng rng(127);
      DT u = rand_signed(rng, {2, 3, 4, 3}, 0.1, 1.0);
      return finite_diff_check<double>(
          [&] { return readout(route(u, 1).first, 27); }, {u}, kH);
    });

    add_case("margin_loss", [] {
      Rng rng(128);
      // Scores sit inside (0.15, 0.85): both hinges active somewhere, no
      // probe crosses the 0.1 / 0.9 kinks.
      DT norms = rand_uniform(rng, {3, 4}, 0.15, 0.85);
      std::vector<int> labels{2, 0, 3};
      DT targets = one_hot<double>(labels, 4);
      return finite_diff_check<double>(
          [&] { return margin_loss(norms, targets); }, {norms}, kH);
    });

    add_case("capsule_logits", [] {
      Rng rng(129);
      DT v = rand_signed(rng, {2, 3, 4}, 0.1, 0.6);
      return finite_diff_check<double>([&] { return readout(capsule_logits(v), 29); }, {v}, kH);
    });

    return v;
  }();
  return cases;
}

}  // namespace capsdense
