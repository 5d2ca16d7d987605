#include "mthu/nn/ops.hpp"
#include "test_util.hpp"

using namespace mthu;
using namespace mthu::nn;
using testutil::expect_gradients_match;
using T = Tensor<double>;

namespace {

T rnd(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 g(seed);
  const auto n = numel(s);
  return T(std::move(s), testutil::random_vector(n, g, lo, hi));
}

// Keeps values away from kinks so central differences stay valid.
T away_from_zero(Shape s, std::uint64_t seed) {
  T t = rnd(std::move(s), seed);
  for (auto& v : t.data) v += v >= 0 ? 0.1 : -0.1;
  return t;
}

}  // namespace

TEST(OpsGrad, Elementwise) {
  const T a = rnd({2, 3, 4}, 1), b = rnd({2, 3, 4}, 2);
  expect_gradients_match({a, b}, [](auto& tp, const auto& v) { return add(tp, v[0], v[1]); });
  expect_gradients_match({a, b}, [](auto& tp, const auto& v) { return sub(tp, v[0], v[1]); });
  expect_gradients_match({a, b}, [](auto& tp, const auto& v) { return mul(tp, v[0], v[1]); });
  expect_gradients_match({a}, [](auto& tp, const auto& v) { return affine(tp, v[0], 2.5, -0.3); });
  expect_gradients_match({a}, [](auto& tp, const auto& v) { return sigmoid(tp, v[0]); });
  expect_gradients_match({away_from_zero({2, 3, 4}, 3)},
                         [](auto& tp, const auto& v) { return leaky_relu(tp, v[0], 0.01); });
}

TEST(OpsGrad, Softmax) {
  expect_gradients_match({rnd({3, 5}, 4, -3, 3)}, [](auto& tp, const auto& v) { return softmax_last(tp, v[0]); });
}

TEST(OpsGrad, DropoutWithFixedMask) {
  const T a = rnd({4, 6}, 5);
  expect_gradients_match({a}, [](auto& tp, const auto& v) {
    Rng rng(11);  // same mask on every evaluation
    return dropout(tp, v[0], 0.3, rng);
  });
}

TEST(OpsGrad, IndexOps) {
  auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{3, 0, -1, 5, 5, 1});
  expect_gradients_match({rnd({6}, 6)}, [idx](auto& tp, const auto& v) { return gather(tp, v[0], idx, {2, 3}); });
  expect_gradients_match({rnd({2, 3}, 7), rnd({2, 4, 3}, 8)},
                         [](auto& tp, const auto& v) { return prepend_rows(tp, v[0], v[1]); });
  expect_gradients_match({rnd({2, 3}, 9), rnd({4}, 10)},
                         [](auto& tp, const auto& v) { return concat(tp, v[0], v[1], {10}); });
}

TEST(OpsGrad, BroadcastAndPooling) {
  const T x = rnd({2, 5, 3}, 12);
  expect_gradients_match({x, rnd({2, 3}, 13)}, [](auto& tp, const auto& v) { return mul_channels(tp, v[0], v[1]); });
  expect_gradients_match({x, rnd({2, 3}, 14)}, [](auto& tp, const auto& v) { return add_rows(tp, v[0], v[1]); });
  expect_gradients_match({rnd({2, 3}, 15), rnd({2}, 16)}, [](auto& tp, const auto& v) { return mul_rows(tp, v[0], v[1]); });
  expect_gradients_match({x}, [](auto& tp, const auto& v) { return pool_mean(tp, v[0]); });
  expect_gradients_match({x}, [](auto& tp, const auto& v) { return pool_max(tp, v[0]); });
  expect_gradients_match({x}, [](auto& tp, const auto& v) { return mean_per_batch(tp, v[0]); });
}

TEST(OpsGrad, Dense) {
  expect_gradients_match({rnd({2, 4, 3}, 17), rnd({3, 5}, 18), rnd({5}, 19)},
                         [](auto& tp, const auto& v) { return linear(tp, v[0], v[1], v[2]); });
  expect_gradients_match({rnd({4, 3}, 20), rnd({3, 2}, 21)}, [](auto& tp, const auto& v) { return linear(tp, v[0], v[1]); });
  expect_gradients_match({rnd({2, 5, 3}, 22), rnd({2, 4, 3}, 23)},
                         [](auto& tp, const auto& v) { return batched_matmul_nt(tp, v[0], v[1]); });
}

TEST(OpsGrad, Conv) {
  for (int k : {1, 3, 5}) {
    expect_gradients_match({rnd({2, 3, 4, 5}, 24), rnd({2, 3, k, k}, 25), rnd({2}, 26)},
                           [](auto& tp, const auto& v) { return conv2d(tp, v[0], v[1], v[2]); });
  }
}

TEST(OpsGrad, BatchNormTrainAndEval) {
  const T x = rnd({2, 3, 2, 3}, 27), g = rnd({3}, 28, 0.5, 1.5), b = rnd({3}, 29);
  expect_gradients_match({x, g, b}, [](auto& tp, const auto& v) {
    return batch_norm(tp, v[0], v[1], v[2], NormStats<double>{}, true, false);
  });
  auto mean = std::make_shared<std::vector<double>>(std::vector<double>{0.1, -0.2, 0.3});
  auto var = std::make_shared<std::vector<double>>(std::vector<double>{0.5, 2.0, 1.0});
  expect_gradients_match({x, g, b}, [mean, var](auto& tp, const auto& v) {
    return batch_norm(tp, v[0], v[1], v[2], NormStats<double>{mean.get(), var.get()}, false, false);
  });
}

TEST(OpsValue, ConvMatchesDirectLoop) {
  const T x = rnd({1, 2, 5, 4}, 30), w = rnd({3, 2, 3, 3}, 31), b = rnd({3}, 32);
  Tape<double> tp;
  const auto& out = tp.value(conv2d(tp, tp.constant(x), tp.constant(w), tp.constant(b)));
  for (int co = 0; co < 3; ++co)
    for (int y = 0; y < 5; ++y)
      for (int xx = 0; xx < 4; ++xx) {
        double s = b[co];
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = y + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) continue;
              s += w[((co * 2 + ci) * 3 + ky) * 3 + kx] * x[(ci * 5 + sy) * 4 + sx];
            }
        EXPECT_NEAR(out[(co * 5 + y) * 4 + xx], s, 1e-12);
      }
}

TEST(OpsValue, BatchNormNormalizesAndTracksStats) {
  const T x = rnd({3, 2, 4, 4}, 33, 0, 5);
  std::vector<double> mean{0, 0}, var{1, 1};
  Tape<double> tp;
  const auto& out = tp.value(batch_norm(tp, tp.constant(x), tp.constant({2}, {1, 1}), tp.constant({2}, {0, 0}),
                                        NormStats<double>{&mean, &var}, true, true));
  for (int c = 0; c < 2; ++c) {
    double m = 0, m2 = 0, xm = 0;
    for (int b = 0; b < 3; ++b)
      for (int i = 0; i < 16; ++i) {
        const std::size_t k = (b * 2 + c) * 16 + i;
        m += out[k];
        m2 += out[k] * out[k];
        xm += x[k];
      }
    EXPECT_NEAR(m / 48, 0.0, 1e-9);
    EXPECT_NEAR(m2 / 48, 1.0, 1e-3);
    EXPECT_NEAR(mean[c], 0.1 * xm / 48, 1e-12);
  }
}

TEST(OpsValue, SoftmaxRowsSumToOneAndAreShiftInvariant) {
  const T x = rnd({50, 7}, 34, -30, 30);
  T shifted = x;
  for (auto& v : shifted.data) v += 1000.0;
  Tape<double> tp;
  const auto& a = tp.value(softmax_last(tp, tp.constant(x)));
  const auto& b = tp.value(softmax_last(tp, tp.constant(shifted)));
  for (int r = 0; r < 50; ++r) {
    double s = 0;
    for (int k = 0; k < 7; ++k) {
      s += a[r * 7 + k];
      EXPECT_NEAR(a[r * 7 + k], b[r * 7 + k], 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(OpsValue, DropoutZeroRateIsIdentityAndKeepsExpectation) {
  Rng rng(1);
  Tape<double> tp;
  const Var x = tp.constant(T({20000}, 1.0));
  EXPECT_EQ(dropout(tp, x, 0.0, rng).id, x.id);
  const auto& y = tp.value(dropout(tp, x, 0.25, rng));
  double s = 0;
  for (double v : y) s += v;
  EXPECT_NEAR(s / 20000, 1.0, 0.03);
  EXPECT_THROW(dropout(tp, x, 1.0, rng), ValidationError);
}

TEST(OpsShape, MismatchesThrow) {
  Tape<double> tp;
  const Var a = tp.constant(T({2, 3}));
  const Var b = tp.constant(T({3, 3}));
  EXPECT_THROW(add(tp, a, b), ShapeError);
  EXPECT_THROW(linear(tp, a, tp.constant(T({2, 2}))), ShapeError);
  EXPECT_THROW(conv2d(tp, tp.constant(T({1, 2, 3, 3})), tp.constant(T({1, 2, 2, 2}))), ShapeError);
  EXPECT_THROW(tp.backward(a), ShapeError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape<double> tp;
  const Var c = tp.constant(T({3}, 2.0));
  const Var v = tp.variable(T({3}, 1.0));
  const Var root = scalar_function<double>(tp, 0.0, {{mul(tp, c, v), {1, 1, 1}}});
  tp.backward(root);
  EXPECT_FALSE(tp.has_grad(c));
  EXPECT_EQ(tp.grad(v), (std::vector<double>{2, 2, 2}));
}

TEST(Tape, FanOutAccumulates) {
  Tape<double> tp;
  const Var v = tp.variable(T({2}, std::vector<double>{1.5, -2.0}));
  const Var sq = mul(tp, v, v);
  const Var root = scalar_function<double>(tp, 0.0, {{add(tp, sq, v), {1, 1}}});
  tp.backward(root);
  EXPECT_DOUBLE_EQ(tp.grad(v)[0], 2 * 1.5 + 1);
  EXPECT_DOUBLE_EQ(tp.grad(v)[1], 2 * -2.0 + 1);
}
