#include <doctest.h>

#include <cmath>

#include "fusiondepth/ops.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace fusiondepth;
using TensorD = Tensor<double>;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_SUITE("ops") {
  TEST_CASE("elementwise values and scalar broadcast") {
    auto a = TensorD::from_data({3}, {1.0, -2.0, 4.0});
    auto b = TensorD::from_data({3}, {2.0, 2.0, -8.0});
    CHECK(testing::values(add(a, b)) == std::vector<double>{3.0, 0.0, -4.0});
    CHECK(testing::values(sub(a, b)) == std::vector<double>{-1.0, -4.0, 12.0});
    CHECK(testing::values(mul(a, b)) == std::vector<double>{2.0, -4.0, -32.0});
    CHECK(testing::values(div(a, b)) == std::vector<double>{0.5, -1.0, -0.5});
    CHECK(testing::values(abs(a)) == std::vector<double>{1.0, 2.0, 4.0});
    CHECK(testing::values(square(a)) == std::vector<double>{1.0, 4.0, 16.0});
    CHECK(testing::values(relu(a)) == std::vector<double>{1.0, 0.0, 4.0});
    CHECK(testing::values(mul(a, TensorD::scalar(3.0))) == std::vector<double>{3.0, -6.0, 12.0});
    CHECK(testing::values(add_scalar(a, 1.0)) == std::vector<double>{2.0, -1.0, 5.0});
    CHECK(sum(a).item() == 3.0);
    CHECK(reduce_mean(a).item() == 1.0);
    CHECK_THROWS_AS(add(a, TensorD::zeros({2})), ShapeMismatch);
  }

  TEST_CASE("masked mean skips masked-out entries and gives them zero gradient") {
    auto a = TensorD::from_data({4}, {1.0, 100.0, 3.0, 1e9}).set_requires_grad(true);
    auto m = TensorD::from_data({4}, {1.0, 0.0, 1.0, 0.0});
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto r = reduce_mean(a, m);
    CHECK(r.item() == 2.0);
    backward(r, tape);
    CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) == std::vector<double>{0.5, 0.0, 0.5, 0.0});
    CHECK_THROWS_AS(reduce_mean(a, TensorD::zeros({4})), EmptyMask);
    CHECK_THROWS_AS(reduce_mean(a, TensorD::full({4}, 0.5)), ShapeMismatch);
  }

  TEST_CASE("concat, slice, pad and crop move values to the right places") {
    auto x = TensorD::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto y = TensorD::from_data({1, 1, 2, 2}, {5, 6, 7, 8});
    auto c = concat_channels<double>({x, y});
    CHECK(c.shape() == Shape{1, 2, 2, 2});
    CHECK(testing::values(slice_channels(c, 1, 1)) == testing::values(y));
    auto p = pad_bottom_right(x, 1, 2);
    CHECK(p.shape() == Shape{1, 1, 3, 4});
    CHECK(testing::values(p) == std::vector<double>{1, 2, 0, 0, 3, 4, 0, 0, 0, 0, 0, 0});
    CHECK(testing::values(crop_top_left(p, 2, 2)) == testing::values(x));
    CHECK_THROWS_AS(slice_channels(c, 1, 2), ShapeMismatch);
    CHECK_THROWS_AS(crop_top_left(x, 3, 1), InvalidShape);
  }

  TEST_CASE("conv2d matches direct convolution") {
    fusiondepth::Rng rng(11);
    struct Case {
      int n, c, h, w, o, k, stride, pad;
    };
    for (auto cs : {Case{2, 3, 7, 6, 4, 3, 1, 1}, Case{1, 2, 8, 9, 3, 3, 2, 1}, Case{2, 4, 5, 5, 2, 1, 1, 0},
                    Case{1, 1, 6, 6, 2, 2, 2, 0}}) {
      auto x = testing::random_tensor(rng, {cs.n, cs.c, cs.h, cs.w});
      auto w = testing::random_tensor(rng, {cs.o, cs.c, cs.k, cs.k});
      auto b = testing::random_tensor(rng, {cs.o});
      auto y = conv2d(x, w, b, cs.stride, cs.pad);
      oracle::Dims od{};
      auto ref = oracle::conv2d(testing::values(x), {cs.n, cs.c, cs.h, cs.w}, testing::values(w), cs.o, cs.k,
                                testing::values(b), cs.stride, cs.pad, &od);
      CHECK(y.shape() == Shape{od.n, od.c, od.h, od.w});
      CHECK(max_abs_diff(testing::values(y), ref) < 1e-12);
    }
  }

  TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
    fusiondepth::Rng rng(12);
    struct Case {
      int n, c_small, c_big, h_big, w_big, k, stride, pad;
    };
    // conv2d maps the big image to the small one; the transpose maps back.
    for (auto cs : {Case{1, 3, 2, 6, 8, 2, 2, 0}, Case{2, 2, 3, 5, 7, 3, 2, 1}, Case{1, 2, 2, 5, 5, 3, 1, 1}}) {
      auto w = testing::random_tensor(rng, {cs.c_small, cs.c_big, cs.k, cs.k});
      oracle::Dims small{};
      const oracle::Dims big{cs.n, cs.c_big, cs.h_big, cs.w_big};
      const auto a = oracle::conv2d_matrix(big, testing::values(w), cs.c_small, cs.k, cs.stride, cs.pad, &small);
      auto y = testing::random_tensor(rng, {small.n, small.c, small.h, small.w});
      auto out = conv_transpose2d(y, w, TensorD{}, cs.stride, cs.pad);
      REQUIRE(out.shape() == Shape{big.n, big.c, big.h, big.w});
      CHECK(max_abs_diff(testing::values(out), oracle::transpose_apply(a, testing::values(y))) < 1e-12);
    }
  }

  TEST_CASE("conv_transpose2d 2x2 stride 2 doubles the size and adds bias") {
    auto x = TensorD::from_data({1, 1, 1, 1}, {2.0});
    auto w = TensorD::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    auto b = TensorD::from_data({1}, {0.5});
    auto y = conv_transpose2d(x, w, b, 2, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(testing::values(y) == std::vector<double>{2.5, 4.5, 6.5, 8.5});
  }

  TEST_CASE("batch norm in training mode normalizes and updates running stats") {
    fusiondepth::Rng rng(13);
    auto x = testing::random_tensor(rng, {4, 2, 3, 3}, 2.0, 6.0);
    auto gamma = TensorD::full({2}, 1.0), beta = TensorD::zeros({2});
    auto rm = TensorD::zeros({2}), rv = TensorD::full({2}, 1.0);
    auto y = batch_norm(x, gamma, beta, rm, rv, BatchNormOptions{true, 0.1, 1e-5});
    const int per = 4 * 9;
    for (int c = 0; c < 2; ++c) {
      double mean = 0.0, sq = 0.0, xm = 0.0, xsq = 0.0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 9; ++i) {
          const auto idx = static_cast<std::size_t>((n * 2 + c) * 9 + i);
          mean += y.data()[idx];
          sq += y.data()[idx] * y.data()[idx];
          xm += x.data()[idx];
          xsq += x.data()[idx] * x.data()[idx];
        }
      mean /= per;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(sq / per == doctest::Approx(1.0).epsilon(1e-4));
      xm /= per;
      const double unbiased = (xsq - per * xm * xm) / (per - 1);
      CHECK(rm.data()[static_cast<std::size_t>(c)] == doctest::Approx(0.1 * xm));
      CHECK(rv.data()[static_cast<std::size_t>(c)] == doctest::Approx(0.9 + 0.1 * unbiased));
    }
  }

  TEST_CASE("batch norm in eval mode uses the running stats and leaves them alone") {
    auto x = TensorD::from_data({1, 1, 1, 2}, {3.0, 5.0});
    auto gamma = TensorD::full({1}, 2.0), beta = TensorD::full({1}, 1.0);
    auto rm = TensorD::full({1}, 1.0), rv = TensorD::full({1}, 4.0);
    auto y = batch_norm(x, gamma, beta, rm, rv, BatchNormOptions{false, 0.1, 0.0});
    CHECK(testing::values(y) == std::vector<double>{3.0, 5.0});
    CHECK(rm.data()[0] == 1.0);
    CHECK(rv.data()[0] == 4.0);
  }

  TEST_CASE("batch norm rejects a single value per channel in training") {
    auto x = TensorD::zeros({1, 2, 1, 1});
    auto g = TensorD::full({2}, 1.0), b = TensorD::zeros({2}), rm = TensorD::zeros({2}), rv = TensorD::full({2}, 1.0);
    CHECK_THROWS_AS(batch_norm(x, g, b, rm, rv, BatchNormOptions{true, 0.1, 1e-5}), DegenerateBatch);
  }

  TEST_CASE("softmax_pair weights sum to one and survive large logits") {
    auto x = TensorD::from_data({4}, {0.0, 700.0, -700.0, 3.0});
    auto y = TensorD::from_data({4}, {0.0, -700.0, 700.0, 1.0});
    auto [wx, wy] = softmax_pair(x, y);
    for (int i = 0; i < 4; ++i) CHECK(wx.data()[i] + wy.data()[i] == doctest::Approx(1.0));
    CHECK(wx.data()[0] == 0.5);
    CHECK(wx.data()[1] == doctest::Approx(1.0));
    CHECK(wy.data()[2] == doctest::Approx(1.0));
    CHECK(wx.data()[3] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))));
  }

  TEST_CASE("confidence_fuse weights the two depths by softmax of the logits") {
    auto dg = TensorD::from_data({3}, {10.0, 10.0, 4.0});
    auto dl = TensorD::from_data({3}, {20.0, 20.0, 4.0});
    auto cx = TensorD::from_data({3}, {0.0, std::log(3.0), 5.0});
    auto cy = TensorD::from_data({3}, {0.0, 0.0, -5.0});
    auto out = confidence_fuse(dg, dl, cx, cy);
    CHECK(out.data()[0] == doctest::Approx(15.0));
    CHECK(out.data()[1] == doctest::Approx(12.5));
    CHECK(out.data()[2] == 4.0);
  }
}
