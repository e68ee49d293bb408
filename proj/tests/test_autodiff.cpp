#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "bnas/ops.hpp"
#include "test_util.hpp"

using namespace bnas;
using testutil::check_gradient;
using testutil::distinct_tensor;
using testutil::rand_tensor;

namespace {
Shape rand_image_shape(std::mt19937& rng, int64_t max_c = 4, int64_t max_hw = 5) {
  std::uniform_int_distribution<int64_t> dn(1, 2), dc(1, max_c), ds(2, max_hw);
  return Shape{dn(rng), dc(rng), ds(rng), ds(rng)};
}
}  // namespace

TEST_CASE("tape basics") {
  SECTION("shared parameter accumulates over both paths") {
    Parameter p(Shape{1, 1, 1, 1}, std::vector<float>{3.f});
    Tape t;
    Tensor a = t.param(p);
    Tensor b = t.param(p);  // same leaf node
    REQUIRE(a.node() == b.node());
    Tensor y = add(t, a, b);
    t.backward(y);
    REQUIRE(p.grad[0] == 2.f);
  }
  SECTION("backward requires an attached scalar") {
    Tape t;
    Tensor x(Shape{1, 2, 1, 1}, std::vector<float>{1.f, 2.f});
    REQUIRE_THROWS_AS(t.backward(x), value_error);
    Tensor w = t.watch(x, nullptr);
    REQUIRE_THROWS_AS(t.backward(w), value_error);  // not scalar
  }
  SECTION("constants contribute no gradient and no nodes") {
    Tape t;
    Tensor x(Shape{1, 2, 1, 1}, std::vector<float>{1.f, 2.f});
    std::vector<float> gx(2, 0.f);
    Tensor xt = t.watch(x, &gx);
    Tensor c(Shape{1, 2, 1, 1}, std::vector<float>{5.f, 5.f});  // off-tape
    Tensor y = sum_all(t, add(t, xt, c));
    t.backward(y);
    REQUIRE(gx[0] == 1.f);
    REQUIRE(gx[1] == 1.f);
  }
}

TEST_CASE("conv2d known values") {
  SECTION("all-ones 3x3 same conv counts window overlap") {
    Tensor x(Shape{1, 1, 4, 4}, 1.f);
    Tensor w(Shape{1, 1, 3, 3}, 1.f);
    Tape t;
    Tensor y = conv2d(t, t.watch(x, nullptr), t.watch(w, nullptr), 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    REQUIRE(y.at(0, 0, 0, 0) == 4.f);   // corner: 2x2 window inside
    REQUIRE(y.at(0, 0, 0, 1) == 6.f);   // edge: 2x3
    REQUIRE(y.at(0, 0, 1, 1) == 9.f);   // interior: full 3x3
  }
  SECTION("mac counter: 3x3 conv 4->4 on 8x8 is 9216") {
    Tensor x(Shape{1, 4, 8, 8}, 1.f);
    Tensor w(Shape{4, 4, 3, 3}, 1.f);
    Tape t;
    conv2d(t, t.watch(x, nullptr), t.watch(w, nullptr), 1, 1);
    REQUIRE(t.macs() == 9216);
  }
  SECTION("stride-2 1x1 halves the grid") {
    Tensor x(Shape{1, 2, 4, 4}, 1.f);
    Tensor w(Shape{3, 2, 1, 1}, 0.5f);
    Tape t;
    Tensor y = conv2d(t, t.watch(x, nullptr), t.watch(w, nullptr), 2, 0);
    REQUIRE(y.shape() == Shape{1, 3, 2, 2});
    REQUIRE(y.at(0, 0, 0, 0) == 1.f);  // 2 channels * 0.5
  }
  SECTION("invalid geometry throws") {
    Tape t;
    Tensor x(Shape{1, 3, 4, 4});
    Tensor w(Shape{2, 2, 3, 3});  // in-channel mismatch
    REQUIRE_THROWS_AS(conv2d(t, t.watch(x, nullptr), t.watch(w, nullptr), 1, 1), shape_error);
    Tensor big(Shape{1, 3, 9, 9});  // kernel larger than padded input
    REQUIRE_THROWS_AS(conv2d(t, t.watch(Tensor(Shape{1, 1, 2, 2}), nullptr),
                             t.watch(Tensor(Shape{1, 1, 5, 5}), nullptr), 1, 0),
                      shape_error);
  }
}

TEST_CASE("conv2d gradients") {
  std::mt19937 rng(101);
  struct Cfg {
    int stride, padding, dilation, groups;
    int64_t kh, kw;
  };
  const Cfg cfgs[] = {
      {1, 0, 1, 1, 1, 1}, {1, 1, 1, 1, 3, 3}, {2, 1, 1, 1, 3, 3}, {1, 2, 2, 1, 3, 3}, {2, 0, 1, 1, 1, 1},
  };
  for (const Cfg& c : cfgs) {
    for (int rep = 0; rep < 5; ++rep) {
      Shape xs = rand_image_shape(rng);
      if (xs.h < c.kh) xs.h = c.kh;
      if (xs.w < c.kw) xs.w = c.kw;
      std::uniform_int_distribution<int64_t> dout(1, 4);
      const Shape ws{dout(rng) * c.groups, xs.c / c.groups, c.kh, c.kw};
      if (xs.c % c.groups != 0) continue;
      Tensor x = rand_tensor(xs, rng);
      Tensor w = rand_tensor(ws, rng, -0.5f, 0.5f);  // tame output magnitudes for FD accuracy
      INFO("x " << to_string(xs) << " w " << to_string(ws) << " s" << c.stride << " p" << c.padding << " d"
                << c.dilation);
      check_gradient([&](Tape& t, const Tensor& xi) { return conv2d(t, xi, t.watch(w, nullptr), c.stride, c.padding,
                                                                    c.dilation, c.groups); },
                     x, rng);
      check_gradient([&](Tape& t, const Tensor& wi) { return conv2d(t, t.watch(x, nullptr), wi, c.stride, c.padding,
                                                                    c.dilation, c.groups); },
                     w, rng);
    }
  }
  // grouped conv gradient
  for (int rep = 0; rep < 5; ++rep) {
    Tensor x = rand_tensor(Shape{2, 4, 4, 4}, rng);
    Tensor w = rand_tensor(Shape{4, 2, 3, 3}, rng, -0.5f, 0.5f);
    check_gradient([&](Tape& t, const Tensor& xi) { return conv2d(t, xi, t.watch(w, nullptr), 1, 1, 1, 2); }, x, rng);
    check_gradient([&](Tape& t, const Tensor& wi) { return conv2d(t, t.watch(x, nullptr), wi, 1, 1, 1, 2); }, w, rng);
  }
}

TEST_CASE("pooling") {
  std::mt19937 rng(202);
  SECTION("max pool known values") {
    Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{1.f, 2.f, 3.f, 4.f});
    Tape t;
    Tensor y = pool2d(t, t.watch(x, nullptr), PoolKind::kMax, 2, 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    REQUIRE(y.values()[0] == 4.f);
  }
  SECTION("avg pool divides by valid cell count at the border") {
    Tensor x(Shape{1, 1, 2, 2}, 1.f);
    Tape t;
    Tensor y = pool2d(t, t.watch(x, nullptr), PoolKind::kAvg, 3, 1, 1);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.values()) REQUIRE(v == 1.f);  // all-ones stay ones
  }
  SECTION("gradients") {
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = distinct_tensor(rand_image_shape(rng, 3, 5), rng);
      for (PoolKind kind : {PoolKind::kMax, PoolKind::kAvg}) {
        check_gradient([&](Tape& t, const Tensor& xi) { return pool2d(t, xi, kind, 3, 1, 1); }, x, rng);
        if (x.shape().h % 2 == 0 && x.shape().w % 2 == 0)
          check_gradient([&](Tape& t, const Tensor& xi) { return pool2d(t, xi, kind, 2, 2, 0); }, x, rng);
      }
    }
  }
}

TEST_CASE("relu") {
  std::mt19937 rng(303);
  Tape t;
  Tensor x(Shape{1, 1, 2, 2}, std::vector<float>{-1.f, 0.f, 0.5f, 2.f});
  Tensor y = relu(t, t.watch(x, nullptr));
  REQUIRE(y.values() == std::vector<float>{0.f, 0.f, 0.5f, 2.f});
  for (int rep = 0; rep < 20; ++rep) {
    Tensor xr = distinct_tensor(rand_image_shape(rng), rng);
    check_gradient([](Tape& tt, const Tensor& xi) { return relu(tt, xi); }, xr, rng);
  }
}

TEST_CASE("batch norm") {
  std::mt19937 rng(404);
  SECTION("two-point batch normalizes to +-1 and tracks running stats") {
    Tensor x(Shape{2, 1, 1, 1}, std::vector<float>{1.f, 3.f});
    Tensor gamma(Shape{1, 1, 1, 1}, std::vector<float>{1.f});
    Tensor beta(Shape{1, 1, 1, 1}, std::vector<float>{0.f});
    std::vector<float> rm(1, 0.f), rv(1, 1.f);
    Tape t;
    Tensor y = batch_norm(t, t.watch(x, nullptr), t.watch(gamma, nullptr), t.watch(beta, nullptr), rm, rv, true);
    REQUIRE(std::abs(y.values()[0] + 1.f) < 1e-4f);
    REQUIRE(std::abs(y.values()[1] - 1.f) < 1e-4f);
    REQUIRE(std::abs(rm[0] - 0.2f) < 1e-6f);  // 0.9 * 0 + 0.1 * mean(2)
    REQUIRE(std::abs(rv[0] - 1.0f) < 1e-6f);  // 0.9 * 1 + 0.1 * biased var(1)
  }
  SECTION("eval mode uses running statistics") {
    Tensor x(Shape{1, 1, 1, 1}, std::vector<float>{5.f});
    Tensor gamma(Shape{1, 1, 1, 1}, std::vector<float>{2.f});
    Tensor beta(Shape{1, 1, 1, 1}, std::vector<float>{1.f});
    std::vector<float> rm(1, 3.f), rv(1, 4.f);
    Tape t;
    Tensor y = batch_norm(t, t.watch(x, nullptr), t.watch(gamma, nullptr), t.watch(beta, nullptr), rm, rv, false);
    // (5-3)/sqrt(4+eps) * 2 + 1 ~= 3
    REQUIRE(std::abs(y.values()[0] - 3.f) < 1e-4f);
  }
  SECTION("gradients in training and eval mode") {
    for (int rep = 0; rep < 10; ++rep) {
      Shape s = rand_image_shape(rng, 3, 4);
      if (s.n * s.h * s.w < 2) s.n = 2;  // batch variance needs spread
      Tensor x = distinct_tensor(s, rng);
      Tensor gamma = rand_tensor(Shape{1, s.c, 1, 1}, rng, 0.5f, 1.5f);
      Tensor beta = rand_tensor(Shape{1, s.c, 1, 1}, rng, -0.5f, 0.5f);
      std::vector<float> rm(static_cast<size_t>(s.c), 0.1f), rv(static_cast<size_t>(s.c), 0.9f);
      for (bool training : {true, false}) {
        auto wrap = [&](auto op) {
          // running stats mutate across FD evals; training output ignores them
          check_gradient(op, x, rng);
        };
        wrap([&](Tape& t, const Tensor& xi) {
          std::vector<float> m = rm, v = rv;
          return batch_norm(t, xi, t.watch(gamma, nullptr), t.watch(beta, nullptr), m, v, training);
        });
        check_gradient(
            [&](Tape& t, const Tensor& gi) {
              std::vector<float> m = rm, v = rv;
              return batch_norm(t, t.watch(x, nullptr), gi, t.watch(beta, nullptr), m, v, training);
            },
            gamma, rng);
        check_gradient(
            [&](Tape& t, const Tensor& bi) {
              std::vector<float> m = rm, v = rv;
              return batch_norm(t, t.watch(x, nullptr), t.watch(gamma, nullptr), bi, m, v, training);
            },
            beta, rng);
      }
    }
  }
}

TEST_CASE("linear") {
  std::mt19937 rng(505);
  SECTION("known values") {
    Tensor x(Shape{1, 3, 1, 1}, std::vector<float>{1.f, 2.f, 3.f});
    Tensor w(Shape{2, 3, 1, 1}, std::vector<float>{1.f, 0.f, 0.f, 0.f, 1.f, 0.f});
    Tensor b(Shape{1, 2, 1, 1}, std::vector<float>{10.f, 20.f});
    Tape t;
    Tensor y = linear(t, t.watch(x, nullptr), t.watch(w, nullptr), nullptr);
    REQUIRE(y.values() == std::vector<float>{1.f, 2.f});
    Tensor wb = t.watch(b, nullptr);
    Tensor y2 = linear(t, t.watch(x, nullptr), t.watch(w, nullptr), &wb);
    REQUIRE(y2.values() == std::vector<float>{11.f, 22.f});
  }
  SECTION("gradients") {
    for (int rep = 0; rep < 20; ++rep) {
      std::uniform_int_distribution<int64_t> dn(1, 3), din(1, 6), dout(1, 4);
      const int64_t n = dn(rng), in = din(rng), out = dout(rng);
      Tensor x = rand_tensor(Shape{n, in, 1, 1}, rng);
      Tensor w = rand_tensor(Shape{out, in, 1, 1}, rng, -0.5f, 0.5f);
      Tensor b = rand_tensor(Shape{1, out, 1, 1}, rng);
      check_gradient(
          [&](Tape& t, const Tensor& xi) {
            Tensor bt = t.watch(b, nullptr);
            return linear(t, xi, t.watch(w, nullptr), &bt);
          },
          x, rng);
      check_gradient(
          [&](Tape& t, const Tensor& wi) {
            Tensor bt = t.watch(b, nullptr);
            return linear(t, t.watch(x, nullptr), wi, &bt);
          },
          w, rng);
      check_gradient(
          [&](Tape& t, const Tensor& bi) {
            Tensor bt = bi;
            return linear(t, t.watch(x, nullptr), t.watch(w, nullptr), &bt);
          },
          b, rng);
    }
  }
}

TEST_CASE("shape ops") {
  std::mt19937 rng(606);
  SECTION("concat splits gradient by channel block") {
    Tensor a = rand_tensor(Shape{1, 2, 2, 2}, rng), b = rand_tensor(Shape{1, 3, 2, 2}, rng);
    Tape t;
    Tensor y = concat_channels(t, {t.watch(a, nullptr), t.watch(b, nullptr)});
    REQUIRE(y.shape() == Shape{1, 5, 2, 2});
    for (int rep = 0; rep < 20; ++rep) {
      check_gradient(
          [&](Tape& tt, const Tensor& ai) { return concat_channels(tt, {ai, tt.watch(b, nullptr)}); }, a, rng);
      check_gradient(
          [&](Tape& tt, const Tensor& bi) { return concat_channels(tt, {tt.watch(a, nullptr), bi}); }, b, rng);
    }
  }
  SECTION("slice and crop") {
    for (int rep = 0; rep < 20; ++rep) {
      Tensor x = rand_tensor(Shape{2, 4, 3, 3}, rng);
      check_gradient([](Tape& t, const Tensor& xi) { return slice_channels(t, xi, 1, 3); }, x, rng);
      check_gradient([](Tape& t, const Tensor& xi) { return crop_spatial(t, xi, 1, 1); }, x, rng);
    }
  }
  SECTION("global average pool") {
    Tensor x(Shape{1, 2, 2, 2}, std::vector<float>{1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f, 8.f});
    Tape t;
    Tensor y = global_avg_pool(t, t.watch(x, nullptr));
    REQUIRE(y.shape() == Shape{1, 2, 1, 1});
    REQUIRE(y.values()[0] == 2.5f);
    REQUIRE(y.values()[1] == 6.5f);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor xr = rand_tensor(rand_image_shape(rng), rng);
      check_gradient([](Tape& tt, const Tensor& xi) { return global_avg_pool(tt, xi); }, xr, rng);
    }
  }
}

TEST_CASE("softmax and friends") {
  std::mt19937 rng(707);
  SECTION("known values and shift stability") {
    Tape t;
    Tensor x(Shape{1, 2, 1, 1}, std::vector<float>{0.f, 0.f});
    Tensor y = softmax_all(t, t.watch(x, nullptr));
    REQUIRE(std::abs(y.values()[0] - 0.5f) < 1e-6f);
    Tensor big(Shape{1, 2, 1, 1}, std::vector<float>{1000.f, 1000.f + std::log(3.f)});
    Tensor yb = softmax_all(t, t.watch(big, nullptr));
    REQUIRE(std::abs(yb.values()[0] - 0.25f) < 1e-5f);
    REQUIRE(std::abs(yb.values()[1] - 0.75f) < 1e-5f);
  }
  SECTION("gradients") {
    for (int rep = 0; rep < 20; ++rep) {
      std::uniform_int_distribution<int64_t> dc(2, 8);
      Tensor x = rand_tensor(Shape{1, dc(rng), 1, 1}, rng, -2.f, 2.f);
      check_gradient([](Tape& t, const Tensor& xi) { return softmax_all(t, xi); }, x, rng);
    }
  }
  SECTION("weighted sum and scale_by_element") {
    for (int rep = 0; rep < 20; ++rep) {
      Tensor a = rand_tensor(Shape{1, 2, 2, 2}, rng), b = rand_tensor(Shape{1, 2, 2, 2}, rng);
      Tensor w = rand_tensor(Shape{1, 2, 1, 1}, rng);
      check_gradient(
          [&](Tape& t, const Tensor& wi) { return weighted_sum(t, {t.watch(a, nullptr), t.watch(b, nullptr)}, wi); },
          w, rng);
      check_gradient(
          [&](Tape& t, const Tensor& ai) { return weighted_sum(t, {ai, t.watch(b, nullptr)}, t.watch(w, nullptr)); },
          a, rng);
      check_gradient([&](Tape& t, const Tensor& xi) { return scale_by_element(t, xi, t.watch(w, nullptr), 1); }, a,
                     rng);
      check_gradient([&](Tape& t, const Tensor& wi) { return scale_by_element(t, t.watch(a, nullptr), wi, 0); }, w,
                     rng);
    }
  }
  SECTION("elementwise and reduction primitives") {
    for (int rep = 0; rep < 20; ++rep) {
      Tensor a = rand_tensor(Shape{2, 3, 2, 2}, rng), b = rand_tensor(Shape{2, 3, 2, 2}, rng);
      check_gradient([&](Tape& t, const Tensor& ai) { return add(t, ai, t.watch(b, nullptr)); }, a, rng);
      check_gradient([](Tape& t, const Tensor& xi) { return scale_const(t, xi, -1.7f); }, a, rng);
      check_gradient([](Tape& t, const Tensor& xi) { return sum_all(t, xi); }, a, rng);
    }
  }
}

TEST_CASE("softmax cross entropy") {
  SECTION("confident correct logit gives softplus(-margin)") {
    Tape t;
    Tensor logits(Shape{1, 2, 1, 1}, std::vector<float>{10.f, 0.f});
    Tensor loss = softmax_cross_entropy(t, t.watch(logits, nullptr), {0});
    // ln(1 + e^-10)
    REQUIRE(std::abs(loss.values()[0] - 4.5398899e-5f) < 1e-9f);
  }
  SECTION("uniform logits give ln(C)") {
    Tape t;
    Tensor logits(Shape{2, 5, 1, 1}, 0.3f);
    Tensor loss = softmax_cross_entropy(t, t.watch(logits, nullptr), {1, 4});
    REQUIRE(std::abs(loss.values()[0] - std::log(5.f)) < 1e-6f);
  }
  SECTION("label range is checked") {
    Tape t;
    Tensor logits(Shape{1, 3, 1, 1}, 0.f);
    REQUIRE_THROWS_AS(softmax_cross_entropy(t, t.watch(logits, nullptr), {3}), value_error);
    REQUIRE_THROWS_AS(softmax_cross_entropy(t, t.watch(logits, nullptr), {-1}), value_error);
  }
  SECTION("gradients") {
    std::mt19937 rng(808);
    for (int rep = 0; rep < 20; ++rep) {
      std::uniform_int_distribution<int64_t> dn(1, 4), dc(2, 6);
      const int64_t n = dn(rng), c = dc(rng);
      Tensor logits = rand_tensor(Shape{n, c, 1, 1}, rng, -2.f, 2.f);
      std::vector<int> labels;
      std::uniform_int_distribution<int> dl(0, static_cast<int>(c) - 1);
      for (int64_t i = 0; i < n; ++i) labels.push_back(dl(rng));
      check_gradient([&](Tape& t, const Tensor& li) { return softmax_cross_entropy(t, li, labels); }, logits, rng);
    }
  }
}
