#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "bnas/optim.hpp"

using namespace bnas;

TEST_CASE("cosine schedule") {
  SECTION("pinned endpoints and midpoint") {
    const LrSchedule s{0.2f, 0.f, 50};
    REQUIRE(cosine_lr(s, 0) == Catch::Approx(0.2).margin(1e-9));
    REQUIRE(cosine_lr(s, 25) == Catch::Approx(0.1).margin(1e-7));
    REQUIRE(cosine_lr(s, 50) == Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("floor shifts the whole curve") {
    const LrSchedule s{0.1f, 0.02f, 10};
    REQUIRE(cosine_lr(s, 0) == Catch::Approx(0.1).margin(1e-9));
    REQUIRE(cosine_lr(s, 10) == Catch::Approx(0.02).margin(1e-9));
    REQUIRE(cosine_lr(s, 5) == Catch::Approx(0.06).margin(1e-7));
  }
  SECTION("monotone nonincreasing over the run") {
    const LrSchedule s{0.3f, 1e-3f, 37};
    float prev = cosine_lr(s, 0);
    for (int e = 1; e <= 37; ++e) {
      const float cur = cosine_lr(s, e);
      REQUIRE(cur <= prev + 1e-9f);
      prev = cur;
    }
  }
  SECTION("range checks") {
    const LrSchedule s{0.1f, 0.f, 5};
    REQUIRE_THROWS_AS(cosine_lr(s, -1), value_error);
    REQUIRE_THROWS_AS(cosine_lr(s, 6), value_error);
    REQUIRE_THROWS_AS(cosine_lr(LrSchedule{0.1f, 0.f, 0}, 0), value_error);
  }
}

TEST_CASE("sgd momentum") {
  SECTION("plain step: p=5, g=2, lr=1 lands on 3") {
    Parameter p(Shape{1, 1, 1, 1}, std::vector<float>{5.f});
    p.grad[0] = 2.f;
    SgdMomentum opt({&p}, 1.f, 0.f, 0.f);
    opt.step();
    REQUIRE(p.value.values()[0] == 3.f);
  }
  SECTION("momentum accumulates velocity") {
    Parameter p(Shape{1, 1, 1, 1}, std::vector<float>{0.f});
    SgdMomentum opt({&p}, 0.1f, 0.9f, 0.f);
    p.grad[0] = 1.f;
    opt.step();  // v=1, p=-0.1
    REQUIRE(p.value.values()[0] == Catch::Approx(-0.1).margin(1e-7));
    p.grad[0] = 1.f;
    opt.step();  // v=1.9, p=-0.29
    REQUIRE(p.value.values()[0] == Catch::Approx(-0.29).margin(1e-7));
  }
  SECTION("weight decay pulls toward zero with zero gradient") {
    Parameter p(Shape{1, 1, 1, 1}, std::vector<float>{2.f});
    SgdMomentum opt({&p}, 0.5f, 0.f, 0.1f);
    opt.step();  // g_eff = 0.2, p = 2 - 0.1 = 1.9
    REQUIRE(p.value.values()[0] == Catch::Approx(1.9).margin(1e-7));
  }
  SECTION("zero learning rate freezes parameters") {
    Parameter p(Shape{1, 2, 1, 1}, std::vector<float>{1.f, -1.f});
    p.grad = {3.f, -4.f};
    SgdMomentum opt({&p}, 0.f, 0.9f, 1e-2f);
    opt.step();
    REQUIRE(p.value.values() == std::vector<float>{1.f, -1.f});
  }
}

TEST_CASE("adam matches a double-precision reference recursion") {
  std::mt19937 rng(42);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  const float lr = 0.01f, b1 = 0.5f, b2 = 0.999f, eps = 1e-8f, wd = 1e-3f;

  Parameter p(Shape{1, 3, 1, 1}, std::vector<float>{0.3f, -0.7f, 1.1f});
  Adam opt({&p}, lr, b1, b2, eps, wd);

  std::vector<double> ref = {0.3, -0.7, 1.1};
  std::vector<double> m(3, 0.), v(3, 0.);
  for (int t = 1; t <= 12; ++t) {
    std::vector<float> g(3);
    for (float& x : g) x = d(rng);
    p.grad.assign(g.begin(), g.end());
    opt.step();
    for (int i = 0; i < 3; ++i) {
      const double ge = static_cast<double>(g[static_cast<size_t>(i)]) + wd * ref[static_cast<size_t>(i)];
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (1 - static_cast<double>(b1)) * ge;
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] + (1 - static_cast<double>(b2)) * ge * ge;
      const double mhat = m[static_cast<size_t>(i)] / (1 - std::pow(static_cast<double>(b1), t));
      const double vhat = v[static_cast<size_t>(i)] / (1 - std::pow(static_cast<double>(b2), t));
      ref[static_cast<size_t>(i)] -= lr * mhat / (std::sqrt(vhat) + static_cast<double>(eps));
    }
    for (int i = 0; i < 3; ++i)
      REQUIRE(p.value.values()[static_cast<size_t>(i)] ==
              Catch::Approx(ref[static_cast<size_t>(i)]).margin(1e-5));
  }
  REQUIRE(opt.steps() == 12);
}

TEST_CASE("adam first step moves by roughly lr against the gradient sign") {
  Parameter p(Shape{1, 2, 1, 1}, std::vector<float>{0.f, 0.f});
  p.grad = {0.5f, -2.f};
  Adam opt({&p}, 0.01f);
  opt.step();
  // bias-corrected first step is lr * g/|g| up to eps
  REQUIRE(p.value.values()[0] == Catch::Approx(-0.01).margin(1e-5));
  REQUIRE(p.value.values()[1] == Catch::Approx(0.01).margin(1e-5));
}
