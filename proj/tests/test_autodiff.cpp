#include "doctest.h"

#include "mdreg/autodiff.hpp"
#include "mdreg/field_ops.hpp"
#include "mdreg/objective.hpp"
#include "mdreg/transform.hpp"

#include "support.hpp"

#include <cmath>
#include <random>

using namespace mdreg;
using namespace mdreg::ad;

namespace {

using namespace mdreg::testing;

constexpr double kTol = 1e-4;

} // namespace

TEST_CASE("square gradient")
{
    Parameter x(Field(Shape{4, 4}, 1, 3.0));
    Tape t;
    Var v = t.watch(x);
    t.backward(sum(mul(v, v)));
    for (double g : x.grad.raw()) {
        CHECK(g == 6.0);
    }
}

TEST_CASE("forward values match field_core")
{
    Tape t;
    Field a = random_field(Shape{5, 6}, 1, 1);
    Field b = random_field(Shape{5, 6}, 1, 2);
    Var va = t.constant(a), vb = t.constant(b);
    Field s = add(va, vb).value();
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(s[i] == a[i] + b[i]);
    }
    Field d = interior_disp(a.shape(), 3);
    CHECK(warp(va, t.constant(d)).value() == warp(a, VectorField(d)));
    CHECK(avg_pool_down(va).value() == avg_pool_down(a));
    const std::size_t before = t.size();
    neg(va);
    CHECK(t.size() == before + 1);
}

TEST_CASE("backward errors and bookkeeping")
{
    Parameter x(random_field(Shape{3, 3}, 1, 4));
    Parameter unused(random_field(Shape{3}, 1, 5));
    SUBCASE("non-scalar loss")
    {
        Tape t;
        Var v = t.watch(x);
        CHECK_THROWS_AS(t.backward(v), FieldError);
    }
    SUBCASE("unused parameter gets zero gradient")
    {
        Tape t;
        Var v = t.watch(x);
        t.watch(unused);
        t.backward(sum(v));
        for (double g : unused.grad.raw()) {
            CHECK(g == 0.0);
        }
    }
    SUBCASE("fan-out doubles the gradient")
    {
        Tape t1;
        Var v1 = t1.watch(x);
        t1.backward(readout(t1, leaky_relu(v1, 0.2)));
        const Field once = x.grad;
        x.zero_grad();
        Tape t2;
        Var v2 = t2.watch(x);
        t2.backward(add(readout(t2, leaky_relu(v2, 0.2)), readout(t2, leaky_relu(v2, 0.2))));
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(x.grad[i] == 2.0 * once[i]);
        }
    }
    SUBCASE("no-grad tape records no adjoints")
    {
        Tape t(false);
        Var v = t.watch(x);
        Var y = readout(t, scale(v, 2.0));
        CHECK(t.adjoint_count() == 0);
        CHECK(std::isfinite(y.value()[0]));
    }
}

TEST_CASE("warp displacement gradient at zero displacement is the central difference")
{
    const Shape s{7, 8};
    Field img = random_field(s, 1, 6);
    Parameter d(Field(s, 2));
    Tape t;
    Var out = warp(t.constant(img), t.watch(d));
    Field sel(s, 1);
    const std::size_t v = s.index(0, 3, 4);
    sel[v] = 1.0;
    t.backward(sum(mul(out, t.constant(sel))));
    CHECK(d.grad.at(0, v) ==
          doctest::Approx(0.5 * (img[s.index(0, 4, 4)] - img[s.index(0, 2, 4)])));
    CHECK(d.grad.at(1, v) ==
          doctest::Approx(0.5 * (img[s.index(0, 3, 5)] - img[s.index(0, 3, 3)])));
    CHECK(grad_check([&](Tape& tp, Var x) { return interior_readout(tp, warp(tp.constant(img), x)); },
                     d) < kTol);
}

TEST_CASE("ncc(a, a) has zero gradient")
{
    Parameter a(random_field(Shape{6, 6, 6}, 1, 7));
    Tape t;
    Var va = t.watch(a);
    t.backward(ncc(va, va));
    for (double g : a.grad.raw()) {
        CHECK(std::abs(g) < 1e-8);
    }
}

TEST_CASE("linear functions are exact")
{
    Parameter p(random_field(Shape{5, 5}, 2, 8));
    const double err = grad_check(
        [](Tape& t, Var x) { return readout(t, scale(avg_pool_down(add(x, x)), 0.7)); }, p);
    CHECK(err < 1e-9);
}

TEST_CASE("grad_check rejects non-finite forward values")
{
    Parameter p(random_field(Shape{4}, 1, 9));
    CHECK_THROWS_AS(grad_check([](Tape& t, Var x) { return scale(sum(x), 1e308 * 10.0); }, p),
                    NumericalError);
}

TEST_CASE("primitive gradients")
{
    const Shape s3{5, 6, 4};
    Field other = random_field(s3, 1, 10);

    SUBCASE("elementwise")
    {
        Parameter p(random_field(s3, 1, 11));
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, add(x, t.constant(other))); }, p) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, sub(t.constant(other), x)); }, p) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, mul(x, x)); }, p) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, neg(x)); }, p) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, scale(x, -2.5)); }, p) < kTol);
        CHECK(grad_check([&](Tape&, Var x) { return mean(mul(x, x)); }, p) < kTol);
    }
    SUBCASE("leaky_relu away from the kink")
    {
        Field f = random_field(s3, 1, 12);
        for (double& x : f.raw()) {
            x = x < 0 ? x - 0.05 : x + 0.05;
        }
        Parameter p(f);
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, leaky_relu(x, 0.2)); }, p) < 1e-6);
    }
    SUBCASE("concat")
    {
        Parameter p(random_field(s3, 2, 13));
        CHECK(grad_check(
                  [&](Tape& t, Var x) {
                      const Var parts[] = {t.constant(other), x, x};
                      return readout(t, concat(parts));
                  },
                  p) < kTol);
    }
    SUBCASE("resampling")
    {
        Parameter p(random_field(s3, 3, 14));
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, avg_pool_down(x)); }, p) < kTol);
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, gaussian_smooth(x, 1.732, 3)); }, p) < kTol);
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, resize_linear(x, Shape{9, 7, 8})); }, p) < kTol);
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, upsample_linear(x, Shape{10, 12, 8})); }, p) < kTol);
    }
    SUBCASE("warp")
    {
        Field img = random_field(s3, 1, 15);
        Field disp = interior_disp(s3, 16);
        Parameter pi(img);
        Parameter pd(disp);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, warp(x, t.constant(disp))); }, pi) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, warp(t.constant(img), x)); }, pd, 1e-3, 120) < kTol);
        Parameter field(random_field(s3, 3, 17));
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, warp(x, t.constant(disp))); }, field) < kTol);
    }
    SUBCASE("convolution")
    {
        const Shape s2{7, 6};
        Field in = random_field(s2, 3, 18);
        Field w = random_field(Shape{4, 3, 9}, 1, 19);
        Field b = random_field(Shape{4}, 1, 20);
        for (int stride : {1, 2}) {
            Parameter pin(in), pw(w), pb(b);
            auto f_in = [&](Tape& t, Var x) { return readout(t, conv(x, t.constant(w), t.constant(b), stride)); };
            auto f_w = [&](Tape& t, Var x) { return readout(t, conv(t.constant(in), x, t.constant(b), stride)); };
            auto f_b = [&](Tape& t, Var x) { return readout(t, conv(t.constant(in), t.constant(w), x, stride)); };
            CHECK(grad_check(f_in, pin) < kTol);
            CHECK(grad_check(f_w, pw) < kTol);
            CHECK(grad_check(f_b, pb) < kTol);
        }
        Tape t;
        CHECK(conv(t.constant(in), t.constant(w), t.constant(b), 2).value().shape() == Shape{4, 3});
    }
    SUBCASE("convolution 3-D")
    {
        Field in = random_field(Shape{4, 5, 3}, 2, 21);
        Field w = random_field(Shape{2, 2, 27}, 1, 22);
        Field b = random_field(Shape{2}, 1, 23);
        Parameter pw(w);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, conv(t.constant(in), x, t.constant(b), 2)); }, pw) < kTol);
    }
    SUBCASE("transposed convolution")
    {
        Field in = random_field(Shape{4, 3}, 3, 24);
        Field w = random_field(Shape{2, 3, 9}, 1, 25);
        Field b = random_field(Shape{2}, 1, 26);
        for (const Shape& target : {Shape{8, 6}, Shape{7, 5}}) {
            Parameter pin(in), pw(w), pb(b);
            auto f_in = [&](Tape& t, Var x) { return readout(t, conv_transpose(x, t.constant(w), t.constant(b), target)); };
            auto f_w = [&](Tape& t, Var x) { return readout(t, conv_transpose(t.constant(in), x, t.constant(b), target)); };
            auto f_b = [&](Tape& t, Var x) { return readout(t, conv_transpose(t.constant(in), t.constant(w), x, target)); };
            CHECK(grad_check(f_in, pin) < kTol);
            CHECK(grad_check(f_w, pw) < kTol);
            CHECK(grad_check(f_b, pb) < kTol);
        }
        Tape t;
        CHECK_THROWS_AS(conv_transpose(t.constant(in), t.constant(w), t.constant(b), Shape{9, 6}),
                        FieldError);
    }
    SUBCASE("similarity and regulariser")
    {
        Parameter p(random_field(s3, 1, 27));
        CHECK(grad_check([&](Tape& t, Var x) { return ncc(x, t.constant(other)); }, p) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return ncc(t.constant(other), x); }, p) < kTol);
        Field spaced(Shape{6, 5}, 2);
        std::mt19937_64 rng(28);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < spaced.size(); ++i) {
            spaced[i] = 0.1 * static_cast<double>(i) + 0.05 * u(rng);
        }
        std::shuffle(spaced.raw().begin(), spaced.raw().end(), rng);
        Parameter pv(spaced);
        // the linear term keeps every gradient entry away from zero
        CHECK(grad_check([](Tape& t, Var x) { return add(tv_l1(x), scale(readout(t, x), 0.1)); }, pv) <
              kTol);
    }
    SUBCASE("composition and integration")
    {
        const Shape s{6, 7, 5};
        Field a = signed_field(s, 3, 29, 0.1, 0.6);
        Field b = signed_field(s, 3, 30, 0.1, 0.6);
        Parameter pa(a), pb(b);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, compose(x, t.constant(b))); }, pa) < kTol);
        CHECK(grad_check([&](Tape& t, Var x) { return readout(t, compose(t.constant(a), x)); }, pb) < kTol);
        Parameter pv(signed_field(s, 3, 31, 0.1, 0.9));
        CHECK(grad_check([](Tape& t, Var x) { return readout(t, integrate_svf(x, 7)); }, pv) < kTol);
    }
}

TEST_CASE("full loss gradient, two levels at 8^3")
{
    const Shape full{8, 8, 8};
    Volume fixed(random_field(full, 1, 40));
    Volume moving(random_field(full, 1, 41));
    fixed = Volume(gaussian_smooth(fixed, 1.0, 3));
    moving = Volume(gaussian_smooth(moving, 1.0, 3));
    const auto fp = build_pyramid(fixed, 2);
    const auto mp = build_pyramid(moving, 2);
    const auto velocity = checkerboard_velocity;
    Parameter v1(velocity(velocity_shape(fp[0].shape()), 0.05, 0.03, 42));
    Parameter v2(velocity(velocity_shape(fp[1].shape()), 0.0, 0.02, 43));

    auto loss = [&](Tape& t, Var a, Var b) {
        const Var incr[] = {a, b};
        return mdreg_loss(t, fp, mp, incr, LossOptions{}).total;
    };
    const double e1 = grad_check([&](Tape& t, Var x) { return loss(t, x, t.constant(v2.value)); }, v1);
    const double e2 = grad_check([&](Tape& t, Var x) { return loss(t, t.constant(v1.value), x); }, v2);
    CHECK(e1 < kTol);
    CHECK(e2 < kTol);
}
