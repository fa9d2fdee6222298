#include "doctest.h"

#include "mdreg/field_ops.hpp"
#include "mdreg/transform.hpp"

#include "support.hpp"

#include <cmath>
#include <random>

using namespace mdreg;

namespace {

using namespace mdreg::testing;

Volume channel_volume(const VectorField& f, int c)
{
    return Volume(f.shape(), std::vector<double>(f.channel(c).begin(), f.channel(c).end()));
}

} // namespace

TEST_CASE("integrate_svf")
{
    const Shape s{12, 12, 12};
    CHECK(integrate_svf(VectorField(s), 7).disp == VectorField(s));
    CHECK(integrate_svf(VectorField(s), 7).provenance == Provenance::integrated);

    const double c[] = {0.75, -1.25, 0.5};
    DeformationField d = integrate_svf(VectorField::constant(s, c), 7);
    VectorField expect = VectorField::constant(s, c);
    CHECK(max_interior(difference(d.disp, expect), 3) < 1e-10);

    CHECK_THROWS_AS(integrate_svf(VectorField(s), 0), FieldError);
    VectorField bad(s);
    bad[5] = std::nan("");
    CHECK_THROWS_AS(integrate_svf(bad, 7), NumericalError);
}

TEST_CASE("integrate_svf against a forward-Euler oracle")
{
    const Shape s{20, 20};
    const VectorField v = smooth_random(s, 2.0, 4.0, 3);
    const DeformationField phi = integrate_svf(v, 7);
    const Volume vx = channel_volume(v, 0);
    const Volume vy = channel_volume(v, 1);
    constexpr int substeps = 1024;
    double worst = 0.0;
    for (int i = 5; i < 15; ++i) {
        for (int j = 5; j < 15; ++j) {
            double x[] = {double(i), double(j)};
            for (int k = 0; k < substeps; ++k) {
                std::vector<double> c{x[0], x[1]};
                const double dx = sample_linear(vx, c)[0];
                const double dy = sample_linear(vy, c)[0];
                x[0] += dx / substeps;
                x[1] += dy / substeps;
            }
            const std::size_t q = s.index(0, i, j);
            worst = std::max(worst, std::hypot(i + phi.disp.at(0, q) - x[0], j + phi.disp.at(1, q) - x[1]));
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("convergence in the step count")
{
    const Shape s{24, 24};
    const VectorField v = smooth_random(s, 2.0, 4.0, 5);
    const auto a = integrate_svf(v, 7);
    const auto b = integrate_svf(v, 8);
    CHECK(max_interior(difference(a.disp, b.disp), 4) < 1e-3);
}

TEST_CASE("compose")
{
    const Shape s{10, 11, 9};
    const auto a = integrate_svf(smooth_random(s, 1.5, 2.5, 6), 7);
    const auto b = integrate_svf(smooth_random(s, 1.5, 2.5, 7), 7);
    const auto id = DeformationField::identity(s);
    CHECK(compose(id, b).disp == b.disp);
    CHECK(compose(a, id).disp == a.disp);
    CHECK(compose(a, b).provenance == Provenance::composed);

    const double c1[] = {1.0, 0.5, -0.25};
    const double c2[] = {-0.5, 1.0, 0.75};
    const auto t = compose(DeformationField{VectorField::constant(s, c1)},
                           DeformationField{VectorField::constant(s, c2)});
    const double sum[] = {0.5, 1.5, 0.5};
    CHECK(max_interior(difference(t.disp, VectorField::constant(s, sum)), 2) < 1e-12);

    // (a o b)(x) = a(b(x)): check one point by hand.
    const std::size_t q = s.index(4, 5, 3);
    std::vector<double> p{4 + b.disp.at(0, q), 5 + b.disp.at(1, q), 3 + b.disp.at(2, q)};
    const double a0 = sample_linear(channel_volume(a.disp, 0), p)[0];
    CHECK(compose(a, b).disp.at(0, q) == doctest::Approx(b.disp.at(0, q) + a0).epsilon(1e-14));

    const auto c = integrate_svf(smooth_random(s, 1.5, 2.5, 8), 7);
    const auto left = compose(compose(a, b), c);
    const auto right = compose(a, compose(b, c));
    CHECK(max_interior(difference(left.disp, right.disp), 3) < 1e-2);
    CHECK_THROWS_AS(compose(a, DeformationField::identity(Shape{10, 11, 8})), FieldError);
}

TEST_CASE("invert_svf")
{
    const Shape s{16, 16, 16};
    CHECK(invert_svf(VectorField(s), 7).disp == VectorField(s));
    const double c[] = {0.5, -1.0, 2.0};
    const double mc[] = {-0.5, 1.0, -2.0};
    CHECK(max_interior(difference(invert_svf(VectorField::constant(s, c), 7).disp,
                                  VectorField::constant(s, mc)),
                       3) < 1e-10);
    const VectorField v = smooth_random(s, 5.0, 4.0, 9);
    const auto round = compose(integrate_svf(v, 7), invert_svf(v, 7));
    CHECK(max_interior(round.disp, 5) < 0.05);
}

TEST_CASE("time splitting of the flow")
{
    const Shape s{24, 24};
    const VectorField v = smooth_random(s, 2.0, 4.0, 10);
    VectorField half = v;
    for (double& x : half.raw()) {
        x *= 0.5;
    }
    const auto whole = integrate_svf(v, 7);
    const auto h = integrate_svf(half, 7);
    CHECK(max_interior(difference(whole.disp, compose(h, h).disp), 4) < 1e-2);
}

TEST_CASE("jacobian_determinant")
{
    const Shape s{6, 7, 8};
    const Volume ji = jacobian_determinant(DeformationField::identity(s));
    for (double j : ji.raw()) {
        CHECK(j == 1.0);
    }
    const double c[] = {2.5, -1.0, 0.25};
    const DeformationField t{VectorField::constant(s, c)};
    const Volume jt = jacobian_determinant(t);
    for (double j : jt.raw()) {
        CHECK(j == 1.0);
    }
    CHECK(count_nonpositive_jacobian(t) == 0);
    CHECK(count_nonpositive_jacobian(DeformationField::identity(s)) == 0);

    VectorField lin(s);
    for (int i0 = 0; i0 < 6; ++i0) {
        for (int i1 = 0; i1 < 7; ++i1) {
            for (int i2 = 0; i2 < 8; ++i2) {
                const std::size_t q = s.index(i0, i1, i2);
                lin.at(0, q) = 0.1 * i0;
                lin.at(1, q) = 0.1 * i1;
                lin.at(2, q) = 0.1 * i2;
            }
        }
    }
    const Volume jl = jacobian_determinant(DeformationField{lin});
    CHECK(jl[s.index(3, 3, 3)] == doctest::Approx(1.331).epsilon(1e-12));
    CHECK(jl[0] == doctest::Approx(1.331).epsilon(1e-12));

    // Two opposing translations meeting at the plane i0 = 5: material crosses over.
    const Shape f{10, 6, 6};
    VectorField fold(f);
    for (int i0 = 0; i0 < 10; ++i0) {
        for (int i1 = 0; i1 < 6; ++i1) {
            for (int i2 = 0; i2 < 6; ++i2) {
                fold.at(0, f.index(i0, i1, i2)) = i0 < 5 ? 2.0 : -2.0;
            }
        }
    }
    const Volume jf = jacobian_determinant(DeformationField{fold});
    bool nonpositive = false;
    for (int i1 = 0; i1 < 6; ++i1) {
        // brute force: the map along axis 0 decreases from i0=4 to i0=5.
        const double x4 = 4 + 2.0, x5 = 5 - 2.0;
        CHECK(x5 < x4);
        nonpositive = nonpositive || jf[f.index(4, i1, 2)] <= 0.0;
    }
    CHECK(nonpositive);
    CHECK(count_nonpositive_jacobian(DeformationField{fold}) > 0);

    const Shape s2{5, 4};
    VectorField shear(s2);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 4; ++j) {
            shear.at(0, s2.index(0, i, j)) = 0.5 * j;
        }
    }
    const Volume js = jacobian_determinant(DeformationField{shear});
    for (double j : js.raw()) {
        CHECK(j == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(jacobian_determinant(DeformationField::identity(Shape{2, 5})), FieldError);
}
