#include "mdreg/transform.hpp"

#include "mdreg/field_ops.hpp"

#include <cmath>

namespace mdreg {

namespace {

void require_steps(int steps)
{
    if (steps < 1) {
        throw FieldError("scaling and squaring needs at least one step");
    }
}

} // namespace

DeformationField compose(const DeformationField& a, const DeformationField& b)
{
    require_same_shape(a.shape(), b.shape(), "compose");
    Field out = warp(static_cast<const Field&>(a.disp), b.disp);
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b.disp[i];
    }
    return {VectorField(std::move(out)), Provenance::composed};
}

DeformationField integrate_svf(const VectorField& v, int steps)
{
    require_steps(steps);
    if (!v.all_finite()) {
        throw NumericalError("integrate_svf: velocity field has non-finite values");
    }
    VectorField d0 = v;
    const double s = std::ldexp(1.0, -steps);
    for (double& x : d0.raw()) {
        x *= s;
    }
    DeformationField d{std::move(d0), Provenance::integrated};
    for (int k = 0; k < steps; ++k) {
        d = compose(d, d);
    }
    d.provenance = Provenance::integrated;
    return d;
}

DeformationField invert_svf(const VectorField& v, int steps)
{
    VectorField negated = v;
    for (double& x : negated.raw()) {
        x = -x;
    }
    return integrate_svf(negated, steps);
}

Volume jacobian_determinant(const DeformationField& d)
{
    const Shape& shape = d.shape();
    const int rank = shape.rank();
    const int off = shape.axis_offset();
    for (int k = 0; k < rank; ++k) {
        if (shape.dim(k) < 3) {
            throw FieldError("jacobian_determinant needs every axis >= 3, got " + shape.str());
        }
    }
    const auto& ext = shape.ext();
    const std::array<std::size_t, 3> stride{
        static_cast<std::size_t>(ext[1]) * ext[2], static_cast<std::size_t>(ext[2]), 1};

    Volume out(shape);
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                const std::array<int, 3> pos{i0, i1, i2};
                double m[3][3] = {};
                for (int j = 0; j < rank; ++j) {
                    const int a = off + j;
                    const int n = ext[a];
                    std::size_t lo = v;
                    std::size_t hi = v;
                    double h = 2.0;
                    if (pos[a] == 0) {
                        hi = v + stride[a];
                        h = 1.0;
                    } else if (pos[a] == n - 1) {
                        lo = v - stride[a];
                        h = 1.0;
                    } else {
                        lo = v - stride[a];
                        hi = v + stride[a];
                    }
                    for (int i = 0; i < rank; ++i) {
                        m[i][j] = (d.disp.at(i, hi) - d.disp.at(i, lo)) / h + (i == j ? 1.0 : 0.0);
                    }
                }
                double det = 0.0;
                if (rank == 1) {
                    det = m[0][0];
                } else if (rank == 2) {
                    det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
                } else {
                    det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                          m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                          m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                }
                out[v] = det;
            }
        }
    }
    return out;
}

std::size_t count_nonpositive_jacobian(const DeformationField& d)
{
    const Volume j = jacobian_determinant(d);
    std::size_t n = 0;
    for (double x : j.raw()) {
        n += x <= 0.0 ? 1 : 0;
    }
    return n;
}

namespace ad {

Var compose(Var a, Var b)
{
    return add(b, warp(a, b));
}

Var integrate_svf(Var v, int steps)
{
    require_steps(steps);
    if (!v.value().all_finite()) {
        throw NumericalError("integrate_svf: velocity field has non-finite values");
    }
    Var d = scale(v, std::ldexp(1.0, -steps));
    for (int k = 0; k < steps; ++k) {
        d = compose(d, d);
    }
    return d;
}

} // namespace ad

} // namespace mdreg
