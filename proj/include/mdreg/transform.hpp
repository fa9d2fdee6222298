#pragma once

#include "mdreg/autodiff.hpp"
#include "mdreg/field.hpp"

#include <cstddef>

namespace mdreg {

enum class Provenance { integrated, composed, external };

/// D(x) = x + disp(x).
struct DeformationField {
    VectorField disp;
    Provenance provenance = Provenance::external;

    static DeformationField identity(const Shape& shape)
    {
        return {VectorField(shape), Provenance::external};
    }
    const Shape& shape() const { return disp.shape(); }
};

/// Scaling and squaring: disp_0 = v / 2^steps, then `steps` self-compositions.
DeformationField integrate_svf(const VectorField& v, int steps);

/// Pull-back composition, (a o b)(x) = a(b(x)): b is applied first.
DeformationField compose(const DeformationField& a, const DeformationField& b);

/// Inverse of the flow of v, as the flow of -v.
DeformationField invert_svf(const VectorField& v, int steps);

/// Determinant of the Jacobian of x + disp(x); central differences inside,
/// one-sided differences on border voxels.
Volume jacobian_determinant(const DeformationField& d);

std::size_t count_nonpositive_jacobian(const DeformationField& d);

namespace ad {

Var compose(Var a, Var b);
Var integrate_svf(Var v, int steps);

} // namespace ad

} // namespace mdreg
