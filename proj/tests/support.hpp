#pragma once

#include "mdreg/autodiff.hpp"
#include "mdreg/field_ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mdreg::testing {

inline Field random_field(const Shape& s, int channels, std::uint64_t seed, double lo = -1.0,
                          double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Field f(s, channels);
    for (double& x : f.raw()) {
        x = u(rng);
    }
    return f;
}

// Weighted sum with fixed random weights: a generic scalar readout.
inline ad::Var readout(ad::Tape& t, ad::Var x, std::uint64_t seed = 99)
{
    ad::Var w = t.constant(random_field(x.value().shape(), x.value().channels(), seed));
    return ad::sum(ad::mul(x, w));
}

// Readout that ignores border voxels, where clamping makes warps one-sided.
inline ad::Var interior_readout(ad::Tape& t, ad::Var x)
{
    Field w = random_field(x.value().shape(), x.value().channels(), 98);
    const Shape& s = w.shape();
    const auto& ext = s.ext();
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                const int q[] = {i0, i1, i2};
                for (int a = s.axis_offset(); a < 3; ++a) {
                    if (q[a] == 0 || q[a] == ext[a] - 1) {
                        for (int c = 0; c < w.channels(); ++c) {
                            w.at(c, v) = 0.0;
                        }
                    }
                }
            }
        }
    }
    return ad::sum(ad::mul(x, t.constant(w)));
}

// Displacements whose sample points stay inside the grid and away from cell boundaries.
inline Field interior_disp(const Shape& s, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> frac(0.2, 0.8);
    std::uniform_int_distribution<int> whole(-1, 1);
    Field d(s, s.rank());
    const auto& ext = s.ext();
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                const int q[] = {i0, i1, i2};
                for (int c = 0; c < s.rank(); ++c) {
                    const int a = s.axis_offset() + c;
                    int base = q[a] + whole(rng);
                    base = std::clamp(base, 0, ext[a] - 2);
                    d.at(c, v) = base + frac(rng) - q[a];
                }
            }
        }
    }
    return d;
}

// Entries with magnitude in [lo, hi] and random sign, keeping sample points away
// from grid nodes under small perturbations.
inline Field signed_field(const Shape& s, int channels, std::uint64_t seed, double lo, double hi)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::bernoulli_distribution sign(0.5);
    Field f(s, channels);
    for (double& x : f.raw()) {
        x = sign(rng) ? u(rng) : -u(rng);
    }
    return f;
}

// Velocities of `base + step` on a checkerboard plus small noise: sample points sit
// inside cells and neighbouring differences stay away from the TV kink.
inline Field checkerboard_velocity(const Shape& s, double base, double step, std::uint64_t seed)
{
    Field f = random_field(s, s.rank(), seed, 0.0, 0.2 * step);
    const auto& ext = s.ext();
    for (int c = 0; c < s.rank(); ++c) {
        std::size_t v = 0;
        for (int i0 = 0; i0 < ext[0]; ++i0) {
            for (int i1 = 0; i1 < ext[1]; ++i1) {
                for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                    f.at(c, v) += base + step * ((i0 + i1 + i2) % 2);
                }
            }
        }
    }
    return f;
}

inline double max_norm(const Field& f)
{
    double m = 0.0;
    for (std::size_t i = 0; i < f.voxels(); ++i) {
        double q = 0.0;
        for (int c = 0; c < f.channels(); ++c) {
            q += f.at(c, i) * f.at(c, i);
        }
        m = std::max(m, std::sqrt(q));
    }
    return m;
}

// Gaussian-smoothed noise rescaled to a given maximum vector norm.
inline VectorField smooth_random(const Shape& s, double max_norm_value, double sigma,
                                 std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    VectorField v(s);
    for (double& x : v.raw()) {
        x = n(rng);
    }
    v = gaussian_smooth(v, sigma, 2 * static_cast<int>(std::ceil(2 * sigma)) + 1);
    const double peak = max_norm(v);
    for (double& x : v.raw()) {
        x *= max_norm_value / peak;
    }
    return v;
}

inline double max_interior(const Field& f, int margin)
{
    const auto& ext = f.shape().ext();
    const int off = f.shape().axis_offset();
    double m = 0.0;
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                const int q[] = {i0, i1, i2};
                bool inside = true;
                for (int a = off; a < 3; ++a) {
                    inside = inside && q[a] >= margin && q[a] < ext[a] - margin;
                }
                if (!inside) {
                    continue;
                }
                double s = 0.0;
                for (int c = 0; c < f.channels(); ++c) {
                    s += f.at(c, v) * f.at(c, v);
                }
                m = std::max(m, std::sqrt(s));
            }
        }
    }
    return m;
}

inline VectorField difference(const VectorField& a, const VectorField& b)
{
    VectorField d = a;
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] -= b[i];
    }
    return d;
}

} // namespace mdreg::testing
