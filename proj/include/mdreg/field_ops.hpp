#pragma once

#include "mdreg/field.hpp"

#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace mdreg {

/// Sparse linear map along one axis: out[j] = sum of w * in[i] over rows[j].
/// Pooling, smoothing and linear resizing are all products of these.
struct AxisOperator {
    int in_size = 1;
    int out_size = 1;
    std::vector<std::vector<std::pair<int, double>>> rows;

    AxisOperator transposed() const;
    static AxisOperator identity(int n);
};

AxisOperator pool_operator(int n);
AxisOperator smooth_operator(int n, std::span<const double> weights);
AxisOperator resize_operator(int n, int m);

/// Applies one operator per actual axis (ops.size() == rank).
Field apply_separable(const Field& f, std::span<const AxisOperator> ops);
/// Adjoint of apply_separable: maps a gradient on the output grid back to the input grid.
Field apply_separable_adjoint(const Field& g, std::span<const AxisOperator> ops);

Shape pooled_shape(const Shape& s);

// 3-wide, stride-2 average pooling with windows shrunk at the border.
Field avg_pool_down(const Field& f);
Volume avg_pool_down(const Volume& v);

/// Level 0 is the coarsest, back() is the input.
std::vector<Volume> build_pyramid(const Volume& v, int levels);
std::vector<Shape> pyramid_shapes(const Shape& s, int levels);

/// Multilinear interpolation with edge clamping. `coords` holds rank values per query.
std::vector<double> sample_linear(const Volume& v, std::span<const double> coords);

/// Pull-back warp: out(x) = f(x + disp(x)), every channel of f sampled.
Field warp(const Field& f, const Field& disp);
Volume warp(const Volume& v, const VectorField& disp);

/// Gradients of warp. Either output pointer may be null. Results are added into
/// the buffers, which must already have the right shape.
void warp_adjoint(const Field& f, const Field& disp, const Field& grad_out,
                  Field* grad_f, Field* grad_disp);

std::vector<double> gaussian_weights(double sigma, int ksize);
Field gaussian_smooth(const Field& f, double sigma, int ksize);
VectorField gaussian_smooth(const VectorField& f, double sigma, int ksize);

/// Corner-aligned multilinear resize of every channel (no value scaling).
Field resize_linear(const Field& f, const Shape& target);

/// Per-axis factor target/source used to rescale velocities on refinement.
std::vector<double> upsample_scales(const Shape& source, const Shape& target);

VectorField upsample_linear(const VectorField& f, const Shape& target);

} // namespace mdreg
