#include "mdreg/objective.hpp"

#include "mdreg/field_ops.hpp"
#include "mdreg/transform.hpp"

#include <cmath>

namespace mdreg {

namespace {

struct NccStats {
    double mean_a = 0.0;
    double mean_b = 0.0;
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    double denom = 0.0;
};

NccStats ncc_stats(const Field& a, const Field& b)
{
    require_same_shape(a.shape(), b.shape(), "ncc");
    if (a.channels() != 1 || b.channels() != 1) {
        throw FieldError("ncc expects single-channel fields");
    }
    const std::size_t n = a.size();
    NccStats s;
    for (std::size_t i = 0; i < n; ++i) {
        s.mean_a += a[i];
        s.mean_b += b[i];
    }
    s.mean_a /= static_cast<double>(n);
    s.mean_b /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - s.mean_a;
        const double db = b[i] - s.mean_b;
        s.sab += da * db;
        s.saa += da * da;
        s.sbb += db * db;
    }
    s.denom = std::sqrt(s.saa * s.sbb + kNccEpsilon);
    return s;
}

} // namespace

double ncc(const Field& a, const Field& b)
{
    if (a.size() < 2) {
        throw FieldError("ncc needs at least two voxels");
    }
    const NccStats s = ncc_stats(a, b);
    return s.sab / s.denom;
}

void ncc_gradient(const Field& a, const Field& b, Field& ga, Field& gb)
{
    const NccStats s = ncc_stats(a, b);
    const double d3 = s.denom * s.denom * s.denom;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - s.mean_a;
        const double db = b[i] - s.mean_b;
        ga[i] = db / s.denom - s.sab * s.sbb * da / d3;
        gb[i] = da / s.denom - s.sab * s.saa * db / d3;
    }
}

namespace {

template <typename Fn>
void for_each_forward_difference(const Field& v, Fn&& fn)
{
    const Shape& shape = v.shape();
    const auto& ext = shape.ext();
    const std::array<std::size_t, 3> stride{
        static_cast<std::size_t>(ext[1]) * ext[2], static_cast<std::size_t>(ext[2]), 1};
    const std::size_t n = v.voxels();
    for (int c = 0; c < v.channels(); ++c) {
        const std::size_t base = c * n;
        std::size_t i = 0;
        for (int i0 = 0; i0 < ext[0]; ++i0) {
            for (int i1 = 0; i1 < ext[1]; ++i1) {
                for (int i2 = 0; i2 < ext[2]; ++i2, ++i) {
                    const std::array<int, 3> pos{i0, i1, i2};
                    for (int a = shape.axis_offset(); a < 3; ++a) {
                        if (pos[a] + 1 < ext[a]) {
                            fn(base + i, base + i + stride[a]);
                        }
                    }
                }
            }
        }
    }
}

} // namespace

double tv_l1(const Field& v)
{
    double total = 0.0;
    for_each_forward_difference(v, [&](std::size_t here, std::size_t next) {
        total += std::abs(v[next] - v[here]);
    });
    return total / static_cast<double>(v.voxels());
}

void tv_l1_gradient(const Field& v, Field& g)
{
    for (double& x : g.raw()) {
        x = 0.0;
    }
    const double inv_n = 1.0 / static_cast<double>(v.voxels());
    for_each_forward_difference(v, [&](std::size_t here, std::size_t next) {
        const double d = v[next] - v[here];
        const double s = d > 0.0 ? inv_n : (d < 0.0 ? -inv_n : 0.0);
        g[next] += s;
        g[here] -= s;
    });
}

Shape velocity_shape(const Shape& image_shape)
{
    return pooled_shape(image_shape);
}

std::vector<VectorField> accumulate_velocities(std::span<const VectorField> increments)
{
    std::vector<VectorField> acc;
    for (const auto& v : increments) {
        if (acc.empty()) {
            acc.push_back(v);
            continue;
        }
        VectorField up = upsample_linear(acc.back(), v.shape());
        for (std::size_t i = 0; i < up.size(); ++i) {
            up[i] += v[i];
        }
        acc.push_back(std::move(up));
    }
    return acc;
}

std::string LossBreakdown::first_nonfinite() const
{
    for (std::size_t l = 0; l < forward.size(); ++l) {
        if (!std::isfinite(forward[l])) {
            return "forward similarity at level " + std::to_string(l + 1);
        }
        if (!std::isfinite(backward[l])) {
            return "backward similarity at level " + std::to_string(l + 1);
        }
        if (!std::isfinite(reg[l])) {
            return "regularizer at level " + std::to_string(l + 1);
        }
    }
    return std::isfinite(total) ? "" : "total";
}

LossBreakdown mdreg_loss(std::span<const Volume> fixed_pyr, std::span<const Volume> moving_pyr,
                         std::span<const VectorField> increments, const LossOptions& opts)
{
    ad::Tape tape(false);
    std::vector<ad::Var> vars;
    for (const auto& v : increments) {
        vars.push_back(tape.constant(v));
    }
    return ad::mdreg_loss(tape, fixed_pyr, moving_pyr, vars, opts).breakdown;
}

namespace ad {

Var accumulate(Var coarse_accumulated, Var increment)
{
    return add(upsample_linear(coarse_accumulated, increment.value().shape()), increment);
}

LossGraph mdreg_loss(Tape& tape, std::span<const Volume> fixed_pyr,
                     std::span<const Volume> moving_pyr, std::span<const Var> increments,
                     const LossOptions& opts)
{
    const std::size_t levels = fixed_pyr.size();
    if (levels == 0 || moving_pyr.size() != levels || increments.size() != levels) {
        throw FieldError("mdreg_loss: pyramids and velocity increments must have one entry per level");
    }
    LossGraph graph;
    graph.breakdown.lambda = opts.lambda;
    Var total;
    for (std::size_t l = 0; l < levels; ++l) {
        const Volume& fixed = fixed_pyr[l];
        const Volume& moving = moving_pyr[l];
        require_same_shape(fixed.shape(), moving.shape(), "mdreg_loss pyramid level");
        const Shape vshape = velocity_shape(fixed.shape());
        if (increments[l].value().shape() != vshape ||
            increments[l].value().channels() != vshape.rank()) {
            throw FieldError("mdreg_loss: level " + std::to_string(l + 1) + " velocity grid " +
                             increments[l].value().shape().str() + " does not match schedule " +
                             vshape.str());
        }

        LevelGraph lg;
        lg.accumulated = l == 0 ? increments[0] : accumulate(graph.levels.back().accumulated,
                                                             increments[l]);
        lg.svf = upsample_linear(lg.accumulated, fixed.shape());
        if (l + 1 == levels && opts.smoothing) {
            lg.svf = gaussian_smooth(lg.svf, opts.sigma, opts.ksize);
        }
        lg.forward = integrate_svf(lg.svf, opts.steps);
        lg.inverse = integrate_svf(neg(lg.svf), opts.steps);
        Var fixed_v = tape.constant(fixed);
        Var moving_v = tape.constant(moving);
        lg.warped_moving = warp(moving_v, lg.forward);
        lg.warped_fixed = warp(fixed_v, lg.inverse);
        Var s_fwd = ncc(fixed_v, lg.warped_moving);
        Var s_bwd = ncc(moving_v, lg.warped_fixed);
        Var reg = tv_l1(increments[l]);
        Var level_total = add(neg(add(s_fwd, s_bwd)), scale(reg, opts.lambda));
        total = l == 0 ? level_total : add(total, level_total);

        graph.breakdown.forward.push_back(s_fwd.value()[0]);
        graph.breakdown.backward.push_back(s_bwd.value()[0]);
        graph.breakdown.reg.push_back(reg.value()[0]);
        graph.levels.push_back(lg);
    }
    graph.total = total;
    graph.breakdown.total = total.value()[0];
    return graph;
}

} // namespace ad

} // namespace mdreg
