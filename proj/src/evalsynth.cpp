#include "mdreg/evalsynth.hpp"

#include "mdreg/field_ops.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mdreg {

LabelVolume::LabelVolume(Shape shape, std::vector<std::uint16_t> labels)
    : shape_(std::move(shape)), labels_(std::move(labels))
{
    if (labels_.size() != shape_.voxels()) {
        throw FieldError("label data length does not match " + shape_.str());
    }
}

std::set<int> LabelVolume::vocabulary() const
{
    return {labels_.begin(), labels_.end()};
}

DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels)
{
    require_same_shape(a.shape(), b.shape(), "dice");
    std::vector<int> wanted = labels;
    if (wanted.empty()) {
        std::set<int> all = a.vocabulary();
        all.merge(b.vocabulary());
        all.erase(0);
        wanted.assign(all.begin(), all.end());
    }
    std::map<int, std::size_t> na;
    std::map<int, std::size_t> nb;
    std::map<int, std::size_t> both;
    for (std::size_t i = 0; i < a.voxels(); ++i) {
        ++na[a[i]];
        ++nb[b[i]];
        if (a[i] == b[i]) {
            ++both[a[i]];
        }
    }
    DiceResult r;
    double total = 0.0;
    for (int l : wanted) {
        const std::size_t sa = na[l];
        const std::size_t sb = nb[l];
        if (sa + sb == 0) {
            continue;
        }
        const double d = 2.0 * static_cast<double>(both[l]) / static_cast<double>(sa + sb);
        r.per_label[l] = d;
        total += d;
    }
    r.mean = r.per_label.empty() ? 0.0 : total / static_cast<double>(r.per_label.size());
    return r;
}

LabelVolume warp_labels(const LabelVolume& lv, const DeformationField& d)
{
    const Shape& shape = lv.shape();
    require_same_shape(shape, d.shape(), "warp_labels");
    const auto& ext = shape.ext();
    const int off = shape.axis_offset();
    LabelVolume out(shape);
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                std::array<int, 3> q{i0, i1, i2};
                for (int c = 0; c < shape.rank(); ++c) {
                    const int a = off + c;
                    const double p = std::clamp(q[a] + d.disp.at(c, v), 0.0, double(ext[a] - 1));
                    q[a] = static_cast<int>(std::round(p));
                }
                out[v] = lv[shape.index(q[0], q[1], q[2])];
            }
        }
    }
    return out;
}

std::vector<bool> interior_mask(const Shape& shape, int margin)
{
    const auto& ext = shape.ext();
    const int off = shape.axis_offset();
    std::vector<bool> mask(shape.voxels(), false);
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                const std::array<int, 3> q{i0, i1, i2};
                bool inside = true;
                for (int a = off; a < 3; ++a) {
                    inside = inside && q[a] >= margin && q[a] < ext[a] - margin;
                }
                mask[v] = inside;
            }
        }
    }
    return mask;
}

EndpointError endpoint_error(const DeformationField& est, const DeformationField& gt,
                             const std::vector<bool>& mask)
{
    require_same_shape(est.shape(), gt.shape(), "endpoint_error");
    const std::vector<bool> m = mask.empty() ? interior_mask(est.shape()) : mask;
    if (m.size() != est.shape().voxels()) {
        throw FieldError("endpoint_error: mask size does not match the grid");
    }
    EndpointError e;
    std::size_t count = 0;
    for (std::size_t v = 0; v < m.size(); ++v) {
        if (!m[v]) {
            continue;
        }
        double s = 0.0;
        for (int c = 0; c < est.disp.channels(); ++c) {
            const double diff = est.disp.at(c, v) - gt.disp.at(c, v);
            s += diff * diff;
        }
        const double dist = std::sqrt(s);
        e.mean += dist;
        e.max = std::max(e.max, dist);
        ++count;
    }
    if (count > 0) {
        e.mean /= static_cast<double>(count);
    }
    return e;
}

namespace {

// Smooth random velocity with maximum vector norm `magnitude`. Noise is drawn on a
// padded grid and cropped so the border carries no replication artefacts.
VectorField random_velocity(std::mt19937_64& rng, const Shape& shape, double magnitude,
                            double sigma)
{
    const int pad = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<int> padded = shape.dims();
    for (int& d : padded) {
        d += 2 * pad;
    }
    const Shape pshape(padded);
    Field noise(pshape, shape.rank());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& x : noise.raw()) {
        x = normal(rng);
    }
    const Field smooth = gaussian_smooth(noise, sigma, 2 * pad + 1);

    VectorField v(shape);
    const auto& ext = shape.ext();
    const int off = shape.axis_offset();
    std::array<int, 3> shift{0, 0, 0};
    for (int a = off; a < 3; ++a) {
        shift[a] = pad;
    }
    std::size_t i = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++i) {
                const std::size_t src = pshape.index(i0 + shift[0], i1 + shift[1], i2 + shift[2]);
                for (int c = 0; c < shape.rank(); ++c) {
                    v.at(c, i) = smooth.at(c, src);
                }
            }
        }
    }
    double peak = 0.0;
    for (std::size_t k = 0; k < v.voxels(); ++k) {
        double s = 0.0;
        for (int c = 0; c < v.channels(); ++c) {
            s += v.at(c, k) * v.at(c, k);
        }
        peak = std::max(peak, std::sqrt(s));
    }
    const double gain = peak > 0.0 ? magnitude / peak : 0.0;
    for (double& x : v.raw()) {
        x *= gain;
    }
    return v;
}

} // namespace

SynthPair synth_pair(std::uint64_t seed, const Shape& shape, double magnitude, int blobs,
                     const SynthOptions& opts)
{
    int smallest = shape.dim(0);
    for (int k = 0; k < shape.rank(); ++k) {
        if (shape.dim(k) < 16) {
            throw FieldError("synth_pair needs every axis >= 16, got " + shape.str());
        }
        smallest = std::min(smallest, shape.dim(k));
    }
    if (magnitude < 0.0 || magnitude > smallest / 8.0) {
        throw FieldError("synth_pair: magnitude must lie in [0, " +
                         std::to_string(smallest / 8.0) + "]");
    }
    if (!opts.translation.empty() && static_cast<int>(opts.translation.size()) != shape.rank()) {
        throw FieldError("synth_pair: translation needs one component per axis");
    }

    std::mt19937_64 field_rng(seed);
    std::mt19937_64 template_rng(opts.template_seed.value_or(0));
    std::mt19937_64& rng = opts.template_seed ? template_rng : field_rng;
    SynthPair pair;
    pair.seed = seed;

    // Template: Gaussian blobs, labelled where a blob dominates above half its peak.
    const double size_scale = smallest / 32.0;
    Volume tmpl(shape);
    LabelVolume labels(shape);
    std::vector<double> best(shape.voxels(), 0.0);
    const auto& ext = shape.ext();
    const int off = shape.axis_offset();
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int b = 0; b < blobs; ++b) {
        std::array<double, 3> centre{0.0, 0.0, 0.0};
        for (int a = off; a < 3; ++a) {
            centre[a] = (0.1 + 0.8 * unit(rng)) * (ext[a] - 1);
        }
        const double radius = (2.0 + 1.5 * unit(rng)) * size_scale;
        const double amplitude = 0.5 + unit(rng);
        std::size_t v = 0;
        for (int i0 = 0; i0 < ext[0]; ++i0) {
            for (int i1 = 0; i1 < ext[1]; ++i1) {
                for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                    const double d0 = i0 - centre[0];
                    const double d1 = i1 - centre[1];
                    const double d2 = i2 - centre[2];
                    const double g = std::exp(-(d0 * d0 + d1 * d1 + d2 * d2) / (2.0 * radius * radius));
                    tmpl[v] += amplitude * g;
                    if (g > 0.5 && g > best[v]) {
                        best[v] = g;
                        labels[v] = static_cast<std::uint16_t>(b + 1);
                    }
                }
            }
        }
    }
    if (opts.noise > 0.0) {
        std::normal_distribution<double> normal(0.0, opts.noise);
        for (double& x : tmpl.raw()) {
            x += normal(field_rng);
        }
    }

    const double sigma = opts.field_sigma.value_or(smallest / 4.0);
    constexpr int kAttempts = 20;
    for (int attempt = 0; attempt < kAttempts; ++attempt) {
        VectorField v = magnitude > 0.0 ? random_velocity(field_rng, shape, magnitude, sigma)
                                        : VectorField(shape);
        if (!opts.translation.empty()) {
            for (int c = 0; c < shape.rank(); ++c) {
                for (double& x : v.channel(c)) {
                    x += opts.translation[c];
                }
            }
        }
        DeformationField phi = integrate_svf(v, opts.steps);
        if (count_nonpositive_jacobian(phi) != 0) {
            continue;
        }
        pair.svf = std::move(v);
        pair.forward = std::move(phi);
        pair.moving = tmpl;
        pair.fixed = warp(tmpl, pair.forward.disp);
        pair.moving_labels = labels;
        pair.fixed_labels = warp_labels(labels, pair.forward);
        return pair;
    }
    throw FieldError("synth_pair: no fold-free field after " + std::to_string(kAttempts) +
                     " attempts; magnitude too large for the smoothness");
}

} // namespace mdreg
