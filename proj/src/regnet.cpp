#include "mdreg/regnet.hpp"

#include "mdreg/field_ops.hpp"
#include "mdreg/transform.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace mdreg {

std::string to_string(Mode m)
{
    return m == Mode::network ? "network" : "direct";
}

Mode mode_from_string(const std::string& s)
{
    if (s == "network") {
        return Mode::network;
    }
    if (s == "direct") {
        return Mode::direct;
    }
    throw FieldError("unknown mode '" + s + "' (expected network or direct)");
}

int SubnetSpec::scaled(int filters) const
{
    return std::max(1, static_cast<int>(std::lround(filters * width)));
}

int SubnetSpec::decoders(int level, int levels) const
{
    const int depth = static_cast<int>(encoder.size());
    const int d = depth - levels + level;
    if (d < 0 || d > depth - 1) {
        throw FieldError("sub-network " + std::to_string(level + 1) + " of " +
                         std::to_string(levels) + " needs " + std::to_string(d) +
                         " decoder layers; network mode supports at most " +
                         std::to_string(depth) + " levels");
    }
    return d;
}

std::string SubnetSpec::signature() const
{
    std::ostringstream os;
    os << "enc";
    for (int f : encoder) {
        os << ':' << f;
    }
    os << ";dec:" << decoder_filters << ";head";
    for (int f : head) {
        os << ':' << f;
    }
    os << ";slope:" << leaky_slope << ";width:" << width;
    return os.str();
}

std::vector<ad::Parameter*> ModelParams::parameters()
{
    std::vector<ad::Parameter*> out;
    auto layer = [&](ConvLayer& c) {
        out.push_back(&c.weight);
        out.push_back(&c.bias);
    };
    for (auto& s : subnets) {
        for (auto& c : s.encoder) {
            layer(c);
        }
        for (auto& c : s.decoder) {
            layer(c);
        }
        for (auto& c : s.head) {
            layer(c);
        }
        layer(s.output);
    }
    for (auto& v : velocities) {
        out.push_back(&v);
    }
    return out;
}

std::size_t ModelParams::parameter_count() const
{
    std::size_t n = 0;
    for (auto* p : const_cast<ModelParams*>(this)->parameters()) {
        n += p->value.size();
    }
    return n;
}

std::vector<Shape> velocity_schedule(const Shape& image_shape, int levels)
{
    std::vector<Shape> out;
    for (const auto& s : pyramid_shapes(image_shape, levels)) {
        out.push_back(velocity_shape(s));
    }
    return out;
}

namespace {

int taps_for(int rank)
{
    int t = 1;
    for (int k = 0; k < rank; ++k) {
        t *= 3;
    }
    return t;
}

ConvLayer make_layer(int in, int out, int rank, std::mt19937_64* rng)
{
    const int taps = taps_for(rank);
    ConvLayer layer{ad::Parameter(Field(Shape{out, in, taps}, 1)),
                    ad::Parameter(Field(Shape{out}, 1))};
    if (rng) {
        const double bound = std::sqrt(6.0 / (in * taps));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (double& w : layer.weight.value.raw()) {
            w = dist(*rng);
        }
    }
    return layer;
}

} // namespace

ModelParams init_params(const SubnetSpec& spec, Mode mode, const Shape& image_shape, int levels,
                        std::uint64_t seed)
{
    ModelParams p;
    p.mode = mode;
    p.levels = levels;
    p.image_shape = image_shape;
    p.seed = seed;
    p.spec = spec;
    const auto vshapes = velocity_schedule(image_shape, levels);
    if (mode == Mode::direct) {
        for (const auto& s : vshapes) {
            p.velocities.emplace_back(Field(s, s.rank()));
        }
        return p;
    }

    const int rank = image_shape.rank();
    const int depth = static_cast<int>(spec.encoder.size());
    for (int k = 0; k < rank; ++k) {
        if (image_shape.dim(k) < (1 << depth)) {
            throw FieldError("network mode needs every axis >= " + std::to_string(1 << depth) +
                             ", got " + image_shape.str());
        }
    }
    std::mt19937_64 rng(seed);
    for (int l = 0; l < levels; ++l) {
        Subnet s;
        std::vector<int> enc_ch;
        int ch = 2;
        for (int f : spec.encoder) {
            s.encoder.push_back(make_layer(ch, spec.scaled(f), rank, &rng));
            ch = spec.scaled(f);
            enc_ch.push_back(ch);
        }
        const int dec = spec.decoders(l, levels);
        for (int j = 1; j <= dec; ++j) {
            const int out = spec.scaled(spec.decoder_filters);
            s.decoder.push_back(make_layer(ch, out, rank, &rng));
            ch = out + enc_ch[depth - 1 - j];
        }
        for (int f : spec.head) {
            s.head.push_back(make_layer(ch, spec.scaled(f), rank, &rng));
            ch = spec.scaled(f);
        }
        s.output = make_layer(ch, rank, rank, nullptr);
        p.subnets.push_back(std::move(s));
    }
    return p;
}

ad::Var subnet_forward(ad::Tape& tape, const SubnetSpec& spec, Subnet& params, ad::Var input,
                       int level, int levels)
{
    if (input.value().channels() != 2) {
        throw FieldError("sub-network input must have two channels (fixed, moving)");
    }
    auto apply = [&](ConvLayer& layer, ad::Var x, int stride) {
        return ad::conv(x, tape.watch(layer.weight), tape.watch(layer.bias), stride);
    };
    std::vector<ad::Var> enc;
    ad::Var h = input;
    for (auto& layer : params.encoder) {
        h = ad::leaky_relu(apply(layer, h, 2), spec.leaky_slope);
        enc.push_back(h);
    }
    const int depth = static_cast<int>(enc.size());
    const int dec = spec.decoders(level, levels);
    if (static_cast<int>(params.decoder.size()) != dec) {
        throw FieldError("sub-network parameters do not match the level schedule");
    }
    for (int j = 1; j <= dec; ++j) {
        ConvLayer& layer = params.decoder[j - 1];
        const ad::Var skip = enc[depth - 1 - j];
        h = ad::conv_transpose(h, tape.watch(layer.weight), tape.watch(layer.bias),
                               skip.value().shape());
        h = ad::leaky_relu(h, spec.leaky_slope);
        const ad::Var parts[] = {h, skip};
        h = ad::concat(parts);
    }
    for (auto& layer : params.head) {
        h = ad::leaky_relu(apply(layer, h, 1), spec.leaky_slope);
    }
    return apply(params.output, h, 1);
}

CascadeGraph cascade_forward(ad::Tape& tape, ModelParams& params,
                             std::span<const Volume> fixed_pyr,
                             std::span<const Volume> moving_pyr, const CascadeOptions& opts)
{
    const int levels = params.levels;
    if (static_cast<int>(fixed_pyr.size()) != levels ||
        static_cast<int>(moving_pyr.size()) != levels) {
        throw FieldError("cascade: pyramids must have " + std::to_string(levels) + " levels");
    }
    const Shape& full = fixed_pyr.back().shape();
    if (full != params.image_shape && params.mode == Mode::network) {
        throw FieldError("cascade: image grid " + full.str() + " differs from the trained grid " +
                         params.image_shape.str());
    }
    const auto vshapes = velocity_schedule(full, levels);

    CascadeGraph g;
    ad::Var accumulated;
    for (int l = 0; l < levels; ++l) {
        ad::Var moving_in;
        const bool need_input = params.mode == Mode::network || opts.emit_inputs;
        if (need_input) {
            const Volume& moving =
                params.mode == Mode::network ? moving_pyr.back() : moving_pyr[l];
            moving_in = tape.constant(moving);
            if (l > 0) {
                ad::Var disp = ad::integrate_svf(accumulated, opts.loss.steps);
                disp = ad::upsample_linear(disp, moving.shape());
                moving_in = ad::warp(moving_in, disp);
            }
            g.inputs.push_back(moving_in);
        }

        ad::Var v;
        if (params.mode == Mode::network) {
            const ad::Var parts[] = {tape.constant(fixed_pyr.back()), moving_in};
            v = subnet_forward(tape, params.spec, params.subnets[l], ad::concat(parts), l,
                               levels);
        } else {
            if (params.velocities.size() != static_cast<std::size_t>(levels) ||
                params.velocities[l].value.shape() != vshapes[l]) {
                throw FieldError("cascade: direct-mode velocities do not match the level schedule");
            }
            v = tape.watch(params.velocities[l]);
        }
        if (v.value().shape() != vshapes[l]) {
            throw FieldError("cascade: level " + std::to_string(l + 1) + " produced grid " +
                             v.value().shape().str() + ", expected " + vshapes[l].str());
        }
        g.increments.push_back(v);
        accumulated = l == 0 ? v : ad::accumulate(accumulated, v);
    }
    g.loss = ad::mdreg_loss(tape, fixed_pyr, moving_pyr, g.increments, opts.loss);
    g.final_svf = g.loss.levels.back().svf;
    return g;
}

} // namespace mdreg
