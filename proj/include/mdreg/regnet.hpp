#pragma once

#include "mdreg/autodiff.hpp"
#include "mdreg/objective.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mdreg {

enum class Mode { network, direct };

std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

/// Layer widths of one per-resolution sub-network, before the width multiplier.
struct SubnetSpec {
    std::vector<int> encoder{16, 32, 32, 32}; // stride-2 convolutions
    int decoder_filters = 32;                 // stride-2 transposed convolutions
    std::vector<int> head{32, 16};            // stride-1 convolutions before the output layer
    double leaky_slope = 0.2;
    double width = 1.0;

    int scaled(int filters) const;
    /// Transposed convolutions used by sub-network `level` (0-based) of `levels`.
    int decoders(int level, int levels) const;
    /// Canonical text used for the checkpoint spec hash.
    std::string signature() const;
};

struct ConvLayer {
    ad::Parameter weight; // Shape{out, in, 3^rank}
    ad::Parameter bias;   // Shape{out}
};

struct Subnet {
    std::vector<ConvLayer> encoder;
    std::vector<ConvLayer> decoder;
    std::vector<ConvLayer> head;
    ConvLayer output;
};

/// Network weights (network mode) or per-level velocity increments (direct mode).
struct ModelParams {
    Mode mode = Mode::direct;
    int levels = 3;
    Shape image_shape;
    std::uint64_t seed = 0;
    SubnetSpec spec;
    std::vector<Subnet> subnets;
    std::vector<ad::Parameter> velocities;

    std::vector<ad::Parameter*> parameters();
    std::size_t parameter_count() const;
};

/// Velocity grids for an L-level pyramid of `image_shape`, coarsest first.
std::vector<Shape> velocity_schedule(const Shape& image_shape, int levels);

/// Zero-mean uniform weights scaled by fan-in, zero biases, zero output layers,
/// zero direct-mode velocities: the initial transform is the identity.
ModelParams init_params(const SubnetSpec& spec, Mode mode, const Shape& image_shape, int levels,
                        std::uint64_t seed);

/// Records sub-network `level` on the tape for a 2-channel input at full resolution.
ad::Var subnet_forward(ad::Tape& tape, const SubnetSpec& spec, Subnet& params, ad::Var input,
                       int level, int levels);

struct CascadeOptions {
    LossOptions loss;
    bool emit_inputs = false; // keep per-level warped moving inputs in direct mode
};

struct CascadeGraph {
    std::vector<ad::Var> increments;   // v^l
    std::vector<ad::Var> inputs;       // moving image fed to level l (warped by level l-1)
    ad::LossGraph loss;                // accumulated fields, warps and objective
    ad::Var final_svf;                 // full-resolution SVF (smoothed when enabled)
};

CascadeGraph cascade_forward(ad::Tape& tape, ModelParams& params,
                             std::span<const Volume> fixed_pyr,
                             std::span<const Volume> moving_pyr, const CascadeOptions& opts);

} // namespace mdreg
