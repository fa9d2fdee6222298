#pragma once

#include "mdreg/autodiff.hpp"
#include "mdreg/field.hpp"

#include <span>
#include <string>
#include <vector>

namespace mdreg {

inline constexpr double kNccEpsilon = 1e-10;

/// Global normalized cross-correlation of two single-channel fields.
/// Constant inputs give 0.
double ncc(const Field& a, const Field& b);
/// Writes d ncc / d a and d ncc / d b into ga, gb (overwritten).
void ncc_gradient(const Field& a, const Field& b, Field& ga, Field& gb);

/// Mean over voxels of the summed absolute forward differences (all channels, all axes).
double tv_l1(const Field& v);
/// Sub-gradient of tv_l1, sign(0) = 0. Overwrites g.
void tv_l1_gradient(const Field& v, Field& g);

/// Velocity grid that pairs with an image grid: one pooling step coarser.
Shape velocity_shape(const Shape& image_shape);

/// acc[0] = incr[0]; acc[l] = upsample(acc[l-1]) + incr[l]. Grids must be non-decreasing.
std::vector<VectorField> accumulate_velocities(std::span<const VectorField> increments);

struct LossOptions {
    double lambda = 0.35;
    int steps = 7;
    bool smoothing = true;
    double sigma = 1.732;
    int ksize = 3;
};

struct LossBreakdown {
    std::vector<double> forward;  // S(fixed, moving o phi) per level
    std::vector<double> backward; // S(moving, fixed o phi^-1) per level
    std::vector<double> reg;      // R(v^l) per level
    double lambda = 0.0;
    double total = 0.0;

    /// Name of the first non-finite term ("" when all are finite).
    std::string first_nonfinite() const;
};

LossBreakdown mdreg_loss(std::span<const Volume> fixed_pyr, std::span<const Volume> moving_pyr,
                         std::span<const VectorField> increments, const LossOptions& opts);

namespace ad {

Var accumulate(Var coarse_accumulated, Var increment);

struct LevelGraph {
    Var accumulated; // on the velocity grid
    Var svf;         // on the image grid; smoothed at the finest level when enabled
    Var forward;     // displacement of phi(svf)
    Var inverse;     // displacement of phi(-svf)
    Var warped_moving;
    Var warped_fixed;
};

struct LossGraph {
    Var total;
    std::vector<LevelGraph> levels;
    LossBreakdown breakdown;
};

LossGraph mdreg_loss(Tape& tape, std::span<const Volume> fixed_pyr,
                     std::span<const Volume> moving_pyr, std::span<const Var> increments,
                     const LossOptions& opts);

} // namespace ad

} // namespace mdreg
