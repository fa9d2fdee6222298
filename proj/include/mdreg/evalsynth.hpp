#pragma once

#include "mdreg/field.hpp"
#include "mdreg/transform.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <vector>

namespace mdreg {

/// One non-negative label per voxel; 0 is background.
class LabelVolume {
public:
    LabelVolume() = default;
    explicit LabelVolume(Shape shape, std::uint16_t fill = 0)
        : shape_(std::move(shape)), labels_(shape_.voxels(), fill)
    {
    }
    LabelVolume(Shape shape, std::vector<std::uint16_t> labels);

    const Shape& shape() const { return shape_; }
    std::size_t voxels() const { return labels_.size(); }
    std::uint16_t& operator[](std::size_t i) { return labels_[i]; }
    std::uint16_t operator[](std::size_t i) const { return labels_[i]; }
    const std::vector<std::uint16_t>& raw() const { return labels_; }
    std::vector<std::uint16_t>& raw() { return labels_; }

    std::set<int> vocabulary() const;
    bool operator==(const LabelVolume&) const = default;

private:
    Shape shape_;
    std::vector<std::uint16_t> labels_;
};

struct DiceResult {
    std::map<int, double> per_label;
    double mean = 0.0;
};

/// Per-label Dice. With no labels given, every non-zero label present in either input.
/// Labels absent from both volumes are skipped.
DiceResult dice(const LabelVolume& a, const LabelVolume& b, const std::vector<int>& labels = {});

/// Nearest-neighbour pull-back: out(x) = lv(round(clamp(x + disp(x)))).
LabelVolume warp_labels(const LabelVolume& lv, const DeformationField& d);

struct EndpointError {
    double mean = 0.0;
    double max = 0.0;
};

/// Voxel mask of the grid minus a border of `margin` voxels on every axis.
std::vector<bool> interior_mask(const Shape& shape, int margin = 4);

EndpointError endpoint_error(const DeformationField& est, const DeformationField& gt,
                             const std::vector<bool>& mask = {});

struct SynthOptions {
    double noise = 0.0;                   // intensity noise standard deviation
    std::vector<double> translation;      // constant velocity added to the random field
    std::optional<double> field_sigma;    // default: smallest axis / 4
    int steps = 7;
    std::optional<std::uint64_t> template_seed; // default: the blobs come from `seed` too
};

struct SynthPair {
    Volume fixed;
    Volume moving;
    VectorField svf;         // ground-truth stationary velocity
    DeformationField forward; // fixed(x) = moving(x + forward.disp(x))
    LabelVolume fixed_labels;
    LabelVolume moving_labels;
    std::uint64_t seed = 0;
};

/// Blob template as the moving image, a fold-free random SVF, and the fixed image
/// obtained by warping the template through the SVF's flow.
SynthPair synth_pair(std::uint64_t seed, const Shape& shape, double magnitude, int blobs,
                     const SynthOptions& opts = {});

} // namespace mdreg
