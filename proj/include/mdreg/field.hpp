#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdreg {

/// Error raised for malformed inputs: wrong geometry, too-small grids, bad parameters.
class FieldError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values reached a computation that requires finite input.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Regular grid of 1, 2 or 3 axes. Axis 0 is slowest-varying in memory.
///
/// Kernels work on a padded 3-axis view where missing leading axes have
/// extent 1; `ext()` returns that view and `axis_offset()` maps an actual
/// axis k onto padded axis k + axis_offset().
class Shape {
public:
    Shape() = default;
    explicit Shape(std::vector<int> dims);
    Shape(std::initializer_list<int> dims) : Shape(std::vector<int>(dims)) {}

    int rank() const { return rank_; }
    int dim(int axis) const { return ext_[axis_offset() + axis]; }
    std::vector<int> dims() const;
    const std::array<int, 3>& ext() const { return ext_; }
    int axis_offset() const { return 3 - rank_; }
    std::size_t voxels() const
    {
        return static_cast<std::size_t>(ext_[0]) * ext_[1] * ext_[2];
    }
    std::size_t index(int i0, int i1, int i2) const
    {
        return (static_cast<std::size_t>(i0) * ext_[1] + i1) * ext_[2] + i2;
    }

    std::string str() const;
    bool operator==(const Shape&) const = default;

private:
    int rank_ = 0;
    std::array<int, 3> ext_{1, 1, 1};
};

/// Dense multi-channel field, channel-major (all voxels of channel 0 first).
/// Values are 64-bit; 32-bit data only appears at the file boundary.
class Field {
public:
    Field() = default;
    Field(Shape shape, int channels, double fill = 0.0);
    Field(Shape shape, int channels, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    int channels() const { return channels_; }
    std::size_t voxels() const { return shape_.voxels(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    std::span<double> channel(int c) { return {data_.data() + c * voxels(), voxels()}; }
    std::span<const double> channel(int c) const
    {
        return {data_.data() + c * voxels(), voxels()};
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(int c, std::size_t voxel) { return data_[c * voxels() + voxel]; }
    double at(int c, std::size_t voxel) const { return data_[c * voxels() + voxel]; }

    bool all_finite() const;
    bool operator==(const Field&) const = default;

    static Field scalar(double value) { return Field(Shape{1}, 1, value); }

private:
    Shape shape_;
    int channels_ = 0;
    std::vector<double> data_;
};

/// Single-channel scalar field (an image at one pyramid level).
class Volume : public Field {
public:
    Volume() = default;
    explicit Volume(Shape shape, double fill = 0.0) : Field(std::move(shape), 1, fill) {}
    Volume(Shape shape, std::vector<double> data) : Field(std::move(shape), 1, std::move(data)) {}
    explicit Volume(Field f);
};

/// Vector field with one channel per spatial axis, in voxels of its own grid.
class VectorField : public Field {
public:
    VectorField() = default;
    explicit VectorField(Shape shape, double fill = 0.0)
        : Field(shape, shape.rank(), fill)
    {
    }
    VectorField(Shape shape, std::vector<double> data)
        : Field(shape, shape.rank(), std::move(data))
    {
    }
    explicit VectorField(Field f);

    static VectorField constant(const Shape& shape, std::span<const double> value);
};

void require_same_shape(const Shape& a, const Shape& b, const char* what);

} // namespace mdreg
