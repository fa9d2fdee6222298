#include "mdreg/field.hpp"

#include <cmath>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mdreg {

namespace {

#if defined(__GLIBC__)
// Field buffers are allocated and freed every iteration; keep them on the heap
// instead of mapping fresh pages for each one.
const bool heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
}();
#endif

} // namespace

Shape::Shape(std::vector<int> dims)
{
    if (dims.empty() || dims.size() > 3) {
        throw FieldError("shape must have 1 to 3 axes, got " + std::to_string(dims.size()));
    }
    rank_ = static_cast<int>(dims.size());
    for (int k = 0; k < rank_; ++k) {
        if (dims[k] < 1) {
            throw FieldError("shape extents must be positive");
        }
        ext_[axis_offset() + k] = dims[k];
    }
}

std::vector<int> Shape::dims() const
{
    std::vector<int> out(rank_);
    for (int k = 0; k < rank_; ++k) {
        out[k] = dim(k);
    }
    return out;
}

std::string Shape::str() const
{
    std::ostringstream os;
    for (int k = 0; k < rank_; ++k) {
        os << (k ? "x" : "") << dim(k);
    }
    return os.str();
}

Field::Field(Shape shape, int channels, double fill)
    : shape_(std::move(shape)), channels_(channels),
      data_(shape_.voxels() * static_cast<std::size_t>(channels), fill)
{
    if (channels < 1) {
        throw FieldError("field needs at least one channel");
    }
}

Field::Field(Shape shape, int channels, std::vector<double> data)
    : shape_(std::move(shape)), channels_(channels), data_(std::move(data))
{
    if (channels < 1) {
        throw FieldError("field needs at least one channel");
    }
    if (data_.size() != shape_.voxels() * static_cast<std::size_t>(channels)) {
        throw FieldError("field data length " + std::to_string(data_.size()) +
                         " does not match " + shape_.str() + " x " +
                         std::to_string(channels));
    }
}

bool Field::all_finite() const
{
    for (double v : data_) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

Volume::Volume(Field f) : Field(std::move(f))
{
    if (channels() != 1) {
        throw FieldError("volume must have exactly one channel");
    }
}

VectorField::VectorField(Field f) : Field(std::move(f))
{
    if (channels() != shape().rank()) {
        throw FieldError("vector field channels (" + std::to_string(channels()) +
                         ") must equal rank (" + std::to_string(shape().rank()) + ")");
    }
}

VectorField VectorField::constant(const Shape& shape, std::span<const double> value)
{
    if (static_cast<int>(value.size()) != shape.rank()) {
        throw FieldError("constant vector must have one entry per axis");
    }
    VectorField f(shape);
    for (int c = 0; c < shape.rank(); ++c) {
        for (double& x : f.channel(c)) {
            x = value[c];
        }
    }
    return f;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what)
{
    if (a != b) {
        throw FieldError(std::string(what) + ": geometry mismatch " + a.str() + " vs " +
                         b.str());
    }
}

} // namespace mdreg
