#pragma once

#include "mdreg/field.hpp"
#include "mdreg/field_ops.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mdreg::ad {

/// A trainable value with a gradient buffer of identical shape.
struct Parameter {
    Field value;
    Field grad;

    Parameter() = default;
    explicit Parameter(Field v) : value(std::move(v)), grad(value.shape(), value.channels()) {}
    void zero_grad();
};

class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    const Field& value() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Append-only record of primitive applications.
///
/// A tape built with `record_gradients == false` keeps forward values only;
/// inference runs on such a tape and `adjoint_count()` stays zero.
class Tape {
public:
    using Adjoint = std::function<void(Tape&, const Field& grad_out)>;

    explicit Tape(bool record_gradients = true) : record_gradients_(record_gradients) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Field value);
    Var watch(Parameter& p);
    Var record(const char* primitive, Field value, std::span<const Var> inputs, Adjoint adjoint);
    Var record(const char* primitive, Field value, std::initializer_list<Var> inputs,
               Adjoint adjoint)
    {
        return record(primitive, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                      std::move(adjoint));
    }

    const Field& value(Var v) const { return nodes_[v.id()].value; }
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

    /// Adds `contribution` into the gradient of `target` if it is differentiable.
    void accumulate(Var target, const Field& contribution);
    /// Mutable gradient buffer (zero-initialised on first use).
    Field& grad_buffer(Var target);

    /// Reverse sweep from a scalar; adds into the grad of every watched Parameter.
    void backward(Var loss);

    bool records_gradients() const { return record_gradients_; }
    std::size_t size() const { return nodes_.size(); }
    std::size_t adjoint_count() const { return adjoint_count_; }
    const std::string& primitive(Var v) const { return nodes_[v.id()].primitive; }

private:
    struct Node {
        std::string primitive;
        Field value;
        bool requires_grad = false;
        Adjoint adjoint;
        Parameter* param = nullptr;
    };

    std::deque<Node> nodes_;
    std::vector<Field> grads_;
    bool record_gradients_ = true;
    bool backward_done_ = false;
    std::size_t adjoint_count_ = 0;
};

// Elementwise arithmetic (operands share shape and channel count).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var leaky_relu(Var a, double slope);

// Reductions to a scalar.
Var sum(Var a);
Var mean(Var a);

/// Channel concatenation of fields on one grid.
Var concat(std::span<const Var> parts);

Var avg_pool_down(Var a);
Var warp(Var image, Var disp);
Var gaussian_smooth(Var a, double sigma, int ksize);
Var resize_linear(Var a, const Shape& target);
Var upsample_linear(Var v, const Shape& target);

/// Convolution with 3-wide kernels on every axis, zero padding, stride 1 or 2.
/// weight: Field(Shape{out, in, 3^rank}, 1); bias: Field(Shape{out}, 1).
Var conv(Var input, Var weight, Var bias, int stride);
/// Stride-2 transposed convolution; output grid is `target` (each axis <= 2x input).
Var conv_transpose(Var input, Var weight, Var bias, const Shape& target);

Var ncc(Var a, Var b);
Var tv_l1(Var v);

/// Max relative error between the tape gradient of `f` with respect to `p` and
/// central differences, over up to `samples` randomly chosen entries.
double grad_check(const std::function<Var(Tape&, Var)>& f, Parameter& p, double h = 1e-3,
                  int samples = 64, std::uint64_t seed = 1);

} // namespace mdreg::ad
