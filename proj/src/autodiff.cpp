#include "mdreg/autodiff.hpp"

#include "mdreg/objective.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <numeric>
#include <random>

namespace mdreg::ad {

void Parameter::zero_grad()
{
    grad = Field(value.shape(), value.channels());
}

const Field& Var::value() const
{
    return tape_->value(*this);
}

Var Tape::constant(Field value)
{
    nodes_.push_back({"constant", std::move(value), false, {}, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::watch(Parameter& p)
{
    nodes_.push_back({"parameter", p.value, record_gradients_, {}, &p});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* primitive, Field value, std::span<const Var> inputs,
                 Adjoint adjoint)
{
    bool needs = false;
    if (record_gradients_) {
        for (Var in : inputs) {
            assert(in.tape_ == this && in.id_ < nodes_.size());
            needs = needs || nodes_[in.id_].requires_grad;
        }
    }
    Node node{primitive, std::move(value), needs, {}, nullptr};
    if (needs) {
        node.adjoint = std::move(adjoint);
        ++adjoint_count_;
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Field& Tape::grad_buffer(Var target)
{
    if (grads_.size() < nodes_.size()) {
        grads_.resize(nodes_.size());
    }
    Field& g = grads_[target.id_];
    if (g.empty()) {
        const Field& v = nodes_[target.id_].value;
        g = Field(v.shape(), v.channels());
    }
    return g;
}

void Tape::accumulate(Var target, const Field& contribution)
{
    if (!nodes_[target.id_].requires_grad) {
        return;
    }
    Field& g = grad_buffer(target);
    assert(g.size() == contribution.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += contribution[i];
    }
}

void Tape::backward(Var loss)
{
    if (loss.tape_ != this) {
        throw FieldError("backward: loss was recorded on a different tape");
    }
    if (nodes_[loss.id_].value.size() != 1) {
        throw FieldError("backward: loss must be a scalar, got " +
                         std::to_string(nodes_[loss.id_].value.size()) + " values");
    }
    if (backward_done_) {
        throw FieldError("backward: tape has already been differentiated");
    }
    backward_done_ = true;
    if (!nodes_[loss.id_].requires_grad) {
        return;
    }
    grads_.assign(nodes_.size(), Field{});
    grad_buffer(loss)[0] = 1.0;
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (grads_[i].empty()) {
            continue;
        }
        if (node.adjoint) {
            node.adjoint(*this, grads_[i]);
        } else if (node.param) {
            Field& pg = node.param->grad;
            if (pg.size() != grads_[i].size()) {
                pg = Field(node.param->value.shape(), node.param->value.channels());
            }
            for (std::size_t k = 0; k < pg.size(); ++k) {
                pg[k] += grads_[i][k];
            }
        }
        grads_[i] = Field{};
    }
}

namespace {

void require_same(const Field& a, const Field& b, const char* what)
{
    require_same_shape(a.shape(), b.shape(), what);
    if (a.channels() != b.channels()) {
        throw FieldError(std::string(what) + ": channel count mismatch");
    }
}

Field map(const Field& a, auto&& fn)
{
    Field out(a.shape(), a.channels());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = fn(a[i]);
    }
    return out;
}

Field zip(const Field& a, const Field& b, auto&& fn)
{
    Field out(a.shape(), a.channels());
    for (std::size_t i = 0; i < a.size(); ++i) {
        out[i] = fn(a[i], b[i]);
    }
    return out;
}

} // namespace

Var add(Var a, Var b)
{
    require_same(a.value(), b.value(), "add");
    return a.tape().record("add", zip(a.value(), b.value(), std::plus<>{}), {a, b},
                           [a, b](Tape& t, const Field& g) {
                               t.accumulate(a, g);
                               t.accumulate(b, g);
                           });
}

Var sub(Var a, Var b)
{
    require_same(a.value(), b.value(), "sub");
    return a.tape().record("sub", zip(a.value(), b.value(), std::minus<>{}), {a, b},
                           [a, b](Tape& t, const Field& g) {
                               t.accumulate(a, g);
                               t.accumulate(b, map(g, std::negate<>{}));
                           });
}

Var mul(Var a, Var b)
{
    require_same(a.value(), b.value(), "mul");
    return a.tape().record("mul", zip(a.value(), b.value(), std::multiplies<>{}), {a, b},
                           [a, b](Tape& t, const Field& g) {
                               t.accumulate(a, zip(g, b.value(), std::multiplies<>{}));
                               t.accumulate(b, zip(g, a.value(), std::multiplies<>{}));
                           });
}

Var neg(Var a)
{
    return scale(a, -1.0);
}

Var scale(Var a, double s)
{
    return a.tape().record("scale", map(a.value(), [s](double x) { return s * x; }), {a},
                           [a, s](Tape& t, const Field& g) {
                               t.accumulate(a, map(g, [s](double x) { return s * x; }));
                           });
}

Var leaky_relu(Var a, double slope)
{
    auto f = [slope](double x) { return x > 0.0 ? x : slope * x; };
    return a.tape().record("leaky_relu", map(a.value(), f), {a},
                           [a, slope](Tape& t, const Field& g) {
                               t.accumulate(a, zip(g, a.value(), [slope](double gi, double x) {
                                                return x > 0.0 ? gi : slope * gi;
                                            }));
                           });
}

Var sum(Var a)
{
    const auto& d = a.value().raw();
    const double s = std::accumulate(d.begin(), d.end(), 0.0);
    return a.tape().record("sum", Field::scalar(s), {a}, [a](Tape& t, const Field& g) {
        const Field& v = a.value();
        t.accumulate(a, Field(v.shape(), v.channels(), g[0]));
    });
}

Var mean(Var a)
{
    return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var concat(std::span<const Var> parts)
{
    if (parts.empty()) {
        throw FieldError("concat: nothing to concatenate");
    }
    const Shape& shape = parts[0].value().shape();
    int channels = 0;
    for (Var p : parts) {
        require_same_shape(shape, p.value().shape(), "concat");
        channels += p.value().channels();
    }
    Field out(shape, channels);
    std::size_t offset = 0;
    for (Var p : parts) {
        std::copy(p.value().raw().begin(), p.value().raw().end(), out.raw().begin() + offset);
        offset += p.value().size();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts[0].tape().record("concat", std::move(out), inputs,
                                  [inputs](Tape& t, const Field& g) {
                                      std::size_t off = 0;
                                      for (Var p : inputs) {
                                          const Field& v = p.value();
                                          if (t.requires_grad(p)) {
                                              Field part(v.shape(), v.channels());
                                              std::copy(g.raw().begin() + off,
                                                        g.raw().begin() + off + v.size(),
                                                        part.raw().begin());
                                              t.accumulate(p, part);
                                          }
                                          off += v.size();
                                      }
                                  });
}

namespace {

Var separable(const char* name, Var a, std::vector<AxisOperator> ops)
{
    Field out = apply_separable(a.value(), ops);
    return a.tape().record(name, std::move(out), {a},
                           [a, ops = std::move(ops)](Tape& t, const Field& g) {
                               t.accumulate(a, apply_separable_adjoint(g, ops));
                           });
}

} // namespace

Var avg_pool_down(Var a)
{
    std::vector<AxisOperator> ops;
    for (int k = 0; k < a.value().shape().rank(); ++k) {
        ops.push_back(pool_operator(a.value().shape().dim(k)));
    }
    return separable("avg_pool_down", a, std::move(ops));
}

Var gaussian_smooth(Var a, double sigma, int ksize)
{
    const auto w = gaussian_weights(sigma, ksize);
    std::vector<AxisOperator> ops;
    for (int k = 0; k < a.value().shape().rank(); ++k) {
        ops.push_back(smooth_operator(a.value().shape().dim(k), w));
    }
    return separable("gaussian_smooth", a, std::move(ops));
}

Var resize_linear(Var a, const Shape& target)
{
    if (target.rank() != a.value().shape().rank()) {
        throw FieldError("resize: rank mismatch");
    }
    std::vector<AxisOperator> ops;
    for (int k = 0; k < target.rank(); ++k) {
        ops.push_back(resize_operator(a.value().shape().dim(k), target.dim(k)));
    }
    return separable("resize_linear", a, std::move(ops));
}

Var upsample_linear(Var v, const Shape& target)
{
    if (v.value().channels() != v.value().shape().rank()) {
        throw FieldError("upsample_linear expects a vector field");
    }
    const auto scales = upsample_scales(v.value().shape(), target);
    Var r = resize_linear(v, target);
    Field out = r.value();
    for (int c = 0; c < out.channels(); ++c) {
        for (double& x : out.channel(c)) {
            x *= scales[c];
        }
    }
    return v.tape().record("upsample_linear", std::move(out), {r},
                           [r, scales](Tape& t, const Field& g) {
                               Field gs = g;
                               for (int c = 0; c < gs.channels(); ++c) {
                                   for (double& x : gs.channel(c)) {
                                       x *= scales[c];
                                   }
                               }
                               t.accumulate(r, gs);
                           });
}

Var warp(Var image, Var disp)
{
    return image.tape().record("warp", mdreg::warp(image.value(), disp.value()), {image, disp},
                               [image, disp](Tape& t, const Field& g) {
                                   const bool gi = t.requires_grad(image);
                                   const bool gd = t.requires_grad(disp);
                                   warp_adjoint(image.value(), disp.value(), g,
                                                gi ? &t.grad_buffer(image) : nullptr,
                                                gd ? &t.grad_buffer(disp) : nullptr);
                               });
}

namespace {

// For each tap k in {0,1,2} along one axis: the (output, input) index pairs it connects.
using TapPairs = std::array<std::vector<std::pair<int, int>>, 3>;

TapPairs conv_pairs(int n_in, int n_out, int stride)
{
    TapPairs pairs;
    for (int k = 0; k < 3; ++k) {
        for (int o = 0; o < n_out; ++o) {
            const int i = o * stride + k - 1;
            if (i >= 0 && i < n_in) {
                pairs[k].emplace_back(o, i);
            }
        }
    }
    return pairs;
}

TapPairs transpose_pairs(int n_in, int n_out)
{
    TapPairs pairs;
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < n_in; ++i) {
            const int o = 2 * i + k - 1;
            if (o >= 0 && o < n_out) {
                pairs[k].emplace_back(o, i);
            }
        }
    }
    return pairs;
}

TapPairs single_pairs()
{
    TapPairs pairs;
    pairs[1].emplace_back(0, 0);
    return pairs;
}

struct ConvGeometry {
    Shape in_shape;
    Shape out_shape;
    std::array<TapPairs, 3> axes; // per padded axis
    int taps = 1;
    std::vector<std::array<int, 3>> tap_offsets;
};

ConvGeometry make_geometry(const Shape& in, const Shape& out, bool transposed, int stride)
{
    ConvGeometry geo{in, out, {}, 1, {}};
    const int off = in.axis_offset();
    for (int a = 0; a < 3; ++a) {
        if (a < off) {
            geo.axes[a] = single_pairs();
        } else if (transposed) {
            geo.axes[a] = transpose_pairs(in.ext()[a], out.ext()[a]);
        } else {
            geo.axes[a] = conv_pairs(in.ext()[a], out.ext()[a], stride);
        }
    }
    for (int k0 = 0; k0 < 3; ++k0) {
        for (int k1 = 0; k1 < 3; ++k1) {
            for (int k2 = 0; k2 < 3; ++k2) {
                const std::array<int, 3> k{k0, k1, k2};
                bool valid = true;
                for (int a = 0; a < off; ++a) {
                    valid = valid && k[a] == 1;
                }
                if (valid) {
                    geo.tap_offsets.push_back(k);
                }
            }
        }
    }
    geo.taps = static_cast<int>(geo.tap_offsets.size());
    return geo;
}

// Visits every (output voxel, input voxel) pair connected by a tap.
template <typename Fn>
void for_each_tap_pair(const ConvGeometry& geo, const std::array<int, 3>& k, Fn&& fn)
{
    const auto& oe = geo.out_shape.ext();
    const auto& ie = geo.in_shape.ext();
    for (auto [o0, i0] : geo.axes[0][k[0]]) {
        for (auto [o1, i1] : geo.axes[1][k[1]]) {
            const std::size_t orow = (static_cast<std::size_t>(o0) * oe[1] + o1) * oe[2];
            const std::size_t irow = (static_cast<std::size_t>(i0) * ie[1] + i1) * ie[2];
            fn(orow, irow, geo.axes[2][k[2]]);
        }
    }
}

Field conv_forward(const ConvGeometry& geo, const Field& in, const Field& w, const Field& b,
                   int out_ch)
{
    const int in_ch = in.channels();
    Field out(geo.out_shape, out_ch);
    const std::size_t on = out.voxels();
    const std::size_t in_n = in.voxels();
    for (int co = 0; co < out_ch; ++co) {
        double* dst = out.data().data() + co * on;
        std::fill(dst, dst + on, b[co]);
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* src = in.data().data() + ci * in_n;
            for (int tap = 0; tap < geo.taps; ++tap) {
                const double wv = w[(static_cast<std::size_t>(co) * in_ch + ci) * geo.taps + tap];
                for_each_tap_pair(geo, geo.tap_offsets[tap],
                                  [&](std::size_t orow, std::size_t irow, const auto& inner) {
                                      for (auto [o2, i2] : inner) {
                                          dst[orow + o2] += wv * src[irow + i2];
                                      }
                                  });
            }
        }
    }
    return out;
}

void conv_backward(const ConvGeometry& geo, const Field& in, const Field& w, const Field& g,
                   Field* gin, Field* gw, Field* gb)
{
    const int in_ch = in.channels();
    const int out_ch = g.channels();
    const std::size_t on = g.voxels();
    const std::size_t in_n = in.voxels();
    for (int co = 0; co < out_ch; ++co) {
        const double* go = g.data().data() + co * on;
        if (gb) {
            double s = 0.0;
            for (std::size_t i = 0; i < on; ++i) {
                s += go[i];
            }
            (*gb)[co] += s;
        }
        for (int ci = 0; ci < in_ch; ++ci) {
            const double* src = in.data().data() + ci * in_n;
            double* gsrc = gin ? gin->data().data() + ci * in_n : nullptr;
            for (int tap = 0; tap < geo.taps; ++tap) {
                const std::size_t wi = (static_cast<std::size_t>(co) * in_ch + ci) * geo.taps + tap;
                const double wv = w[wi];
                double acc = 0.0;
                for_each_tap_pair(geo, geo.tap_offsets[tap],
                                  [&](std::size_t orow, std::size_t irow, const auto& inner) {
                                      for (auto [o2, i2] : inner) {
                                          const double gv = go[orow + o2];
                                          acc += gv * src[irow + i2];
                                          if (gsrc) {
                                              gsrc[irow + i2] += wv * gv;
                                          }
                                      }
                                  });
                if (gw) {
                    (*gw)[wi] += acc;
                }
            }
        }
    }
}

int check_weights(const Field& in, const Field& w, const Field& b, int taps)
{
    const auto& ws = w.shape();
    if (ws.rank() != 3 || ws.dim(1) != in.channels() || ws.dim(2) != taps) {
        throw FieldError("conv: weight shape " + ws.str() + " does not fit " +
                         std::to_string(in.channels()) + " input channels and " +
                         std::to_string(taps) + " taps");
    }
    if (b.size() != static_cast<std::size_t>(ws.dim(0))) {
        throw FieldError("conv: bias length must equal the output channel count");
    }
    return ws.dim(0);
}

Var conv_common(const char* name, Var input, Var weight, Var bias, ConvGeometry geo)
{
    const int out_ch = check_weights(input.value(), weight.value(), bias.value(), geo.taps);
    Field out = conv_forward(geo, input.value(), weight.value(), bias.value(), out_ch);
    return input.tape().record(
        name, std::move(out), {input, weight, bias},
        [input, weight, bias, geo = std::move(geo)](Tape& t, const Field& g) {
            conv_backward(geo, input.value(), weight.value(), g,
                          t.requires_grad(input) ? &t.grad_buffer(input) : nullptr,
                          t.requires_grad(weight) ? &t.grad_buffer(weight) : nullptr,
                          t.requires_grad(bias) ? &t.grad_buffer(bias) : nullptr);
        });
}

} // namespace

Var conv(Var input, Var weight, Var bias, int stride)
{
    if (stride != 1 && stride != 2) {
        throw FieldError("conv: stride must be 1 or 2");
    }
    const Shape& in = input.value().shape();
    std::vector<int> od = in.dims();
    for (int& d : od) {
        d = (d + stride - 1) / stride;
    }
    return conv_common("conv", input, weight, bias, make_geometry(in, Shape(od), false, stride));
}

Var conv_transpose(Var input, Var weight, Var bias, const Shape& target)
{
    const Shape& in = input.value().shape();
    if (target.rank() != in.rank()) {
        throw FieldError("conv_transpose: rank mismatch");
    }
    for (int k = 0; k < in.rank(); ++k) {
        if (target.dim(k) > 2 * in.dim(k) || target.dim(k) < 2 * in.dim(k) - 1) {
            throw FieldError("conv_transpose: target " + target.str() +
                             " is not a 2x refinement of " + in.str());
        }
    }
    return conv_common("conv_transpose", input, weight, bias,
                       make_geometry(in, target, true, 2));
}

Var ncc(Var a, Var b)
{
    require_same(a.value(), b.value(), "ncc");
    const double value = mdreg::ncc(a.value(), b.value());
    return a.tape().record("ncc", Field::scalar(value), {a, b},
                           [a, b](Tape& t, const Field& g) {
                               Field ga(a.value().shape(), 1);
                               Field gb(b.value().shape(), 1);
                               ncc_gradient(a.value(), b.value(), ga, gb);
                               for (double& x : ga.raw()) {
                                   x *= g[0];
                               }
                               for (double& x : gb.raw()) {
                                   x *= g[0];
                               }
                               t.accumulate(a, ga);
                               t.accumulate(b, gb);
                           });
}

Var tv_l1(Var v)
{
    const double value = mdreg::tv_l1(v.value());
    return v.tape().record("tv_l1", Field::scalar(value), {v}, [v](Tape& t, const Field& g) {
        Field gv(v.value().shape(), v.value().channels());
        tv_l1_gradient(v.value(), gv);
        for (double& x : gv.raw()) {
            x *= g[0];
        }
        t.accumulate(v, gv);
    });
}

double grad_check(const std::function<Var(Tape&, Var)>& f, Parameter& p, double h, int samples,
                  std::uint64_t seed)
{
    auto evaluate = [&](const Field& value) {
        Tape tape(false);
        Parameter probe(value);
        Var out = f(tape, tape.watch(probe));
        const double y = out.value()[0];
        if (!std::isfinite(y)) {
            throw NumericalError("grad_check: non-finite forward value");
        }
        return y;
    };

    p.zero_grad();
    {
        Tape tape;
        Var out = f(tape, tape.watch(p));
        if (!std::isfinite(out.value()[0])) {
            throw NumericalError("grad_check: non-finite forward value");
        }
        tape.backward(out);
    }

    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (static_cast<std::size_t>(samples) < idx.size()) {
        std::mt19937_64 rng(seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(samples);
    }

    double worst = 0.0;
    Field probe = p.value;
    for (std::size_t i : idx) {
        const double x = probe[i];
        probe[i] = x + h;
        const double up = evaluate(probe);
        probe[i] = x - h;
        const double down = evaluate(probe);
        probe[i] = x;
        const double central = (up - down) / (2.0 * h);
        const double analytic = p.grad[i];
        const double err =
            std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace mdreg::ad
