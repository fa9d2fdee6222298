#include "mdreg/field_ops.hpp"

#include <algorithm>
#include <cmath>

namespace mdreg {

AxisOperator AxisOperator::identity(int n)
{
    AxisOperator op;
    op.in_size = n;
    op.out_size = n;
    op.rows.resize(n);
    for (int i = 0; i < n; ++i) {
        op.rows[i] = {{i, 1.0}};
    }
    return op;
}

AxisOperator AxisOperator::transposed() const
{
    AxisOperator t;
    t.in_size = out_size;
    t.out_size = in_size;
    t.rows.resize(in_size);
    for (int j = 0; j < out_size; ++j) {
        for (auto [i, w] : rows[j]) {
            t.rows[i].emplace_back(j, w);
        }
    }
    return t;
}

AxisOperator pool_operator(int n)
{
    if (n < 3) {
        throw FieldError("average pooling needs at least 3 samples per axis, got " +
                         std::to_string(n));
    }
    AxisOperator op;
    op.in_size = n;
    op.out_size = (n + 1) / 2;
    op.rows.resize(op.out_size);
    for (int j = 0; j < op.out_size; ++j) {
        const int lo = std::max(0, 2 * j - 1);
        const int hi = std::min(n - 1, 2 * j + 1);
        const double w = 1.0 / (hi - lo + 1);
        for (int i = lo; i <= hi; ++i) {
            op.rows[j].emplace_back(i, w);
        }
    }
    return op;
}

AxisOperator smooth_operator(int n, std::span<const double> weights)
{
    const int half = static_cast<int>(weights.size()) / 2;
    AxisOperator op;
    op.in_size = n;
    op.out_size = n;
    op.rows.resize(n);
    for (int j = 0; j < n; ++j) {
        for (int r = -half; r <= half; ++r) {
            const int i = std::clamp(j + r, 0, n - 1);
            auto& row = op.rows[j];
            auto it = std::find_if(row.begin(), row.end(),
                                   [i](const auto& e) { return e.first == i; });
            if (it == row.end()) {
                row.emplace_back(i, weights[r + half]);
            } else {
                it->second += weights[r + half];
            }
        }
    }
    return op;
}

AxisOperator resize_operator(int n, int m)
{
    AxisOperator op;
    op.in_size = n;
    op.out_size = m;
    op.rows.resize(m);
    for (int j = 0; j < m; ++j) {
        if (n == 1) {
            op.rows[j] = {{0, 1.0}};
            continue;
        }
        const double p = m == 1 ? 0.0 : static_cast<double>(j) * (n - 1) / (m - 1);
        const int lo = std::min(static_cast<int>(std::floor(p)), n - 2);
        const double t = p - lo;
        op.rows[j] = {{lo, 1.0 - t}, {lo + 1, t}};
    }
    return op;
}

namespace {

// Applies op along padded axis `axis` of every channel.
Field apply_along(const Field& f, int axis, const AxisOperator& op)
{
    std::array<int, 3> ext = f.shape().ext();
    const int n = ext[axis];
    if (n != op.in_size) {
        throw FieldError("axis operator expects " + std::to_string(op.in_size) +
                         " samples, field has " + std::to_string(n));
    }
    std::array<int, 3> out_ext = ext;
    out_ext[axis] = op.out_size;
    const int rank = f.shape().rank();
    std::vector<int> dims(out_ext.begin() + (3 - rank), out_ext.end());
    Field out(Shape(dims), f.channels());

    std::size_t outer = 1;
    for (int a = 0; a < axis; ++a) {
        outer *= ext[a];
    }
    std::size_t inner = 1;
    for (int a = axis + 1; a < 3; ++a) {
        inner *= ext[a];
    }
    for (int c = 0; c < f.channels(); ++c) {
        const auto src = f.channel(c);
        auto dst = out.channel(c);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* s = src.data() + o * n * inner;
            double* d = dst.data() + o * op.out_size * inner;
            for (int j = 0; j < op.out_size; ++j) {
                double* drow = d + j * inner;
                for (auto [i, w] : op.rows[j]) {
                    const double* srow = s + i * inner;
                    for (std::size_t k = 0; k < inner; ++k) {
                        drow[k] += w * srow[k];
                    }
                }
            }
        }
    }
    return out;
}

} // namespace

Field apply_separable(const Field& f, std::span<const AxisOperator> ops)
{
    const int rank = f.shape().rank();
    if (static_cast<int>(ops.size()) != rank) {
        throw FieldError("need one axis operator per axis");
    }
    Field out = f;
    for (int k = 0; k < rank; ++k) {
        out = apply_along(out, f.shape().axis_offset() + k, ops[k]);
    }
    return out;
}

Field apply_separable_adjoint(const Field& g, std::span<const AxisOperator> ops)
{
    std::vector<AxisOperator> t;
    t.reserve(ops.size());
    for (const auto& op : ops) {
        t.push_back(op.transposed());
    }
    return apply_separable(g, t);
}

Shape pooled_shape(const Shape& s)
{
    std::vector<int> dims = s.dims();
    for (int& d : dims) {
        if (d < 3) {
            throw FieldError("average pooling needs every axis >= 3, got " + s.str());
        }
        d = (d + 1) / 2;
    }
    return Shape(dims);
}

Field avg_pool_down(const Field& f)
{
    std::vector<AxisOperator> ops;
    for (int k = 0; k < f.shape().rank(); ++k) {
        ops.push_back(pool_operator(f.shape().dim(k)));
    }
    return apply_separable(f, ops);
}

Volume avg_pool_down(const Volume& v)
{
    return Volume(avg_pool_down(static_cast<const Field&>(v)));
}

std::vector<Shape> pyramid_shapes(const Shape& s, int levels)
{
    if (levels < 1) {
        throw FieldError("pyramid needs at least one level");
    }
    std::vector<Shape> shapes{s};
    for (int l = 1; l < levels; ++l) {
        shapes.insert(shapes.begin(), pooled_shape(shapes.front()));
    }
    for (int k = 0; k < s.rank(); ++k) {
        if (shapes.front().dim(k) < 4) {
            throw FieldError("a " + std::to_string(levels) + "-level pyramid of " + s.str() +
                             " shrinks an axis below 4 voxels");
        }
    }
    return shapes;
}

std::vector<Volume> build_pyramid(const Volume& v, int levels)
{
    pyramid_shapes(v.shape(), levels);
    std::vector<Volume> pyr{v};
    for (int l = 1; l < levels; ++l) {
        pyr.insert(pyr.begin(), avg_pool_down(pyr.front()));
    }
    return pyr;
}

namespace {

struct AxisCell {
    int lo = 0;
    int hi = 0;
    double t = 0.0;
    bool differentiable = false;
};

inline AxisCell locate(double p, int n)
{
    if (n == 1) {
        return {};
    }
    AxisCell cell;
    cell.differentiable = p >= 0.0 && p <= n - 1;
    p = std::clamp(p, 0.0, static_cast<double>(n - 1));
    cell.lo = std::min(static_cast<int>(std::floor(p)), n - 2);
    cell.hi = cell.lo + 1;
    cell.t = p - cell.lo;
    return cell;
}

// Eight-corner stencil of a (possibly padded) 3-axis lookup.
struct Stencil {
    std::array<std::size_t, 8> index;
    std::array<double, 8> weight;
    std::array<AxisCell, 3> cell;
    std::array<std::size_t, 3> stride;

    Stencil(const Shape& shape, const std::array<double, 3>& p)
    {
        const auto& ext = shape.ext();
        stride = {static_cast<std::size_t>(ext[1]) * ext[2], static_cast<std::size_t>(ext[2]), 1};
        for (int a = 0; a < 3; ++a) {
            cell[a] = locate(p[a], ext[a]);
        }
        const std::size_t base = shape.index(cell[0].lo, cell[1].lo, cell[2].lo);
        const std::size_t step[3] = {(cell[0].hi - cell[0].lo) * stride[0],
                                     (cell[1].hi - cell[1].lo) * stride[1],
                                     static_cast<std::size_t>(cell[2].hi - cell[2].lo)};
        const double w0[2] = {1.0 - cell[0].t, cell[0].t};
        const double w1[2] = {1.0 - cell[1].t, cell[1].t};
        const double w2[2] = {1.0 - cell[2].t, cell[2].t};
        for (int corner = 0; corner < 8; ++corner) {
            const int b0 = (corner >> 2) & 1;
            const int b1 = (corner >> 1) & 1;
            const int b2 = corner & 1;
            index[corner] = base + b0 * step[0] + b1 * step[1] + b2 * step[2];
            weight[corner] = w0[b0] * w1[b1] * w2[b2];
        }
    }

    double eval(const double* values) const
    {
        double s = 0.0;
        for (int k = 0; k < 8; ++k) {
            s += weight[k] * values[index[k]];
        }
        return s;
    }

    // d(eval)/d(position along padded axis a). On an interior grid node the
    // one-sided slopes are averaged (central difference).
    double slope(const double* values, int a) const
    {
        std::array<double, 8> coef;
        slope_coefficients(a, coef);
        return slope(values, a, coef);
    }

    void slope_coefficients(int a, std::array<double, 8>& coef) const
    {
        for (int corner = 0; corner < 8; ++corner) {
            double w = 1.0;
            for (int b = 0; b < 3; ++b) {
                const int bit = (corner >> (2 - b)) & 1;
                if (b == a) {
                    w *= bit ? 1.0 : -1.0;
                } else {
                    w *= bit ? cell[b].t : 1.0 - cell[b].t;
                }
            }
            coef[corner] = w;
        }
    }

    double slope(const double* values, int a, const std::array<double, 8>& coef) const
    {
        if (!cell[a].differentiable) {
            return 0.0;
        }
        double s = 0.0;
        if (cell[a].t != 0.0 || cell[a].lo == 0) {
            for (int k = 0; k < 8; ++k) {
                s += coef[k] * values[index[k]];
            }
            return s;
        }
        const int bit = 1 << (2 - a);
        for (int k = 0; k < 8; ++k) {
            s += 0.5 * coef[k] * values[(k & bit) ? index[k] : index[k] - stride[a]];
        }
        return s;
    }
};

template <typename Fn>
void for_each_displaced(const Field& disp, Fn&& fn)
{
    const Shape& shape = disp.shape();
    const auto& ext = shape.ext();
    const int off = shape.axis_offset();
    std::size_t v = 0;
    for (int i0 = 0; i0 < ext[0]; ++i0) {
        for (int i1 = 0; i1 < ext[1]; ++i1) {
            for (int i2 = 0; i2 < ext[2]; ++i2, ++v) {
                std::array<double, 3> p{double(i0), double(i1), double(i2)};
                for (int c = 0; c < shape.rank(); ++c) {
                    p[off + c] += disp.at(c, v);
                }
                fn(v, p);
            }
        }
    }
}

} // namespace

std::vector<double> sample_linear(const Volume& v, std::span<const double> coords)
{
    const int rank = v.shape().rank();
    if (coords.size() % rank != 0) {
        throw FieldError("coordinate list length must be a multiple of the rank");
    }
    std::vector<double> out(coords.size() / rank);
    for (std::size_t q = 0; q < out.size(); ++q) {
        std::array<double, 3> p{0.0, 0.0, 0.0};
        for (int c = 0; c < rank; ++c) {
            const double x = coords[q * rank + c];
            if (!std::isfinite(x)) {
                throw FieldError("non-finite sample coordinate");
            }
            p[v.shape().axis_offset() + c] = x;
        }
        out[q] = Stencil(v.shape(), p).eval(v.data().data());
    }
    return out;
}

namespace {

void require_displacement(const Field& f, const Field& disp)
{
    require_same_shape(f.shape(), disp.shape(), "warp");
    if (disp.channels() != disp.shape().rank()) {
        throw FieldError("warp: displacement needs one channel per axis");
    }
}

} // namespace

Field warp(const Field& f, const Field& disp)
{
    require_displacement(f, disp);
    Field out(f.shape(), f.channels());
    const std::size_t n = f.voxels();
    for_each_displaced(disp, [&](std::size_t v, const std::array<double, 3>& p) {
        const Stencil st(f.shape(), p);
        for (int c = 0; c < f.channels(); ++c) {
            out[c * n + v] = st.eval(f.data().data() + c * n);
        }
    });
    return out;
}

Volume warp(const Volume& v, const VectorField& disp)
{
    return Volume(warp(static_cast<const Field&>(v), disp));
}

void warp_adjoint(const Field& f, const Field& disp, const Field& grad_out,
                  Field* grad_f, Field* grad_disp)
{
    require_displacement(f, disp);
    const std::size_t n = f.voxels();
    const int off = f.shape().axis_offset();
    const int rank = f.shape().rank();
    double* gd = grad_disp ? grad_disp->data().data() : nullptr;
    for_each_displaced(disp, [&](std::size_t v, const std::array<double, 3>& p) {
        const Stencil st(f.shape(), p);
        std::array<std::array<double, 8>, 3> coef;
        bool have_coef = false;
        for (int c = 0; c < f.channels(); ++c) {
            const double g = grad_out[c * n + v];
            if (g == 0.0) {
                continue;
            }
            if (grad_f) {
                double* gf = grad_f->data().data() + c * n;
                for (int k = 0; k < 8; ++k) {
                    gf[st.index[k]] += g * st.weight[k];
                }
            }
            if (gd) {
                if (!have_coef) {
                    for (int a = 0; a < rank; ++a) {
                        st.slope_coefficients(off + a, coef[a]);
                    }
                    have_coef = true;
                }
                const double* values = f.data().data() + c * n;
                for (int a = 0; a < rank; ++a) {
                    gd[a * n + v] += g * st.slope(values, off + a, coef[a]);
                }
            }
        }
    });
}

std::vector<double> gaussian_weights(double sigma, int ksize)
{
    if (ksize < 1 || ksize % 2 == 0) {
        throw FieldError("gaussian kernel size must be odd, got " + std::to_string(ksize));
    }
    if (!(sigma > 0.0)) {
        throw FieldError("gaussian sigma must be positive");
    }
    std::vector<double> w(ksize);
    const int half = ksize / 2;
    double total = 0.0;
    for (int r = -half; r <= half; ++r) {
        w[r + half] = std::exp(-double(r * r) / (2.0 * sigma * sigma));
        total += w[r + half];
    }
    for (double& x : w) {
        x /= total;
    }
    return w;
}

Field gaussian_smooth(const Field& f, double sigma, int ksize)
{
    const auto w = gaussian_weights(sigma, ksize);
    std::vector<AxisOperator> ops;
    for (int k = 0; k < f.shape().rank(); ++k) {
        ops.push_back(smooth_operator(f.shape().dim(k), w));
    }
    return apply_separable(f, ops);
}

VectorField gaussian_smooth(const VectorField& f, double sigma, int ksize)
{
    return VectorField(gaussian_smooth(static_cast<const Field&>(f), sigma, ksize));
}

Field resize_linear(const Field& f, const Shape& target)
{
    if (target.rank() != f.shape().rank()) {
        throw FieldError("resize target rank differs from source");
    }
    std::vector<AxisOperator> ops;
    for (int k = 0; k < target.rank(); ++k) {
        ops.push_back(resize_operator(f.shape().dim(k), target.dim(k)));
    }
    return apply_separable(f, ops);
}

std::vector<double> upsample_scales(const Shape& source, const Shape& target)
{
    if (source.rank() != target.rank()) {
        throw FieldError("upsample target rank differs from source");
    }
    std::vector<double> s(source.rank());
    for (int k = 0; k < source.rank(); ++k) {
        if (target.dim(k) < source.dim(k)) {
            throw FieldError("upsample target " + target.str() + " is smaller than source " +
                             source.str());
        }
        s[k] = static_cast<double>(target.dim(k)) / source.dim(k);
    }
    return s;
}

VectorField upsample_linear(const VectorField& f, const Shape& target)
{
    const auto scales = upsample_scales(f.shape(), target);
    Field r = resize_linear(f, target);
    for (int c = 0; c < r.channels(); ++c) {
        for (double& x : r.channel(c)) {
            x *= scales[c];
        }
    }
    return VectorField(std::move(r));
}

} // namespace mdreg
