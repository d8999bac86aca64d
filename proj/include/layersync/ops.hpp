#pragma once

// Differentiable kernels over BasicTensor.
//
// Binary ops broadcast over trailing dimensions (numpy rules). Every op that
// sees an input requiring a gradient, with a tape active, records an adjoint
// that accumulates into its inputs' gradient buffers.

#include <algorithm>
#include <array>
#include <climits>
#include <cstdint>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <set>

#include <Eigen/Core>

#include "layersync/tensor.hpp"

namespace layersync {

namespace detail {

inline Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) throw shape_error(op, a, b, "not broadcastable");
        out[i] = da == 1 ? db : da;
    }
    return out;
}

// Broadcast iteration plan over collapsed dimensions: adjacent axes that are
// contiguous (or equally broadcast) in both inputs are merged.
struct BroadcastPlan {
    std::vector<std::size_t> dims, sa, sb;
    std::size_t n = 0;
};

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        stride[i + (rank - in.size())] = in[i] == 1 ? 0 : s;
        s *= in[i];
    }
    return stride;
}

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b, const Shape& out) {
    BroadcastPlan p;
    p.n = numel_of(out);
    const auto sa = broadcast_strides(a, out), sb = broadcast_strides(b, out);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i] == 1) continue;
        if (!p.dims.empty() && p.sa.back() == sa[i] * out[i] && p.sb.back() == sb[i] * out[i]) {
            p.dims.back() *= out[i];
            p.sa.back() = sa[i];
            p.sb.back() = sb[i];
            continue;
        }
        p.dims.push_back(out[i]);
        p.sa.push_back(sa[i]);
        p.sb.push_back(sb[i]);
    }
    if (p.dims.empty()) {
        p.dims = {1};
        p.sa = {0};
        p.sb = {0};
    }
    return p;
}

// Calls f(k, ia, ib) for every output element k in row-major order.
template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    const std::size_t rank = p.dims.size();
    const std::size_t inner = p.dims.back(), ia_step = p.sa.back(), ib_step = p.sb.back();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t base_a = 0, base_b = 0;
    for (std::size_t k = 0; k < p.n; k += inner) {
        std::size_t ia = base_a, ib = base_b;
        for (std::size_t j = 0; j < inner; ++j, ia += ia_step, ib += ib_step) f(k + j, ia, ib);
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            base_a += p.sa[d];
            base_b += p.sb[d];
            if (idx[d] < p.dims[d]) break;
            base_a -= p.sa[d] * idx[d];
            base_b -= p.sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

template <typename T>
void accumulate(detail::TensorImpl<T>& impl, std::span<const T> g) {
    impl.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) impl.grad[i] += g[i];
}

// Elementwise binary op. `partials(a, b, out)` returns (d out/d a, d out/d b).
template <typename T, typename Fwd, typename Partials>
BasicTensor<T> binary(std::string_view op, const BasicTensor<T>& a, const BasicTensor<T>& b, Fwd fwd,
                      Partials partials) {
    const bool same = a.shape() == b.shape();
    Shape out_shape = same ? a.shape() : broadcast_shape(op, a.shape(), b.shape());
    const std::size_t n = numel_of(out_shape);
    Storage<T> values(n);
    const auto av = a.data();
    const auto bv = b.data();
    BroadcastPlan plan;
    if (same) {
        for (std::size_t i = 0; i < n; ++i) values[i] = fwd(av[i], bv[i]);
    } else {
        plan = broadcast_plan(a.shape(), b.shape(), out_shape);
        for_each_broadcast(plan, [&](std::size_t k, std::size_t ia, std::size_t ib) { values[k] = fwd(av[ia], bv[ib]); });
    }
    auto out = make_result<T>(std::move(out_shape), std::move(values));
    if (auto* tape = recording_tape<T>({&a, &b})) {
        tape->record(out.impl(), op,
                     [ai = a.impl(), bi = b.impl(), plan = std::move(plan), partials, same](const TensorImpl<T>& o) {
                         const bool ga = ai->requires_grad, gb = bi->requires_grad;
                         if (ga) ai->ensure_grad();
                         if (gb) bi->ensure_grad();
                         auto body = [&](std::size_t i, std::size_t ia, std::size_t ib) {
                             const auto [da, db] = partials(ai->data[ia], bi->data[ib], o.data[i]);
                             if (ga) ai->grad[ia] += o.grad[i] * da;
                             if (gb) bi->grad[ib] += o.grad[i] * db;
                         };
                         if (same)
                             for (std::size_t i = 0; i < o.data.size(); ++i) body(i, i, i);
                         else
                             for_each_broadcast(plan, body);
                     });
    }
    return out;
}

// Elementwise unary op. `deriv(x, y)` is dy/dx.
template <typename T, typename Fwd, typename Deriv>
BasicTensor<T> unary(std::string_view op, const BasicTensor<T>& x, Fwd fwd, Deriv deriv) {
    const auto xv = x.data();
    Storage<T> values(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) values[i] = fwd(xv[i]);
    auto out = make_result<T>(x.shape(), std::move(values));
    if (auto* tape = recording_tape<T>({&x})) {
        tape->record(out.impl(), op, [xi = x.impl(), deriv](const TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t i = 0; i < o.data.size(); ++i) xi->grad[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
        });
    }
    return out;
}

// Splits a shape around `axis` into (outer, extent, inner).
inline std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    return {outer, s[axis], inner};
}

inline std::size_t normalize_axis(std::string_view op, long axis, std::size_t rank) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r)
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

template <typename T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMajor<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajor<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; },
                             [](T, T, T) { return std::pair<T, T>{T(1), T(1)}; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary<T>("sub", a, b, [](T x, T y) { return x - y; },
                             [](T, T, T) { return std::pair<T, T>{T(1), T(-1)}; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary<T>("mul", a, b, [](T x, T y) { return x * y; },
                             [](T x, T y, T) { return std::pair<T, T>{y, x}; });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return detail::binary<T>("div", a, b, [](T x, T y) { return x / y; },
                             [](T, T y, T o) { return std::pair<T, T>{T(1) / y, -o / y}; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T c) {
    return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> mul_scalar(const BasicTensor<T>& x, T c) {
    return detail::unary<T>("mul_scalar", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, const BasicTensor<T>& b) { return add(a, b); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, const BasicTensor<T>& b) { return sub(a, b); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, const BasicTensor<T>& b) { return mul(a, b); }
template <typename T>
BasicTensor<T> operator/(const BasicTensor<T>& a, const BasicTensor<T>& b) { return div(a, b); }
template <typename T>
BasicTensor<T> operator+(const BasicTensor<T>& a, T c) { return add_scalar(a, c); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a, T c) { return add_scalar(a, -c); }
template <typename T>
BasicTensor<T> operator*(const BasicTensor<T>& a, T c) { return mul_scalar(a, c); }
template <typename T>
BasicTensor<T> operator*(T c, const BasicTensor<T>& a) { return mul_scalar(a, c); }
template <typename T>
BasicTensor<T> operator-(const BasicTensor<T>& a) { return mul_scalar(a, T(-1)); }

// ---------------------------------------------------------------------------
// Pointwise functions

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
    return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
    return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
    return detail::unary<T>("sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
    return detail::unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& x) {
    return detail::unary<T>("abs", x, [](T v) { return std::abs(v); },
                            [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
    return detail::unary<T>("tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& x) {
    return detail::unary<T>(
        "silu", x, [](T v) { return v / (T(1) + std::exp(-v)); },
        [](T v, T) {
            const T s = T(1) / (T(1) + std::exp(-v));
            return s * (T(1) + v * (T(1) - s));
        });
}

// tanh approximation, as used by DiT/SiT MLPs.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
    constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T c = T(0.044715);
    const auto xv = x.data();
    const auto n = static_cast<Eigen::Index>(xv.size());
    Storage<T> th(xv.size()), values(xv.size());
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Eigen::Map<const Arr> xa(xv.data(), n);
    // tanh(u) = 1 - 2 / (exp(2u) + 1), on Eigen's vectorized exp.
    Eigen::Map<Arr>(th.data(), n) = T(1) - T(2) / ((T(2) * k * (xa + c * xa.cube())).exp() + T(1));
    Eigen::Map<Arr>(values.data(), n) = T(0.5) * xa * (T(1) + Eigen::Map<const Arr>(th.data(), n));
    auto out = detail::make_result<T>(x.shape(), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "gelu", [xi = x.impl(), th = std::move(th)](const detail::TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t i = 0; i < th.size(); ++i) {
                const T v = xi->data[i];
                const T du = k * (T(1) + T(3) * c * v * v);
                xi->grad[i] += o.grad[i] * (T(0.5) * (T(1) + th[i]) + T(0.5) * v * (T(1) - th[i] * th[i]) * du);
            }
        });
    }
    return out;
}

// Value-identical copy that is cut from the tape: no gradient flows through it.
template <typename T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x) {
    return BasicTensor<T>(x.shape(), Storage<T>(x.data().begin(), x.data().end()));
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) throw shape_error("reshape", x.shape(), shape, "element count differs");
    auto out = detail::make_result<T>(std::move(shape), Storage<T>(x.data().begin(), x.data().end()));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "reshape",
                     [xi = x.impl()](const detail::TensorImpl<T>& o) { detail::accumulate<T>(*xi, o.grad); });
    }
    return out;
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& in = x.shape();
    const std::size_t rank = in.size();
    if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for shape " + shape_str(in));
    {
        std::vector<std::size_t> sorted(perm);
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < rank; ++i)
            if (sorted[i] != i) throw ShapeError("permute: invalid permutation");
    }
    Shape out_shape(rank);
    std::vector<std::size_t> in_stride(rank);
    std::size_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = s;
        s *= in[i];
    }
    std::vector<std::size_t> stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < n; ++k) {
        src[k] = off;
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            off += stride[d];
            if (idx[d] < out_shape[d]) break;
            off -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    const auto xv = x.data();
    Storage<T> values(n);
    for (std::size_t k = 0; k < n; ++k) values[k] = xv[src[k]];
    auto out = detail::make_result<T>(std::move(out_shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "permute", [xi = x.impl(), src = std::move(src)](const detail::TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t k = 0; k < src.size(); ++k) xi->grad[src[k]] += o.grad[k];
        });
    }
    return out;
}

// Swaps the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
    if (x.dim() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
    std::vector<std::size_t> perm(x.dim());
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[x.dim() - 1], perm[x.dim() - 2]);
    return permute(x, perm);
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, long axis_in, std::size_t start, std::size_t length) {
    const std::size_t axis = detail::normalize_axis("slice", axis_in, x.dim());
    const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    if (start + length > extent)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(extent) + " of shape " + shape_str(x.shape()));
    Shape shape = x.shape();
    shape[axis] = length;
    Storage<T> values(outer * length * inner);
    const auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.begin() + (o * extent + start) * inner, length * inner,
                    values.begin() + o * length * inner);
    auto out = detail::make_result<T>(std::move(shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "slice",
                     [xi = x.impl(), outer, extent, inner, start, length](const detail::TensorImpl<T>& o) {
                         xi->ensure_grad();
                         for (std::size_t b = 0; b < outer; ++b)
                             for (std::size_t j = 0; j < length * inner; ++j)
                                 xi->grad[(b * extent + start) * inner + j] += o.grad[b * length * inner + j];
                     });
    }
    return out;
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, long axis_in) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const std::size_t axis = detail::normalize_axis("concat", axis_in, parts[0].dim());
    Shape shape = parts[0].shape();
    shape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = parts[0].shape();
        if (a.size() != b.size()) throw shape_error("concat", a, b, "rank differs");
        a[axis] = b[axis] = 0;
        if (a != b) throw shape_error("concat", p.shape(), parts[0].shape(), "non-concat axes differ");
        shape[axis] += p.shape()[axis];
    }
    const auto [outer, extent, inner] = detail::split_axis(shape, axis);
    Storage<T> values(numel_of(shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis];
        const auto pv = p.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(pv.begin() + o * len * inner, len * inner, values.begin() + (o * extent + offset) * inner);
        offset += len;
    }
    auto out = detail::make_result<T>(std::move(shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>(parts)) {
        std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
        for (const auto& p : parts) impls.push_back(p.impl());
        tape->record(out.impl(), "concat",
                     [impls = std::move(impls), outer, extent, inner, axis](const detail::TensorImpl<T>& o) {
                         std::size_t offset = 0;
                         for (const auto& pi : impls) {
                             const std::size_t len = pi->shape[axis];
                             if (pi->requires_grad) {
                                 pi->ensure_grad();
                                 for (std::size_t b = 0; b < outer; ++b)
                                     for (std::size_t j = 0; j < len * inner; ++j)
                                         pi->grad[b * len * inner + j] += o.grad[(b * extent + offset) * inner + j];
                             }
                             offset += len;
                         }
                     });
    }
    return out;
}

// Gathers x's flat elements at `indices` into a tensor of `shape`.
template <typename T>
BasicTensor<T> take(const BasicTensor<T>& x, std::vector<std::size_t> indices, Shape shape) {
    if (numel_of(shape) != indices.size()) throw ShapeError("take: index count does not match " + shape_str(shape));
    const auto xv = x.data();
    Storage<T> values(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= xv.size()) throw ShapeError("take: index out of range for " + shape_str(x.shape()));
        values[i] = xv[indices[i]];
    }
    auto out = detail::make_result<T>(std::move(shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "take", [xi = x.impl(), idx = std::move(indices)](const detail::TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) xi->grad[idx[i]] += o.grad[i];
        });
    }
    return out;
}

// Rows of a (V, D) table selected by `rows`, shape (rows.size(), D).
template <typename T>
BasicTensor<T> embedding(const BasicTensor<T>& table, const std::vector<int>& rows) {
    if (table.dim() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
    const std::size_t d = table.size(1);
    std::vector<std::size_t> idx;
    idx.reserve(rows.size() * d);
    for (int r : rows) {
        if (r < 0 || static_cast<std::size_t>(r) >= table.size(0))
            throw std::out_of_range("embedding: row " + std::to_string(r) + " outside table of " +
                                    std::to_string(table.size(0)) + " rows");
        for (std::size_t j = 0; j < d; ++j) idx.push_back(static_cast<std::size_t>(r) * d + j);
    }
    return take(table, std::move(idx), Shape{rows.size(), d});
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, long axis_in, bool keepdim = false) {
    const std::size_t axis = detail::normalize_axis("sum", axis_in, x.dim());
    const auto [outer, extent, inner] = detail::split_axis(x.shape(), axis);
    Shape shape = x.shape();
    if (keepdim)
        shape[axis] = 1;
    else
        shape.erase(shape.begin() + static_cast<long>(axis));
    Storage<T> values(outer * inner, T(0));
    const auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) values[o * inner + i] += xv[(o * extent + e) * inner + i];
    auto out = detail::make_result<T>(std::move(shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "sum", [xi = x.impl(), outer, extent, inner](const detail::TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t b = 0; b < outer; ++b)
                for (std::size_t e = 0; e < extent; ++e)
                    for (std::size_t i = 0; i < inner; ++i) xi->grad[(b * extent + e) * inner + i] += o.grad[b * inner + i];
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, long axis, bool keepdim = false) {
    const std::size_t a = detail::normalize_axis("mean", axis, x.dim());
    return mul_scalar(sum(x, axis, keepdim), T(1) / static_cast<T>(x.shape()[a]));
}

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    auto out = BasicTensor<T>::scalar(acc);
    if (auto* tape = detail::recording_tape<T>({&x})) {
        tape->record(out.impl(), "sum_all", [xi = x.impl()](const detail::TensorImpl<T>& o) {
            xi->ensure_grad();
            for (auto& g : xi->grad) g += o.grad[0];
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---------------------------------------------------------------------------
// Row-wise ops over the last axis

namespace detail {

template <typename T, typename Fwd, typename Bwd>
BasicTensor<T> rowwise(std::string_view op, const BasicTensor<T>& x, Shape out_shape, std::size_t out_cols, Fwd fwd,
                       Bwd bwd) {
    if (x.dim() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = cols ? x.numel() / cols : 0;
    Storage<T> values(rows * out_cols);
    const auto xv = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        fwd(std::span<const T>(xv.data() + r * cols, cols), std::span<T>(values.data() + r * out_cols, out_cols));
    auto out = make_result<T>(std::move(out_shape), std::move(values));
    if (auto* tape = recording_tape<T>({&x})) {
        tape->record(out.impl(), op, [xi = x.impl(), rows, cols, out_cols, bwd](const TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                bwd(std::span<const T>(xi->data.data() + r * cols, cols),
                    std::span<const T>(o.data.data() + r * out_cols, out_cols),
                    std::span<const T>(o.grad.data() + r * out_cols, out_cols),
                    std::span<T>(xi->grad.data() + r * cols, cols));
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
    const std::size_t cols = x.dim() ? x.shape().back() : 0;
    return detail::rowwise<T>(
        "softmax", x, x.shape(), cols,
        [](std::span<const T> in, std::span<T> out) {
            const T m = *std::max_element(in.begin(), in.end());
            T z = T(0);
            for (std::size_t j = 0; j < in.size(); ++j) z += out[j] = std::exp(in[j] - m);
            for (auto& v : out) v /= z;
        },
        [](std::span<const T>, std::span<const T> y, std::span<const T> g, std::span<T> gx) {
            T dot = T(0);
            for (std::size_t j = 0; j < y.size(); ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < y.size(); ++j) gx[j] += y[j] * (g[j] - dot);
        });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
    const std::size_t cols = x.dim() ? x.shape().back() : 0;
    return detail::rowwise<T>(
        "log_softmax", x, x.shape(), cols,
        [](std::span<const T> in, std::span<T> out) {
            const T m = *std::max_element(in.begin(), in.end());
            T z = T(0);
            for (T v : in) z += std::exp(v - m);
            const T lse = m + std::log(z);
            for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lse;
        },
        [](std::span<const T>, std::span<const T> y, std::span<const T> g, std::span<T> gx) {
            T gs = T(0);
            for (T v : g) gs += v;
            for (std::size_t j = 0; j < y.size(); ++j) gx[j] += g[j] - std::exp(y[j]) * gs;
        });
}

// log(sum(exp(x))) over the last axis; the axis is removed.
template <typename T>
BasicTensor<T> logsumexp(const BasicTensor<T>& x) {
    Shape shape = x.shape();
    if (!shape.empty()) shape.pop_back();
    return detail::rowwise<T>(
        "logsumexp", x, shape, 1,
        [](std::span<const T> in, std::span<T> out) {
            const T m = *std::max_element(in.begin(), in.end());
            T z = T(0);
            for (T v : in) z += std::exp(v - m);
            out[0] = m + std::log(z);
        },
        [](std::span<const T> in, std::span<const T> y, std::span<const T> g, std::span<T> gx) {
            for (std::size_t j = 0; j < in.size(); ++j) gx[j] += g[0] * std::exp(in[j] - y[0]);
        });
}

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kL2NormEps = 1e-12;

// Layer normalization without affine parameters.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, T eps = T(kLayerNormEps)) {
    const std::size_t cols = x.dim() ? x.shape().back() : 0;
    return detail::rowwise<T>(
        "layer_norm", x, x.shape(), cols,
        [eps](std::span<const T> in, std::span<T> out) {
            const T n = static_cast<T>(in.size());
            T mu = T(0);
            for (T v : in) mu += v;
            mu /= n;
            T var = T(0);
            for (T v : in) var += (v - mu) * (v - mu);
            var /= n;
            const T inv = T(1) / std::sqrt(var + eps);
            for (std::size_t j = 0; j < in.size(); ++j) out[j] = (in[j] - mu) * inv;
        },
        [eps](std::span<const T> in, std::span<const T> y, std::span<const T> g, std::span<T> gx) {
            const T n = static_cast<T>(in.size());
            T mu = T(0);
            for (T v : in) mu += v;
            mu /= n;
            T var = T(0);
            for (T v : in) var += (v - mu) * (v - mu);
            var /= n;
            const T inv = T(1) / std::sqrt(var + eps);
            T gm = T(0), gy = T(0);
            for (std::size_t j = 0; j < in.size(); ++j) {
                gm += g[j];
                gy += g[j] * y[j];
            }
            gm /= n;
            gy /= n;
            for (std::size_t j = 0; j < in.size(); ++j) gx[j] += inv * (g[j] - gm - y[j] * gy);
        });
}

// x / (||x|| + eps) along the last axis. Zero rows map to zero with a finite gradient.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, T eps = T(kL2NormEps)) {
    const std::size_t cols = x.dim() ? x.shape().back() : 0;
    return detail::rowwise<T>(
        "l2_normalize", x, x.shape(), cols,
        [eps](std::span<const T> in, std::span<T> out) {
            T ss = T(0);
            for (T v : in) ss += v * v;
            const T d = std::sqrt(ss) + eps;
            for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] / d;
        },
        [eps](std::span<const T> in, std::span<const T>, std::span<const T> g, std::span<T> gx) {
            T ss = T(0), xg = T(0);
            for (std::size_t j = 0; j < in.size(); ++j) {
                ss += in[j] * in[j];
                xg += in[j] * g[j];
            }
            const T norm = std::sqrt(ss);
            const T d = norm + eps;
            const T coef = norm > T(0) ? xg / (d * d * norm) : T(0);
            for (std::size_t j = 0; j < in.size(); ++j) gx[j] += g[j] / d - in[j] * coef;
        });
}

// ---------------------------------------------------------------------------
// Matrix products

// a: (..., M, K); b: (K, N) shared across the batch, or (..., K, N) with the same batch dims.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.dim() < 2 || b.dim() < 2) throw shape_error("matmul", a.shape(), b.shape(), "operands need rank >= 2");
    const std::size_t m = a.shape()[a.dim() - 2], k = a.shape().back();
    const std::size_t kb = b.shape()[b.dim() - 2], n = b.shape().back();
    if (k != kb) throw shape_error("matmul", a.shape(), b.shape(), "inner dimensions differ");
    const bool shared_b = b.dim() == 2;
    if (!shared_b) {
        if (b.dim() != a.dim() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
            throw shape_error("matmul", a.shape(), b.shape(), "batch dimensions differ");
    }
    const std::size_t batch = a.numel() / (m * k);
    Shape shape = a.shape();
    shape.back() = n;
    Storage<T> values(batch * m * n);
    using detail::ConstMatMap;
    using detail::MatMap;
    if (shared_b) {
        ConstMatMap<T> am(a.data().data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(k));
        ConstMatMap<T> bm(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        MatMap<T>(values.data(), static_cast<Eigen::Index>(batch * m), static_cast<Eigen::Index>(n)).noalias() = am * bm;
    } else {
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> am(a.data().data() + i * m * k, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
            ConstMatMap<T> bm(b.data().data() + i * k * n, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
            MatMap<T>(values.data() + i * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
                am * bm;
        }
    }
    auto out = detail::make_result<T>(std::move(shape), std::move(values));
    if (auto* tape = detail::recording_tape<T>({&a, &b})) {
        tape->record(out.impl(), "matmul",
                     [ai = a.impl(), bi = b.impl(), batch, m, k, n, shared_b](const detail::TensorImpl<T>& o) {
                         using E = Eigen::Index;
                         const std::size_t rows = shared_b ? batch * m : m;
                         const std::size_t reps = shared_b ? 1 : batch;
                         if (ai->requires_grad) ai->ensure_grad();
                         if (bi->requires_grad) bi->ensure_grad();
                         for (std::size_t i = 0; i < reps; ++i) {
                             ConstMatMap<T> g(o.grad.data() + i * rows * n, E(rows), E(n));
                             ConstMatMap<T> bm(bi->data.data() + (shared_b ? 0 : i * k * n), E(k), E(n));
                             ConstMatMap<T> am(ai->data.data() + i * rows * k, E(rows), E(k));
                             if (ai->requires_grad)
                                 MatMap<T>(ai->grad.data() + i * rows * k, E(rows), E(k)).noalias() += g * bm.transpose();
                             if (bi->requires_grad)
                                 MatMap<T>(bi->grad.data() + (shared_b ? 0 : i * k * n), E(k), E(n)).noalias() +=
                                     am.transpose() * g;
                         }
                     });
    }
    return out;
}

// x @ weight + bias with weight (in, out) and bias (out).
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    return add(matmul(x, weight), bias);
}

}  // namespace layersync
