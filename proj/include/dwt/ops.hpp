#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "dwt/error.hpp"
#include "dwt/graph.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

namespace kernels {

// Each output element is reduced in a fixed order (p ascending), so results
// are bitwise reproducible and the inner loops vectorise without
// reassociation.

// c[m×n] += A · b with A[i][p] = a[i·si + p·sp] and b row-major [k×n].
// Output tiles live in registers for the whole p loop; every element still
// accumulates p = 0, 1, ..., k-1 in order.
template <typename T>
void gemm_strided(const T* __restrict a, std::size_t si, std::size_t sp, const T* __restrict b, T* __restrict c,
                  std::size_t m, std::size_t k, std::size_t n) {
    constexpr std::size_t R = 4;
    constexpr std::size_t W = 64;
    std::size_t i = 0;
    for (; i + R <= m; i += R) {
        std::size_t j = 0;
        for (; j + W <= n; j += W) {
            T acc[R][W];
            for (std::size_t r = 0; r < R; ++r) {
                for (std::size_t q = 0; q < W; ++q) acc[r][q] = c[(i + r) * n + j + q];
            }
            for (std::size_t p = 0; p < k; ++p) {
                const T* bp = b + p * n + j;
                for (std::size_t r = 0; r < R; ++r) {
                    const T s = a[(i + r) * si + p * sp];
                    for (std::size_t q = 0; q < W; ++q) acc[r][q] += s * bp[q];
                }
            }
            for (std::size_t r = 0; r < R; ++r) {
                for (std::size_t q = 0; q < W; ++q) c[(i + r) * n + j + q] = acc[r][q];
            }
        }
        for (std::size_t r = i; r < i + R; ++r) {
            for (std::size_t p = 0; p < k; ++p) {
                const T s = a[r * si + p * sp];
                for (std::size_t q = j; q < n; ++q) c[r * n + q] += s * b[p * n + q];
            }
        }
    }
    for (; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T s = a[i * si + p * sp];
            for (std::size_t q = 0; q < n; ++q) c[i * n + q] += s * b[p * n + q];
        }
    }
}

// c[m×n] += a[m×k] · b[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    gemm_strided(a, k, 1, b, c, m, k, n);
}

// c[m×n] += aᵀ · b, a is [k×m], b is [k×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    gemm_strided(a, 1, m, b, c, m, k, n);
}

template <typename T>
void transpose(const T* a, T* out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
    }
}

// c[m×n] += a · bᵀ, a is [m×k], b is [n×k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::vector<T> bt(k * n);
    transpose(b, bt.data(), n, k);
    gemm_nn(a, bt.data(), c, m, k, n);
}

}  // namespace kernels

namespace detail {

inline void require(bool ok, const std::string& what) {
    if (!ok) throw DimensionError(what);
}

template <typename T>
void add_into(T* dst, const std::vector<T>& src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    detail::require(sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0],
                    "matmul: " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out(Shape{m, n});
    kernels::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
    return a.graph->push("matmul", std::move(out), {a.id, b.id}, [=](Graph<T>& g, NodeId self) {
        const T* gy = g.grad(self).data();
        if (T* ga = g.accum(a.id)) kernels::gemm_nt(gy, g.value(b.id).data(), ga, m, n, k);
        if (T* gb = g.accum(b.id)) kernels::gemm_tn(g.value(a.id).data(), gy, gb, k, m, n);
    });
}

// x[m×k] · w[k×n] + bias[n]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> bias) {
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    detail::require(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[0] && bias.value().size() == sw[1],
                    "linear: " + shape_str(sx) + " x " + shape_str(sw) + " + " + shape_str(bias.shape()));
    const std::size_t m = sx[0], k = sx[1], n = sw[1];
    Tensor<T> out(Shape{m, n});
    const T* pb = bias.value().data();
    for (std::size_t i = 0; i < m; ++i) std::copy(pb, pb + n, out.data() + i * n);
    kernels::gemm_nn(x.value().data(), w.value().data(), out.data(), m, k, n);
    return x.graph->push("linear", std::move(out), {x.id, w.id, bias.id}, [=](Graph<T>& g, NodeId self) {
        const T* gy = g.grad(self).data();
        if (T* gx = g.accum(x.id)) kernels::gemm_nt(gy, g.value(w.id).data(), gx, m, n, k);
        if (T* gw = g.accum(w.id)) kernels::gemm_tn(g.value(x.id).data(), gy, gw, k, m, n);
        if (T* gb = g.accum(bias.id)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) gb[j] += gy[i * n + j];
            }
        }
    });
}

// Batched product over the leading axis: a[B×m×k] · b[B×k×n], or a · bᵀ
// when transpose_b is set (b is then [B×n×k]).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    detail::require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] &&
                        sa[2] == (transpose_b ? sb[2] : sb[1]),
                    "bmm: " + shape_str(sa) + " x " + shape_str(sb));
    const std::size_t batch = sa[0], m = sa[1], k = sa[2];
    const std::size_t n = transpose_b ? sb[1] : sb[2];
    Tensor<T> out(Shape{batch, m, n});
    for (std::size_t i = 0; i < batch; ++i) {
        const T* pa = a.value().data() + i * m * k;
        const T* pb = b.value().data() + i * k * n;
        T* pc = out.data() + i * m * n;
        if (transpose_b) kernels::gemm_nt(pa, pb, pc, m, k, n);
        else kernels::gemm_nn(pa, pb, pc, m, k, n);
    }
    return a.graph->push("bmm", std::move(out), {a.id, b.id}, [=](Graph<T>& g, NodeId self) {
        T* ga = g.accum(a.id);
        T* gb = g.accum(b.id);
        const T* va = g.value(a.id).data();
        const T* vb = g.value(b.id).data();
        const T* gy = g.grad(self).data();
        for (std::size_t i = 0; i < batch; ++i) {
            const T* gyi = gy + i * m * n;
            const T* ai = va + i * m * k;
            const T* bi = vb + i * k * n;
            if (transpose_b) {
                // y = a bᵀ: da = dy b, db = dyᵀ a
                if (ga) kernels::gemm_nn(gyi, bi, ga + i * m * k, m, n, k);
                if (gb) kernels::gemm_tn(gyi, ai, gb + i * k * n, n, m, k);
            } else {
                if (ga) kernels::gemm_nt(gyi, bi, ga + i * m * k, m, n, k);
                if (gb) kernels::gemm_tn(ai, gyi, gb + i * k * n, k, m, n);
            }
        }
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = a.value();
    const T* pb = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
    return a.graph->push("add", std::move(out), {a.id, b.id}, [=](Graph<T>& g, NodeId self) {
        const std::vector<T>& gy = g.grad(self);
        detail::add_into(g.accum(a.id), gy);
        detail::add_into(g.accum(b.id), gy);
    });
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
    Tensor<T> out = x.value();
    for (T& v : out.values()) v *= s;
    return x.graph->push("scale", std::move(out), {x.id}, [=](Graph<T>& g, NodeId self) {
        const std::vector<T>& gy = g.grad(self);
        if (T* gx = g.accum(x.id)) {
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
        }
    });
}

template <typename T>
Var<T> sum(Var<T> x) {
    T acc{0};
    for (T v : x.value().values()) acc += v;
    return x.graph->push("sum", Tensor<T>::scalar(acc), {x.id}, [=](Graph<T>& g, NodeId self) {
        const T gy = g.grad(self)[0];
        if (T* gx = g.accum(x.id)) {
            const std::size_t n = g.value(x.id).size();
            for (std::size_t i = 0; i < n; ++i) gx[i] += gy;
        }
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    const std::size_t n = x.value().size();
    detail::require(n > 0, "mean of empty tensor");
    return scale(sum(x), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    detail::require(numel(shape) == x.value().size(),
                    "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor<T> out(std::move(shape), x.value().values());
    return x.graph->push("reshape", std::move(out), {x.id}, [=](Graph<T>& g, NodeId self) {
        detail::add_into(g.accum(x.id), g.grad(self));
    });
}

template <typename T>
Var<T> transpose(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() == 2, "transpose needs a matrix, got " + shape_str(s));
    const std::size_t r = s[0], c = s[1];
    Tensor<T> out(Shape{c, r});
    kernels::transpose(x.value().data(), out.data(), r, c);
    return x.graph->push("transpose", std::move(out), {x.id}, [=](Graph<T>& g, NodeId self) {
        if (T* gx = g.accum(x.id)) {
            const T* gy = g.grad(self).data();
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
            }
        }
    });
}

// [a×b×c×d] -> [a×c×b×d]. Splits attention heads out of the sequence axis
// and back; the op is its own inverse.
template <typename T>
Var<T> swap_axes12(Var<T> x) {
    const Shape& s = x.shape();
    detail::require(s.size() == 4, "swap_axes12 needs rank 4, got " + shape_str(s));
    const std::size_t A = s[0], B = s[1], C = s[2], D = s[3];
    Tensor<T> out(Shape{A, C, B, D});
    const T* px = x.value().data();
    T* po = out.data();
    for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                std::copy_n(px + ((a * B + b) * C + c) * D, D, po + ((a * C + c) * B + b) * D);
    return x.graph->push("swap_axes12", std::move(out), {x.id}, [=](Graph<T>& g, NodeId self) {
        T* gx = g.accum(x.id);
        if (!gx) return;
        const T* gy = g.grad(self).data();
        for (std::size_t a = 0; a < A; ++a)
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const T* src = gy + ((a * C + c) * B + b) * D;
                    T* dst = gx + ((a * B + b) * C + c) * D;
                    for (std::size_t d = 0; d < D; ++d) dst[d] += src[d];
                }
    });
}

namespace detail {

// Rational minimax tanh for float (13/6 odd/even polynomials, clamped at
// ±7.9053 where it saturates to ±1 in float). Plain arithmetic, so the GELU
// loops vectorise; max error against std::tanh is a few ulp.
inline float tanh_float(float x) {
    constexpr float kClamp = 7.90531110763549805f;
    x = std::clamp(x, -kClamp, kClamp);
    const float x2 = x * x;
    float p = -2.76076847742355e-16f;
    p = p * x2 + 2.00018790482477e-13f;
    p = p * x2 + -8.60467152213735e-11f;
    p = p * x2 + 5.12229709037114e-08f;
    p = p * x2 + 1.48572235717979e-05f;
    p = p * x2 + 6.37261928875436e-04f;
    p = p * x2 + 4.89352455891786e-03f;
    p = p * x;
    float q = 1.19825839466702e-06f;
    q = q * x2 + 1.18534705686654e-04f;
    q = q * x2 + 2.26843463243900e-03f;
    q = q * x2 + 4.89352518554385e-03f;
    return p / q;
}

template <typename T>
T tanh_of(T x) {
    if constexpr (std::is_same_v<T, float>) {
        return tanh_float(x);
    } else {
        return std::tanh(x);
    }
}

template <typename T>
T gelu_tanh_arg(T x) {
    const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T c = static_cast<T>(0.044715);
    return k * (x + c * x * x * x);
}

template <typename T>
T gelu_from_tanh(T x, T t) {
    return T(0.5) * x * (T(1) + t);
}

template <typename T>
T gelu_derivative_from_tanh(T x, T t) {
    const T k = static_cast<T>(0.7978845608028654);
    const T c = static_cast<T>(0.044715);
    const T du = k * (T(1) + T(3) * c * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
T gelu_value(T x) {
    return gelu_from_tanh(x, tanh_of(gelu_tanh_arg(x)));
}

template <typename T>
T gelu_derivative(T x) {
    return gelu_derivative_from_tanh(x, tanh_of(gelu_tanh_arg(x)));
}

}  // namespace detail

// Tanh approximation of GELU. The forward tanh values are kept for backward.
template <typename T>
Var<T> gelu(Var<T> x) {
    Tensor<T> out = x.value();
    auto tanh_cache = std::make_shared<std::vector<T>>(out.size());
    std::vector<T>& th = *tanh_cache;
    for (std::size_t i = 0; i < out.size(); ++i) {
        th[i] = detail::tanh_of(detail::gelu_tanh_arg(out[i]));
        out[i] = detail::gelu_from_tanh(out[i], th[i]);
    }
    return x.graph->push("gelu", std::move(out), {x.id}, [=](Graph<T>& g, NodeId self) {
        T* gx = g.accum(x.id);
        if (!gx) return;
        const std::vector<T>& gy = g.grad(self);
        const T* vx = g.value(x.id).data();
        const T* t = tanh_cache->data();
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * detail::gelu_derivative_from_tanh(vx[i], t[i]);
    });
}

inline constexpr double kLayerNormEps = 1e-12;

// Normalises the trailing axis. A constant row normalises to exactly zero
// before gain/bias are applied.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias) {
    const std::size_t n = x.value().cols();
    const std::size_t rows = x.value().rows();
    detail::require(gain.value().size() == n && bias.value().size() == n,
                    "layer_norm: gain/bias " + shape_str(gain.shape()) + " for rows of " + std::to_string(n));
    std::vector<T> xhat(x.value().size());
    std::vector<T> rstd(rows);
    Tensor<T> out(x.shape());
    const T* px = x.value().data();
    const T* pg = gain.value().data();
    const T* pb = bias.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * n;
        T mu{0};
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<T>(n);
        T var{0};
        bool constant = true;
        for (std::size_t j = 0; j < n; ++j) {
            const T d = xr[j] - mu;
            var += d * d;
            constant = constant && xr[j] == xr[0];
        }
        var /= static_cast<T>(n);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        rstd[r] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = constant ? T(0) : (xr[j] - mu) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * pg[j] + pb[j];
        }
    }
    return x.graph->push(
        "layer_norm", std::move(out), {x.id, gain.id, bias.id},
        [=, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T>& g, NodeId self) {
            const T* gy = g.grad(self).data();
            const T* vg = g.value(gain.id).data();
            T* gx = g.accum(x.id);
            T* gg = g.accum(gain.id);
            T* gb = g.accum(bias.id);
            std::vector<T> dh(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gyr = gy + r * n;
                const T* hr = xhat.data() + r * n;
                if (gg) for (std::size_t j = 0; j < n; ++j) gg[j] += gyr[j] * hr[j];
                if (gb) for (std::size_t j = 0; j < n; ++j) gb[j] += gyr[j];
                if (!gx) continue;
                T mean_dh{0}, mean_dh_h{0};
                for (std::size_t j = 0; j < n; ++j) {
                    dh[j] = gyr[j] * vg[j];
                    mean_dh += dh[j];
                    mean_dh_h += dh[j] * hr[j];
                }
                mean_dh /= static_cast<T>(n);
                mean_dh_h /= static_cast<T>(n);
                T* gxr = gx + r * n;
                for (std::size_t j = 0; j < n; ++j) gxr[j] += rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
            }
        });
}

// Row gather: out[i] = table[ids[i]]. Backward scatter-adds in index order,
// so repeated ids accumulate.
template <typename T, typename Index>
Var<T> embedding_lookup(Var<T> table, std::span<const Index> ids) {
    const Shape& s = table.shape();
    detail::require(s.size() == 2, "embedding_lookup needs a matrix table, got " + shape_str(s));
    const std::size_t rows = s[0], d = s[1];
    std::vector<std::size_t> idx(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto id = static_cast<std::size_t>(ids[i]);
        if (id >= rows) {
            throw IndexError("embedding id " + std::to_string(id) + " out of range for table of " +
                             std::to_string(rows) + " rows");
        }
        idx[i] = id;
    }
    Tensor<T> out(Shape{idx.size(), d});
    const T* pt = table.value().data();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(pt + idx[i] * d, d, out.data() + i * d);
    return table.graph->push("embedding_lookup", std::move(out), {table.id},
                             [=, idx = std::move(idx)](Graph<T>& g, NodeId self) {
                                 T* gt = g.accum(table.id);
                                 if (!gt) return;
                                 const T* gy = g.grad(self).data();
                                 for (std::size_t i = 0; i < idx.size(); ++i) {
                                     T* dst = gt + idx[i] * d;
                                     const T* src = gy + i * d;
                                     for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                                 }
                             });
}

template <typename T, typename Index>
Var<T> embedding_lookup(Var<T> table, const std::vector<Index>& ids) {
    return embedding_lookup(table, std::span<const Index>(ids));
}

// New constant node holding x's value; nothing flows back through it.
template <typename T>
Var<T> detach(Var<T> x) {
    return x.graph->leaf(x.value(), false);
}

}  // namespace dwt
