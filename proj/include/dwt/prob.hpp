#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dwt/error.hpp"
#include "dwt/graph.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

// Student probabilities are clamped to this floor before the log in the KL.
inline constexpr double kProbFloor = 1e-12;

namespace detail {

inline void require_temperature(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw ParameterError("temperature must be positive and finite, got " + std::to_string(tau));
    }
}

template <typename T>
void softmax_row(const T* z, T* out, std::size_t n, T tau) {
    T mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = std::exp((z[j] - mx) / tau);
        total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
}

template <typename T>
void log_softmax_row(const T* z, T* out, std::size_t n, T tau) {
    T mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += std::exp((z[j] - mx) / tau);
    const T lse = std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[j] = (z[j] - mx) / tau - lse;
}

// Row-sum tolerance for "is a distribution". 1e-6 is the f64 contract; f32
// rounding over C terms can exceed it, so the bound scales with C·eps.
template <typename T>
T stochastic_tolerance(std::size_t classes) {
    const double scaled = 4.0 * static_cast<double>(classes) * std::numeric_limits<T>::epsilon();
    return static_cast<T>(std::max(1e-6, scaled));
}

}  // namespace detail

// exp(z/τ) / Σ exp(z/τ) over the trailing axis, with max subtraction.
template <typename T>
Tensor<T> softmax_temperature(const Tensor<T>& logits, double tau) {
    detail::require_temperature(tau);
    if (logits.cols() == 0) throw DimensionError("softmax over an empty axis");
    Tensor<T> out(logits.shape());
    const std::size_t n = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        detail::softmax_row(logits.data() + r * n, out.data() + r * n, n, static_cast<T>(tau));
    }
    return out;
}

template <typename T>
Var<T> softmax_temperature(Var<T> logits, double tau) {
    Tensor<T> out = softmax_temperature(logits.value(), tau);
    const T t = static_cast<T>(tau);
    const std::size_t n = out.cols();
    const std::size_t rows = out.rows();
    return logits.graph->push("softmax", std::move(out), {logits.id}, [=](Graph<T>& g, NodeId self) {
        T* gz = g.accum(logits.id);
        if (!gz) return;
        const T* p = g.value(self).data();
        const T* gy = g.grad(self).data();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* pr = p + r * n;
            const T* gr = gy + r * n;
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
            for (std::size_t j = 0; j < n; ++j) gz[r * n + j] += pr[j] * (gr[j] - dot) / t;
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& logits, double tau = 1.0) {
    detail::require_temperature(tau);
    if (logits.cols() == 0) throw DimensionError("log_softmax over an empty axis");
    Tensor<T> out(logits.shape());
    const std::size_t n = logits.cols();
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        detail::log_softmax_row(logits.data() + r * n, out.data() + r * n, n, static_cast<T>(tau));
    }
    return out;
}

template <typename T>
Var<T> log_softmax(Var<T> logits, double tau = 1.0) {
    Tensor<T> out = log_softmax(logits.value(), tau);
    const T t = static_cast<T>(tau);
    const std::size_t n = out.cols();
    const std::size_t rows = out.rows();
    return logits.graph->push("log_softmax", std::move(out), {logits.id}, [=](Graph<T>& g, NodeId self) {
        T* gz = g.accum(logits.id);
        if (!gz) return;
        const T* lp = g.value(self).data();
        const T* gy = g.grad(self).data();
        for (std::size_t r = 0; r < rows; ++r) {
            T total{0};
            for (std::size_t j = 0; j < n; ++j) total += gy[r * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                gz[r * n + j] += (gy[r * n + j] - std::exp(lp[r * n + j]) * total) / t;
            }
        }
    });
}

// Mean over rows of −log p(target). q is one-hot at the target id.
template <typename T, typename Index>
Var<T> cross_entropy(Var<T> log_probs, std::span<const Index> targets) {
    const Tensor<T>& lp = log_probs.value();
    const std::size_t rows = lp.rows(), n = lp.cols();
    if (lp.rank() != 2 || targets.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for log-probs " +
                             shape_str(lp.shape()));
    }
    if (rows == 0) throw DimensionError("cross_entropy over zero rows");
    std::vector<std::size_t> tgt(rows);
    T total{0};
    for (std::size_t i = 0; i < rows; ++i) {
        const auto y = static_cast<std::size_t>(targets[i]);
        if (y >= n) {
            throw IndexError("target id " + std::to_string(y) + " out of range for " + std::to_string(n) +
                             " classes");
        }
        tgt[i] = y;
        total -= lp[i * n + y];
    }
    const T inv = T(1) / static_cast<T>(rows);
    return log_probs.graph->push("cross_entropy", Tensor<T>::scalar(total * inv), {log_probs.id},
                                 [=, tgt = std::move(tgt)](Graph<T>& g, NodeId self) {
                                     T* gl = g.accum(log_probs.id);
                                     if (!gl) return;
                                     const T gy = g.grad(self)[0];
                                     for (std::size_t i = 0; i < rows; ++i) gl[i * n + tgt[i]] -= gy * inv;
                                 });
}

template <typename T, typename Index>
Var<T> cross_entropy(Var<T> log_probs, const std::vector<Index>& targets) {
    return cross_entropy(log_probs, std::span<const Index>(targets));
}

template <typename T>
struct KlResult {
    Var<T> loss;
    // Some student probability fell below kProbFloor and was clamped.
    bool clamp_fired = false;
};

// Mean over rows of Σ_c p_t(c)·log(p_t(c)/p_s(c)). The teacher argument is a
// plain tensor, so no gradient can reach it.
template <typename T>
KlResult<T> kl_divergence(const Tensor<T>& p_teacher, Var<T> p_student) {
    const Tensor<T>& ps = p_student.value();
    if (p_teacher.shape() != ps.shape() || ps.rank() != 2) {
        throw DimensionError("kl_divergence: teacher " + shape_str(p_teacher.shape()) + " vs student " +
                             shape_str(ps.shape()));
    }
    const std::size_t rows = ps.rows(), n = ps.cols();
    if (rows == 0) throw DimensionError("kl_divergence over zero rows");
    const T tol = detail::stochastic_tolerance<T>(n);
    const T floor = static_cast<T>(kProbFloor);
    bool clamped = false;
    T total{0};
    for (std::size_t i = 0; i < rows; ++i) {
        T st{0}, ss{0};
        for (std::size_t j = 0; j < n; ++j) {
            const T pt = p_teacher[i * n + j];
            const T q = ps[i * n + j];
            if (pt < T(0) || q < T(0)) throw ValidationError("kl_divergence: negative probability in row " +
                                                            std::to_string(i));
            st += pt;
            ss += q;
        }
        if (std::abs(st - T(1)) > tol || std::abs(ss - T(1)) > tol) {
            throw ValidationError("kl_divergence: row " + std::to_string(i) + " is not stochastic (teacher sum " +
                                  std::to_string(st) + ", student sum " + std::to_string(ss) + ")");
        }
        for (std::size_t j = 0; j < n; ++j) {
            const T pt = p_teacher[i * n + j];
            if (pt == T(0)) continue;
            T q = ps[i * n + j];
            if (q == T(0)) {
                throw NumericError("kl_divergence: student assigns zero probability to class " + std::to_string(j) +
                                   " in row " + std::to_string(i) + " where the teacher has mass (infinite loss)");
            }
            if (q < floor) {
                q = floor;
                clamped = true;
            }
            total += pt * (std::log(pt) - std::log(q));
        }
    }
    const T inv = T(1) / static_cast<T>(rows);
    Var<T> out = p_student.graph->push(
        "kl_divergence", Tensor<T>::scalar(total * inv), {p_student.id},
        [=, pt = p_teacher](Graph<T>& g, NodeId self) {
            T* gs = g.accum(p_student.id);
            if (!gs) return;
            const T gy = g.grad(self)[0] * inv;
            const T* q = g.value(p_student.id).data();
            for (std::size_t k = 0; k < pt.size(); ++k) {
                if (pt[k] == T(0)) continue;
                gs[k] -= gy * pt[k] / std::max(q[k], floor);
            }
        });
    return KlResult<T>{out, clamped};
}

}  // namespace dwt
