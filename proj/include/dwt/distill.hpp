#pragma once

#include <cstdint>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <span>
#include <string>

#include "dwt/error.hpp"
#include "dwt/graph.hpp"
#include "dwt/ops.hpp"
#include "dwt/prob.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

// Soft-loss weight over training: a constant, or a linear ramp from `start`
// at step 0 to `end` at the final step.
struct Schedule {
    enum class Kind { Constant, LinearDecay };

    Kind kind = Kind::Constant;
    double start = 1.0;
    double end = 1.0;

    static Schedule constant(double v) { return {Kind::Constant, v, v}; }
    static Schedule linear_decay(double from, double to) { return {Kind::LinearDecay, from, to}; }

    friend bool operator==(const Schedule&, const Schedule&) = default;
};

namespace detail {

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    // prefer the shortest form that round-trips
    for (int prec = 1; prec <= 17; ++prec) {
        char shorter[64];
        std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
        if (std::strtod(shorter, nullptr) == v) return shorter;
    }
    return buf;
}

}  // namespace detail

// "constant:4" or "linear_decay:4:1".
inline std::string to_string(const Schedule& s) {
    if (s.kind == Schedule::Kind::Constant) return "constant:" + detail::format_number(s.start);
    return "linear_decay:" + detail::format_number(s.start) + ":" + detail::format_number(s.end);
}

inline Schedule parse_schedule(const std::string& text) {
    auto bad = [&]() -> Schedule {
        throw ConfigError("malformed schedule '" + text + "' (want constant:<v> or linear_decay:<start>:<end>)");
    };
    auto number = [&](const std::string& s) {
        char* endp = nullptr;
        const double v = std::strtod(s.c_str(), &endp);
        if (s.empty() || endp != s.c_str() + s.size() || !std::isfinite(v)) bad();
        return v;
    };
    const auto c1 = text.find(':');
    if (c1 == std::string::npos) return bad();
    const std::string kind = text.substr(0, c1);
    const std::string rest = text.substr(c1 + 1);
    Schedule s;
    if (kind == "constant") {
        s = Schedule::constant(number(rest));
    } else if (kind == "linear_decay") {
        const auto c2 = rest.find(':');
        if (c2 == std::string::npos) return bad();
        s = Schedule::linear_decay(number(rest.substr(0, c2)), number(rest.substr(c2 + 1)));
    } else {
        return bad();
    }
    if (s.start < 0.0 || s.end < 0.0) throw ConfigError("schedule values must be nonnegative: " + text);
    return s;
}

inline double schedule_value(const Schedule& s, std::uint64_t step, std::uint64_t total_steps) {
    if (step > total_steps) {
        throw ContractError("schedule step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
    }
    if (s.kind == Schedule::Kind::Constant) return s.start;
    if (total_steps == 0) return s.end;
    return s.start + (s.end - s.start) * static_cast<double>(step) / static_cast<double>(total_steps);
}

struct DistillConfig {
    double alpha_h = 1.0;
    Schedule alpha_s = Schedule::constant(1.0);
    double tau = 1.0;
    // Classic KD multiplies the soft term by τ². Off unless asked for.
    bool tau_squared_scaling = false;

    friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

inline void validate(const DistillConfig& c) {
    if (!(c.alpha_h >= 0.0) || !std::isfinite(c.alpha_h)) throw ConfigError("alpha_h must be nonnegative");
    if (c.alpha_s.start < 0.0 || c.alpha_s.end < 0.0) throw ConfigError("alpha_s schedule must be nonnegative");
    if (!(c.tau > 0.0) || !std::isfinite(c.tau)) throw ConfigError("tau must be positive");
}

struct LossReport {
    double hard = 0.0;
    double soft = 0.0;
    double combined = 0.0;
    double alpha_s_used = 0.0;
    bool clamp_fired = false;
};

// Teacher probabilities at temperature τ. A plain tensor: nothing downstream
// can push a gradient into the teacher.
template <typename T>
Tensor<T> soft_targets(const Tensor<T>& teacher_logits, double tau) {
    return softmax_temperature(teacher_logits, tau);
}

// out = a·x + b·y for scalar nodes, evaluated once in T so the report and
// the graph agree bit for bit.
template <typename T>
Var<T> weighted_sum(Var<T> x, T a, Var<T> y, T b) {
    if (x.value().size() != 1 || y.value().size() != 1) throw DimensionError("weighted_sum expects scalars");
    const T out = a * x.value()[0] + b * y.value()[0];
    return x.graph->push("weighted_sum", Tensor<T>::scalar(out), {x.id, y.id}, [=](Graph<T>& g, NodeId self) {
        const T gy = g.grad(self)[0];
        if (T* gx = g.accum(x.id)) gx[0] += a * gy;
        if (T* gw = g.accum(y.id)) gw[0] += b * gy;
    });
}

template <typename T>
struct DwtLoss {
    Var<T> combined;
    Var<T> hard;
    Var<T> soft;
    LossReport report;
};

// α_h·CE(q, p_θ) + α_s(step)·KL(p_ω^τ ‖ p_θ^τ), both averaged over the masked
// positions the logits rows correspond to. Hard loss is always at τ = 1.
template <typename T, typename Index>
DwtLoss<T> dwt_loss(Var<T> student_logits, const Tensor<T>& teacher_logits, std::span<const Index> targets,
                    const DistillConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
    validate(cfg);
    if (student_logits.shape() != teacher_logits.shape()) {
        throw ContractError("student logits " + shape_str(student_logits.shape()) +
                            " not row-aligned with teacher logits " + shape_str(teacher_logits.shape()));
    }
    if (student_logits.value().rows() != targets.size()) {
        throw ContractError("logit rows and target count differ");
    }
    const double alpha_s = schedule_value(cfg.alpha_s, step, total_steps);

    Var<T> hard = cross_entropy(log_softmax(student_logits, 1.0), targets);
    Var<T> p_student = softmax_temperature(student_logits, cfg.tau);
    KlResult<T> kl = kl_divergence(soft_targets(teacher_logits, cfg.tau), p_student);
    Var<T> soft = kl.loss;
    if (cfg.tau_squared_scaling) soft = scale(soft, static_cast<T>(cfg.tau * cfg.tau));
    Var<T> combined = weighted_sum(hard, static_cast<T>(cfg.alpha_h), soft, static_cast<T>(alpha_s));

    LossReport r;
    r.hard = static_cast<double>(hard.value()[0]);
    r.soft = static_cast<double>(soft.value()[0]);
    r.combined = static_cast<double>(combined.value()[0]);
    r.alpha_s_used = alpha_s;
    r.clamp_fired = kl.clamp_fired;
    return DwtLoss<T>{combined, hard, soft, r};
}

template <typename T, typename Index>
DwtLoss<T> dwt_loss(Var<T> student_logits, const Tensor<T>& teacher_logits, const std::vector<Index>& targets,
                    const DistillConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
    return dwt_loss(student_logits, teacher_logits, std::span<const Index>(targets), cfg, step, total_steps);
}

}  // namespace dwt
