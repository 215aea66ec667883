#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <algorithm>
#include <numeric>
#include <vector>

#include "dwt/checkpoint.hpp"
#include "dwt/corpus.hpp"
#include "dwt/distill.hpp"
#include "dwt/error.hpp"
#include "dwt/model.hpp"
#include "dwt/remap.hpp"

namespace dwt {

struct TrainConfig {
    std::size_t total_steps = 1000;
    std::size_t batch = 8;
    std::size_t seq_len = 32;
    double mask_rate = 0.15;
    double peak_lr = 5e-4;
    double warmup_fraction = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::size_t eval_every = 100;
    // 0 writes only the final checkpoint.
    std::size_t checkpoint_every = 0;
    std::size_t eval_batches = 8;
    // Dev batches are drawn with this seed, independent of the training seed,
    // so runs with different seeds are scored on the same positions.
    std::uint64_t eval_seed = 20240601;
    // Off by default so metrics.csv is a pure function of the configs.
    bool record_wallclock = false;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void validate(const TrainConfig& c) {
    if (c.total_steps == 0) throw ConfigError("total_steps must be positive");
    if (!(c.warmup_fraction > 0.0 && c.warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in (0, 1)");
    if (c.batch == 0 || c.seq_len == 0) throw ConfigError("batch and seq_len must be positive");
    if (!(c.mask_rate > 0.0 && c.mask_rate <= 1.0)) throw ConfigError("mask_rate must lie in (0, 1]");
    if (!(c.peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    if (c.eval_every == 0) throw ConfigError("eval_every must be positive");
    if (c.eval_batches == 0) throw ConfigError("eval_batches must be positive");
}

// Linear warmup from 0 to peak over warmup_fraction·total steps, then linear
// decay to 0 at the final step.
inline double lr_at(std::size_t step, const TrainConfig& c) {
    const double total = static_cast<double>(c.total_steps);
    const double warm = c.warmup_fraction * total;
    const double s = static_cast<double>(step);
    if (s < warm) return c.peak_lr * s / warm;
    if (s >= total) return 0.0;
    return c.peak_lr * (total - s) / (total - warm);
}

struct AdamState {
    std::map<std::string, std::vector<float>> m;
    std::map<std::string, std::vector<float>> v;
    std::uint64_t t = 0;
};

// One bias-corrected Adam update. Parameters without a gradient entry are
// left alone.
inline void adam_step(ParamSet<float>& params, const ParamSet<float>& grads, AdamState& state, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) throw NumericError("non-finite gradient in tensor " + name);
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    const float b1 = static_cast<float>(beta1), b2 = static_cast<float>(beta2);
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw ContractError("gradient for unknown parameter " + name);
        Tensor<float>& p = it->second;
        if (p.shape() != g.shape()) throw DimensionError("gradient shape mismatch for " + name);
        std::vector<float>& m = state.m[name];
        std::vector<float>& v = state.v[name];
        if (m.empty()) {
            m.assign(p.size(), 0.0f);
            v.assign(p.size(), 0.0f);
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float gi = g[i];
            m[i] = b1 * m[i] + (1.0f - b1) * gi;
            v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p[i] = static_cast<float>(p[i] - lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
}

struct EvalMetrics {
    double loss = 0.0;
    double accuracy = 0.0;
    double perplexity = 0.0;
};

// Masked-token loss/accuracy over a fixed, seeded set of dev batches.
inline EvalMetrics evaluate(const ParamSet<float>& params, const ModelConfig& cfg, const Corpus& dev,
                            const TrainConfig& tc) {
    double total = 0.0;
    std::size_t correct = 0, count = 0;
    for (std::size_t k = 0; k < tc.eval_batches; ++k) {
        const MlmBatch batch = make_mlm_batch(dev, tc.batch, tc.seq_len, tc.mask_rate, tc.eval_seed, k);
        if (batch.num_masked() == 0) continue;
        const Tensor<float> logits = mlm_logits(params, cfg, batch);
        const Tensor<float> lp = log_softmax(logits, 1.0);
        const std::size_t V = lp.cols();
        for (std::size_t i = 0; i < batch.num_masked(); ++i) {
            const float* row = lp.data() + i * V;
            total -= static_cast<double>(row[batch.labels[i]]);
            std::size_t best = 0;
            for (std::size_t j = 1; j < V; ++j) {
                if (row[j] > row[best]) best = j;
            }
            correct += best == batch.labels[i];
        }
        count += batch.num_masked();
    }
    if (count == 0) throw DataError("dev evaluation saw no masked positions");
    EvalMetrics m;
    m.loss = total / static_cast<double>(count);
    m.accuracy = static_cast<double>(correct) / static_cast<double>(count);
    m.perplexity = std::exp(m.loss);
    return m;
}

inline EvalMetrics evaluate(const Checkpoint& ckpt, const Corpus& dev, const TrainConfig& tc) {
    return evaluate(ckpt.params, ckpt.config, dev, tc);
}

struct MetricsRow {
    std::size_t step = 0;
    double hard = 0.0;
    double soft = 0.0;
    double combined = 0.0;
    double dev_loss = 0.0;
    double dev_acc = 0.0;
    double ppl = 0.0;
    double alpha_s = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,hard,soft,combined,dev_loss,dev_acc,ppl,alpha_s,lr,seconds";

inline std::string format_metrics_row(const MetricsRow& r) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", r.step, r.hard, r.soft,
                  r.combined, r.dev_loss, r.dev_acc, r.ppl, r.alpha_s, r.lr, r.seconds);
    return buf;
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<MetricsRow> metrics;
    // Any KL clamp during the run.
    bool clamp_fired = false;
};

struct Teacher {
    const Checkpoint* checkpoint = nullptr;
    DistillConfig distill;
};

namespace detail {

inline json train_config_meta(const TrainConfig& c) {
    return json{{"total_steps", c.total_steps}, {"batch", c.batch},       {"seq_len", c.seq_len},
                {"mask_rate", c.mask_rate},     {"peak_lr", c.peak_lr},   {"warmup_fraction", c.warmup_fraction},
                {"seed", c.seed},               {"schedule", "linear warmup, linear decay to 0"}};
}

class MetricsSink {
public:
    explicit MetricsSink(const std::optional<std::filesystem::path>& dir) {
        if (!dir) return;
        std::filesystem::create_directories(*dir);
        out_.open(*dir / "metrics.csv", std::ios::trunc);
        if (!out_) throw DataError("cannot write " + (*dir / "metrics.csv").string());
        out_ << kMetricsHeader << '\n';
    }
    void write(const MetricsRow& r) {
        if (out_.is_open()) out_ << format_metrics_row(r) << '\n' << std::flush;
    }

private:
    std::ofstream out_;
};

// Shared loop for standalone MLM pretraining (teacher == nullptr) and
// distillation. At step s the row reports the losses of batch s under the
// current parameters and the dev metrics of those parameters; the Adam update
// follows. A last forward-only row is written at s == total_steps.
inline TrainResult run_training(const ModelConfig& cfg, ParamSet<float> params, const TrainConfig& tc,
                                const Corpus& train, const Corpus& dev, const Teacher* teacher,
                                const std::optional<std::filesystem::path>& out_dir, json meta) {
    validate(tc);
    check_params(params, cfg);
    if (teacher) {
        validate(teacher->distill);
        const ModelConfig& t = teacher->checkpoint->config;
        if (t.vocab != cfg.vocab) throw IncompatibilityError("teacher vocab differs from student vocab");
        if (tc.seq_len > t.max_positions) throw IncompatibilityError("seq_len exceeds teacher max_positions");
    }
    if (train.vocab > cfg.vocab) throw IncompatibilityError("corpus vocab exceeds model vocab");

    MetricsSink sink(out_dir);
    AdamState adam;
    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();
    auto save = [&](std::size_t step) {
        if (!out_dir) return;
        Checkpoint c{cfg, meta, params};
        c.meta["step"] = step;
        save_checkpoint(c, *out_dir / ("ckpt_" + std::to_string(step) + ".dwtc"));
    };

    for (std::size_t step = 0; step <= tc.total_steps; ++step) {
        const MlmBatch batch = make_mlm_batch(train, tc.batch, tc.seq_len, tc.mask_rate, tc.seed, step);
        Graph<float> g;
        const BoundParams<float> bound = bind_params(g, params, true);
        const Var<float> logits = forward_mlm(g, bound, cfg, batch);
        Var<float> loss;
        LossReport rep;
        if (teacher) {
            const Tensor<float> t_logits =
                mlm_logits(teacher->checkpoint->params, teacher->checkpoint->config, batch);
            DwtLoss<float> l = dwt_loss(logits, t_logits, batch.labels, teacher->distill, step, tc.total_steps);
            loss = l.combined;
            rep = l.report;
            result.clamp_fired = result.clamp_fired || rep.clamp_fired;
        } else {
            loss = cross_entropy(log_softmax(logits, 1.0), batch.labels);
            rep.hard = rep.combined = static_cast<double>(loss.value()[0]);
        }

        const double lr = lr_at(step, tc);
        if (step % tc.eval_every == 0 || step == tc.total_steps) {
            const EvalMetrics em = evaluate(params, cfg, dev, tc);
            MetricsRow row{step, rep.hard, rep.soft, rep.combined, em.loss, em.accuracy, em.perplexity,
                           rep.alpha_s_used, lr, 0.0};
            if (tc.record_wallclock) {
                row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            }
            sink.write(row);
            result.metrics.push_back(row);
        }
        if (step == tc.total_steps) break;

        const ParamSet<float> grads = named_gradients(bound, g.backward(loss));
        for (const auto& [name, gt] : grads) {
            if (!gt.all_finite()) {
                throw NumericError("non-finite gradient in tensor " + name + " at step " + std::to_string(step));
            }
        }
        adam_step(params, grads, adam, lr, tc.beta1, tc.beta2, tc.adam_eps);
        if (tc.checkpoint_every && (step + 1) % tc.checkpoint_every == 0 && step + 1 != tc.total_steps) {
            save(step + 1);
        }
    }
    save(tc.total_steps);
    result.checkpoint = Checkpoint{cfg, meta, std::move(params)};
    result.checkpoint.meta["step"] = tc.total_steps;
    return result;
}

}  // namespace detail

// Standalone MLM training (hard loss only).
inline TrainResult pretrain(const ModelConfig& cfg, const TrainConfig& tc, const Corpus& train, const Corpus& dev,
                            const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    json meta{{"kind", "pretrain"}, {"train", detail::train_config_meta(tc)}};
    return detail::run_training(cfg, init_random<float>(cfg, tc.seed), tc, train, dev, nullptr, out_dir,
                                std::move(meta));
}

struct DistillRun {
    TrainResult result;
    RemapReport remap;
};

// Trains a student against a frozen teacher. The teacher scores the same
// masked batch the student sees each step; its parameters never enter the
// student graph.
inline DistillRun distill_train(const ModelConfig& student_cfg, const Checkpoint& teacher_ckpt,
                                const DistillConfig& dc, const TrainConfig& tc, const Corpus& train,
                                const Corpus& dev, InitMode init,
                                const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
    validate(dc);
    RemapResult init_state = remap_init(teacher_ckpt, student_cfg, init, tc.seed);
    if (out_dir) {
        std::filesystem::create_directories(*out_dir);
        std::ofstream(*out_dir / "remap_report.json") << to_json(init_state.report).dump(2) << '\n';
    }
    json meta{{"kind", "distill"},
              {"train", detail::train_config_meta(tc)},
              {"init", to_string(init)},
              {"teacher_layers", teacher_ckpt.config.layers},
              {"alpha_h", dc.alpha_h},
              {"alpha_s", to_string(dc.alpha_s)},
              {"tau", dc.tau},
              {"tau_squared_scaling", dc.tau_squared_scaling}};
    Teacher teacher{&teacher_ckpt, dc};
    DistillRun run;
    run.result = detail::run_training(student_cfg, std::move(init_state.checkpoint.params), tc, train, dev, &teacher,
                                      out_dir, std::move(meta));
    run.remap = std::move(init_state.report);
    return run;
}

struct ProbeConfig {
    std::size_t epochs = 300;
    double lr = 0.05;
    std::uint64_t seed = 5;
    // fraction of examples used to fit the classifier; the rest is held out
    double train_fraction = 0.5;

    friend bool operator==(const ProbeConfig&, const ProbeConfig&) = default;
};

// Mean-pooled final hidden states, one row per sequence.
inline Tensor<float> pooled_features(const ParamSet<float>& params, const ModelConfig& cfg, const ProbeTask& task) {
    const std::size_t n = task.size(), S = task.seq_len, d = cfg.hidden;
    constexpr std::size_t chunk = 32;
    Tensor<float> out(Shape{n, d});
    for (std::size_t lo = 0; lo < n; lo += chunk) {
        const std::size_t hi = std::min(n, lo + chunk);
        Graph<float> g;
        const BoundParams<float> bound = bind_params(g, params, false);
        const auto ids = std::span<const Token>(task.ids).subspan(lo * S, (hi - lo) * S);
        const Tensor<float>& h = encode(g, bound, cfg, ids, hi - lo, S).value();
        for (std::size_t i = lo; i < hi; ++i) {
            float* dst = out.data() + i * d;
            for (std::size_t t = 0; t < S; ++t) {
                const float* src = h.data() + ((i - lo) * S + t) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
            for (std::size_t j = 0; j < d; ++j) dst[j] /= static_cast<float>(S);
        }
    }
    return out;
}

// Frozen-encoder linear probe: softmax regression on pooled features, trained
// full-batch with Adam; returns held-out accuracy.
inline double probe_downstream(const ParamSet<float>& params, const ModelConfig& cfg, const ProbeTask& task,
                               const ProbeConfig& pc) {
    if (task.size() < 2) throw DataError("probe task too small");
    const Tensor<float> feats = pooled_features(params, cfg, task);
    const std::size_t n = task.size(), d = cfg.hidden, k = task.num_classes;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(pc.seed, {0x70726f6265ULL}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(pc.train_fraction * static_cast<double>(n)));
    if (n_train == 0 || n_train >= n) throw ParameterError("probe train fraction leaves an empty split");

    auto gather = [&](std::size_t lo, std::size_t hi, std::vector<std::size_t>& labels) {
        Tensor<float> x(Shape{hi - lo, d});
        for (std::size_t i = lo; i < hi; ++i) {
            std::copy_n(feats.data() + order[i] * d, d, x.data() + (i - lo) * d);
            labels.push_back(task.labels[order[i]]);
        }
        return x;
    };
    std::vector<std::size_t> y_train, y_test;
    const Tensor<float> x_train = gather(0, n_train, y_train);
    const Tensor<float> x_test = gather(n_train, n, y_test);

    ParamSet<float> clf{{"w", Tensor<float>(Shape{d, k})}, {"b", Tensor<float>(Shape{k})}};
    AdamState state;
    for (std::size_t e = 0; e < pc.epochs; ++e) {
        Graph<float> g;
        const BoundParams<float> bound = bind_params(g, clf, true);
        const Var<float> x = g.leaf(x_train);
        const Var<float> loss = cross_entropy(log_softmax(linear(x, bound.at("w"), bound.at("b"))), y_train);
        adam_step(clf, named_gradients(bound, g.backward(loss)), state, pc.lr);
    }
    Graph<float> g;
    const BoundParams<float> bound = bind_params(g, clf, false);
    const Tensor<float>& logits = linear(g.leaf(x_test), bound.at("w"), bound.at("b")).value();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < y_test.size(); ++i) {
        const float* row = logits.data() + i * k;
        correct += static_cast<std::size_t>(std::max_element(row, row + k) - row) == y_test[i];
    }
    return static_cast<double>(correct) / static_cast<double>(y_test.size());
}

inline double probe_downstream(const Checkpoint& ckpt, const ProbeTask& task, const ProbeConfig& pc) {
    return probe_downstream(ckpt.params, ckpt.config, task, pc);
}

}  // namespace dwt
