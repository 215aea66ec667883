#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dwt/checkpoint.hpp"
#include "dwt/distill.hpp"
#include "dwt/model.hpp"
#include "dwt/remap.hpp"
#include "dwt/run_config.hpp"
#include "dwt/trainer.hpp"

namespace dwt {

inline constexpr const char* kCodeVersion = "dwt-lab 0.1.0";

// Teacher depths for the quality ablation, paired with a 6-layer student.
struct TeacherGrade {
    const char* arm;
    std::size_t layers;
};
inline constexpr TeacherGrade kTeacherGrades[] = {{"weak", 4}, {"very_weak", 2}, {"extremely_weak", 1}};
inline constexpr const char* kBaselineArm = "standalone";

struct ExperimentOptions {
    RunConfig base;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::filesystem::path out;
    bool dry_run = false;
};

// One finished training run.
struct RunRecord {
    std::string role;
    RunConfig config;
    Checkpoint checkpoint;
    std::vector<MetricsRow> metrics;
    std::optional<RemapReport> remap;
    double probe_acc = 0.0;
    std::filesystem::path dir;

    double final_dev_loss() const { return metrics.back().dev_loss; }
    double step0_dev_loss() const { return metrics.front().dev_loss; }

    // Dev loss at the last evaluated step not after `step`.
    std::pair<std::size_t, double> dev_loss_at(std::size_t step) const {
        const MetricsRow* best = &metrics.front();
        for (const MetricsRow& r : metrics) {
            if (r.step <= step) best = &r;
        }
        return {best->step, best->dev_loss};
    }
};

// Trains and caches runs. Identical configurations (the 1:1 random-init
// distillation from the 4-layer teacher appears in all three ablations) are
// trained once and shared.
class Lab {
public:
    explicit Lab(std::filesystem::path root, std::ostream* log = &std::cerr) : root_(std::move(root)), log_(log) {}

    const std::pair<Corpus, Corpus>& corpora(const CorpusConfig& c) {
        const std::string key = to_json(c).dump();
        auto it = corpora_.find(key);
        if (it == corpora_.end()) it = corpora_.emplace(key, make_corpora(c)).first;
        return it->second;
    }

    const ProbeTask& probe_task(const RunConfig& rc) {
        const std::string key = to_json(rc.corpus).dump() + to_json(rc.probe).dump();
        auto it = probes_.find(key);
        if (it == probes_.end()) it = probes_.emplace(key, gen_probe_task(corpora(rc.corpus).first, rc.probe.task)).first;
        return it->second;
    }

    // Standalone MLM training of `rc.student`.
    const RunRecord& pretrained(RunConfig rc, const std::string& label) {
        rc.teacher.reset();
        rc.teacher_ckpt.clear();
        rc.init_mode = InitMode::Random;
        rc.distill = DistillConfig{};
        const std::string key = "pretrain|" + cache_key(rc);
        if (auto it = runs_.find(key); it != runs_.end()) return *it->second;
        auto rec = std::make_unique<RunRecord>();
        rec->role = "pretrain";
        rec->dir = run_dir(label, key);
        rc.out_dir = rec->dir.string();
        rec->config = rc;
        note("pretrain " + label);
        const auto& [train, dev] = corpora(rc.corpus);
        TrainResult r = pretrain(rc.student, rc.train, train, dev, rec->dir);
        finish(*rec, std::move(r), rc);
        return *runs_.emplace(key, std::move(rec)).first->second;
    }

    // Distillation of `rc.student` from a teacher of shape `*rc.teacher`,
    // itself pretrained here under the same seed.
    const RunRecord& distilled(RunConfig rc, const std::string& label) {
        if (!rc.teacher) throw ConfigError("distillation run needs a teacher model config");
        RunConfig teacher_rc = rc;
        teacher_rc.student = *rc.teacher;
        const RunRecord& teacher =
            pretrained(teacher_rc, "teacher-L" + std::to_string(rc.teacher->layers) + "-s" + std::to_string(rc.train.seed));
        rc.teacher_ckpt = (teacher.dir / ("ckpt_" + std::to_string(rc.train.total_steps) + ".dwtc")).string();
        const std::string key = "distill|" + cache_key(rc);
        if (auto it = runs_.find(key); it != runs_.end()) return *it->second;
        auto rec = std::make_unique<RunRecord>();
        rec->role = "distill";
        rec->dir = run_dir(label, key);
        rc.out_dir = rec->dir.string();
        rec->config = rc;
        note("distill " + label);
        const auto& [train, dev] = corpora(rc.corpus);
        DistillRun r = distill_train(rc.student, teacher.checkpoint, rc.distill, rc.train, train, dev, rc.init_mode, rec->dir);
        rec->remap = std::move(r.remap);
        finish(*rec, std::move(r.result), rc);
        return *runs_.emplace(key, std::move(rec)).first->second;
    }

    const std::filesystem::path& root() const { return root_; }

private:
    static std::string cache_key(RunConfig rc) {
        rc.out_dir.clear();
        rc.teacher_ckpt.clear();
        return to_json(rc).dump();
    }

    std::filesystem::path run_dir(const std::string& label, const std::string& key) const {
        char buf[9];
        std::snprintf(buf, sizeof buf, "%08llx",
                      static_cast<unsigned long long>(detail::fnv1a(key) & 0xffffffffULL));
        return root_ / "runs" / (label + "-" + buf);
    }

    void finish(RunRecord& rec, TrainResult r, const RunConfig& rc) {
        rec.checkpoint = std::move(r.checkpoint);
        rec.metrics = std::move(r.metrics);
        rec.probe_acc = probe_downstream(rec.checkpoint, probe_task(rc), rc.probe.fit);
        std::ofstream(rec.dir / "run_config.json") << serialize_run_config(rc);
        note("  final dev loss " + std::to_string(rec.final_dev_loss()) + ", probe acc " + std::to_string(rec.probe_acc));
    }

    void note(const std::string& s) {
        if (log_) *log_ << "[lab] " << s << std::endl;
    }

    std::filesystem::path root_;
    std::ostream* log_;
    std::map<std::string, std::pair<Corpus, Corpus>> corpora_;
    std::map<std::string, ProbeTask> probes_;
    std::map<std::string, std::unique_ptr<RunRecord>> runs_;
};

struct SeedRow {
    std::string arm;
    std::uint64_t seed = 0;
    double final_dev_loss = 0.0;
    double probe_acc = 0.0;
    // arm − standalone final dev loss at the same seed
    double delta = 0.0;
};

struct AblationResult {
    std::string arm;
    std::vector<std::uint64_t> seeds;
    std::vector<double> dev_losses;
    std::vector<double> probe_accs;
    double mean_dev_loss = 0.0;
    double mean_probe_acc = 0.0;
    // arm mean − standalone mean, over the same seeds
    double delta = 0.0;
    double probe_delta = 0.0;
    json extra = json::object();
};

// Scale-dependent claims are reported, never asserted: pass, or warn.
struct DirectionalCheck {
    std::string claim;
    bool pass = false;
    std::string detail;
};

struct ExperimentReport {
    std::string name;
    bool dry_run = false;
    std::vector<std::uint64_t> seeds;
    std::vector<SeedRow> rows;
    std::vector<AblationResult> arms;
    std::vector<DirectionalCheck> checks;
    json extra = json::object();
    json manifest = json::object();

    const AblationResult& arm(const std::string& name_) const {
        for (const auto& a : arms) {
            if (a.arm == name_) return a;
        }
        throw ContractError("no arm named " + name_);
    }
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline void require_seeds(const ExperimentOptions& o) {
    if (o.seeds.size() < 3) throw ConfigError("ablations need at least 3 seeds, got " + std::to_string(o.seeds.size()));
}

inline RunConfig arm_config(const RunConfig& base, std::uint64_t seed) {
    RunConfig rc = base;
    rc.train.seed = seed;
    return rc;
}

inline ModelConfig with_layers(ModelConfig c, std::size_t layers) {
    c.layers = layers;
    return c;
}

// Groups per-seed records into arm rows and summaries. `arms` lists arm names
// with a lookup from seed to record; the first entry must be the baseline.
inline void collect(ExperimentReport& rep,
                    const std::vector<std::pair<std::string, std::function<const RunRecord&(std::uint64_t)>>>& arms) {
    std::map<std::uint64_t, double> baseline;
    for (const auto& [name, get] : arms) {
        AblationResult a;
        a.arm = name;
        for (std::uint64_t seed : rep.seeds) {
            const RunRecord& r = get(seed);
            if (name == kBaselineArm) baseline[seed] = r.final_dev_loss();
            a.seeds.push_back(seed);
            a.dev_losses.push_back(r.final_dev_loss());
            a.probe_accs.push_back(r.probe_acc);
            rep.rows.push_back({name, seed, r.final_dev_loss(), r.probe_acc, r.final_dev_loss() - baseline.at(seed)});
            rep.manifest["runs"].push_back(json{{"arm", name}, {"seed", seed}, {"role", r.role},
                                                {"dir", r.dir.string()}, {"config", to_json(r.config)}});
        }
        a.mean_dev_loss = mean_of(a.dev_losses);
        a.mean_probe_acc = mean_of(a.probe_accs);
        rep.arms.push_back(std::move(a));
    }
    const AblationResult& base = rep.arms.front();
    for (AblationResult& a : rep.arms) {
        a.delta = a.mean_dev_loss - base.mean_dev_loss;
        a.probe_delta = a.mean_probe_acc - base.mean_probe_acc;
    }
}

inline ExperimentReport start_report(const std::string& name, const ExperimentOptions& o) {
    ExperimentReport rep;
    rep.name = name;
    rep.dry_run = o.dry_run;
    rep.seeds = o.seeds;
    rep.manifest = json{{"version", kCodeVersion},
                        {"experiment", name},
                        {"seeds", o.seeds},
                        {"dry_run", o.dry_run},
                        {"base_config", to_json(o.base)},
                        {"runs", json::array()}};
    return rep;
}

inline DirectionalCheck direction(const std::string& claim, double lhs, double rhs, const std::string& lhs_name,
                                  const std::string& rhs_name) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s=%.6f vs %s=%.6f", lhs_name.c_str(), lhs, rhs_name.c_str(), rhs);
    return DirectionalCheck{claim, lhs <= rhs, buf};
}

}  // namespace detail

// Teacher-quality ablation: teachers at 4/2/1 layers against a 6-layer
// standalone baseline. In dry-run mode only the size grading is produced.
inline ExperimentReport experiment_teacher_quality(Lab& lab, const ExperimentOptions& o) {
    detail::require_seeds(o);
    ExperimentReport rep = detail::start_report("teacher_quality", o);
    const ModelConfig student = o.base.student;
    validate(student);
    json grades = json::array();
    const double student_params = static_cast<double>(num_params(student));
    for (const auto& g : kTeacherGrades) {
        const ModelConfig t = detail::with_layers(student, g.layers);
        const LayerMap map = build_layer_map(g.layers, student.layers);
        grades.push_back(json{{"arm", g.arm},
                              {"teacher_layers", g.layers},
                              {"teacher_params", num_params(t)},
                              {"param_ratio", static_cast<double>(num_params(t)) / student_params},
                              {"layer_map", map.mapping}});
    }
    rep.extra["student_params"] = num_params(student);
    rep.extra["teachers"] = grades;
    if (o.dry_run) return rep;

    using Getter = std::function<const RunRecord&(std::uint64_t)>;
    std::vector<std::pair<std::string, Getter>> arms;
    arms.emplace_back(kBaselineArm, [&](std::uint64_t s) -> const RunRecord& {
        return lab.pretrained(detail::arm_config(o.base, s), "standalone-L" + std::to_string(student.layers) + "-s" +
                                                                 std::to_string(s));
    });
    for (const auto& g : kTeacherGrades) {
        arms.emplace_back(g.arm, [&, g](std::uint64_t s) -> const RunRecord& {
            RunConfig rc = detail::arm_config(o.base, s);
            rc.teacher = detail::with_layers(student, g.layers);
            rc.init_mode = InitMode::Random;
            return lab.distilled(rc, std::string(g.arm) + "-s" + std::to_string(s));
        });
    }
    detail::collect(rep, arms);

    json teacher_losses = json::object();
    for (const auto& g : kTeacherGrades) {
        std::vector<double> v;
        for (std::uint64_t s : o.seeds) {
            RunConfig rc = detail::arm_config(o.base, s);
            rc.student = detail::with_layers(student, g.layers);
            v.push_back(lab.pretrained(rc, "teacher-L" + std::to_string(g.layers) + "-s" + std::to_string(s))
                            .final_dev_loss());
        }
        teacher_losses[g.arm] = detail::mean_of(v);
    }
    rep.extra["teacher_mean_dev_loss"] = teacher_losses;
    rep.checks.push_back(detail::direction("weak-teacher delta better than extremely-weak-teacher delta",
                                           rep.arm("weak").delta, rep.arm("extremely_weak").delta, "weak.delta",
                                           "extremely_weak.delta"));
    return rep;
}

// Soft-loss weight ablation with the 4-layer teacher: Strong (4), Normal (1)
// and a 4 -> 1 linear decay.
inline ExperimentReport experiment_loss_weight(Lab& lab, const ExperimentOptions& o) {
    detail::require_seeds(o);
    ExperimentReport rep = detail::start_report("loss_weight", o);
    const ModelConfig student = o.base.student;
    validate(student);
    const std::vector<std::pair<std::string, Schedule>> schedules = {{"strong", Schedule::constant(4.0)},
                                                                     {"normal", Schedule::constant(1.0)},
                                                                     {"decay", Schedule::linear_decay(4.0, 1.0)}};
    json sched = json::object();
    for (const auto& [arm, s] : schedules) sched[arm] = to_string(s);
    rep.extra["schedules"] = sched;
    rep.extra["teacher_layers"] = 4;
    if (o.dry_run) return rep;

    auto run = [&](const std::string& arm, const Schedule& s, std::uint64_t seed) -> const RunRecord& {
        RunConfig rc = detail::arm_config(o.base, seed);
        rc.teacher = detail::with_layers(student, 4);
        rc.init_mode = InitMode::Random;
        rc.distill.alpha_h = 1.0;
        rc.distill.alpha_s = s;
        const std::string label = s == Schedule::constant(1.0) ? "weak" : arm;
        return lab.distilled(rc, label + "-s" + std::to_string(seed));
    };
    using Getter = std::function<const RunRecord&(std::uint64_t)>;
    std::vector<std::pair<std::string, Getter>> arms;
    arms.emplace_back(kBaselineArm, [&](std::uint64_t s) -> const RunRecord& {
        return lab.pretrained(detail::arm_config(o.base, s),
                              "standalone-L" + std::to_string(student.layers) + "-s" + std::to_string(s));
    });
    for (const auto& [arm, s] : schedules) {
        arms.emplace_back(arm, [&, arm = arm, s = s](std::uint64_t seed) -> const RunRecord& { return run(arm, s, seed); });
    }
    detail::collect(rep, arms);

    // convergence-speed view: dev loss at 10%, 50% and 100% of training
    const std::size_t total = o.base.train.total_steps;
    const std::vector<std::pair<std::string, std::size_t>> marks = {
        {"10%", total / 10}, {"50%", total / 2}, {"100%", total}};
    json curves = json::object();
    std::map<std::string, std::map<std::string, double>> at;
    for (const auto& [arm, s] : schedules) {
        json c = json::object();
        for (const auto& [mark, step] : marks) {
            std::vector<double> v;
            std::size_t used = 0;
            for (std::uint64_t seed : o.seeds) {
                const auto [st, loss] = run(arm, s, seed).dev_loss_at(step);
                used = st;
                v.push_back(loss);
            }
            at[arm][mark] = detail::mean_of(v);
            c[mark] = json{{"step", used}, {"mean_dev_loss", at[arm][mark]}};
        }
        curves[arm] = c;
    }
    rep.extra["curves"] = curves;
    rep.checks.push_back(detail::direction("strong converges faster: dev loss at 10% of steps <= normal's",
                                           at["strong"]["10%"], at["normal"]["10%"], "strong@10%", "normal@10%"));
    rep.checks.push_back(detail::direction("normal ends better: final dev loss <= strong's", at["normal"]["100%"],
                                           at["strong"]["100%"], "normal@100%", "strong@100%"));
    return rep;
}

// Parameter-remapping ablation: 4-layer teacher, 6-layer student, PR(O)
// (remapped init) versus PR(X) (random init).
inline ExperimentReport experiment_pr(Lab& lab, const ExperimentOptions& o) {
    detail::require_seeds(o);
    ExperimentReport rep = detail::start_report("parameter_remapping", o);
    const ModelConfig student = o.base.student;
    validate(student);
    if (student.layers < 4) throw ConfigError("parameter-remapping ablation needs a student with at least 4 layers");
    const LayerMap map = build_layer_map(4, student.layers);
    rep.extra["layer_map"] = map.mapping;
    rep.extra["teacher_layers"] = 4;
    if (o.dry_run) return rep;

    auto run = [&](InitMode mode, std::uint64_t seed) -> const RunRecord& {
        RunConfig rc = detail::arm_config(o.base, seed);
        rc.teacher = detail::with_layers(student, 4);
        rc.init_mode = mode;
        rc.distill = o.base.distill;
        const std::string label = mode == InitMode::PR ? "pr-o" : "weak";
        return lab.distilled(rc, label + "-s" + std::to_string(seed));
    };
    using Getter = std::function<const RunRecord&(std::uint64_t)>;
    std::vector<std::pair<std::string, Getter>> arms;
    arms.emplace_back(kBaselineArm, [&](std::uint64_t s) -> const RunRecord& {
        return lab.pretrained(detail::arm_config(o.base, s),
                              "standalone-L" + std::to_string(student.layers) + "-s" + std::to_string(s));
    });
    arms.emplace_back("PR(O)", [&](std::uint64_t s) -> const RunRecord& { return run(InitMode::PR, s); });
    arms.emplace_back("PR(X)", [&](std::uint64_t s) -> const RunRecord& { return run(InitMode::Random, s); });
    detail::collect(rep, arms);

    std::vector<double> step0_pr, step0_rand;
    json reports = json::object();
    for (std::uint64_t s : o.seeds) {
        const RunRecord& a = run(InitMode::PR, s);
        const RunRecord& b = run(InitMode::Random, s);
        step0_pr.push_back(a.step0_dev_loss());
        step0_rand.push_back(b.step0_dev_loss());
        reports["PR(O)-s" + std::to_string(s)] = (a.dir / "remap_report.json").string();
        reports["PR(X)-s" + std::to_string(s)] = (b.dir / "remap_report.json").string();
    }
    rep.extra["remap_reports"] = reports;
    rep.extra["step0_dev_loss"] = json{{"PR(O)", detail::mean_of(step0_pr)}, {"PR(X)", detail::mean_of(step0_rand)}};
    rep.checks.push_back(detail::direction("PR(O) starts ahead: step-0 dev loss below PR(X)'s",
                                           detail::mean_of(step0_pr), detail::mean_of(step0_rand), "PR(O)@0",
                                           "PR(X)@0"));
    rep.checks.push_back(detail::direction("PR(X) ends better: final dev loss <= PR(O)'s", rep.arm("PR(X)").mean_dev_loss,
                                           rep.arm("PR(O)").mean_dev_loss, "PR(X)", "PR(O)"));
    return rep;
}

inline json to_json(const ExperimentReport& rep) {
    json arms = json::array();
    for (const auto& a : rep.arms) {
        arms.push_back(json{{"arm", a.arm},
                            {"seeds", a.seeds},
                            {"final_dev_loss", a.dev_losses},
                            {"probe_acc", a.probe_accs},
                            {"mean_final_dev_loss", a.mean_dev_loss},
                            {"mean_probe_acc", a.mean_probe_acc},
                            {"delta", a.delta},
                            {"probe_delta", a.probe_delta}});
    }
    json checks = json::array();
    for (const auto& c : rep.checks) {
        checks.push_back(json{{"claim", c.claim}, {"status", c.pass ? "pass" : "warn"}, {"detail", c.detail}});
    }
    return json{{"experiment", rep.name},
                {"dry_run", rep.dry_run},
                {"seeds", rep.seeds},
                {"metric", "final dev MLM loss (lower is better); delta = arm mean - standalone mean"},
                {"arms", arms},
                {"directional_checks", checks},
                {"extra", rep.extra}};
}

inline std::string format_results_csv(const ExperimentReport& rep) {
    std::string out = "arm,seed,final_dev_loss,probe_acc,delta\n";
    char buf[256];
    for (const auto& r : rep.rows) {
        std::snprintf(buf, sizeof buf, "%s,%llu,%.17g,%.17g,%.17g\n", r.arm.c_str(),
                      static_cast<unsigned long long>(r.seed), r.final_dev_loss, r.probe_acc, r.delta);
        out += buf;
    }
    return out;
}

// results.csv, summary.json and manifest.json under `dir`.
inline void write_report(const ExperimentReport& rep, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "results.csv") << format_results_csv(rep);
    std::ofstream(dir / "summary.json") << to_json(rep).dump(2) << '\n';
    std::ofstream(dir / "manifest.json") << rep.manifest.dump(2) << '\n';
}

}  // namespace dwt
