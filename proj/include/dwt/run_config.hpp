#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dwt/checkpoint.hpp"
#include "dwt/corpus.hpp"
#include "dwt/distill.hpp"
#include "dwt/remap.hpp"
#include "dwt/trainer.hpp"

namespace dwt {

struct CorpusConfig {
    CorpusParams generator;
    double dev_fraction = 0.1;

    friend bool operator==(const CorpusConfig& a, const CorpusConfig& b) {
        return a.generator.vocab == b.generator.vocab && a.generator.length == b.generator.length &&
               a.generator.order == b.generator.order && a.generator.sharpness == b.generator.sharpness &&
               a.generator.seed == b.generator.seed && a.dev_fraction == b.dev_fraction;
    }
};

struct ProbeSettings {
    ProbeParams task;
    ProbeConfig fit;

    friend bool operator==(const ProbeSettings& a, const ProbeSettings& b) {
        return a.task.num_classes == b.task.num_classes && a.task.n_examples == b.task.n_examples &&
               a.task.seq_len == b.task.seq_len && a.task.template_weight == b.task.template_weight &&
               a.task.template_sharpness == b.task.template_sharpness && a.task.seed == b.task.seed &&
               a.fit == b.fit;
    }
};

// Everything one run needs. Serialises to a closed JSON document: unknown
// keys are rejected at every level.
struct RunConfig {
    CorpusConfig corpus;
    ModelConfig student;
    std::optional<ModelConfig> teacher;
    std::string teacher_ckpt;
    TrainConfig train;
    DistillConfig distill;
    ProbeSettings probe;
    InitMode init_mode = InitMode::Random;
    std::string out_dir = "runs/default";

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline json to_json(const CorpusConfig& c) {
    return json{{"vocab", c.generator.vocab},         {"length", c.generator.length}, {"order", c.generator.order},
                {"sharpness", c.generator.sharpness}, {"seed", c.generator.seed},     {"dev_fraction", c.dev_fraction}};
}

inline json to_json(const TrainConfig& c) {
    return json{{"total_steps", c.total_steps},
                {"batch", c.batch},
                {"seq_len", c.seq_len},
                {"mask_rate", c.mask_rate},
                {"peak_lr", c.peak_lr},
                {"warmup_fraction", c.warmup_fraction},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"seed", c.seed},
                {"eval_every", c.eval_every},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_batches", c.eval_batches},
                {"eval_seed", c.eval_seed},
                {"record_wallclock", c.record_wallclock}};
}

inline json to_json(const DistillConfig& c) {
    return json{{"alpha_h", c.alpha_h},
                {"alpha_s_schedule", to_string(c.alpha_s)},
                {"tau", c.tau},
                {"tau_squared_scaling", c.tau_squared_scaling}};
}

inline json to_json(const ProbeSettings& p) {
    return json{{"num_classes", p.task.num_classes},
                {"n_examples", p.task.n_examples},
                {"seq_len", p.task.seq_len},
                {"template_weight", p.task.template_weight},
                {"template_sharpness", p.task.template_sharpness},
                {"seed", p.task.seed},
                {"epochs", p.fit.epochs},
                {"lr", p.fit.lr},
                {"fit_seed", p.fit.seed},
                {"train_fraction", p.fit.train_fraction}};
}

inline json to_json(const RunConfig& r) {
    json j{{"corpus", to_json(r.corpus)},   {"student", to_json(r.student)},         {"train", to_json(r.train)},
           {"distill", to_json(r.distill)}, {"probe", to_json(r.probe)},             {"init_mode", to_string(r.init_mode)},
           {"out_dir", r.out_dir},          {"teacher_ckpt", r.teacher_ckpt}};
    if (r.teacher) j["teacher"] = to_json(*r.teacher);
    return j;
}

inline RunConfig run_config_from_json(const json& j) {
    using detail::read_key;
    detail::reject_unknown_keys(
        j, {"corpus", "student", "teacher", "teacher_ckpt", "train", "distill", "probe", "init_mode", "out_dir"},
        "config");
    RunConfig r;
    if (j.contains("corpus")) {
        const json& c = j.at("corpus");
        detail::reject_unknown_keys(c, {"vocab", "length", "order", "sharpness", "seed", "dev_fraction"}, "corpus");
        read_key(c, "vocab", r.corpus.generator.vocab, "corpus");
        read_key(c, "length", r.corpus.generator.length, "corpus");
        read_key(c, "order", r.corpus.generator.order, "corpus");
        read_key(c, "sharpness", r.corpus.generator.sharpness, "corpus");
        read_key(c, "seed", r.corpus.generator.seed, "corpus");
        read_key(c, "dev_fraction", r.corpus.dev_fraction, "corpus");
    }
    if (j.contains("student")) r.student = model_config_from_json(j.at("student"), "student");
    if (j.contains("teacher") && !j.at("teacher").is_null()) r.teacher = model_config_from_json(j.at("teacher"), "teacher");
    read_key(j, "teacher_ckpt", r.teacher_ckpt, "config");
    if (j.contains("train")) {
        const json& t = j.at("train");
        detail::reject_unknown_keys(t,
                                    {"total_steps", "batch", "seq_len", "mask_rate", "peak_lr", "warmup_fraction",
                                     "beta1", "beta2", "adam_eps", "seed", "eval_every", "checkpoint_every",
                                     "eval_batches", "eval_seed", "record_wallclock"},
                                    "train");
        TrainConfig& c = r.train;
        read_key(t, "total_steps", c.total_steps, "train");
        read_key(t, "batch", c.batch, "train");
        read_key(t, "seq_len", c.seq_len, "train");
        read_key(t, "mask_rate", c.mask_rate, "train");
        read_key(t, "peak_lr", c.peak_lr, "train");
        read_key(t, "warmup_fraction", c.warmup_fraction, "train");
        read_key(t, "beta1", c.beta1, "train");
        read_key(t, "beta2", c.beta2, "train");
        read_key(t, "adam_eps", c.adam_eps, "train");
        read_key(t, "seed", c.seed, "train");
        read_key(t, "eval_every", c.eval_every, "train");
        read_key(t, "checkpoint_every", c.checkpoint_every, "train");
        read_key(t, "eval_batches", c.eval_batches, "train");
        read_key(t, "eval_seed", c.eval_seed, "train");
        read_key(t, "record_wallclock", c.record_wallclock, "train");
        validate(c);
    }
    if (j.contains("distill")) {
        const json& d = j.at("distill");
        detail::reject_unknown_keys(d, {"alpha_h", "alpha_s_schedule", "tau", "tau_squared_scaling"}, "distill");
        read_key(d, "alpha_h", r.distill.alpha_h, "distill");
        std::string sched;
        read_key(d, "alpha_s_schedule", sched, "distill");
        if (!sched.empty()) r.distill.alpha_s = parse_schedule(sched);
        read_key(d, "tau", r.distill.tau, "distill");
        read_key(d, "tau_squared_scaling", r.distill.tau_squared_scaling, "distill");
        validate(r.distill);
    }
    if (j.contains("probe")) {
        const json& p = j.at("probe");
        detail::reject_unknown_keys(p,
                                    {"num_classes", "n_examples", "seq_len", "template_weight", "template_sharpness",
                                     "seed", "epochs", "lr", "fit_seed", "train_fraction"},
                                    "probe");
        read_key(p, "num_classes", r.probe.task.num_classes, "probe");
        read_key(p, "n_examples", r.probe.task.n_examples, "probe");
        read_key(p, "seq_len", r.probe.task.seq_len, "probe");
        read_key(p, "template_weight", r.probe.task.template_weight, "probe");
        read_key(p, "template_sharpness", r.probe.task.template_sharpness, "probe");
        read_key(p, "seed", r.probe.task.seed, "probe");
        read_key(p, "epochs", r.probe.fit.epochs, "probe");
        read_key(p, "lr", r.probe.fit.lr, "probe");
        read_key(p, "fit_seed", r.probe.fit.seed, "probe");
        read_key(p, "train_fraction", r.probe.fit.train_fraction, "probe");
    }
    if (j.contains("init_mode")) {
        std::string m;
        read_key(j, "init_mode", m, "config");
        r.init_mode = parse_init_mode(m);
    }
    read_key(j, "out_dir", r.out_dir, "config");
    return r;
}

inline std::string serialize_run_config(const RunConfig& r) { return to_json(r).dump(2) + "\n"; }

inline RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
// it parses, otherwise taken as a string (so `constant:4` needs no quoting).
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &doc;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object()) throw ConfigError("override path '" + path + "' runs through a non-object");
        node = &(*node)[parts[i]];
        if (node->is_null()) *node = json::object();
    }
    if (!node->is_object()) throw ConfigError("override path '" + path + "' runs through a non-object");
    (*node)[parts.back()] = value;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
        j = json::parse(buf.str());
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": malformed JSON: " + e.what());
    }
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j);
}

inline std::pair<Corpus, Corpus> make_corpora(const CorpusConfig& c) {
    return train_dev_split(gen_corpus(c.generator), c.dev_fraction);
}

}  // namespace dwt
