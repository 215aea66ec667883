#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "dwt/checkpoint.hpp"
#include "dwt/error.hpp"
#include "dwt/model.hpp"

namespace dwt {

// Student layer i takes teacher layer mapping[i]: identity over the teacher's
// depth, then the teacher's last layer repeated.
struct LayerMap {
    std::size_t teacher_layers = 0;
    std::size_t student_layers = 0;
    std::vector<std::size_t> mapping;
};

inline LayerMap build_layer_map(std::size_t teacher_layers, std::size_t student_layers) {
    if (teacher_layers == 0) throw ConfigError("teacher must have at least one layer");
    if (teacher_layers > student_layers) {
        throw IncompatibilityError("unsupported direction: parameter remapping expands a " +
                                   std::to_string(teacher_layers) + "-layer teacher, cannot shrink it to " +
                                   std::to_string(student_layers) + " layers");
    }
    LayerMap m{teacher_layers, student_layers, std::vector<std::size_t>(student_layers)};
    for (std::size_t i = 0; i < student_layers; ++i) m.mapping[i] = std::min(i, teacher_layers - 1);
    return m;
}

enum class InitMode { PR, Random };

inline std::string to_string(InitMode m) { return m == InitMode::PR ? "PR" : "random"; }

inline InitMode parse_init_mode(const std::string& s) {
    if (s == "PR" || s == "pr") return InitMode::PR;
    if (s == "random") return InitMode::Random;
    throw ConfigError("init mode must be PR or random, got '" + s + "'");
}

// FNV-1a over the tensor's little-endian f32 bytes, as 16 hex digits.
inline std::string tensor_hash(const Tensor<float>& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (float v : t.values()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline void check_remap_compatible(const ModelConfig& teacher, const ModelConfig& student) {
    auto mismatch = [](const char* dim, std::size_t t, std::size_t s) {
        if (t != s) {
            throw IncompatibilityError(std::string("teacher/student ") + dim + " mismatch: teacher " +
                                       std::to_string(t) + " vs student " + std::to_string(s));
        }
    };
    mismatch("hidden", teacher.hidden, student.hidden);
    mismatch("heads", teacher.heads, student.heads);
    mismatch("ffn", teacher.ffn, student.ffn);
    mismatch("vocab", teacher.vocab, student.vocab);
    mismatch("max_positions", teacher.max_positions, student.max_positions);
    mismatch("tie_mlm_head", teacher.tie_mlm_head, student.tie_mlm_head);
}

// Teacher parameters laid out in the student's name space. Embeddings and
// the MLM head are copied verbatim; layer tensors follow the layer map. Every
// tensor is a fresh copy, so duplicated layers diverge once trained.
inline ParamSet<float> expand_teacher(const Checkpoint& teacher, const ModelConfig& student_cfg) {
    validate(student_cfg);
    check_remap_compatible(teacher.config, student_cfg);
    const LayerMap map = build_layer_map(teacher.config.layers, student_cfg.layers);
    ParamSet<float> out;
    for (const auto& [name, shape] : param_shapes(student_cfg)) {
        std::string src = name;
        if (name.rfind("layer.", 0) == 0) {
            const auto dot = name.find('.', 6);
            const std::size_t i = std::stoul(name.substr(6, dot - 6));
            src = layer_prefix(map.mapping[i]) + name.substr(dot + 1);
        }
        auto it = teacher.params.find(src);
        if (it == teacher.params.end()) throw IncompatibilityError("teacher checkpoint lacks tensor " + src);
        out.emplace(name, it->second);
    }
    return out;
}

struct RemapEntry {
    std::string destination;
    std::string source;  // empty for randomly initialised tensors
    std::string provenance;  // "copied", "duplicated" or "random"
    std::string source_hash;
    std::string destination_hash;
};

struct RemapReport {
    InitMode mode = InitMode::Random;
    LayerMap layer_map;
    std::vector<RemapEntry> entries;
    std::size_t copied_layers = 0;
    std::size_t duplicated_layers = 0;
    std::size_t random_tensors = 0;
};

inline json to_json(const RemapReport& r) {
    json entries = json::array();
    for (const auto& e : r.entries) {
        entries.push_back(json{{"destination", e.destination},
                               {"source", e.source},
                               {"provenance", e.provenance},
                               {"source_hash", e.source_hash},
                               {"destination_hash", e.destination_hash}});
    }
    return json{{"mode", to_string(r.mode)},
                {"layer_map", r.layer_map.mapping},
                {"copied_layers", r.copied_layers},
                {"duplicated_layers", r.duplicated_layers},
                {"random_tensors", r.random_tensors},
                {"tensors", entries}};
}

struct RemapResult {
    Checkpoint checkpoint;
    RemapReport report;
};

inline RemapResult remap_init(const Checkpoint& teacher, const ModelConfig& student_cfg, InitMode mode,
                              std::uint64_t seed) {
    RemapResult out;
    out.report.mode = mode;
    out.checkpoint.config = student_cfg;
    out.checkpoint.meta = json{{"init", to_string(mode)}, {"seed", seed}};
    if (mode == InitMode::Random) {
        out.checkpoint.params = init_random<float>(student_cfg, seed);
        for (const auto& [name, t] : out.checkpoint.params) {
            out.report.entries.push_back({name, "", "random", "", tensor_hash(t)});
        }
        out.report.random_tensors = out.report.entries.size();
        return out;
    }
    out.checkpoint.params = expand_teacher(teacher, student_cfg);
    out.report.layer_map = build_layer_map(teacher.config.layers, student_cfg.layers);
    const auto& map = out.report.layer_map.mapping;
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (i < teacher.config.layers) ++out.report.copied_layers;
        else ++out.report.duplicated_layers;
    }
    for (const auto& [name, t] : out.checkpoint.params) {
        RemapEntry e;
        e.destination = name;
        e.source = name;
        e.provenance = "copied";
        if (name.rfind("layer.", 0) == 0) {
            const auto dot = name.find('.', 6);
            const std::size_t i = std::stoul(name.substr(6, dot - 6));
            e.source = layer_prefix(map[i]) + name.substr(dot + 1);
            if (i >= teacher.config.layers) e.provenance = "duplicated";
        }
        e.source_hash = tensor_hash(teacher.params.at(e.source));
        e.destination_hash = tensor_hash(t);
        out.report.entries.push_back(std::move(e));
    }
    out.checkpoint.meta["teacher_layers"] = teacher.config.layers;
    return out;
}

}  // namespace dwt
