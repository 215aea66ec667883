#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dwt/error.hpp"
#include "dwt/model.hpp"
#include "dwt/tensor.hpp"

namespace dwt {

using json = nlohmann::json;

namespace detail {

// Rejects keys outside `allowed`; every config object in this project is
// closed so typos surface as errors instead of silently using defaults.
inline void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, value] : j.items()) {
        if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename V>
void read_key(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<V>();
    } catch (const json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

inline json to_json(const ModelConfig& c) {
    return json{{"layers", c.layers},
                {"hidden", c.hidden},
                {"heads", c.heads},
                {"ffn", c.ffn},
                {"vocab", c.vocab},
                {"max_positions", c.max_positions},
                {"tie_mlm_head", c.tie_mlm_head}};
}

inline ModelConfig model_config_from_json(const json& j, const std::string& where = "model") {
    detail::reject_unknown_keys(j, {"layers", "hidden", "heads", "ffn", "vocab", "max_positions", "tie_mlm_head"},
                                where);
    ModelConfig c;
    detail::read_key(j, "layers", c.layers, where);
    detail::read_key(j, "hidden", c.hidden, where);
    detail::read_key(j, "heads", c.heads, where);
    detail::read_key(j, "ffn", c.ffn, where);
    detail::read_key(j, "vocab", c.vocab, where);
    detail::read_key(j, "max_positions", c.max_positions, where);
    detail::read_key(j, "tie_mlm_head", c.tie_mlm_head, where);
    validate(c);
    return c;
}

// Trained (or initialised) model: config, free-form training metadata and
// f32 parameters.
struct Checkpoint {
    ModelConfig config;
    json meta = json::object();
    ParamSet<float> params;
};

inline constexpr char kCheckpointMagic[4] = {'D', 'W', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t at, int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
    return v;
}

}  // namespace detail

// Layout: "DWTC", u32 version, u64 header length, JSON header, then raw
// little-endian f32 payloads in tensor-table order. Offsets in the table are
// relative to the start of the payload section.
inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    check_params(ckpt.params, ckpt.config);
    json table = json::array();
    std::uint64_t offset = 0;
    const auto shapes = param_shapes(ckpt.config);
    for (const auto& [name, shape] : shapes) {
        table.push_back(json{{"name", name}, {"dtype", "f32"}, {"shape", shape}, {"offset", offset}});
        offset += numel(shape) * 4;
    }
    const json header{{"config", to_json(ckpt.config)}, {"meta", ckpt.meta}, {"tensors", table}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(16 + text.size() + offset);
    out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, shape] : shapes) {
        for (float v : ckpt.params.at(name).values()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

inline Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source = "checkpoint") {
    auto fail = [&](const std::string& what) { throw FormatError(source + ": " + what); };
    if (bytes.size() < 16) fail("too short for a DWTC header (" + std::to_string(bytes.size()) + " bytes)");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) fail("bad magic, expected 'DWTC'");
    const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
    if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));
    const std::uint64_t header_len = detail::get_le(bytes, 8, 8);
    if (header_len > bytes.size() - 16) {
        fail("header length " + std::to_string(header_len) + " exceeds file size " + std::to_string(bytes.size()));
    }
    json header;
    try {
        header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        fail(std::string("malformed JSON header: ") + e.what());
    }
    if (!header.is_object() || !header.contains("config") || !header.contains("tensors")) {
        fail("header lacks config or tensor table");
    }
    Checkpoint ckpt;
    try {
        ckpt.config = model_config_from_json(header.at("config"), source + ".config");
    } catch (const ConfigError& e) {
        fail(e.what());
    }
    ckpt.meta = header.value("meta", json::object());

    const std::span<const std::uint8_t> payload = bytes.subspan(16 + header_len);
    const auto shapes = param_shapes(ckpt.config);
    const json& table = header.at("tensors");
    if (!table.is_array() || table.size() != shapes.size()) {
        fail("tensor table has " + std::to_string(table.is_array() ? table.size() : 0) + " entries, config implies " +
             std::to_string(shapes.size()));
    }
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto& [name, shape] = shapes[i];
        const json& e = table[i];
        if (!e.is_object() || e.value("name", "") != name) fail("tensor table entry " + std::to_string(i) + " should be " + name);
        if (e.value("dtype", "") != "f32") fail(name + ": unsupported dtype");
        Shape got;
        try {
            got = e.at("shape").get<Shape>();
        } catch (const json::exception&) {
            fail(name + ": malformed shape");
        }
        if (got != shape) fail(name + ": shape " + shape_str(got) + " does not match config " + shape_str(shape));
        std::uint64_t offset = 0;
        try {
            offset = e.at("offset").get<std::uint64_t>();
        } catch (const json::exception&) {
            fail(name + ": malformed offset");
        }
        const std::uint64_t n = numel(shape);
        if (offset != expected_offset) {
            fail(name + ": offset " + std::to_string(offset) + " breaks table order (expected " +
                 std::to_string(expected_offset) + ")");
        }
        if (offset + n * 4 > payload.size()) {
            fail(name + ": payload [" + std::to_string(offset) + ", " + std::to_string(offset + n * 4) +
                 ") runs past end of file");
        }
        std::vector<float> data(n);
        for (std::size_t k = 0; k < n; ++k) {
            const auto bits = static_cast<std::uint32_t>(detail::get_le(payload, offset + k * 4, 4));
            std::memcpy(&data[k], &bits, 4);
        }
        ckpt.params.emplace(name, Tensor<float>(shape, std::move(data)));
        expected_offset = offset + n * 4;
    }
    if (expected_offset != payload.size()) {
        fail(std::to_string(payload.size() - expected_offset) + " trailing bytes after last tensor");
    }
    return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_checkpoint(bytes, path.string());
}

}  // namespace dwt
