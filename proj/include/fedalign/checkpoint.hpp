#pragma once

// Checkpoint container: an 8-byte little-endian manifest length, the JSON
// manifest, then raw little-endian float64 arrays at the listed offsets.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>

#include "fedalign/config.hpp"
#include "fedalign/params.hpp"

namespace fedalign {

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    int format_version = kCheckpointVersion;
    int round = 0;  // rounds completed
    ParamVector global;
    std::map<std::size_t, ParamVector> previous_local;  // MOON only, by client id
    std::uint64_t config_hash = 0;
    std::uint64_t comm_bits_cum = 0;
    double flops_cum = 0.0;

    bool operator==(const Checkpoint&) const = default;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

inline json layout_to_json(const Layout& layout) {
    json a = json::array();
    for (const auto& e : layout) a.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}});
    return a;
}

inline Layout layout_from_json(const json& a) {
    Layout layout;
    for (const auto& e : a) {
        layout.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()});
    }
    return layout;
}

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
    std::vector<std::pair<std::string, const ParamVector*>> arrays = {{"global", &ck.global}};
    for (const auto& [id, pv] : ck.previous_local) arrays.emplace_back("previous_local/" + std::to_string(id), &pv);

    json manifest;
    manifest["format_version"] = ck.format_version;
    manifest["round"] = ck.round;
    manifest["config_hash"] = ck.config_hash;
    manifest["comm_bits_cum"] = ck.comm_bits_cum;
    manifest["flops_cum"] = ck.flops_cum;
    manifest["layout"] = detail::layout_to_json(ck.global.layout);
    json list = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, pv] : arrays) {
        require(pv->layout == ck.global.layout, "checkpoint: array '" + name + "' has a different layout");
        list.push_back({{"name", name}, {"offset", offset}, {"length", pv->data.size()}});
        offset += 8 * pv->data.size();
    }
    manifest["arrays"] = list;

    const std::string text = manifest.dump();
    std::string out;
    out.reserve(8 + text.size() + offset);
    detail::put_u64(out, text.size());
    out += text;
    for (const auto& [_, pv] : arrays) {
        for (double x : pv->data) detail::put_u64(out, std::bit_cast<std::uint64_t>(x));
    }
    return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8) throw CheckpointError("checkpoint: file too short for the manifest length");
    const std::uint64_t mlen = detail::get_u64(bytes.data());
    if (mlen > bytes.size() - 8) throw CheckpointError("checkpoint: manifest truncated");
    const json manifest = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(mlen), nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) throw CheckpointError("checkpoint: manifest is not valid JSON");

    Checkpoint ck;
    try {
        ck.format_version = manifest.at("format_version").get<int>();
        if (ck.format_version != kCheckpointVersion) {
            throw CheckpointError("checkpoint: format version " + std::to_string(ck.format_version) +
                                  " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
        }
        ck.round = manifest.at("round").get<int>();
        ck.config_hash = manifest.at("config_hash").get<std::uint64_t>();
        ck.comm_bits_cum = manifest.at("comm_bits_cum").get<std::uint64_t>();
        ck.flops_cum = manifest.at("flops_cum").get<double>();
        const Layout layout = detail::layout_from_json(manifest.at("layout"));
        const std::size_t data_start = 8 + mlen;
        const std::size_t payload = bytes.size() - data_start;
        std::size_t expected_end = 0;
        bool have_global = false;
        for (const auto& a : manifest.at("arrays")) {
            const auto name = a.at("name").get<std::string>();
            const auto offset = a.at("offset").get<std::uint64_t>();
            const auto length = a.at("length").get<std::uint64_t>();
            if (length != layout_size(layout)) {
                throw CheckpointError("checkpoint: array '" + name + "' length does not match the layout");
            }
            if (offset > payload || 8 * length > payload - offset) {
                throw CheckpointError("checkpoint: array '" + name + "' is truncated");
            }
            ParamVector pv;
            pv.layout = layout;
            pv.data.resize(length);
            const char* p = bytes.data() + data_start + offset;
            for (std::size_t i = 0; i < length; ++i) pv.data[i] = std::bit_cast<double>(detail::get_u64(p + 8 * i));
            expected_end = std::max<std::size_t>(expected_end, offset + 8 * length);
            if (name == "global") {
                ck.global = std::move(pv);
                have_global = true;
            } else if (name.rfind("previous_local/", 0) == 0) {
                ck.previous_local[std::stoull(name.substr(15))] = std::move(pv);
            } else {
                throw CheckpointError("checkpoint: unknown array '" + name + "'");
            }
        }
        if (!have_global) throw CheckpointError("checkpoint: missing array 'global'");
        if (expected_end != payload) throw CheckpointError("checkpoint: trailing bytes after the last array");
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const auto bytes = encode_checkpoint(ck);
    const auto parent = std::filesystem::path(path).parent_path();
    std::error_code ec;
    if (!parent.empty()) std::filesystem::create_directories(parent, ec);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

} // namespace fedalign
