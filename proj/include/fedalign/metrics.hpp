#pragma once

// Per-round metrics and their CSV / JSON files.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedalign/config.hpp"

namespace fedalign {

struct RoundMetrics {
    int round = 0;  // 1-based index of the completed round
    std::optional<double> test_acc;
    std::optional<double> test_loss;
    std::vector<std::size_t> sampled_ids;
    std::vector<double> client_train_loss;  // final-epoch loss per sampled client
    std::uint64_t comm_bits_cum = 0;
    double flops_cum = 0.0;

    bool operator==(const RoundMetrics&) const = default;
};

inline const char* kMetricsHeader = "round,test_acc,test_loss,comm_bits_cum,flops_cum,sampled_ids";

namespace detail {

inline std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string csv_row(const RoundMetrics& m) {
    std::string s = std::to_string(m.round) + ",";
    s += (m.test_acc ? fmt_double(*m.test_acc) : "") + ",";
    s += (m.test_loss ? fmt_double(*m.test_loss) : "") + ",";
    s += std::to_string(m.comm_bits_cum) + "," + fmt_double(m.flops_cum) + ",";
    for (std::size_t i = 0; i < m.sampled_ids.size(); ++i) s += (i ? ";" : "") + std::to_string(m.sampled_ids[i]);
    return s;
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<double> optional_from(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

} // namespace detail

inline json metrics_to_json(const std::vector<RoundMetrics>& list) {
    json a = json::array();
    for (const auto& m : list) {
        a.push_back({{"round", m.round},
                     {"test_acc", detail::optional_json(m.test_acc)},
                     {"test_loss", detail::optional_json(m.test_loss)},
                     {"sampled_ids", m.sampled_ids},
                     {"client_train_loss", m.client_train_loss},
                     {"comm_bits_cum", m.comm_bits_cum},
                     {"flops_cum", m.flops_cum}});
    }
    return a;
}

inline std::vector<RoundMetrics> metrics_from_json(const json& a) {
    std::vector<RoundMetrics> out;
    for (const auto& j : a) {
        RoundMetrics m;
        m.round = j.at("round").get<int>();
        m.test_acc = detail::optional_from(j.at("test_acc"));
        m.test_loss = detail::optional_from(j.at("test_loss"));
        m.sampled_ids = j.at("sampled_ids").get<std::vector<std::size_t>>();
        m.client_train_loss = j.at("client_train_loss").get<std::vector<double>>();
        m.comm_bits_cum = j.at("comm_bits_cum").get<std::uint64_t>();
        m.flops_cum = j.at("flops_cum").get<double>();
        out.push_back(std::move(m));
    }
    return out;
}

inline std::vector<RoundMetrics> read_metrics_json(const std::string& path) {
    if (!std::filesystem::exists(path)) return {};
    try {
        return metrics_from_json(read_json_file(path));
    } catch (const json::exception& e) {
        throw IoError(path + ": malformed metrics file: " + e.what());
    }
}

/// Writes metrics.csv and metrics.json under `dir`. Rows for rounds already
/// present are replaced, so a resumed run never duplicates the header or a
/// round.
inline void emit_metrics(const std::vector<RoundMetrics>& list, const std::string& dir) {
    require(!list.empty(), "emit_metrics: empty metrics list");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    const std::string json_path = dir + "/metrics.json";
    const std::string csv_path = dir + "/metrics.csv";

    auto merged = read_metrics_json(json_path);
    std::erase_if(merged, [&](const RoundMetrics& m) { return m.round >= list.front().round; });
    merged.insert(merged.end(), list.begin(), list.end());

    {
        std::ofstream out(json_path, std::ios::trunc);
        if (!out) throw IoError("cannot write " + json_path);
        out << metrics_to_json(merged).dump(2) << "\n";
    }
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv_path);
    out << kMetricsHeader << "\n";
    for (const auto& m : merged) out << detail::csv_row(m) << "\n";
    if (!out) throw IoError("write failed for " + csv_path);
}

} // namespace fedalign
