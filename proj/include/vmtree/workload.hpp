#pragma once

// Synthetic sensor datasets and CSV ingestion.
//
//   random        uniform 32-bit keys
//   temperature   slowly drifting reading quantized to 0.1 degree; the key is
//                 the reading, so there are many duplicates and consecutive
//                 records land close together
//   health        sum of periodic signals at different rates plus noise
//   csv:<path>    "key,value" rows after a header line
//
// Values are the record's position in the stream (a timestamp).

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/node_codec.hpp"

namespace vmtree {

inline std::vector<Record> random_dataset(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Record> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back({rng() & 0xFFFFFFFFu, i});
    return out;
}

struct TemperatureModel {
    double mean = 18.0;          // degrees
    double dailySwing = 6.0;     // amplitude of the daily cycle
    double samplesPerDay = 1440; // one reading a minute
    double driftStep = 0.02;     // random-walk step of the weather component
    double driftLimit = 8.0;
    double noise = 0.8;          // sensor noise, standard deviation
    double resolution = 0.1;
};

inline std::vector<Record> temperature_dataset(std::size_t n, std::uint64_t seed, TemperatureModel m = {}) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Record> out;
    out.reserve(n);
    double drift = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        drift = std::clamp(drift + m.driftStep * gauss(rng), -m.driftLimit, m.driftLimit);
        const double phase = 2.0 * std::numbers::pi * static_cast<double>(i) / m.samplesPerDay;
        const double t = m.mean + m.dailySwing * std::sin(phase) + drift + m.noise * gauss(rng);
        // Offset so readings down to -50 degrees stay non-negative.
        const auto key = static_cast<Key>(std::llround((t + 50.0) / m.resolution));
        out.push_back({key, i});
    }
    return out;
}

inline std::vector<Record> health_dataset(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Record> out;
    out.reserve(n);
    double trend = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(i);
        trend = std::clamp(trend + 0.05 * gauss(rng), -15.0, 15.0);
        // Heart-rate-like signal: breathing, activity and circadian rates.
        const double v = 72.0 + 4.0 * std::sin(x / 4.0) + 12.0 * std::sin(x / 180.0) +
                         8.0 * std::sin(2.0 * std::numbers::pi * x / 1440.0) + trend + 1.5 * gauss(rng);
        out.push_back({static_cast<Key>(std::llround(std::max(0.0, v) * 10.0)), i});
    }
    return out;
}

inline std::vector<Record> parse_csv(std::istream& in) {
    std::vector<Record> out;
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::BadFormat, "empty CSV");
    if (line.rfind("key,value", 0) != 0) throw Error(ErrorCode::BadFormat, "CSV header must be 'key,value'");
    std::size_t lineNo = 1;
    while (std::getline(in, line)) {
        ++lineNo;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        auto bad = [&] { return Error(ErrorCode::BadFormat, "CSV line " + std::to_string(lineNo) + ": '" + line + "'"); };
        if (comma == std::string::npos) throw bad();
        try {
            std::size_t used = 0;
            const std::string k = line.substr(0, comma), v = line.substr(comma + 1);
            if (k.empty() || v.empty() || k[0] == '-' || v[0] == '-') throw bad();
            const Key key = std::stoull(k, &used);
            if (used != k.size()) throw bad();
            const Value value = std::stoull(v, &used);
            if (used != v.size()) throw bad();
            out.push_back({key, value});
        } catch (const std::logic_error&) {
            throw bad();
        }
    }
    return out;
}

inline std::vector<Record> load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::BadFormat, "cannot open " + path);
    return parse_csv(in);
}

inline void write_csv(std::ostream& out, const std::vector<Record>& records) {
    out << "key,value\n";
    for (const auto& r : records) out << r.key << ',' << r.value << '\n';
}

/// Dataset by name: random, temperature, health or csv:<path>.
inline std::vector<Record> generate_dataset(const std::string& name, std::size_t n, std::uint64_t seed) {
    if (name == "random") return random_dataset(n, seed);
    if (name == "temperature" || name == "temperature-like") return temperature_dataset(n, seed);
    if (name == "health" || name == "health-like") return health_dataset(n, seed);
    if (name.rfind("csv:", 0) == 0) {
        auto records = load_csv(name.substr(4));
        if (n > 0 && records.size() > n) records.resize(n);
        return records;
    }
    throw Error(ErrorCode::BadFormat, "unknown dataset '" + name + "'");
}

}  // namespace vmtree
