#pragma once

// Benchmark runs: insert phase, then point queries on a cold buffer pool.
// All reported figures come from device counters and the cost model.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vmtree/index_engine.hpp"
#include "vmtree/workload.hpp"
#include "vmtree/write_buffer.hpp"

namespace vmtree {

struct WorkloadSpec {
    std::string dataset = "random";
    std::size_t recordCount = 10000;
    std::uint32_t keyWidth = 4;
    std::uint32_t recordWidth = 0;  // 0: the dataset's own width
    std::size_t queryCount = 10000;
    std::size_t rangeQueryCount = 0;
    std::size_t writeBufferPages = 0;
    std::size_t pageBuffers = 3;
    std::size_t mappingTableBytes = 1024;
    double maintenanceWatermark = 1.0;
    DeviceProfile device = profiles::sd_card();
    std::optional<std::uint32_t> numPages;  // default: about 3x the data footprint
    Variant variant = Variant::VMTree;
    std::uint64_t seed = 1;
    bool verify = false;
};

struct RunReport {
    IoCounters insertIo;
    IoCounters queryIo;
    double insertSeconds = 0;
    double querySeconds = 0;
    double insertThroughput = 0;  // records per simulated second
    double queryThroughput = 0;
    double queryHitRate = 0;
    double tablePeakLoad = 0;
    std::size_t memoryBytes = 0;
    MemoryFootprint memory;
    StorageStats gc;
    EngineStats engine;
    std::uint32_t height = 0;
    std::uint32_t numPages = 0;
    std::uint64_t mismatches = 0;
    std::uint64_t rejectedWrites = 0;
    std::string error;  // set when the run failed
};

/// Random records carry a 12-byte payload; sensor index entries pair the
/// reading with a 4-byte record id.
inline std::uint32_t record_width(const WorkloadSpec& s) {
    if (s.recordWidth != 0) return s.recordWidth;
    return s.dataset == "random" || s.dataset.rfind("csv:", 0) == 0 ? 16 : 8;
}

/// Pages for a run when the spec does not fix them: three times the leaf
/// footprint at 2/3 occupancy, whole blocks, with room for the erased window.
inline std::uint32_t default_num_pages(const WorkloadSpec& s) {
    const std::uint32_t ppb = s.device.geometry.pagesPerBlock;
    const NodeFormat f{s.device.geometry.pageSize, s.keyWidth, record_width(s) - s.keyWidth};
    const auto cap = std::min(max_entries(f, Layout::Sorted, NodeKind::Leaf), max_entries(f, Layout::Overwrite, NodeKind::Leaf));
    const double leaves = static_cast<double>(s.recordCount) / (cap * 2.0 / 3.0);
    auto pages = static_cast<std::uint32_t>(std::ceil(3.0 * leaves)) + 8 * ppb;
    return (pages + ppb - 1) / ppb * ppb;
}

inline EngineConfig engine_config(const WorkloadSpec& s) {
    EngineConfig c;
    c.variant = s.variant;
    c.keyWidth = s.keyWidth;
    c.recordWidth = record_width(s);
    c.bufferFrames = s.pageBuffers;
    c.mappingTableBytes = s.mappingTableBytes;
    c.maintenanceWatermark = s.maintenanceWatermark;
    return c;
}

inline RunReport run(const WorkloadSpec& spec, const std::vector<Record>& data) {
    RunReport rep;
    DeviceProfile profile = spec.device;
    profile.geometry.numPages = spec.numPages.value_or(default_num_pages(spec));
    rep.numPages = profile.geometry.numPages;
    if (!compatible(spec.variant, profile.mode))
        throw Error(ErrorCode::Incompatible, std::string(to_string(spec.variant)) + " cannot run on " +
                                                 to_string(profile.mode) + " flash");
    FlashDevice dev(profile);
    Index index(dev, engine_config(spec), spec.writeBufferPages);
    IndexEngine& e = index.engine();

    dev.reset_counters();
    for (const auto& r : data) index.insert(r.key, r.value);
    index.flush();
    rep.insertIo = dev.counters();
    rep.insertSeconds = simulated_time(rep.insertIo, dev.cost_model());

    // Cold cache for the query phase; only the pinned root stays resident.
    e.pool().clear_unpinned();
    e.pool().reset_stats();
    std::mt19937_64 rng(spec.seed ^ 0x5bd1e995u);
    std::multimap<Key, Value> oracle;
    if (spec.verify)
        for (const auto& r : data) oracle.emplace(r.key, r.value);
    dev.reset_counters();
    for (std::size_t q = 0; q < spec.queryCount && !data.empty(); ++q) {
        const Key k = data[rng() % data.size()].key;
        const auto got = index.get(k);
        if (spec.verify) {
            auto [lo, hi] = oracle.equal_range(k);
            bool ok = false;
            for (auto it = lo; got && it != hi; ++it) ok = ok || it->second == *got;
            rep.mismatches += ok ? 0 : 1;
        }
    }
    for (std::size_t q = 0; q < spec.rangeQueryCount && !data.empty(); ++q) {
        Key a = data[rng() % data.size()].key, b = data[rng() % data.size()].key;
        if (a > b) std::swap(a, b);
        auto got = index.range(a, b);
        if (spec.verify) {
            std::vector<std::pair<Key, Value>> want, have;
            for (auto it = oracle.lower_bound(a); it != oracle.upper_bound(b); ++it) want.push_back(*it);
            for (const auto& r : got) have.push_back({r.key, r.value});
            std::sort(want.begin(), want.end());
            std::sort(have.begin(), have.end());
            rep.mismatches += want == have ? 0 : 1;
        }
    }
    rep.queryIo = dev.counters();
    rep.querySeconds = simulated_time(rep.queryIo, dev.cost_model());
    const auto queries = static_cast<double>(spec.queryCount + spec.rangeQueryCount);
    rep.insertThroughput = rep.insertSeconds > 0 ? static_cast<double>(data.size()) / rep.insertSeconds : 0.0;
    rep.queryThroughput = rep.querySeconds > 0 ? queries / rep.querySeconds : 0.0;
    const auto lookups = e.pool().hits() + e.pool().misses();
    rep.queryHitRate = lookups ? static_cast<double>(e.pool().hits()) / static_cast<double>(lookups) : 0.0;
    rep.tablePeakLoad = spec.variant == Variant::VMTree ? e.mapping_table().peak_load_factor() : 0.0;
    rep.memory = index.memory_footprint();
    rep.memoryBytes = rep.memory.total();
    if (e.storage()) rep.gc = e.storage()->stats();
    rep.engine = e.stats();
    rep.height = e.height();
    rep.rejectedWrites = dev.rejected_writes();
    if (spec.verify && !e.validate().empty()) ++rep.mismatches;
    return rep;
}

inline RunReport run(const WorkloadSpec& spec) {
    return run(spec, generate_dataset(spec.dataset, spec.recordCount, spec.seed));
}

// ---- grid output -------------------------------------------------------

inline const std::vector<std::string>& csv_columns() {
    static const std::vector<std::string> cols{
        "dataset", "variant", "device", "mode", "records", "recordWidth", "queries", "pageBuffers", "writeBufferPages",
        "tableBytes", "numPages", "seed", "insertReads", "insertWrites", "insertEraseWrites", "insertBlockErases",
        "insertSeconds", "insertThroughput", "queryReads", "querySeconds", "queryThroughput", "queryHitRate",
        "tablePeakLoad", "tableFullFlushes", "maintenanceFlushes", "gcRelocations", "wraps", "memoryBytes",
        "height", "mismatches", "error"};
    return cols;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

inline std::vector<std::string> csv_row(const WorkloadSpec& s, const RunReport& r) {
    return {s.dataset,
            to_string(s.variant),
            s.device.name,
            to_string(s.device.mode),
            std::to_string(s.recordCount),
            std::to_string(record_width(s)),
            std::to_string(s.queryCount),
            std::to_string(s.pageBuffers),
            std::to_string(s.writeBufferPages),
            std::to_string(s.mappingTableBytes),
            std::to_string(r.numPages),
            std::to_string(s.seed),
            std::to_string(r.insertIo.pageReads),
            std::to_string(r.insertIo.pageWrites),
            std::to_string(r.insertIo.pageEraseWrites),
            std::to_string(r.insertIo.blockErases),
            format_double(r.insertSeconds),
            format_double(r.insertThroughput),
            std::to_string(r.queryIo.pageReads),
            format_double(r.querySeconds),
            format_double(r.queryThroughput),
            format_double(r.queryHitRate),
            format_double(r.tablePeakLoad),
            std::to_string(r.engine.tableFullFlushes),
            std::to_string(r.engine.maintenanceFlushes),
            std::to_string(r.gc.gcRelocations),
            std::to_string(r.gc.wraps),
            std::to_string(r.memoryBytes),
            std::to_string(r.height),
            std::to_string(r.mismatches),
            r.error};
}

struct GridResult {
    std::vector<WorkloadSpec> specs;
    std::vector<RunReport> reports;
    std::vector<std::vector<std::string>> rows;  // sorted
};

/// Runs every spec; a failing cell records its error and the grid goes on.
inline GridResult grid(const std::vector<WorkloadSpec>& specs) {
    GridResult g;
    std::map<std::tuple<std::string, std::size_t, std::uint64_t>, std::vector<Record>> datasets;
    for (const auto& s : specs) {
        RunReport r;
        try {
            auto key = std::make_tuple(s.dataset, s.recordCount, s.seed);
            auto it = datasets.find(key);
            if (it == datasets.end()) it = datasets.emplace(key, generate_dataset(s.dataset, s.recordCount, s.seed)).first;
            r = run(s, it->second);
        } catch (const std::exception& e) {
            r = RunReport{};
            r.error = e.what();
        }
        g.specs.push_back(s);
        g.reports.push_back(r);
        g.rows.push_back(csv_row(s, r));
    }
    std::sort(g.rows.begin(), g.rows.end());
    return g;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
    return out + "\"";
}

inline void write_grid_csv(std::ostream& out, const GridResult& g) {
    const auto& cols = csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& row : g.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_escape(row[i]);
        out << '\n';
    }
}

/// Whitespace-separated data files, one per figure:
///   insert_<dataset>_<device>.dat   variant writeBufferPages insertWrites insertThroughput
///   memory_<dataset>_<device>.dat   variant pageBuffers insertThroughput queryThroughput
inline void write_plot_files(const std::filesystem::path& dir, const GridResult& g) {
    std::filesystem::create_directories(dir);
    std::map<std::string, std::vector<std::string>> files;
    for (std::size_t i = 0; i < g.specs.size(); ++i) {
        const auto& s = g.specs[i];
        const auto& r = g.reports[i];
        if (!r.error.empty()) continue;
        std::string base = s.dataset + "_" + s.device.name;
        std::replace_if(base.begin(), base.end(), [](char c) { return c == ':' || c == '/' || c == '.'; }, '_');
        std::ostringstream a, b;
        a << to_string(s.variant) << ' ' << s.writeBufferPages << ' ' << r.insertIo.total_writes() << ' '
          << format_double(r.insertThroughput);
        b << to_string(s.variant) << ' ' << s.pageBuffers << ' ' << format_double(r.insertThroughput) << ' '
          << format_double(r.queryThroughput);
        files["insert_" + base + ".dat"].push_back(a.str());
        files["memory_" + base + ".dat"].push_back(b.str());
    }
    for (auto& [name, lines] : files) {
        std::sort(lines.begin(), lines.end());
        lines.erase(std::unique(lines.begin(), lines.end()), lines.end());
        std::ofstream out(dir / name);
        for (const auto& l : lines) out << l << '\n';
    }
}

}  // namespace vmtree
