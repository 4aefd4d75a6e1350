#pragma once

// Simulated flash storage. Pages erase to all ones; what a write may do to a
// page that is not erased depends on the device mode.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vmtree/error.hpp"

namespace vmtree {

using PageId = std::uint32_t;
inline constexpr PageId kNoPage = 0xFFFFFFFFu;
inline constexpr std::uint8_t kErasedByte = 0xFF;

enum class FlashMode : std::uint8_t {
    RawNand = 0,   // a written page stays read-only until its block is erased
    Overwrite = 1, // rewrite legal iff every bit goes 1->0; page erase-then-write available
    Ftl = 2,       // logical in-place writes, placement hidden by the device
};

inline const char* to_string(FlashMode mode) {
    switch (mode) {
    case FlashMode::RawNand: return "raw_nand";
    case FlashMode::Overwrite: return "overwrite";
    case FlashMode::Ftl: return "ftl";
    }
    return "?";
}

inline FlashMode parse_flash_mode(const std::string& text) {
    if (text == "raw_nand" || text == "nand" || text == "RAW_NAND") return FlashMode::RawNand;
    if (text == "overwrite" || text == "OVERWRITE" || text == "dataflash") return FlashMode::Overwrite;
    if (text == "ftl" || text == "FTL" || text == "sd") return FlashMode::Ftl;
    throw Error(ErrorCode::BadFormat, "unknown flash mode '" + text + "'");
}

struct FlashGeometry {
    std::uint32_t pageSize = 512;
    std::uint32_t pagesPerBlock = 8;
    std::uint32_t numPages = 1024;

    std::uint32_t num_blocks() const { return numPages / pagesPerBlock; }

    void validate() const {
        if (pageSize < 64 || pageSize > 65536)
            throw Error(ErrorCode::BadFormat, "page size out of range");
        if (pagesPerBlock == 0 || numPages % pagesPerBlock != 0)
            throw Error(ErrorCode::BadFormat, "numPages must be a multiple of pagesPerBlock");
        if (numPages < 2 * pagesPerBlock)
            throw Error(ErrorCode::BadFormat, "device needs at least two blocks");
    }

    bool operator==(const FlashGeometry&) const = default;
};

struct IoCounters {
    std::uint64_t pageReads = 0;
    std::uint64_t pageWrites = 0;
    std::uint64_t sequentialWrites = 0; // subset of pageWrites landing right after the previous write
    std::uint64_t blockErases = 0;
    std::uint64_t pageEraseWrites = 0;

    std::uint64_t total_writes() const { return pageWrites + pageEraseWrites; }
    std::uint64_t total_io() const { return pageReads + pageWrites + pageEraseWrites; }

    IoCounters operator-(const IoCounters& o) const {
        return {pageReads - o.pageReads, pageWrites - o.pageWrites,
                sequentialWrites - o.sequentialWrites, blockErases - o.blockErases,
                pageEraseWrites - o.pageEraseWrites};
    }
    bool operator==(const IoCounters&) const = default;
};

/// Per-operation costs in seconds.  A random write costs `writeCostPerPage`;
/// a sequential one costs `sequentialWriteCost` when set.
struct CostModel {
    double readCostPerPage = 0.0;
    double writeCostPerPage = 0.0;
    double eraseWriteCostPerPage = 0.0;
    double blockEraseCost = 0.0;
    std::optional<double> sequentialWriteCost;

    /// Seconds needed to move one page at `kbPerSecond`.
    static double page_cost(std::uint32_t pageSize, double kbPerSecond) {
        return kbPerSecond <= 0.0 ? 0.0 : static_cast<double>(pageSize) / (kbPerSecond * 1024.0);
    }
};

inline double simulated_time(const IoCounters& c, const CostModel& m) {
    const double seqCost = m.sequentialWriteCost.value_or(m.writeCostPerPage);
    const auto randomWrites = c.pageWrites - c.sequentialWrites;
    return static_cast<double>(c.pageReads) * m.readCostPerPage +
           static_cast<double>(c.sequentialWrites) * seqCost +
           static_cast<double>(randomWrites) * m.writeCostPerPage +
           static_cast<double>(c.pageEraseWrites) * m.eraseWriteCostPerPage +
           static_cast<double>(c.blockErases) * m.blockEraseCost;
}

/// Everything needed to build a device: geometry, mode and costs.
struct DeviceProfile {
    std::string name = "custom";
    FlashGeometry geometry;
    FlashMode mode = FlashMode::Ftl;
    CostModel cost;
};

namespace profiles {

// SAMD21 + SD card: sequential/random read 500/400 KB/s, write 500/215 KB/s.
inline DeviceProfile sd_card(std::uint32_t numPages = 8192) {
    DeviceProfile p;
    p.name = "sd";
    p.geometry = {512, 8, numPages};
    p.mode = FlashMode::Ftl;
    p.cost.readCostPerPage = CostModel::page_cost(512, 400);
    p.cost.writeCostPerPage = CostModel::page_cost(512, 215);
    p.cost.sequentialWriteCost = CostModel::page_cost(512, 500);
    p.cost.eraseWriteCostPerPage = p.cost.writeCostPerPage;
    return p;
}

// SAMD21 + DataFlash: read 475 KB/s, page erase-then-write 35 KB/s.  Writing
// into an erased or overwritable page runs at the transfer rate.
inline DeviceProfile dataflash(std::uint32_t numPages = 8192) {
    DeviceProfile p;
    p.name = "dataflash";
    p.geometry = {512, 8, numPages};
    p.mode = FlashMode::Overwrite;
    p.cost.readCostPerPage = CostModel::page_cost(512, 475);
    p.cost.writeCostPerPage = CostModel::page_cost(512, 475);
    p.cost.eraseWriteCostPerPage = CostModel::page_cost(512, 35);
    p.cost.blockEraseCost = 0.045;
    return p;
}

// PIC24 + raw NAND: 2048-byte pages, read 203 KB/s, write 187 KB/s.
inline DeviceProfile nand(std::uint32_t numPages = 2048) {
    DeviceProfile p;
    p.name = "nand";
    p.geometry = {2048, 8, numPages};
    p.mode = FlashMode::RawNand;
    p.cost.readCostPerPage = CostModel::page_cost(2048, 203);
    p.cost.writeCostPerPage = CostModel::page_cost(2048, 187);
    p.cost.blockEraseCost = 0.002;
    return p;
}

// PIC24 + SD card: 2048-byte pages, read 198/194 KB/s, write 108/93 KB/s.
inline DeviceProfile sd_card_pic(std::uint32_t numPages = 2048) {
    DeviceProfile p;
    p.name = "sd-pic";
    p.geometry = {2048, 8, numPages};
    p.mode = FlashMode::Ftl;
    p.cost.readCostPerPage = CostModel::page_cost(2048, 194);
    p.cost.writeCostPerPage = CostModel::page_cost(2048, 93);
    p.cost.sequentialWriteCost = CostModel::page_cost(2048, 108);
    p.cost.eraseWriteCostPerPage = p.cost.writeCostPerPage;
    return p;
}

inline DeviceProfile by_name(const std::string& name, std::uint32_t numPages) {
    if (name == "sd") return sd_card(numPages);
    if (name == "dataflash") return dataflash(numPages);
    if (name == "nand") return nand(numPages);
    if (name == "sd-pic") return sd_card_pic(numPages);
    throw Error(ErrorCode::BadFormat, "unknown device profile '" + name + "'");
}

}  // namespace profiles

/// Parses a key=value profile.  Recognised keys: name, pageSize,
/// pagesPerBlock, numPages, mode, readCost, writeCost, sequentialWriteCost,
/// eraseWriteCost, blockEraseCost (seconds per op) and the rate forms
/// readKBps, writeKBps, sequentialWriteKBps, eraseWriteKBps.  Lines starting
/// with '#' are ignored.
inline DeviceProfile parse_profile(std::istream& in) {
    std::map<std::string, std::string> kv;
    std::string line;
    int lineNo = 0;
    while (std::getline(in, line)) {
        ++lineNo;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw Error(ErrorCode::BadFormat, "profile line " + std::to_string(lineNo) + " lacks '='");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }

    DeviceProfile p;
    auto num = [&](const char* key) -> std::optional<double> {
        auto it = kv.find(key);
        if (it == kv.end()) return std::nullopt;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw Error(ErrorCode::BadFormat, std::string("bad number for ") + key);
        }
    };
    if (auto it = kv.find("name"); it != kv.end()) p.name = it->second;
    if (auto v = num("pageSize")) p.geometry.pageSize = static_cast<std::uint32_t>(*v);
    if (auto v = num("pagesPerBlock")) p.geometry.pagesPerBlock = static_cast<std::uint32_t>(*v);
    if (auto v = num("numPages")) p.geometry.numPages = static_cast<std::uint32_t>(*v);
    if (auto it = kv.find("mode"); it != kv.end()) p.mode = parse_flash_mode(it->second);

    const auto ps = p.geometry.pageSize;
    if (auto v = num("readKBps")) p.cost.readCostPerPage = CostModel::page_cost(ps, *v);
    if (auto v = num("writeKBps")) p.cost.writeCostPerPage = CostModel::page_cost(ps, *v);
    if (auto v = num("sequentialWriteKBps")) p.cost.sequentialWriteCost = CostModel::page_cost(ps, *v);
    if (auto v = num("eraseWriteKBps")) p.cost.eraseWriteCostPerPage = CostModel::page_cost(ps, *v);
    if (auto v = num("readCost")) p.cost.readCostPerPage = *v;
    if (auto v = num("writeCost")) p.cost.writeCostPerPage = *v;
    if (auto v = num("sequentialWriteCost")) p.cost.sequentialWriteCost = *v;
    if (auto v = num("eraseWriteCost")) p.cost.eraseWriteCostPerPage = *v;
    if (auto v = num("blockEraseCost")) p.cost.blockEraseCost = *v;

    const CostModel& c = p.cost;
    if (c.readCostPerPage < 0 || c.writeCostPerPage < 0 || c.eraseWriteCostPerPage < 0 ||
        c.blockEraseCost < 0 || c.sequentialWriteCost.value_or(0.0) < 0)
        throw Error(ErrorCode::BadFormat, "costs must be non-negative");
    p.geometry.validate();
    return p;
}

inline DeviceProfile load_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::BadFormat, "cannot open profile " + path);
    return parse_profile(in);
}

class FlashDevice {
public:
    FlashDevice(FlashGeometry geometry, FlashMode mode, CostModel cost = {})
        : geometry_(geometry), mode_(mode), cost_(cost) {
        geometry_.validate();
        data_.assign(static_cast<std::size_t>(geometry_.numPages) * geometry_.pageSize, kErasedByte);
    }

    explicit FlashDevice(const DeviceProfile& profile)
        : FlashDevice(profile.geometry, profile.mode, profile.cost) {}

    const FlashGeometry& geometry() const { return geometry_; }
    FlashMode mode() const { return mode_; }
    const CostModel& cost_model() const { return cost_; }
    std::uint32_t page_size() const { return geometry_.pageSize; }
    std::uint32_t num_pages() const { return geometry_.numPages; }

    const IoCounters& counters() const { return counters_; }
    void reset_counters() { counters_ = {}; }
    double simulated_seconds() const { return simulated_time(counters_, cost_); }

    void read_page(PageId addr, std::span<std::uint8_t> out) {
        check_page(addr);
        if (out.size() != geometry_.pageSize)
            throw Error(ErrorCode::OutOfRange, "read buffer size must equal page size");
        const auto src = page_span(addr);
        std::copy(src.begin(), src.end(), out.begin());
        ++counters_.pageReads;
    }

    std::vector<std::uint8_t> read_page(PageId addr) {
        std::vector<std::uint8_t> out(geometry_.pageSize);
        read_page(addr, out);
        return out;
    }

    void write_page(PageId addr, std::span<const std::uint8_t> data) {
        check_page(addr);
        check_length(data);
        const auto cur = page_span(addr);
        switch (mode_) {
        case FlashMode::RawNand:
            if (!std::all_of(cur.begin(), cur.end(), [](std::uint8_t b) { return b == kErasedByte; })) {
                ++rejectedWrites_;
                throw Error(ErrorCode::IllegalWrite,
                            "page " + std::to_string(addr) + " written twice without block erase");
            }
            break;
        case FlashMode::Overwrite:
            for (std::size_t i = 0; i < cur.size(); ++i) {
                if ((~cur[i] & data[i]) != 0) {
                    ++rejectedWrites_;
                    throw Error(ErrorCode::IllegalWrite,
                                "0->1 bit transition on page " + std::to_string(addr) + " byte " +
                                    std::to_string(i));
                }
            }
            break;
        case FlashMode::Ftl:
            break;
        }
        before_mutation();
        std::copy(data.begin(), data.end(), cur.begin());
        ++counters_.pageWrites;
        if (lastWrite_ != kNoPage && addr == lastWrite_ + 1) ++counters_.sequentialWrites;
        lastWrite_ = addr;
    }

    void erase_block(std::uint32_t block) {
        if (block >= geometry_.num_blocks())
            throw Error(ErrorCode::OutOfRange, "block " + std::to_string(block));
        before_mutation();
        const auto begin = data_.begin() + static_cast<std::ptrdiff_t>(block) * geometry_.pagesPerBlock *
                                               geometry_.pageSize;
        std::fill(begin, begin + static_cast<std::ptrdiff_t>(geometry_.pagesPerBlock) * geometry_.pageSize,
                  kErasedByte);
        ++counters_.blockErases;
    }

    void erase_then_write_page(PageId addr, std::span<const std::uint8_t> data) {
        if (mode_ != FlashMode::Overwrite)
            throw Error(ErrorCode::Unsupported, "erase-then-write needs an overwrite-capable device");
        check_page(addr);
        check_length(data);
        before_mutation();
        const auto cur = page_span(addr);
        std::copy(data.begin(), data.end(), cur.begin());
        ++counters_.pageEraseWrites;
        lastWrite_ = addr;
    }

    /// Reads without touching the counters.  Test and recovery tooling only.
    std::span<const std::uint8_t> peek(PageId addr) const {
        check_page(addr);
        return {data_.data() + static_cast<std::size_t>(addr) * geometry_.pageSize, geometry_.pageSize};
    }

    bool is_erased(PageId addr) const {
        const auto p = peek(addr);
        return std::all_of(p.begin(), p.end(), [](std::uint8_t b) { return b == kErasedByte; });
    }

    std::uint64_t rejected_writes() const { return rejectedWrites_; }

    // Crash injection: after `n` more accepted mutations (write, erase or
    // erase-then-write) every further mutation throws CrashInjected and has no
    // effect.
    void crash_after(std::uint64_t n) { crashBudget_ = n; }
    void clear_crash() { crashBudget_.reset(); }
    std::uint64_t mutations() const { return mutations_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error(ErrorCode::BadFormat, "cannot write " + path);
        out.write(kMagic, sizeof(kMagic));
        put_u32(out, geometry_.pageSize);
        put_u32(out, geometry_.pagesPerBlock);
        put_u32(out, geometry_.numPages);
        const char mode = static_cast<char>(mode_);
        out.write(&mode, 1);
        out.write(reinterpret_cast<const char*>(data_.data()), static_cast<std::streamsize>(data_.size()));
    }

    /// Restores page contents from a backing file; counters start at zero.
    static FlashDevice load(const std::string& path, CostModel cost = {}) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error(ErrorCode::BadFormat, "cannot open " + path);
        char magic[sizeof(kMagic)];
        in.read(magic, sizeof(magic));
        if (!in || !std::equal(magic, magic + sizeof(magic), kMagic))
            throw Error(ErrorCode::BadFormat, "not a device image: " + path);
        FlashGeometry g;
        g.pageSize = get_u32(in);
        g.pagesPerBlock = get_u32(in);
        g.numPages = get_u32(in);
        char mode = 0;
        in.read(&mode, 1);
        FlashDevice dev(g, static_cast<FlashMode>(mode), cost);
        in.read(reinterpret_cast<char*>(dev.data_.data()), static_cast<std::streamsize>(dev.data_.size()));
        if (!in) throw Error(ErrorCode::BadFormat, "truncated device image: " + path);
        return dev;
    }

private:
    static constexpr char kMagic[8] = {'V', 'M', 'F', 'L', 'A', 'S', 'H', '1'};

    static void put_u32(std::ostream& out, std::uint32_t v) {
        const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                           static_cast<char>(v >> 24)};
        out.write(b, 4);
    }
    static std::uint32_t get_u32(std::istream& in) {
        unsigned char b[4] = {};
        in.read(reinterpret_cast<char*>(b), 4);
        return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    void check_page(PageId addr) const {
        if (addr >= geometry_.numPages) throw Error(ErrorCode::OutOfRange, "page " + std::to_string(addr));
    }
    void check_length(std::span<const std::uint8_t> data) const {
        if (data.size() != geometry_.pageSize)
            throw Error(ErrorCode::OutOfRange, "write length must equal page size");
    }
    void before_mutation() {
        if (crashBudget_) {
            if (*crashBudget_ == 0) throw Error(ErrorCode::CrashInjected, "simulated power loss");
            --*crashBudget_;
        }
        ++mutations_;
    }
    std::span<std::uint8_t> page_span(PageId addr) {
        return {data_.data() + static_cast<std::size_t>(addr) * geometry_.pageSize, geometry_.pageSize};
    }

    FlashGeometry geometry_;
    FlashMode mode_;
    CostModel cost_;
    std::vector<std::uint8_t> data_;
    IoCounters counters_;
    PageId lastWrite_ = kNoPage;
    std::uint64_t rejectedWrites_ = 0;
    std::uint64_t mutations_ = 0;
    std::optional<std::uint64_t> crashBudget_;
};

}  // namespace vmtree
