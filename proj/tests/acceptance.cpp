// Runs every acceptance criterion and prints one PASS/FAIL line for each.
// Exit status is the number of failed criteria.

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "vmtree/bench.hpp"
#include "vmtree/crash_test.hpp"

using namespace vmtree;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Rejected writes seen by every device created here.
std::uint64_t g_rejected = 0;

FlashGeometry geometry(std::uint32_t pages) { return {512, 8, pages}; }

template <class... Args>
std::string fmt(const char* f, Args... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

const std::vector<Variant> kVariants{Variant::BTree, Variant::VMTree, Variant::VMTreeOW};

RunReport checked_run(const WorkloadSpec& s, const std::vector<Record>& data) {
    auto r = run(s, data);
    g_rejected += r.rejectedWrites;
    return r;
}

// ---- 1 --------------------------------------------------------------------

Outcome oracle_equivalence() {
    Outcome o;
    std::ostringstream d;
    double slowest = 0;
    int cells = 0;
    for (Variant v : kVariants)
        for (FlashMode m : {FlashMode::RawNand, FlashMode::Overwrite, FlashMode::Ftl}) {
            if (!compatible(v, m)) continue;
            const auto start = std::chrono::steady_clock::now();
            FlashDevice dev(geometry(4096), m);
            EngineConfig cfg;
            cfg.variant = v;
            IndexEngine e(dev, cfg);
            std::multimap<Key, Value> oracle;
            std::mt19937_64 rng(100 + static_cast<int>(v) * 3 + static_cast<int>(m));
            std::uint64_t mismatches = 0;
            for (Value i = 0; i < 10000; ++i) {
                const Key k = rng() % 20000000;
                e.insert(k, i);
                oracle.emplace(k, i);
            }
            for (int q = 0; q < 10000; ++q) {
                // Half the probes hit stored keys, half are arbitrary.
                const Key k = q % 2 ? std::next(oracle.begin(), static_cast<long>(rng() % oracle.size()))->first
                                    : rng() % 20000000;
                const auto it = oracle.find(k);
                const auto got = e.get(k);
                const bool ok = it == oracle.end() ? !got : got && *got == oracle.lower_bound(k)->second;
                mismatches += ok ? 0 : 1;
            }
            for (int q = 0; q < 100; ++q) {
                Key a = rng() % 20000000, b = a + rng() % 2000000;
                std::vector<Record> want;
                for (auto it = oracle.lower_bound(a); it != oracle.upper_bound(b); ++it) want.push_back({it->first, it->second});
                mismatches += e.range(a, b) == want ? 0 : 1;
            }
            if (!e.validate().empty()) ++mismatches;
            g_rejected += dev.rejected_writes();
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            slowest = std::max(slowest, secs);
            ++cells;
            if (mismatches != 0 || secs >= 60) {
                o.pass = false;
                d << to_string(v) << '/' << to_string(m) << " mismatches=" << mismatches << ' ';
            }
        }
    o.detail = d.str() + fmt("%d cells, slowest %.2f s", cells, slowest);
    return o;
}

// ---- 2 --------------------------------------------------------------------

Outcome flash_legality() {
    Outcome o;
    bool rejected = false;
    try {
        FlashDevice dev(geometry(256), FlashMode::RawNand);
        EngineConfig cfg;
        cfg.variant = Variant::BTree;
        IndexEngine e(dev, cfg);
    } catch (const Error& err) {
        rejected = err.code() == ErrorCode::Incompatible;
    }
    // Every overwrite-layout write below goes through the 1->0 check.
    FlashDevice dev(geometry(4096), FlashMode::Overwrite);
    EngineConfig cfg;
    cfg.variant = Variant::VMTreeOW;
    IndexEngine e(dev, cfg);
    std::mt19937 rng(5);
    for (Value i = 0; i < 5000; ++i) e.insert(rng() % 3000, i);
    g_rejected += dev.rejected_writes();
    o.pass = rejected && g_rejected == 0 && e.stats().owAppendWrites > 0;
    o.detail = fmt("btree on raw nand rejected=%s, overwrite appends=%llu, rejected writes across all runs=%llu",
                   rejected ? "yes" : "no", static_cast<unsigned long long>(e.stats().owAppendWrites),
                   static_cast<unsigned long long>(g_rejected));
    return o;
}

// ---- 3 --------------------------------------------------------------------

Outcome write_amplification() {
    Outcome o;
    FlashDevice dev(geometry(4096), FlashMode::RawNand);
    EngineConfig cfg;
    cfg.mappingTableBytes = 4096;
    IndexEngine e(dev, cfg);
    for (Key k = 1; k <= 2500; ++k) e.insert(k * 10, k);
    e.rewrite_path(25000);
    std::mt19937 rng(3);
    std::uint64_t samples = 0, worst = 0;
    for (int i = 0; i < 200; ++i) {
        const Key k = (rng() % 2500) * 10 + 5;
        const auto splits = e.stats().splits;
        const auto before = dev.counters().total_writes();
        e.insert(k, 0);
        if (e.stats().splits != splits) continue;
        worst = std::max<std::uint64_t>(worst, dev.counters().total_writes() - before);
        ++samples;
    }
    const auto before = dev.counters().total_writes();
    e.rewrite_path(12345);  // what an update-in-place tree without mappings writes
    const auto naive = dev.counters().total_writes() - before;
    g_rejected += dev.rejected_writes();
    o.pass = e.height() == 3 && samples >= 100 && worst == 1 && naive == 3 && e.stats().tableFullFlushes == 0;
    o.detail = fmt("height %u, %llu non-splitting inserts, max writes %llu; full path rewrite %llu writes",
                   e.height(), static_cast<unsigned long long>(samples), static_cast<unsigned long long>(worst),
                   static_cast<unsigned long long>(naive));
    return o;
}

// ---- 4 --------------------------------------------------------------------

Outcome recovery() {
    Outcome o;
    const NodeFormat f{512, 4, 12};
    FlashDevice dev(geometry(256), FlashMode::RawNand);
    auto leaf = [&](PageId at, PageId prev, std::uint32_t seq, std::vector<Record> rs) {
        SortedNode n;
        n.header = {at, prev, seq};
        n.header.isLeaf = true;
        n.records = std::move(rs);
        dev.write_page(at, encode_sorted(n, f));
    };
    leaf(3, kNoPage, 0, {{10, 1}});
    SortedNode root;
    root.header = {4, kNoPage, 1};
    root.header.isRoot = true;
    root.header.isLeaf = false;
    root.keys = {100};
    root.children = {3, 5};
    dev.write_page(4, encode_sorted(root, f));
    leaf(5, kNoPage, 2, {{100, 1}});
    leaf(6, 5, 3, {{100, 1}, {110, 1}});
    leaf(7, 5, 4, {{100, 1}, {110, 1}, {120, 1}});
    leaf(8, 5, 5, {{100, 1}, {110, 1}, {120, 1}, {130, 1}});
    const auto st = vmtree::recover(dev, f);
    auto isFree = [&](PageId p) { return (st.bitmap[p / 8] >> (p % 8)) & 1u; };
    const bool example = st.rootPageId == 4 && st.mappings == std::vector<VirtualMapping>{{5, 8}} && isFree(5) && isFree(6) &&
                         isFree(7) && !isFree(3) && !isFree(4) && !isFree(8);

    std::mt19937 rng(44);
    std::vector<Record> work;
    for (Value i = 0; i < 1000; ++i) work.push_back({rng() % 1000000, i});
    EngineConfig cfg;
    const auto sweep = crash_sweep(geometry(256), cfg, work);
    g_rejected += sweep.rejectedWrites;
    o.pass = example && sweep.points == sweep.mutations + 1 && sweep.passed == sweep.points;
    o.detail = fmt("example mapping {5->8}, pages 5,6,7 free: %s; crash points passed %llu/%llu",
                   example ? "yes" : "no", static_cast<unsigned long long>(sweep.passed),
                   static_cast<unsigned long long>(sweep.points));
    if (!sweep.failures.empty()) o.detail += "; first failure: " + sweep.failures.front();
    return o;
}

// ---- 5 --------------------------------------------------------------------

double buffered_saving(WorkloadSpec s, const std::vector<Record>& data) {
    s.queryCount = 0;
    s.writeBufferPages = 0;
    const auto plain = checked_run(s, data).insertIo.total_writes();
    s.writeBufferPages = 1;
    const auto buffered = checked_run(s, data).insertIo.total_writes();
    return 1.0 - static_cast<double>(buffered) / static_cast<double>(plain);
}

Outcome write_buffer_savings() {
    Outcome o;
    const auto temp = generate_dataset("temperature", 10000, 1);
    const auto rnd = generate_dataset("random", 10000, 1);
    std::ostringstream d;
    for (Variant v : kVariants) {
        WorkloadSpec s;
        s.variant = v;
        s.dataset = "temperature";
        const double t = buffered_saving(s, temp);
        s.dataset = "random";
        const double r = buffered_saving(s, rnd);
        const bool ok = t >= 0.5 && t <= 0.8 && r > 0 && r < t;
        o.pass = o.pass && ok;
        d << fmt("%s temperature %.1f%% random %.1f%%%s; ", to_string(v), 100 * t, 100 * r, ok ? "" : " (out of band)");
    }
    o.detail = d.str();
    o.detail.resize(o.detail.size() - 2);
    return o;
}

// ---- 6 --------------------------------------------------------------------

Outcome variant_parity() {
    Outcome o;
    const auto data = generate_dataset("random", 10000, 1);
    std::map<Variant, RunReport> r;
    for (Variant v : kVariants) {
        WorkloadSpec s;
        s.variant = v;
        s.verify = true;
        r[v] = checked_run(s, data);
    }
    const double ratio = static_cast<double>(r[Variant::VMTree].insertIo.total_io()) /
                         static_cast<double>(r[Variant::BTree].insertIo.total_io());
    const auto q = r[Variant::BTree].queryIo.pageReads;
    const bool sameReads = r[Variant::VMTree].queryIo.pageReads == q && r[Variant::VMTreeOW].queryIo.pageReads == q;
    std::uint64_t mism = 0;
    for (auto& [v, rep] : r) mism += rep.mismatches;
    o.pass = ratio <= 1.10 && sameReads && mism == 0;
    o.detail = fmt("vmtree/btree insert I/O %.3f, query reads btree %llu vmtree %llu vmtree-ow %llu", ratio,
                   static_cast<unsigned long long>(q),
                   static_cast<unsigned long long>(r[Variant::VMTree].queryIo.pageReads),
                   static_cast<unsigned long long>(r[Variant::VMTreeOW].queryIo.pageReads));
    return o;
}

// ---- 7 --------------------------------------------------------------------

Outcome overwrite_speedup() {
    Outcome o;
    const auto data = generate_dataset("random", 10000, 1);
    WorkloadSpec s;
    s.device = profiles::dataflash();
    s.queryCount = 0;
    s.variant = Variant::BTree;
    const auto b = checked_run(s, data);
    s.variant = Variant::VMTreeOW;
    const auto w = checked_run(s, data);
    const double speedup = b.insertSeconds / w.insertSeconds;
    o.pass = speedup >= 3.0 && speedup <= 6.0;
    o.detail = fmt("btree %.2f s, vmtree-ow %.2f s, speedup %.2fx", b.insertSeconds, w.insertSeconds, speedup);
    return o;
}

// ---- 8 --------------------------------------------------------------------

Outcome table_pressure() {
    Outcome o;
    std::map<std::string, RunReport> r;
    for (const char* ds : {"random", "temperature"}) {
        WorkloadSpec s;
        s.dataset = ds;
        s.recordCount = 100000;
        s.recordWidth = 8;  // 16-byte records do not fit 5000 pages of 512 bytes
        s.numPages = 5000;
        s.device = profiles::sd_card(5000);
        s.pageBuffers = 4;
        s.mappingTableBytes = 4096;
        s.queryCount = 10000;
        s.rangeQueryCount = 100;
        s.verify = true;
        r[ds] = checked_run(s, generate_dataset(ds, s.recordCount, s.seed));
    }
    const auto& rnd = r["random"];
    const auto& tmp = r["temperature"];
    o.pass = rnd.engine.tableFullFlushes >= 1 && rnd.gc.wraps >= 20 && tmp.tablePeakLoad <= 0.35 &&
             tmp.engine.tableFullFlushes == 0 && rnd.mismatches == 0 && tmp.mismatches == 0;
    o.detail = fmt("random: %llu forced flushes, %llu wraps, %llu writes; temperature: peak load %.3f, %llu forced "
                   "flushes, %llu wraps; mismatches %llu",
                   static_cast<unsigned long long>(rnd.engine.tableFullFlushes),
                   static_cast<unsigned long long>(rnd.gc.wraps),
                   static_cast<unsigned long long>(rnd.insertIo.total_writes()), tmp.tablePeakLoad,
                   static_cast<unsigned long long>(tmp.engine.tableFullFlushes),
                   static_cast<unsigned long long>(tmp.gc.wraps),
                   static_cast<unsigned long long>(rnd.mismatches + tmp.mismatches));
    return o;
}

// ---- 9 --------------------------------------------------------------------

Outcome memory_budget() {
    Outcome o;
    const auto data = generate_dataset("random", 10000, 1);
    std::map<Variant, RunReport> r;
    WorkloadSpec s;
    s.queryCount = 0;
    for (Variant v : kVariants) {
        s.variant = v;
        r[v] = checked_run(s, data);
    }
    const auto& m = r[Variant::VMTree].memory;
    const std::size_t expect = 3 * 512 + 1024 + (r[Variant::VMTree].numPages + 7) / 8;
    const bool others = r[Variant::BTree].memory.mappingTable == 0 && r[Variant::BTree].memory.bitmap == 0 &&
                        r[Variant::VMTreeOW].memory.mappingTable == 0 && r[Variant::VMTreeOW].memory.bitmap == 0;
    o.pass = m.total() <= 4096 && m.pageBuffers + m.mappingTable + m.bitmap == expect && others;
    o.detail = fmt("vmtree total %zu bytes (buffers %zu, table %zu, bitmap %zu for %u pages, other %zu); btree %zu; "
                   "vmtree-ow %zu",
                   m.total(), m.pageBuffers, m.mappingTable, m.bitmap, r[Variant::VMTree].numPages,
                   m.frameMetadata + m.stateVariables, r[Variant::BTree].memory.total(),
                   r[Variant::VMTreeOW].memory.total());
    return o;
}

// ---- 10 -------------------------------------------------------------------

Outcome memory_allocation() {
    Outcome o;
    std::ostringstream d;
    for (const char* ds : {"random", "temperature"}) {
        const auto data = generate_dataset(ds, 10000, 1);
        std::vector<double> reads, inserts;
        double buffered = 0;
        std::uint32_t height = 0;
        for (std::size_t m = 3; m <= 10; ++m) {
            WorkloadSpec s;
            s.dataset = ds;
            s.pageBuffers = m;
            const auto r = checked_run(s, data);
            reads.push_back(r.queryThroughput);
            inserts.push_back(r.insertThroughput);
            height = r.height;
            if (m == 3) {
                s.writeBufferPages = 1;
                buffered = checked_run(s, data).insertThroughput;
            }
        }
        bool monotone = true;
        for (std::size_t i = 1; i < reads.size(); ++i) monotone = monotone && reads[i] >= reads[i - 1];
        // A split also needs a frame for the new page, so the working path is
        // height + 1 frames.  The step into that M should be the largest.
        std::size_t best = 1;
        for (std::size_t i = 1; i < inserts.size(); ++i)
            if (inserts[i] / inserts[i - 1] > inserts[best] / inserts[best - 1]) best = i;
        const std::size_t jumpAt = best + 3;
        const bool jump = jumpAt == height + 1;
        const double bestWithoutBuffer = *std::max_element(inserts.begin() + 1, inserts.end());
        const bool bufferWins = std::string(ds) == "random" || buffered > bestWithoutBuffer;
        o.pass = o.pass && monotone && jump && bufferWins;
        d << fmt("%s: reads %.0f..%.0f/s %s, largest insert gain at M=%zu (height %u, +%.0f%%)", ds, reads.front(),
                 reads.back(), monotone ? "non-decreasing" : "DECREASING", jumpAt, height,
                 100 * (inserts[best] / inserts[best - 1] - 1));
        if (std::string(ds) == "temperature")
            d << fmt(", M=3 with write buffer %.0f/s vs best M without %.0f/s", buffered, bestWithoutBuffer);
        d << "; ";
    }
    o.detail = d.str();
    o.detail.resize(o.detail.size() - 2);
    return o;
}

}  // namespace

int main() {
    // Legality runs last so it covers the devices of every other criterion.
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"C1 oracle equivalence", oracle_equivalence},
        {"C3 write amplification", write_amplification},
        {"C4 recovery", recovery},
        {"C5 write-buffer savings", write_buffer_savings},
        {"C6 variant parity on FTL", variant_parity},
        {"C7 overwrite speedup", overwrite_speedup},
        {"C8 mapping-table pressure", table_pressure},
        {"C9 memory budget", memory_budget},
        {"C10 memory allocation", memory_allocation},
        {"C2 flash legality", flash_legality},
    };
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed;
}
