#include <gtest/gtest.h>

#include <random>

#include "vmtree/crash_test.hpp"
#include "vmtree/index_engine.hpp"

using namespace vmtree;

namespace {

FlashGeometry small_geometry(std::uint32_t pages = 256) {
    FlashGeometry g;
    g.pageSize = 512;
    g.pagesPerBlock = 8;
    g.numPages = pages;
    return g;
}

const NodeFormat kFormat{512, 4, 12};

void put_leaf(FlashDevice& dev, PageId at, PageId prev, std::uint32_t seq, std::vector<Record> records) {
    SortedNode n;
    n.header.pageId = at;
    n.header.prevPageId = prev;
    n.header.seq = seq;
    n.header.isLeaf = true;
    n.records = std::move(records);
    dev.write_page(at, encode_sorted(n, kFormat));
}

void put_root(FlashDevice& dev, PageId at, std::uint32_t seq, std::vector<Key> keys, std::vector<PageId> children) {
    SortedNode n;
    n.header.pageId = at;
    n.header.seq = seq;
    n.header.isLeaf = false;
    n.header.isRoot = true;
    n.keys = std::move(keys);
    n.children = std::move(children);
    dev.write_page(at, encode_sorted(n, kFormat));
}

// Root at page 4 points at leaves 3 and 5; the node first written at 5 was
// later rewritten to 6, 7 and 8, each carrying prevPageId 5.
FlashDevice lineage_device() {
    FlashDevice dev(small_geometry(), FlashMode::RawNand);
    put_leaf(dev, 3, kNoPage, 0, {{10, 1}, {20, 2}});
    put_root(dev, 4, 1, {100}, {3, 5});
    put_leaf(dev, 5, kNoPage, 2, {{100, 1}, {110, 1}});
    put_leaf(dev, 6, 5, 3, {{100, 1}, {110, 1}, {120, 1}});
    put_leaf(dev, 7, 5, 4, {{100, 1}, {110, 1}, {120, 1}, {130, 1}});
    put_leaf(dev, 8, 5, 5, {{100, 1}, {110, 1}, {120, 1}, {130, 1}, {140, 1}});
    return dev;
}

bool bit_free(const std::vector<std::uint8_t>& bitmap, PageId p) { return (bitmap[p / 8] >> (p % 8)) & 1u; }

}  // namespace

TEST(Recovery, LineageExample) {
    FlashDevice dev = lineage_device();
    const auto st = recover(dev, kFormat);
    EXPECT_EQ(st.rootPageId, 4u);
    ASSERT_EQ(st.mappings.size(), 1u);
    EXPECT_EQ(st.mappings[0], (VirtualMapping{5, 8}));
    for (PageId p : {5u, 6u, 7u}) EXPECT_TRUE(bit_free(st.bitmap, p)) << p;
    for (PageId p : {3u, 4u, 8u}) EXPECT_FALSE(bit_free(st.bitmap, p)) << p;
    EXPECT_EQ(st.nextSeq, 6u);
    EXPECT_EQ(st.lastWrite, 8u);
}

TEST(Recovery, LineageExampleOpensAsTree) {
    FlashDevice dev = lineage_device();
    EngineConfig cfg;
    auto e = IndexEngine::recover(dev, cfg);
    EXPECT_EQ(e.resolve(5), 8u);
    EXPECT_EQ(e.get(140), Value{1});
    EXPECT_EQ(e.range(0, 1000).size(), 7u);
    EXPECT_TRUE(e.probe_page_valid(8));
    EXPECT_TRUE(e.probe_page_valid(3));
    EXPECT_FALSE(e.probe_page_valid(5));
    EXPECT_FALSE(e.probe_page_valid(6));
    EXPECT_FALSE(e.probe_page_valid(7));
    EXPECT_FALSE(e.probe_page_valid(40));  // erased
}

TEST(Recovery, NoRootIsEmptyTree) {
    FlashDevice dev(small_geometry(), FlashMode::RawNand);
    try {
        recover(dev, kFormat);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyTree);
    }
}

TEST(Recovery, DeterministicAndMatchesCleanShutdown) {
    FlashDevice dev(small_geometry(512), FlashMode::RawNand);
    EngineConfig cfg;
    std::vector<VirtualMapping> live;
    std::vector<std::uint8_t> bitmap;
    {
        IndexEngine e(dev, cfg);
        std::mt19937 rng(1);
        for (int i = 0; i < 2000; ++i) e.insert(rng() % 100000, static_cast<Value>(i));
        live = e.mapping_table().entries();
        std::sort(live.begin(), live.end(), [](auto& a, auto& b) { return a.prev < b.prev; });
        bitmap = e.storage()->bitmap();
    }
    const auto a = recover(dev, kFormat);
    const auto b = recover(dev, kFormat);
    EXPECT_EQ(a, b);
    EXPECT_EQ(a.mappings, live);
    EXPECT_EQ(a.bitmap, bitmap);
}

TEST(Recovery, CrashSweepShortRun) {
    std::mt19937 rng(9);
    std::vector<Record> work;
    for (int i = 0; i < 250; ++i) work.push_back({rng() % 50000, static_cast<Value>(i)});
    EngineConfig cfg;
    const auto report = crash_sweep(small_geometry(128), cfg, work);
    EXPECT_GT(report.mutations, 250u);
    EXPECT_EQ(report.points, report.mutations + 1);
    EXPECT_EQ(report.passed, report.points);
    for (const auto& f : report.failures) ADD_FAILURE() << f;
}

TEST(Recovery, CrashSweepDurableStagingSmallTable) {
    std::mt19937 rng(10);
    std::vector<Record> work;
    for (int i = 0; i < 250; ++i) work.push_back({rng() % 50000, static_cast<Value>(i)});
    EngineConfig cfg;
    cfg.mappingTableBytes = 32;
    cfg.storage.staging = GcStaging::Durable;
    const auto report = crash_sweep(small_geometry(128), cfg, work);
    EXPECT_EQ(report.passed, report.points);
    for (const auto& f : report.failures) ADD_FAILURE() << f;
}
