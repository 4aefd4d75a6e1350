#include <gtest/gtest.h>

#include <map>
#include <random>

#include "vmtree/mapping_table.hpp"

using namespace vmtree;

TEST(MappingTable, EntryFormatFollowsDeviceSize) {
    MappingTable small(1024, 5000);
    EXPECT_EQ(small.entry_size(), 4u);
    EXPECT_EQ(small.capacity(), 256u);
    EXPECT_EQ(small.footprint_bytes(), 1024u);
    MappingTable large(1024, 100000);
    EXPECT_EQ(large.entry_size(), 8u);
    EXPECT_EQ(large.capacity(), 128u);
    MappingTable t4096(4096, 5000);
    EXPECT_EQ(t4096.capacity(), 1024u);
}

TEST(MappingTable, PutReplacesInPlace) {
    MappingTable t(64, 1000);
    EXPECT_EQ(t.put(5, 6), MappingTable::PutResult::Inserted);
    EXPECT_EQ(t.put(5, 7), MappingTable::PutResult::Replaced);
    EXPECT_EQ(t.put(5, 8), MappingTable::PutResult::Replaced);
    EXPECT_EQ(t.size(), 1u);
    EXPECT_EQ(t.find(5), std::optional<PageId>(8));
    EXPECT_EQ(t.resolve(5), 8u);
    EXPECT_EQ(t.resolve(9), 9u);
}

TEST(MappingTable, FullTableReportsTableFull) {
    MappingTable t(16 * 4, 1000);
    ASSERT_EQ(t.capacity(), 16u);
    for (PageId p = 0; p < 16; ++p) EXPECT_EQ(t.put(p, p + 100), MappingTable::PutResult::Inserted);
    EXPECT_EQ(t.put(50, 51), MappingTable::PutResult::TableFull);
    EXPECT_EQ(t.put(3, 200), MappingTable::PutResult::Replaced);  // existing keys still update
    EXPECT_DOUBLE_EQ(t.load_factor(), 1.0);
    t.remove(3);
    EXPECT_EQ(t.put(50, 51), MappingTable::PutResult::Inserted);
}

TEST(MappingTable, MatchesMapOracleUnderChurn) {
    std::mt19937 rng(12);
    for (std::size_t budget : {64u, 256u, 1024u}) {
        MappingTable t(budget, 5000);
        std::map<PageId, PageId> oracle;
        for (int op = 0; op < 20000; ++op) {
            const PageId k = rng() % 400;
            if (rng() % 3 == 0) {
                EXPECT_EQ(t.remove(k), oracle.erase(k) == 1);
            } else {
                const PageId v = 1000 + rng() % 3000;
                const auto r = t.put(k, v);
                if (oracle.count(k)) {
                    EXPECT_EQ(r, MappingTable::PutResult::Replaced);
                    oracle[k] = v;
                } else if (oracle.size() < t.capacity()) {
                    EXPECT_EQ(r, MappingTable::PutResult::Inserted);
                    oracle[k] = v;
                } else {
                    EXPECT_EQ(r, MappingTable::PutResult::TableFull);
                }
            }
            ASSERT_EQ(t.size(), oracle.size());
            if (op % 97 == 0) {
                for (PageId q = 0; q < 400; ++q) {
                    auto it = oracle.find(q);
                    ASSERT_EQ(t.find(q), it == oracle.end() ? std::nullopt : std::optional<PageId>(it->second));
                }
            }
        }
        EXPECT_LE(t.tombstones() * 4, t.capacity());
        EXPECT_GE(t.peak_load_factor(), t.load_factor());
    }
}

TEST(MappingTable, EntriesAndClear) {
    MappingTable t(256, 1000);
    t.put(1, 2);
    t.put(3, 4);
    auto e = t.entries();
    std::sort(e.begin(), e.end(), [](auto& a, auto& b) { return a.prev < b.prev; });
    EXPECT_EQ(e, (std::vector<VirtualMapping>{{1, 2}, {3, 4}}));
    t.clear();
    EXPECT_EQ(t.size(), 0u);
    EXPECT_FALSE(t.contains(1));
}

TEST(MappingTable, RejectsBadIds) {
    MappingTable t(64, 1000);
    EXPECT_THROW(t.put(4, 4), Error);
    EXPECT_THROW(t.put(0xFFFF, 1), Error);
    MappingTable none(0, 1000);
    EXPECT_EQ(none.put(1, 2), MappingTable::PutResult::TableFull);
    EXPECT_FALSE(none.contains(1));
}
