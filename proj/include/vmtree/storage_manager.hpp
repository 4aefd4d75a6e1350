#pragma once

// Physical space management for the relocating tree on raw flash.
//
// The device is split into a circular range (all blocks but the last) and a
// one-block spill region used to stage live pages during garbage collection.
// Pages are handed out in address order.  Blocks ahead of the write head are
// prepared in advance: live pages are staged, the block is erased and the
// live pages are written back to the same addresses, so no pointer or
// mapping changes.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/flash_device.hpp"
#include "vmtree/mapping_table.hpp"
#include "vmtree/node_codec.hpp"

namespace vmtree {

enum class GcStaging : std::uint8_t {
    Memory,   // stage in RAM when the live pages fit, spill region otherwise
    Durable,  // always stage through the spill region (survives power loss)
};

enum class Liveness : std::uint8_t {
    Bitmap,  // free-space bit per page
    Probe,   // search the tree for a key of the page
};

struct StorageConfig {
    std::uint32_t erasedWindowBlocks = 2;
    GcStaging staging = GcStaging::Memory;
    std::size_t stagingPages = 2;
    Liveness liveness = Liveness::Bitmap;
};

struct StorageStats {
    std::uint64_t gcRelocations = 0;
    std::uint64_t gcErases = 0;
    std::uint64_t spillWrites = 0;
    std::uint64_t wraps = 0;
    std::uint64_t recoveryPagesScanned = 0;
};

/// Result of rebuilding in-memory state from device contents.
struct RecoveryState {
    PageId rootPageId = kNoPage;
    std::uint32_t nextSeq = 0;
    PageId lastWrite = kNoPage;               // page with the highest sequence number
    std::vector<VirtualMapping> mappings;     // only those reachable from the root
    std::vector<std::uint8_t> bitmap;         // 1 = free
    std::size_t pagesScanned = 0;
    std::size_t spillRestored = 0;

    bool operator==(const RecoveryState& o) const {
        return rootPageId == o.rootPageId && nextSeq == o.nextSeq && lastWrite == o.lastWrite &&
               mappings == o.mappings && bitmap == o.bitmap;
    }
};

class StorageManager {
public:
    using PagePredicate = std::function<bool(PageId)>;

    StorageManager(FlashDevice& device, StorageConfig config) : dev_(device), cfg_(config) {
        const auto& g = dev_.geometry();
        if (g.pagesPerBlock > 64) throw Error(ErrorCode::OutOfRange, "at most 64 pages per block");
        if (g.num_blocks() < cfg_.erasedWindowBlocks + 3)
            throw Error(ErrorCode::OutOfRange, "device too small for the erased window");
        circularPages_ = g.numPages - g.pagesPerBlock;
        bitmap_.assign((g.numPages + 7) / 8, 0xFF);
        for (PageId p = circularPages_; p < g.numPages; ++p) set_bit(p, false);
    }

    /// Pages that are mapping keys hold stale data but their address is still
    /// referenced by a parent, so they are skipped by the allocator.
    void set_reserved_check(PagePredicate reserved) { reserved_ = std::move(reserved); }
    /// Used for the Probe liveness mode.
    void set_probe(PagePredicate probe) { probe_ = std::move(probe); }

    const StorageConfig& config() const { return cfg_; }
    const StorageStats& stats() const { return stats_; }
    std::uint32_t circular_pages() const { return circularPages_; }
    PageId spill_begin() const { return circularPages_; }
    PageId write_head() const { return head_; }
    std::size_t bitmap_bytes() const { return bitmap_.size(); }
    const std::vector<std::uint8_t>& bitmap() const { return bitmap_; }

    /// Starts on a device whose circular range is erased.
    void format() {
        head_ = 0;
        lap_ = 0;
        window_.clear();
        spillDirty_ = !all_erased(dev_.geometry().num_blocks() - 1);
        const auto ppb = dev_.geometry().pagesPerBlock;
        for (std::uint32_t b = 0; b <= cfg_.erasedWindowBlocks; ++b) window_.push_back({b, full_mask(ppb)});
    }

    bool is_free(PageId p) const { return (bitmap_[p / 8] >> (p % 8)) & 1u; }
    void mark_free(PageId p) { check(p); set_bit(p, true); }
    void mark_used(PageId p) { check(p); set_bit(p, false); }

    std::size_t free_count() const {
        std::size_t n = 0;
        for (PageId p = 0; p < circularPages_; ++p) n += is_free(p) ? 1 : 0;
        return n;
    }

    /// Next writable page in address order.  Prepares further blocks as the
    /// head crosses block boundaries.
    PageId allocate_next() {
        const auto ppb = dev_.geometry().pagesPerBlock;
        const std::uint32_t blocks = circularPages_ / ppb;
        for (std::uint32_t visited = 0; visited <= blocks; ++visited) {
            const std::uint32_t block = window_.front().block;
            auto& mask = window_.front().writable;
            for (PageId p = std::max(head_, block * ppb); p < (block + 1) * ppb; ++p) {
                const std::uint32_t bit = p - block * ppb;
                if (!((mask >> bit) & 1u) || !is_free(p) || (reserved_ && reserved_(p))) continue;
                mask &= ~(1ULL << bit);
                mark_used(p);
                head_ = p + 1;
                return p;
            }
            advance_block();
        }
        throw Error(ErrorCode::StorageFull, "no reusable page in the circular range");
    }

    /// Prepares one block: stage live pages, erase, write them back in place.
    /// Returns the number of relocated pages.
    std::size_t gc_step(std::uint32_t block) {
        const auto& g = dev_.geometry();
        const auto ppb = g.pagesPerBlock;
        std::vector<PageId> live;
        for (PageId p = block * ppb; p < (block + 1) * ppb; ++p)
            if (page_live(p)) live.push_back(p);

        const bool virgin = lap_ == 0 && block * ppb >= head_ && live.empty();
        if (virgin) return 0;

        std::vector<std::vector<std::uint8_t>> staged;
        staged.reserve(live.size());
        for (PageId p : live) staged.push_back(dev_.read_page(p));

        const bool spill = cfg_.staging == GcStaging::Durable || live.size() > cfg_.stagingPages;
        if (spill && !live.empty()) {
            if (spillDirty_) dev_.erase_block(g.num_blocks() - 1);
            spillDirty_ = true;
            for (std::size_t i = 0; i < staged.size(); ++i) {
                dev_.write_page(spill_begin() + static_cast<PageId>(i), staged[i]);
                ++stats_.spillWrites;
            }
        }
        dev_.erase_block(block);
        ++stats_.gcErases;
        for (std::size_t i = 0; i < live.size(); ++i) dev_.write_page(live[i], staged[i]);
        stats_.gcRelocations += live.size();
        return live.size();
    }

    /// Re-establishes allocation state after recovery.  The head moves to the
    /// start of the block after the last write and the window is rebuilt.
    void restore(const RecoveryState& state) {
        const auto ppb = dev_.geometry().pagesPerBlock;
        bitmap_ = state.bitmap;
        for (PageId p = circularPages_; p < dev_.geometry().numPages; ++p) set_bit(p, false);
        lap_ = 1;
        spillDirty_ = true;
        const std::uint32_t blocks = circularPages_ / ppb;
        const std::uint32_t lastBlock = state.lastWrite == kNoPage ? blocks - 1 : state.lastWrite / ppb;
        const std::uint32_t headBlock = (lastBlock + 1) % blocks;
        head_ = headBlock * ppb;
        window_.clear();
        for (std::uint32_t i = 0; i <= cfg_.erasedWindowBlocks; ++i) prepare((headBlock + i) % blocks);
    }

    /// Every free page in the head block remainder and the blocks ahead is
    /// erased.  Reads through peek(), so it costs no counted I/O.
    bool window_is_erased() const {
        const auto ppb = dev_.geometry().pagesPerBlock;
        for (const auto& w : window_) {
            for (std::uint32_t i = 0; i < ppb; ++i) {
                const PageId p = w.block * ppb + i;
                if (((w.writable >> i) & 1u) && !dev_.is_erased(p)) return false;
            }
        }
        return window_.size() == cfg_.erasedWindowBlocks + 1;
    }

    std::size_t state_bytes() const {
        return sizeof(head_) + sizeof(lap_) + sizeof(circularPages_) + sizeof(spillDirty_) +
               window_.size() * sizeof(WindowBlock) + sizeof(cfg_);
    }

private:
    struct WindowBlock {
        std::uint32_t block;
        std::uint64_t writable;  // bit i: page i of the block is erased and free
    };

    static std::uint64_t full_mask(std::uint32_t ppb) { return ppb == 64 ? ~0ULL : ((1ULL << ppb) - 1); }

    bool all_erased(std::uint32_t block) const {
        const auto ppb = dev_.geometry().pagesPerBlock;
        for (PageId p = block * ppb; p < (block + 1) * ppb; ++p)
            if (!dev_.is_erased(p)) return false;
        return true;
    }

    bool page_live(PageId p) {
        if (cfg_.liveness == Liveness::Probe && probe_) return probe_(p);
        return !is_free(p);
    }

    void prepare(std::uint32_t block) {
        const auto ppb = dev_.geometry().pagesPerBlock;
        gc_step(block);
        std::uint64_t mask = 0;
        for (std::uint32_t i = 0; i < ppb; ++i)
            if (!page_live(block * ppb + i)) mask |= 1ULL << i;
        window_.push_back({block, mask});
    }

    void advance_block() {
        const auto ppb = dev_.geometry().pagesPerBlock;
        const std::uint32_t blocks = circularPages_ / ppb;
        window_.erase(window_.begin());
        const std::uint32_t next = window_.front().block;
        if (next == 0) {
            ++lap_;
            ++stats_.wraps;
        }
        head_ = next * ppb;
        prepare((next + cfg_.erasedWindowBlocks) % blocks);
    }

    void set_bit(PageId p, bool free) {
        if (free)
            bitmap_[p / 8] = static_cast<std::uint8_t>(bitmap_[p / 8] | (1u << (p % 8)));
        else
            bitmap_[p / 8] = static_cast<std::uint8_t>(bitmap_[p / 8] & ~(1u << (p % 8)));
    }

    void check(PageId p) const {
        if (p >= dev_.geometry().numPages) throw Error(ErrorCode::OutOfRange, "page " + std::to_string(p));
    }

    FlashDevice& dev_;
    StorageConfig cfg_;
    StorageStats stats_;
    std::uint32_t circularPages_ = 0;
    std::vector<std::uint8_t> bitmap_;
    PageId head_ = 0;
    std::uint64_t lap_ = 0;
    bool spillDirty_ = false;
    std::vector<WindowBlock> window_;
    PagePredicate reserved_;
    PagePredicate probe_;
};

/// Rebuilds the root location, the reachable virtual mappings and the free
/// space bitmap from page headers.
///
/// Pages are ranked by sequence number, newest first.  A pointer value v
/// stored in a parent names the node whose newest image is either the page
/// at address v or a page whose header carries prevPageId v.  Walking the
/// tree from the newest root with that rule yields the live pages; a
/// mapping is kept only where it is needed to reach one of them.
inline RecoveryState recover(FlashDevice& dev, const NodeFormat& format) {
    const auto& g = dev.geometry();
    const PageId circular = g.numPages - g.pagesPerBlock;
    RecoveryState st;

    // Finish an interrupted collection: staged copies whose home is erased.
    for (PageId s = circular; s < g.numPages; ++s) {
        const auto bytes = dev.read_page(s);
        ++st.pagesScanned;
        const auto h = decode_header(bytes);
        if (!h || h->pageId >= circular) continue;
        if (dev.is_erased(h->pageId)) {
            dev.write_page(h->pageId, bytes);
            ++st.spillRestored;
        }
    }

    struct Newest {
        std::uint32_t seq;
        PageId addr;
    };
    std::unordered_map<PageId, Newest> newest;
    auto offer = [&](PageId key, std::uint32_t seq, PageId addr) {
        auto [it, inserted] = newest.try_emplace(key, Newest{seq, addr});
        if (!inserted && seq > it->second.seq) it->second = {seq, addr};
    };

    std::uint32_t rootSeq = 0;
    std::uint32_t maxSeq = 0;
    bool any = false;
    for (PageId p = circular; p-- > 0;) {
        const auto bytes = dev.read_page(p);
        ++st.pagesScanned;
        const auto h = decode_header(bytes);
        if (!h || h->pageId != p || h->layout != Layout::Sorted) continue;
        offer(p, h->seq, p);
        if (h->prevPageId != kNoPage) offer(h->prevPageId, h->seq, p);
        if (!any || h->seq > maxSeq) {
            maxSeq = h->seq;
            st.lastWrite = p;
        }
        if (h->isRoot && (st.rootPageId == kNoPage || h->seq > rootSeq)) {
            st.rootPageId = p;
            rootSeq = h->seq;
        }
        any = true;
    }
    if (st.rootPageId == kNoPage) throw Error(ErrorCode::EmptyTree, "no root page on device");
    st.nextSeq = maxSeq + 1;

    auto locate = [&](PageId ref) {
        auto it = newest.find(ref);
        return it == newest.end() ? ref : it->second.addr;
    };

    st.bitmap.assign((g.numPages + 7) / 8, 0xFF);
    auto mark_used = [&](PageId p) { st.bitmap[p / 8] = static_cast<std::uint8_t>(st.bitmap[p / 8] & ~(1u << (p % 8))); };
    for (PageId p = circular; p < g.numPages; ++p) mark_used(p);
    std::unordered_set<PageId> seen;
    std::vector<PageId> stack{st.rootPageId};
    mark_used(st.rootPageId);
    while (!stack.empty()) {
        const PageId loc = stack.back();
        stack.pop_back();
        if (!seen.insert(loc).second) throw Error(ErrorCode::BadFormat, "cycle in recovered tree");
        const auto node = decode_sorted(dev.peek(loc), format);
        if (node.is_leaf()) continue;
        for (PageId ref : node.children) {
            const PageId child = locate(ref);
            if (child >= circular) throw Error(ErrorCode::BadFormat, "child outside storage");
            if (child != ref) st.mappings.push_back({ref, child});
            mark_used(child);
            stack.push_back(child);
        }
    }
    std::sort(st.mappings.begin(), st.mappings.end(),
              [](const VirtualMapping& a, const VirtualMapping& b) { return a.prev < b.prev; });
    return st;
}

}  // namespace vmtree
