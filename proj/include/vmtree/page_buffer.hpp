#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/flash_device.hpp"

namespace vmtree {

/// Per-component memory accounting in bytes.
struct MemoryFootprint {
    std::size_t pageBuffers = 0;
    std::size_t frameMetadata = 0;
    std::size_t stateVariables = 0;
    std::size_t bitmap = 0;
    std::size_t mappingTable = 0;
    std::size_t writeBuffer = 0;

    std::size_t total() const {
        return pageBuffers + frameMetadata + stateVariables + bitmap + mappingTable + writeBuffer;
    }
};

/// LRU cache of M page frames.  Pinned frames are never evicted; the engines
/// keep the root pinned.
class BufferPool {
public:
    using Loader = std::function<void(PageId, std::span<std::uint8_t>)>;
    using WriteBack = std::function<void(PageId, std::span<const std::uint8_t>)>;

    struct FrameMeta {
        PageId pageId = kNoPage;
        std::uint32_t lruStamp = 0;
        bool dirty = false;
        bool pinned = false;
    };

    static constexpr std::size_t kMinFrames = 3;

    BufferPool(std::size_t frames, std::uint32_t pageSize) : pageSize_(pageSize), meta_(frames) {
        if (frames < kMinFrames) throw Error(ErrorCode::OutOfRange, "buffer pool needs at least 3 frames");
        data_.assign(frames * pageSize, 0);
    }

    void set_write_back(WriteBack wb) { writeBack_ = std::move(wb); }

    std::size_t frame_count() const { return meta_.size(); }
    std::uint32_t page_size() const { return pageSize_; }
    std::uint64_t hits() const { return hits_; }
    std::uint64_t misses() const { return misses_; }
    void reset_stats() { hits_ = misses_ = 0; }

    bool resident(PageId id) const { return find(id) != npos; }

    /// Returns the frame holding `id`, loading it through `loader` on a miss.
    /// The span stays valid until the next call that may evict.
    std::span<const std::uint8_t> fetch(PageId id, const Loader& loader) {
        if (auto f = find(id); f != npos) {
            ++hits_;
            touch(f);
            return frame(f);
        }
        ++misses_;
        const auto f = victim();
        meta_[f] = FrameMeta{id, 0, false, false};
        loader(id, frame(f));
        touch(f);
        return frame(f);
    }

    /// Places freshly written page content in a frame without device I/O.
    void install(PageId id, std::span<const std::uint8_t> bytes, bool dirty = false) {
        auto f = find(id);
        if (f == npos) {
            f = victim();
            meta_[f] = FrameMeta{id, 0, false, false};
        }
        std::copy(bytes.begin(), bytes.end(), frame(f).begin());
        meta_[f].dirty = meta_[f].dirty || dirty;
        touch(f);
    }

    void mark_dirty(PageId id) {
        if (auto f = find(id); f != npos) meta_[f].dirty = true;
    }

    /// Drops `id` without writing it back.
    void invalidate(PageId id) {
        if (auto f = find(id); f != npos) meta_[f] = FrameMeta{};
    }

    void pin(PageId id) {
        const auto f = find(id);
        if (f == npos) throw Error(ErrorCode::OutOfRange, "pin of non-resident page");
        meta_[f].pinned = true;
    }

    void unpin(PageId id) {
        if (auto f = find(id); f != npos) meta_[f].pinned = false;
    }

    bool pinned(PageId id) const {
        const auto f = find(id);
        return f != npos && meta_[f].pinned;
    }

    /// Writes back dirty frames and drops every unpinned frame.
    void clear_unpinned() {
        for (std::size_t f = 0; f < meta_.size(); ++f) {
            if (meta_[f].pageId == kNoPage || meta_[f].pinned) continue;
            write_back(f);
            meta_[f] = FrameMeta{};
        }
    }

    void flush_dirty() {
        for (std::size_t f = 0; f < meta_.size(); ++f)
            if (meta_[f].pageId != kNoPage) write_back(f);
    }

    std::size_t unpinned_frames() const {
        std::size_t n = 0;
        for (const auto& m : meta_) n += m.pinned ? 0 : 1;
        return n;
    }

    std::size_t buffer_bytes() const { return meta_.size() * pageSize_; }
    std::size_t metadata_bytes() const { return meta_.size() * sizeof(FrameMeta); }

    const std::vector<FrameMeta>& frames() const { return meta_; }

private:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    std::size_t find(PageId id) const {
        if (id == kNoPage) return npos;
        for (std::size_t f = 0; f < meta_.size(); ++f)
            if (meta_[f].pageId == id) return f;
        return npos;
    }

    std::span<std::uint8_t> frame(std::size_t f) { return {data_.data() + f * pageSize_, pageSize_}; }

    void touch(std::size_t f) { meta_[f].lruStamp = ++clock_; }

    void write_back(std::size_t f) {
        if (!meta_[f].dirty) return;
        if (writeBack_) writeBack_(meta_[f].pageId, frame(f));
        meta_[f].dirty = false;
    }

    std::size_t victim() {
        std::size_t best = npos;
        for (std::size_t f = 0; f < meta_.size(); ++f) {
            if (meta_[f].pageId == kNoPage) return f;
            if (meta_[f].pinned) continue;
            if (best == npos || meta_[f].lruStamp < meta_[best].lruStamp) best = f;
        }
        if (best == npos) throw Error(ErrorCode::PoolExhausted, "every frame is pinned");
        write_back(best);
        return best;
    }

    std::uint32_t pageSize_;
    std::vector<FrameMeta> meta_;
    std::vector<std::uint8_t> data_;
    WriteBack writeBack_;
    std::uint32_t clock_ = 0;
    std::uint64_t hits_ = 0;
    std::uint64_t misses_ = 0;
};

}  // namespace vmtree
