#pragma once

// Bounded table of virtual mappings prevPageId -> newPageId.
//
// Storage is a raw byte array of exactly the configured budget.  Entries are
// two little-endian page ids of 2 bytes each (devices below 65534 pages) or 4
// bytes each.  Probing uses double hashing:
//   h1   = mix(prev) mod capacity
//   step = 1 + mix2(prev) mod (capacity - 1), bumped until coprime to capacity
// so every probe sequence visits all slots.  A key slot of all ones is empty,
// all ones minus one is a tombstone.

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/flash_device.hpp"

namespace vmtree {

struct VirtualMapping {
    PageId prev = kNoPage;
    PageId next = kNoPage;
    bool operator==(const VirtualMapping&) const = default;
};

class MappingTable {
public:
    enum class PutResult { Inserted, Replaced, TableFull };

    /// `numPages` selects the 4- or 8-byte entry format.
    MappingTable(std::size_t budgetBytes, std::uint32_t numPages)
        : idWidth_(numPages < 0xFFFEu ? 2 : 4), bytes_(budgetBytes - budgetBytes % (2 * idWidth_), 0xFF) {
        capacity_ = bytes_.size() / entry_size();
    }

    std::size_t entry_size() const { return 2 * idWidth_; }
    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return occupied_; }
    std::size_t tombstones() const { return tombstones_; }
    std::size_t footprint_bytes() const { return bytes_.size(); }
    std::size_t peak_size() const { return peak_; }

    double load_factor() const {
        return capacity_ == 0 ? 1.0 : static_cast<double>(occupied_) / static_cast<double>(capacity_);
    }
    double peak_load_factor() const {
        return capacity_ == 0 ? 1.0 : static_cast<double>(peak_) / static_cast<double>(capacity_);
    }

    /// Inserts or replaces the mapping for `prev`.  An existing entry is
    /// overwritten in place, so a node moved many times keeps one entry.
    PutResult put(PageId prev, PageId next) {
        if (prev == next) throw Error(ErrorCode::OutOfRange, "mapping to itself");
        check_id(prev);
        check_id(next);
        if (capacity_ == 0) return PutResult::TableFull;
        std::optional<std::size_t> firstFree;
        const auto start = home(prev);
        const auto step = stride(prev);
        std::size_t slot = start;
        for (std::size_t n = 0; n < capacity_; ++n, slot = (slot + step) % capacity_) {
            const auto k = key_at(slot);
            if (k == prev) {
                set_slot(slot, prev, next);
                return PutResult::Replaced;
            }
            if (k == empty_id()) {
                if (!firstFree) firstFree = slot;
                break;
            }
            if (k == tomb_id() && !firstFree) firstFree = slot;
        }
        if (!firstFree) return PutResult::TableFull;
        if (key_at(*firstFree) == tomb_id()) --tombstones_;
        set_slot(*firstFree, prev, next);
        ++occupied_;
        peak_ = std::max(peak_, occupied_);
        return PutResult::Inserted;
    }

    std::optional<PageId> find(PageId prev) const {
        if (capacity_ == 0 || prev >= tomb_id()) return std::nullopt;
        const auto step = stride(prev);
        std::size_t slot = home(prev);
        for (std::size_t n = 0; n < capacity_; ++n, slot = (slot + step) % capacity_) {
            const auto k = key_at(slot);
            if (k == prev) return value_at(slot);
            if (k == empty_id()) return std::nullopt;
        }
        return std::nullopt;
    }

    bool contains(PageId prev) const { return find(prev).has_value(); }

    /// Current location of the node referenced by `pageId`; no I/O.
    PageId resolve(PageId pageId) const { return find(pageId).value_or(pageId); }

    /// Removes the entry for `prev`; a missing entry is a no-op.
    bool remove(PageId prev) {
        if (capacity_ == 0 || prev >= tomb_id()) return false;
        const auto step = stride(prev);
        std::size_t slot = home(prev);
        for (std::size_t n = 0; n < capacity_; ++n, slot = (slot + step) % capacity_) {
            const auto k = key_at(slot);
            if (k == prev) {
                set_key(slot, tomb_id());
                --occupied_;
                ++tombstones_;
                if (tombstones_ * 4 > capacity_) rebuild();
                return true;
            }
            if (k == empty_id()) return false;
        }
        return false;
    }

    void clear() {
        std::fill(bytes_.begin(), bytes_.end(), 0xFF);
        occupied_ = tombstones_ = 0;
    }

    std::vector<VirtualMapping> entries() const {
        std::vector<VirtualMapping> out;
        for (std::size_t s = 0; s < capacity_; ++s) {
            const auto k = key_at(s);
            if (k != empty_id() && k != tomb_id()) out.push_back({k, value_at(s)});
        }
        return out;
    }

private:
    PageId empty_id() const { return idWidth_ == 2 ? 0xFFFFu : 0xFFFFFFFFu; }
    PageId tomb_id() const { return empty_id() - 1; }

    void check_id(PageId id) const {
        if (id >= tomb_id()) throw Error(ErrorCode::OutOfRange, "page id too large for mapping entry");
    }

    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 33;
        x *= 0xff51afd7ed558ccdULL;
        x ^= x >> 33;
        x *= 0xc4ceb9fe1a85ec53ULL;
        x ^= x >> 33;
        return x;
    }

    std::size_t home(PageId prev) const { return static_cast<std::size_t>(mix(prev) % capacity_); }

    std::size_t stride(PageId prev) const {
        if (capacity_ <= 1) return 1;
        auto step = static_cast<std::size_t>(1 + mix(prev ^ 0x9e3779b97f4a7c15ULL) % (capacity_ - 1));
        while (std::gcd(step, capacity_) != 1) step = step % (capacity_ - 1) + 1;
        return step;
    }

    PageId read_id(std::size_t off) const {
        PageId v = 0;
        for (std::size_t i = 0; i < idWidth_; ++i) v |= static_cast<PageId>(bytes_[off + i]) << (8 * i);
        return v;
    }
    void write_id(std::size_t off, PageId v) {
        for (std::size_t i = 0; i < idWidth_; ++i) bytes_[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
    }

    PageId key_at(std::size_t slot) const { return read_id(slot * entry_size()); }
    PageId value_at(std::size_t slot) const { return read_id(slot * entry_size() + idWidth_); }
    void set_key(std::size_t slot, PageId k) { write_id(slot * entry_size(), k); }
    void set_slot(std::size_t slot, PageId k, PageId v) {
        write_id(slot * entry_size(), k);
        write_id(slot * entry_size() + idWidth_, v);
    }

    void rebuild() {
        const auto live = entries();
        clear();
        for (const auto& m : live) put(m.prev, m.next);
    }

    std::size_t idWidth_;
    std::vector<std::uint8_t> bytes_;
    std::size_t capacity_ = 0;
    std::size_t occupied_ = 0;
    std::size_t tombstones_ = 0;
    std::size_t peak_ = 0;
};

}  // namespace vmtree
