#pragma once

// Page images for B+-tree nodes.
//
// Every formatted page begins with a 16-byte little-endian header:
//
//   offset  size  field
//   0       4     pageId      physical page the image was written to
//   4       4     prevPageId  lineage id the parent refers to, 0xFFFFFFFF on a first write
//   8       4     seq         device-wide write sequence number
//   12      1     flags       bit7 = 0 marks a formatted page (erased pages read 0xFF)
//                             bit2 = overwrite layout, bit1 = leaf, bit0 = root
//                             bits 3..6 are kept at 1
//   13      1     reserved    0xFF
//   14      2     entryCount  sorted layout only; 0xFFFF in the overwrite layout
//
// Sorted leaf:      records (key | value) packed in key order from offset 16.
// Sorted interior:  child[0] (u32) at 16, then (key | child) pairs.
// Overwrite leaf:   fixed record slots in arrival order from offset 16.
// Overwrite inner:  child[0] (u32) at 16, then (key | child) slots from 20.
// Overwrite pages end with two bit vectors of ceil(capacity/8) bytes each:
// count bits at pageSize - 2*n, valid bits at pageSize - n.  Bit i lives in
// byte i/8 at position i%8.  Both start as ones; a slot is occupied when its
// count bit is 0 and live when additionally its valid bit is 1.  Clearing
// the root flag, appending and invalidating only ever turn bits from 1 to 0.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/flash_device.hpp"

namespace vmtree {

using Key = std::uint64_t;
using Value = std::uint64_t;

struct Record {
    Key key = 0;
    Value value = 0;
    bool operator==(const Record&) const = default;
};

enum class Layout : std::uint8_t { Sorted, Overwrite };
enum class NodeKind : std::uint8_t { Leaf, Interior };

inline constexpr std::uint32_t kHeaderBytes = 16;
inline constexpr std::uint32_t kChildBytes = 4;

inline constexpr std::uint8_t kFlagRoot = 0x01;
inline constexpr std::uint8_t kFlagLeaf = 0x02;
inline constexpr std::uint8_t kFlagOverwrite = 0x04;
inline constexpr std::uint8_t kFlagBase = 0x78;  // bits 3..6 set, bit 7 clear

struct PageHeader {
    PageId pageId = kNoPage;
    PageId prevPageId = kNoPage;
    std::uint32_t seq = 0;
    bool isRoot = false;
    bool isLeaf = true;
    Layout layout = Layout::Sorted;
    std::uint16_t entryCount = 0;

    bool operator==(const PageHeader&) const = default;
};

namespace detail {

inline void put_le(std::span<std::uint8_t> out, std::size_t off, std::uint64_t v, std::size_t width) {
    for (std::size_t i = 0; i < width; ++i) out[off + i] = i < 8 ? static_cast<std::uint8_t>(v >> (8 * i)) : 0;
}

inline std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t off, std::size_t width) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < std::min<std::size_t>(width, 8); ++i)
        v |= static_cast<std::uint64_t>(in[off + i]) << (8 * i);
    return v;
}

inline bool get_bit(std::span<const std::uint8_t> page, std::size_t base, std::size_t i) {
    return (page[base + i / 8] >> (i % 8)) & 1u;
}

inline void clear_bit(std::span<std::uint8_t> page, std::size_t base, std::size_t i) {
    page[base + i / 8] = static_cast<std::uint8_t>(page[base + i / 8] & ~(1u << (i % 8)));
}

}  // namespace detail

/// Fixed record geometry of one tree instance.
struct NodeFormat {
    std::uint32_t pageSize = 512;
    std::uint32_t keyWidth = 4;
    std::uint32_t valueWidth = 12;

    std::uint32_t record_width() const { return keyWidth + valueWidth; }
    std::uint32_t entry_width(NodeKind kind) const {
        return keyWidth + (kind == NodeKind::Leaf ? valueWidth : kChildBytes);
    }
    std::uint32_t body_offset(NodeKind kind) const {
        return kHeaderBytes + (kind == NodeKind::Interior ? kChildBytes : 0);
    }

    void check_key(Key key) const {
        if (keyWidth < 8 && (key >> (8 * keyWidth)) != 0)
            throw Error(ErrorCode::OutOfRange, "key does not fit the configured key width");
    }
};

/// Largest n such that the header, n entries and (overwrite layout) the two
/// n-bit vectors fit in a page.  `payloadWidth` is the value width for leaves
/// and the child pointer width for interior nodes.
inline std::uint32_t max_entries(std::uint32_t pageSize, std::uint32_t keyWidth, std::uint32_t payloadWidth,
                                 Layout layout, NodeKind kind = NodeKind::Leaf) {
    if (keyWidth == 0 || payloadWidth == 0)
        throw Error(ErrorCode::OutOfRange, "entry widths must be positive");
    const std::uint32_t fixed = kHeaderBytes + (kind == NodeKind::Interior ? kChildBytes : 0);
    const std::uint32_t entry = keyWidth + payloadWidth;
    std::uint32_t n = pageSize > fixed ? (pageSize - fixed) / entry : 0;
    if (layout == Layout::Overwrite) {
        while (n > 0 && fixed + n * entry + 2 * ((n + 7) / 8) > pageSize) --n;
    }
    const std::uint32_t minimum = kind == NodeKind::Interior ? 2 : 1;
    if (n < minimum) throw Error(ErrorCode::CapacityExceeded, "page too small for a node");
    return n;
}

inline std::uint32_t max_entries(const NodeFormat& f, Layout layout, NodeKind kind) {
    return max_entries(f.pageSize, f.keyWidth, kind == NodeKind::Leaf ? f.valueWidth : kChildBytes, layout,
                       kind);
}

inline void encode_header(std::span<std::uint8_t> page, const PageHeader& h) {
    detail::put_le(page, 0, h.pageId, 4);
    detail::put_le(page, 4, h.prevPageId, 4);
    detail::put_le(page, 8, h.seq, 4);
    std::uint8_t flags = kFlagBase;
    if (h.isRoot) flags |= kFlagRoot;
    if (h.isLeaf) flags |= kFlagLeaf;
    if (h.layout == Layout::Overwrite) flags |= kFlagOverwrite;
    page[12] = flags;
    page[13] = 0xFF;
    detail::put_le(page, 14, h.layout == Layout::Overwrite ? 0xFFFF : h.entryCount, 2);
}

/// Header of a formatted page, or nullopt for erased/unformatted bytes.
inline std::optional<PageHeader> decode_header(std::span<const std::uint8_t> page) {
    if (page.size() < kHeaderBytes) return std::nullopt;
    const std::uint8_t flags = page[12];
    if ((flags & 0x80) != 0 || (flags & kFlagBase) != kFlagBase) return std::nullopt;
    PageHeader h;
    h.pageId = static_cast<PageId>(detail::get_le(page, 0, 4));
    h.prevPageId = static_cast<PageId>(detail::get_le(page, 4, 4));
    h.seq = static_cast<std::uint32_t>(detail::get_le(page, 8, 4));
    h.isRoot = flags & kFlagRoot;
    h.isLeaf = flags & kFlagLeaf;
    h.layout = (flags & kFlagOverwrite) ? Layout::Overwrite : Layout::Sorted;
    h.entryCount = static_cast<std::uint16_t>(detail::get_le(page, 14, 2));
    return h;
}

/// Decoded sorted-layout node.  Leaves use `records`; interior nodes use
/// `keys` and `children` with children.size() == keys.size() + 1.
struct SortedNode {
    PageHeader header;
    std::vector<Record> records;
    std::vector<Key> keys;
    std::vector<PageId> children;

    bool is_leaf() const { return header.isLeaf; }
    std::size_t size() const { return is_leaf() ? records.size() : keys.size(); }
    bool operator==(const SortedNode&) const = default;
};

inline std::vector<std::uint8_t> encode_sorted(const SortedNode& node, const NodeFormat& f) {
    const NodeKind kind = node.is_leaf() ? NodeKind::Leaf : NodeKind::Interior;
    const auto cap = max_entries(f, Layout::Sorted, kind);
    if (node.size() > cap) throw Error(ErrorCode::CapacityExceeded, "node exceeds page capacity");
    if (!node.is_leaf() && node.children.size() != node.keys.size() + 1)
        throw Error(ErrorCode::BadFormat, "interior node needs keys+1 children");

    std::vector<std::uint8_t> page(f.pageSize, kErasedByte);
    PageHeader h = node.header;
    h.layout = Layout::Sorted;
    h.entryCount = static_cast<std::uint16_t>(node.size());
    encode_header(page, h);

    std::size_t off = kHeaderBytes;
    if (node.is_leaf()) {
        for (const auto& r : node.records) {
            f.check_key(r.key);
            detail::put_le(page, off, r.key, f.keyWidth);
            detail::put_le(page, off + f.keyWidth, r.value, f.valueWidth);
            off += f.record_width();
        }
    } else {
        detail::put_le(page, off, node.children[0], kChildBytes);
        off += kChildBytes;
        for (std::size_t i = 0; i < node.keys.size(); ++i) {
            f.check_key(node.keys[i]);
            detail::put_le(page, off, node.keys[i], f.keyWidth);
            detail::put_le(page, off + f.keyWidth, node.children[i + 1], kChildBytes);
            off += f.keyWidth + kChildBytes;
        }
    }
    return page;
}

inline SortedNode decode_sorted(std::span<const std::uint8_t> page, const NodeFormat& f) {
    auto h = decode_header(page);
    if (!h || h->layout != Layout::Sorted) throw Error(ErrorCode::BadFormat, "not a sorted-layout node");
    SortedNode node;
    node.header = *h;
    const NodeKind kind = h->isLeaf ? NodeKind::Leaf : NodeKind::Interior;
    if (h->entryCount > max_entries(f, Layout::Sorted, kind))
        throw Error(ErrorCode::BadFormat, "entry count exceeds capacity");
    std::size_t off = kHeaderBytes;
    if (h->isLeaf) {
        node.records.reserve(h->entryCount);
        for (std::size_t i = 0; i < h->entryCount; ++i) {
            node.records.push_back({detail::get_le(page, off, f.keyWidth),
                                    detail::get_le(page, off + f.keyWidth, f.valueWidth)});
            off += f.record_width();
        }
    } else {
        node.children.push_back(static_cast<PageId>(detail::get_le(page, off, kChildBytes)));
        off += kChildBytes;
        for (std::size_t i = 0; i < h->entryCount; ++i) {
            node.keys.push_back(detail::get_le(page, off, f.keyWidth));
            node.children.push_back(static_cast<PageId>(detail::get_le(page, off + f.keyWidth, kChildBytes)));
            off += f.keyWidth + kChildBytes;
        }
    }
    return node;
}

/// One slot of an overwrite-layout page.  For interior pages `child` is the
/// subtree holding keys >= `key`; `value` is unused.
struct OwSlot {
    bool used = false;
    bool valid = true;
    Key key = 0;
    Value value = 0;
    PageId child = kNoPage;

    bool live() const { return used && valid; }
    bool operator==(const OwSlot&) const = default;
};

/// Decoded overwrite-layout node.  `firstChild` covers keys below every
/// live slot key (interior only).
struct OwNode {
    PageHeader header;
    PageId firstChild = kNoPage;
    std::vector<OwSlot> slots;  // exactly capacity entries

    bool is_leaf() const { return header.isLeaf; }
    std::size_t live_count() const {
        return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const OwSlot& s) { return s.live(); }));
    }
    std::size_t used_count() const {
        return static_cast<std::size_t>(std::count_if(slots.begin(), slots.end(), [](const OwSlot& s) { return s.used; }));
    }
    bool operator==(const OwNode&) const = default;
};

namespace detail {

struct OwGeometry {
    std::uint32_t capacity;
    std::uint32_t slotOffset;
    std::uint32_t slotWidth;
    std::uint32_t countOffset;
    std::uint32_t validOffset;
};

inline OwGeometry ow_geometry(const NodeFormat& f, NodeKind kind) {
    OwGeometry g{};
    g.capacity = max_entries(f, Layout::Overwrite, kind);
    g.slotOffset = f.body_offset(kind);
    g.slotWidth = f.entry_width(kind);
    const std::uint32_t vec = (g.capacity + 7) / 8;
    g.countOffset = f.pageSize - 2 * vec;
    g.validOffset = f.pageSize - vec;
    return g;
}

inline void write_slot(std::span<std::uint8_t> page, const NodeFormat& f, const OwGeometry& g, NodeKind kind,
                       std::size_t i, const OwSlot& s) {
    const std::size_t off = g.slotOffset + i * g.slotWidth;
    f.check_key(s.key);
    put_le(page, off, s.key, f.keyWidth);
    if (kind == NodeKind::Leaf)
        put_le(page, off + f.keyWidth, s.value, f.valueWidth);
    else
        put_le(page, off + f.keyWidth, s.child, kChildBytes);
}

}  // namespace detail

/// Fresh overwrite-layout image: header, optional first child, no slots used.
inline std::vector<std::uint8_t> ow_format(const PageHeader& header, const NodeFormat& f,
                                           PageId firstChild = kNoPage) {
    std::vector<std::uint8_t> page(f.pageSize, kErasedByte);
    PageHeader h = header;
    h.layout = Layout::Overwrite;
    encode_header(page, h);
    if (!h.isLeaf) detail::put_le(page, kHeaderBytes, firstChild, kChildBytes);
    return page;
}

inline OwNode decode_ow(std::span<const std::uint8_t> page, const NodeFormat& f) {
    auto h = decode_header(page);
    if (!h || h->layout != Layout::Overwrite) throw Error(ErrorCode::BadFormat, "not an overwrite-layout node");
    const NodeKind kind = h->isLeaf ? NodeKind::Leaf : NodeKind::Interior;
    const auto g = detail::ow_geometry(f, kind);
    OwNode node;
    node.header = *h;
    if (!h->isLeaf) node.firstChild = static_cast<PageId>(detail::get_le(page, kHeaderBytes, kChildBytes));
    node.slots.resize(g.capacity);
    for (std::uint32_t i = 0; i < g.capacity; ++i) {
        OwSlot& s = node.slots[i];
        s.used = !detail::get_bit(page, g.countOffset, i);
        s.valid = detail::get_bit(page, g.validOffset, i);
        if (!s.used) continue;
        const std::size_t off = g.slotOffset + i * g.slotWidth;
        s.key = detail::get_le(page, off, f.keyWidth);
        if (kind == NodeKind::Leaf)
            s.value = detail::get_le(page, off + f.keyWidth, f.valueWidth);
        else
            s.child = static_cast<PageId>(detail::get_le(page, off + f.keyWidth, kChildBytes));
    }
    return node;
}

/// Full image of an overwrite node (used when a page is written fresh).
inline std::vector<std::uint8_t> encode_ow(const OwNode& node, const NodeFormat& f) {
    const NodeKind kind = node.is_leaf() ? NodeKind::Leaf : NodeKind::Interior;
    const auto g = detail::ow_geometry(f, kind);
    if (node.slots.size() > g.capacity) throw Error(ErrorCode::CapacityExceeded, "too many slots");
    auto page = ow_format(node.header, f, node.firstChild);
    for (std::size_t i = 0; i < node.slots.size(); ++i) {
        const OwSlot& s = node.slots[i];
        if (!s.used) continue;
        detail::write_slot(page, f, g, kind, i, s);
        detail::clear_bit(page, g.countOffset, i);
        if (!s.valid) detail::clear_bit(page, g.validOffset, i);
    }
    return page;
}

namespace detail {

inline std::size_t ow_first_free(std::span<const std::uint8_t> page, const OwGeometry& g) {
    for (std::uint32_t i = 0; i < g.capacity; ++i)
        if (get_bit(page, g.countOffset, i)) return i;
    return g.capacity;
}

inline NodeKind ow_kind(std::span<const std::uint8_t> page) {
    auto h = decode_header(page);
    if (!h || h->layout != Layout::Overwrite) throw Error(ErrorCode::BadFormat, "not an overwrite-layout node");
    return h->isLeaf ? NodeKind::Leaf : NodeKind::Interior;
}

inline std::vector<std::uint8_t> ow_append_slot(std::span<const std::uint8_t> page, const NodeFormat& f,
                                                const OwSlot& slot) {
    const NodeKind kind = ow_kind(page);
    const auto g = ow_geometry(f, kind);
    const auto i = ow_first_free(page, g);
    if (i == g.capacity) throw Error(ErrorCode::CapacityExceeded, "no free slot on page");
    std::vector<std::uint8_t> out(page.begin(), page.end());
    write_slot(out, f, g, kind, i, slot);
    clear_bit(out, g.countOffset, i);
    return out;
}

}  // namespace detail

/// Appends a record to the first free slot of an overwrite leaf.
inline std::vector<std::uint8_t> ow_append(std::span<const std::uint8_t> page, const NodeFormat& f,
                                           const Record& r) {
    if (detail::ow_kind(page) != NodeKind::Leaf) throw Error(ErrorCode::BadFormat, "not a leaf");
    return detail::ow_append_slot(page, f, OwSlot{true, true, r.key, r.value, kNoPage});
}

/// Appends a (separator, child) entry to an overwrite interior page.
inline std::vector<std::uint8_t> ow_append_child(std::span<const std::uint8_t> page, const NodeFormat& f, Key key,
                                                 PageId child) {
    if (detail::ow_kind(page) != NodeKind::Interior) throw Error(ErrorCode::BadFormat, "not an interior node");
    return detail::ow_append_slot(page, f, OwSlot{true, true, key, 0, child});
}

inline std::vector<std::uint8_t> ow_invalidate(std::span<const std::uint8_t> page, const NodeFormat& f,
                                               std::size_t slot) {
    const auto g = detail::ow_geometry(f, detail::ow_kind(page));
    if (slot >= g.capacity) throw Error(ErrorCode::OutOfRange, "slot index");
    if (detail::get_bit(page, g.countOffset, slot))
        throw Error(ErrorCode::BadFormat, "slot " + std::to_string(slot) + " is empty");
    if (!detail::get_bit(page, g.validOffset, slot))
        throw Error(ErrorCode::BadFormat, "slot " + std::to_string(slot) + " already invalid");
    std::vector<std::uint8_t> out(page.begin(), page.end());
    detail::clear_bit(out, g.validOffset, slot);
    return out;
}

/// Clears the root flag in place (a 1->0 change).
inline void clear_root_flag(std::span<std::uint8_t> page) { page[12] = static_cast<std::uint8_t>(page[12] & ~kFlagRoot); }

/// True when `after` only clears bits relative to `before`.
inline bool is_overwrite_legal(std::span<const std::uint8_t> before, std::span<const std::uint8_t> after) {
    if (before.size() != after.size()) return false;
    for (std::size_t i = 0; i < before.size(); ++i)
        if ((~before[i] & after[i]) != 0) return false;
    return true;
}

/// Leftmost position whose key is >= `key` (the insertion point for a sorted
/// key array).  On interior nodes this is also the child index to descend
/// into for the leftmost copy of `key`.
inline std::size_t search_sorted(std::span<const Key> keys, Key key) {
    return static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), key) - keys.begin());
}

inline std::optional<std::size_t> find_in_leaf(const SortedNode& leaf, Key key) {
    auto it = std::lower_bound(leaf.records.begin(), leaf.records.end(), key,
                               [](const Record& r, Key k) { return r.key < k; });
    if (it == leaf.records.end() || it->key != key) return std::nullopt;
    return static_cast<std::size_t>(it - leaf.records.begin());
}

/// Linear scan over live slots; returns the first live slot holding `key`.
inline std::optional<std::size_t> search_ow(const OwNode& node, Key key) {
    for (std::size_t i = 0; i < node.slots.size(); ++i)
        if (node.slots[i].live() && node.slots[i].key == key) return i;
    return std::nullopt;
}

}  // namespace vmtree
