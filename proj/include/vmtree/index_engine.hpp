#pragma once

// B+-tree over simulated flash in three storage variants.
//
//   BTree     rewrites a modified node at the same logical page.  Needs an
//             FTL device or page-level erase-then-write.
//   VMTree    writes every modified node to the next sequential page and
//             records prevPageId -> newPageId in a bounded mapping table so
//             the parent is left untouched.
//   VMTreeOW  keeps nodes in the overwrite layout and adds entries by
//             clearing bits on the existing physical page.
//
// The three share routing, splitting and search; they differ only in how a
// changed node reaches storage.  Nodes carry no sibling pointers.
//
// Crash ordering (VMTree): a node that splits is written as fresh pages
// (prevPageId = none) and becomes visible only when its parent is written,
// so the last page write of an insert is its commit point.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vmtree/error.hpp"
#include "vmtree/flash_device.hpp"
#include "vmtree/mapping_table.hpp"
#include "vmtree/node_codec.hpp"
#include "vmtree/page_buffer.hpp"
#include "vmtree/storage_manager.hpp"

namespace vmtree {

enum class Variant : std::uint8_t { BTree, VMTree, VMTreeOW };

inline const char* to_string(Variant v) {
    switch (v) {
    case Variant::BTree: return "btree";
    case Variant::VMTree: return "vmtree";
    case Variant::VMTreeOW: return "vmtree-ow";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "btree" || s == "BTREE") return Variant::BTree;
    if (s == "vmtree" || s == "VMTREE") return Variant::VMTree;
    if (s == "vmtree-ow" || s == "VMTREE-OW" || s == "ow") return Variant::VMTreeOW;
    throw Error(ErrorCode::BadFormat, "unknown variant '" + s + "'");
}

/// Which variant may run on which device mode.
inline bool compatible(Variant v, FlashMode m) {
    switch (v) {
    case Variant::BTree: return m == FlashMode::Ftl || m == FlashMode::Overwrite;
    case Variant::VMTree: return true;
    case Variant::VMTreeOW: return m == FlashMode::Ftl || m == FlashMode::Overwrite;
    }
    return false;
}

struct EngineConfig {
    Variant variant = Variant::VMTree;
    std::uint32_t keyWidth = 4;
    std::uint32_t recordWidth = 16;
    std::size_t bufferFrames = 3;
    std::size_t mappingTableBytes = 1024;
    /// A node on the insert path is rewritten once this many of its child
    /// pointers are mapped.
    std::uint32_t flushThreshold = 2;
    /// Path maintenance runs after an insert that found the table full, or
    /// while the table load is at least this.  Above 1 only the first applies.
    double maintenanceWatermark = 1.0;
    /// Capacities shared by every variant (the smaller of the two layouts) so
    /// all variants build the same tree for the same input.
    bool uniformCapacity = true;
    std::optional<std::uint32_t> leafCapacity;
    std::optional<std::uint32_t> interiorCapacity;
    StorageConfig storage;
};

struct EngineStats {
    std::uint64_t recordsInserted = 0;
    std::uint64_t leafWrites = 0;
    std::uint64_t interiorWrites = 0;
    std::uint64_t splits = 0;
    std::uint64_t rootSplits = 0;
    std::uint64_t tableFullFlushes = 0;
    std::uint64_t maintenanceFlushes = 0;
    std::uint64_t owAppendWrites = 0;
    std::uint64_t owCompactions = 0;
};

/// Logical node contents independent of page layout.
struct Node {
    bool leaf = true;
    std::vector<Record> records;   // leaf, ascending by key
    std::vector<Key> keys;         // interior separators
    std::vector<PageId> children;  // interior child references, keys.size() + 1

    std::size_t size() const { return leaf ? records.size() : keys.size(); }
    bool operator==(const Node&) const = default;
};

class IndexEngine {
public:
    IndexEngine(FlashDevice& device, EngineConfig config) : dev_(device), cfg_(config), pool_(config.bufferFrames, device.page_size()),
          table_(config.variant == Variant::VMTree ? config.mappingTableBytes : 0, device.num_pages()) {
        setup();
        create_empty_root();
    }

    /// Reopens a VMTree device after a restart or power loss.
    static IndexEngine recover(FlashDevice& device, EngineConfig config) {
        if (config.variant != Variant::VMTree)
            throw Error(ErrorCode::Unsupported, "recovery is implemented for the relocating variant");
        return IndexEngine(device, config, RecoverTag{});
    }

    IndexEngine(const IndexEngine&) = delete;
    IndexEngine& operator=(const IndexEngine&) = delete;
    IndexEngine(IndexEngine&& o) noexcept
        : dev_(o.dev_), cfg_(o.cfg_), format_(o.format_), state_(o.state_), pool_(std::move(o.pool_)),
          table_(std::move(o.table_)), storage_(std::move(o.storage_)), pending_(std::move(o.pending_)),
          stats_(o.stats_), lastRecovery_(std::move(o.lastRecovery_)) {
        o.storage_.reset();
        rebind();
    }

    Variant variant() const { return cfg_.variant; }
    const EngineConfig& config() const { return cfg_; }
    const NodeFormat& format() const { return format_; }
    FlashDevice& device() { return dev_; }
    const FlashDevice& device() const { return dev_; }
    BufferPool& pool() { return pool_; }
    const MappingTable& mapping_table() const { return table_; }
    MappingTable& mapping_table() { return table_; }
    const StorageManager* storage() const { return storage_ ? &*storage_ : nullptr; }
    StorageManager* storage() { return storage_ ? &*storage_ : nullptr; }
    const EngineStats& stats() const { return stats_; }
    const std::optional<RecoveryState>& last_recovery() const { return lastRecovery_; }

    PageId root_page() const { return state_.rootLoc; }
    std::uint32_t height() const { return state_.height; }
    std::uint32_t leaf_capacity() const { return state_.leafCap; }
    std::uint32_t interior_capacity() const { return state_.interiorCap; }

    void insert(Key key, Value value) {
        const Record r{key, value};
        insert_batch(std::span<const Record>(&r, 1));
    }

    /// Applies a batch sorted by key.  Consecutive records routed to the
    /// same leaf are applied with one write of that leaf.
    void insert_batch(std::span<const Record> sorted) {
        for (std::size_t i = 1; i < sorted.size(); ++i)
            if (sorted[i].key < sorted[i - 1].key) throw Error(ErrorCode::BadFormat, "batch is not sorted");
        for (const auto& r : sorted) format_.check_key(r.key);

        std::size_t i = 0;
        while (i < sorted.size()) {
            Path path = descend(sorted[i].key);
            std::optional<Key> bound;
            for (const auto& step : path)
                if (!step.node.leaf && step.childIdx < step.node.keys.size()) {
                    const Key k = step.node.keys[step.childIdx];
                    bound = bound ? std::min(*bound, k) : k;
                }
            std::size_t j = i;
            while (j < sorted.size() && (!bound || sorted[j].key < *bound)) ++j;

            Node leaf = path.back().node;
            for (std::size_t k = i; k < j; ++k) {
                auto pos = std::upper_bound(leaf.records.begin(), leaf.records.end(), sorted[k].key,
                                            [](Key key, const Record& r) { return key < r.key; });
                leaf.records.insert(pos, sorted[k]);
            }
            const auto fullBefore = stats_.tableFullFlushes;
            commit(path, path.size() - 1, std::move(leaf));
            stats_.recordsInserted += j - i;
            if (cfg_.variant == Variant::VMTree && table_.capacity() > 0 &&
                (stats_.tableFullFlushes > fullBefore || table_.load_factor() >= cfg_.maintenanceWatermark))
                maintain_mappings(sorted[j - 1].key);
            i = j;
        }
    }

    /// Leftmost record with `key`.
    std::optional<Value> get(Key key) {
        std::optional<Value> out;
        find_leftmost(state_.rootLoc, key, out);
        return out;
    }

    /// All records with lo <= key <= hi, ascending.  Traversal goes through
    /// parents only.
    std::vector<Record> range(Key lo, Key hi) {
        std::vector<Record> out;
        if (lo > hi) return out;
        collect(state_.rootLoc, lo, hi, out);
        return out;
    }

    /// Rewrites interior nodes on the path to `key` that hold at least
    /// flushThreshold mapped child pointers.  Returns the number rewritten.
    std::size_t maintain_mappings(Key key) {
        if (cfg_.variant != Variant::VMTree) return 0;
        std::size_t flushed = 0;
        for (std::size_t level = state_.height - 1; level-- > 0;) {
            Path path = descend(key);
            const Node& node = path[level].node;
            std::size_t mapped = 0;
            for (PageId c : node.children) mapped += mapping_for(c) ? 1 : 0;
            if (mapped < cfg_.flushThreshold) continue;
            commit(path, level, node);
            ++flushed;
            ++stats_.maintenanceFlushes;
        }
        return flushed;
    }

    /// Writes every node on the path to `key`, bottom-up.  Afterwards no
    /// node on that path is reached through a mapping.
    void rewrite_path(Key key) {
        for (std::size_t level = state_.height; level-- > 0;) {
            Path path = descend(key);
            commit(path, level, path[level].node);
        }
    }

    /// Child references on the path to `key` that currently go through a
    /// mapping, one count per level (root first).
    std::vector<std::size_t> mapped_children_on_path(Key key) {
        std::vector<std::size_t> out;
        for (const auto& step : descend(key)) {
            std::size_t n = 0;
            for (PageId c : step.node.children) n += mapping_for(c) ? 1 : 0;
            out.push_back(n);
        }
        return out;
    }

    /// Whether page `p` holds the current image of a node: a key taken from
    /// the page must lead the tree search back to `p`.
    bool probe_page_valid(PageId p) {
        if (p >= dev_.num_pages()) return false;
        const auto bytes = dev_.read_page(p);
        const auto h = decode_header(bytes);
        if (!h || h->pageId != p) return false;
        if (p == state_.rootLoc || inflight_.count(p)) return true;
        Node node;
        try {
            node = to_node(bytes);
        } catch (const Error&) {
            return false;
        }
        if (node.size() == 0) return false;
        const Key k = node.leaf ? node.records.front().key : node.keys.front();
        return reaches(state_.rootLoc, k, p);
    }

    /// Current physical location of a child reference.
    PageId resolve(PageId ref) const {
        if (auto m = mapping_for(ref)) return *m;
        return ref;
    }

    MemoryFootprint memory_footprint() const {
        MemoryFootprint m;
        m.pageBuffers = pool_.buffer_bytes();
        m.frameMetadata = pool_.metadata_bytes();
        m.stateVariables = sizeof(state_) + sizeof(format_);
        if (cfg_.variant == Variant::VMTree) {
            m.mappingTable = table_.footprint_bytes();
            m.bitmap = storage_->bitmap_bytes();
            m.stateVariables += storage_->state_bytes();
        }
        return m;
    }

    /// Structural check of the whole tree through uncounted reads.  Returns
    /// an empty string when every invariant holds.
    std::string validate() const {
        std::string err;
        std::optional<std::uint32_t> leafDepth;
        std::uint64_t total = 0;
        validate_node(state_.rootLoc, 0, std::nullopt, std::nullopt, true, leafDepth, total, err);
        if (err.empty() && leafDepth && *leafDepth + 1 != state_.height) err = "height mismatch";
        if (err.empty()) {
            for (const auto& m : table_.entries())
                if (table_.contains(m.next)) err = "mapping chain through " + std::to_string(m.next);
        }
        return err;
    }

    std::uint64_t record_count() const {
        std::optional<std::uint32_t> depth;
        std::uint64_t total = 0;
        std::string err;
        validate_node(state_.rootLoc, 0, std::nullopt, std::nullopt, true, depth, total, err);
        return total;
    }

private:
    struct RecoverTag {};

    struct State {
        PageId rootLoc = kNoPage;
        std::uint32_t height = 1;
        std::uint32_t seq = 0;
        PageId nextFresh = 0;
        std::uint32_t leafCap = 0;
        std::uint32_t interiorCap = 0;
    };

    struct Step {
        PageId ref = kNoPage;  // pointer value stored in the parent
        PageId loc = kNoPage;  // physical page
        Node node;
        std::vector<std::uint8_t> bytes;
        std::size_t childIdx = 0;  // child taken from this node
    };
    using Path = std::vector<Step>;

    IndexEngine(FlashDevice& device, EngineConfig config, RecoverTag)
        : dev_(device), cfg_(config), pool_(config.bufferFrames, device.page_size()),
          table_(config.mappingTableBytes, device.num_pages()) {
        setup();
        auto st = vmtree::recover(dev_, format_);
        for (const auto& m : st.mappings)
            if (table_.put(m.prev, m.next) == MappingTable::PutResult::TableFull) pending_[m.prev] = m.next;
        storage_->restore(st);
        state_.seq = st.nextSeq;
        set_root(st.rootPageId);
        state_.height = 1;
        for (Node n = load_node(state_.rootLoc); !n.leaf; n = load_node(resolve(n.children[0])))
            ++state_.height;
        while (!pending_.empty()) materialize_pending(pending_.begin()->first, pending_.begin()->second);
        lastRecovery_ = std::move(st);
    }

    void setup() {
        if (!compatible(cfg_.variant, dev_.mode()))
            throw Error(ErrorCode::Incompatible, std::string(to_string(cfg_.variant)) + " cannot run on " +
                                                     to_string(dev_.mode()) + " flash");
        if (cfg_.keyWidth != 4 && cfg_.keyWidth != 8) throw Error(ErrorCode::BadFormat, "key width must be 4 or 8");
        if (cfg_.recordWidth <= cfg_.keyWidth) throw Error(ErrorCode::BadFormat, "record must be wider than key");
        if (cfg_.flushThreshold < 2) throw Error(ErrorCode::OutOfRange, "flush threshold must be at least 2");
        format_ = NodeFormat{dev_.page_size(), cfg_.keyWidth, cfg_.recordWidth - cfg_.keyWidth};

        const Layout own = cfg_.variant == Variant::VMTreeOW ? Layout::Overwrite : Layout::Sorted;
        auto cap = [&](NodeKind kind) {
            const auto mine = max_entries(format_, own, kind);
            return cfg_.uniformCapacity ? std::min(mine, max_entries(format_, Layout::Overwrite, kind)) : mine;
        };
        state_.leafCap = cap(NodeKind::Leaf);
        state_.interiorCap = cap(NodeKind::Interior);
        if (cfg_.leafCapacity) state_.leafCap = std::min(state_.leafCap, *cfg_.leafCapacity);
        if (cfg_.interiorCapacity) state_.interiorCap = std::min(state_.interiorCap, *cfg_.interiorCapacity);
        if (state_.leafCap < 2 || state_.interiorCap < 2)
            throw Error(ErrorCode::OutOfRange, "node capacity must be at least 2");

        if (cfg_.variant == Variant::VMTree) {
            // GC stages live pages in the page buffers not holding the root.
            StorageConfig sc = cfg_.storage;
            sc.stagingPages = std::min(sc.stagingPages, cfg_.bufferFrames - 1);
            storage_.emplace(dev_, sc);
        }
        rebind();
    }

    void rebind() {
        if (!storage_) return;
        storage_->set_reserved_check([this](PageId p) { return table_.contains(p) || pending_.count(p) > 0; });
        storage_->set_probe([this](PageId p) { return probe_page_valid(p); });
    }

    void create_empty_root() {
        if (storage_) storage_->format();
        Node root;
        const PageId loc = fresh_page();
        write_new(loc, root, true);
        set_root(loc);
        state_.height = 1;
    }

    // ---- page I/O -------------------------------------------------------

    std::optional<PageId> mapping_for(PageId ref) const {
        if (auto m = table_.find(ref)) return m;
        if (auto it = pending_.find(ref); it != pending_.end()) return it->second;
        return std::nullopt;
    }

    std::span<const std::uint8_t> fetch(PageId loc) {
        return pool_.fetch(loc, [this](PageId id, std::span<std::uint8_t> out) { dev_.read_page(id, out); });
    }

    Node to_node(std::span<const std::uint8_t> bytes) const {
        const auto h = decode_header(bytes);
        if (!h) throw Error(ErrorCode::BadFormat, "unformatted page in tree");
        Node n;
        n.leaf = h->isLeaf;
        if (h->layout == Layout::Sorted) {
            auto s = decode_sorted(bytes, format_);
            n.records = std::move(s.records);
            n.keys = std::move(s.keys);
            n.children = std::move(s.children);
            return n;
        }
        const auto ow = decode_ow(bytes, format_);
        std::vector<const OwSlot*> live;
        for (const auto& s : ow.slots)
            if (s.live()) live.push_back(&s);
        std::stable_sort(live.begin(), live.end(), [](const OwSlot* a, const OwSlot* b) { return a->key < b->key; });
        if (n.leaf) {
            for (const auto* s : live) n.records.push_back({s->key, s->value});
        } else {
            n.children.push_back(ow.firstChild);
            for (const auto* s : live) {
                n.keys.push_back(s->key);
                n.children.push_back(s->child);
            }
        }
        return n;
    }

    Node load_node(PageId loc) { return to_node(fetch(loc)); }

    Path descend(Key key) {
        Path path;
        PageId ref = kNoPage;
        PageId loc = state_.rootLoc;
        while (true) {
            Step step;
            step.ref = ref;
            step.loc = loc;
            const auto bytes = fetch(loc);
            step.bytes.assign(bytes.begin(), bytes.end());
            step.node = to_node(step.bytes);
            if (step.node.leaf) {
                path.push_back(std::move(step));
                return path;
            }
            step.childIdx = static_cast<std::size_t>(
                std::upper_bound(step.node.keys.begin(), step.node.keys.end(), key) - step.node.keys.begin());
            ref = step.node.children[step.childIdx];
            loc = resolve(ref);
            path.push_back(std::move(step));
        }
    }

    PageId fresh_page() {
        if (storage_) {
            const PageId p = storage_->allocate_next();
            inflight_.insert(p);
            return p;
        }
        if (state_.nextFresh >= dev_.num_pages()) throw Error(ErrorCode::StorageFull, "device full");
        return state_.nextFresh++;
    }

    PageHeader header_for(PageId loc, PageId prev, bool leaf, bool root) {
        PageHeader h;
        h.pageId = loc;
        h.prevPageId = prev;
        h.seq = state_.seq++;
        h.isLeaf = leaf;
        h.isRoot = root;
        return h;
    }

    std::vector<std::uint8_t> image(const Node& n, const PageHeader& h) const {
        if (cfg_.variant == Variant::VMTreeOW) {
            OwNode ow;
            ow.header = h;
            ow.header.layout = Layout::Overwrite;
            ow.slots.resize(max_entries(format_, Layout::Overwrite, n.leaf ? NodeKind::Leaf : NodeKind::Interior));
            if (n.leaf) {
                for (std::size_t i = 0; i < n.records.size(); ++i)
                    ow.slots[i] = OwSlot{true, true, n.records[i].key, n.records[i].value, kNoPage};
            } else {
                ow.firstChild = n.children[0];
                for (std::size_t i = 0; i < n.keys.size(); ++i)
                    ow.slots[i] = OwSlot{true, true, n.keys[i], 0, n.children[i + 1]};
            }
            return encode_ow(ow, format_);
        }
        SortedNode s;
        s.header = h;
        s.records = n.records;
        s.keys = n.keys;
        s.children = n.children;
        return encode_sorted(s, format_);
    }

    void count_write(const Node& n) { ++(n.leaf ? stats_.leafWrites : stats_.interiorWrites); }

    /// Writes `n` to an erased (never written) page.
    void write_new(PageId loc, const Node& n, bool root, PageId prev = kNoPage) {
        const auto bytes = image(n, header_for(loc, prev, n.leaf, root));
        dev_.write_page(loc, bytes);
        pool_.install(loc, bytes);
        count_write(n);
    }

    /// Rewrites an already written page with a fresh image.
    void write_replace(PageId loc, const Node& n, bool root) {
        const auto bytes = image(n, header_for(loc, kNoPage, n.leaf, root));
        if (dev_.mode() == FlashMode::Overwrite)
            dev_.erase_then_write_page(loc, bytes);
        else
            dev_.write_page(loc, bytes);
        pool_.install(loc, bytes);
        count_write(n);
    }

    /// Brings an overwrite-layout page to the contents of `n` by clearing
    /// bits: invalidate what left, append what arrived.  Falls back to a full
    /// rewrite when the page lacks free slots or the first child changes.
    void write_overwrite(Step& step, const Node& n, bool root) {
        const OwNode old = decode_ow(step.bytes, format_);
        using Entry = std::tuple<Key, Value, PageId>;
        auto desired = std::multiset<Entry>{};
        if (n.leaf)
            for (const auto& r : n.records) desired.insert({r.key, r.value, kNoPage});
        else
            for (std::size_t i = 0; i < n.keys.size(); ++i) desired.insert({n.keys[i], 0, n.children[i + 1]});

        std::vector<std::size_t> drop;
        for (std::size_t i = 0; i < old.slots.size(); ++i) {
            const auto& s = old.slots[i];
            if (!s.live()) continue;
            const Entry e{s.key, n.leaf ? s.value : 0, n.leaf ? kNoPage : s.child};
            if (auto it = desired.find(e); it != desired.end())
                desired.erase(it);
            else
                drop.push_back(i);
        }
        const std::size_t freeSlots = old.slots.size() - old.used_count();
        const bool firstChildSame = n.leaf || old.firstChild == n.children[0];
        if (desired.size() > freeSlots || !firstChildSame) {
            write_replace(step.loc, n, root);
            ++stats_.owCompactions;
            return;
        }
        std::vector<std::uint8_t> bytes = step.bytes;
        for (std::size_t i : drop) bytes = ow_invalidate(bytes, format_, i);
        // Append in node order so equal keys keep their relative order.
        std::vector<Entry> add;
        for (std::size_t i = 0; i < n.size() && !desired.empty(); ++i) {
            const Entry e = n.leaf ? Entry{n.records[i].key, n.records[i].value, kNoPage}
                                   : Entry{n.keys[i], 0, n.children[i + 1]};
            if (auto it = desired.find(e); it != desired.end()) {
                add.push_back(e);
                desired.erase(it);
            }
        }
        for (const auto& [k, v, c] : add)
            bytes = n.leaf ? ow_append(bytes, format_, Record{k, v}) : ow_append_child(bytes, format_, k, c);
        if (!root && decode_header(bytes)->isRoot) clear_root_flag(bytes);
        dev_.write_page(step.loc, bytes);
        pool_.install(step.loc, bytes);
        count_write(n);
        ++stats_.owAppendWrites;
    }

    void set_root(PageId loc) {
        if (state_.rootLoc != kNoPage && state_.rootLoc != loc) pool_.unpin(state_.rootLoc);
        state_.rootLoc = loc;
        fetch(loc);
        pool_.pin(loc);
    }

    // ---- structure changes ---------------------------------------------

    struct Pieces {
        std::vector<Node> nodes;
        std::vector<Key> seps;  // seps[i] separates nodes[i] and nodes[i+1]
    };

    void split_into(Node n, Pieces& out) {
        const std::size_t cap = n.leaf ? state_.leafCap : state_.interiorCap;
        if (n.size() <= cap) {
            out.nodes.push_back(std::move(n));
            return;
        }
        Node left, right;
        left.leaf = right.leaf = n.leaf;
        Key sep;
        if (n.leaf) {
            const std::size_t m = n.records.size() / 2;
            left.records.assign(n.records.begin(), n.records.begin() + static_cast<std::ptrdiff_t>(m));
            right.records.assign(n.records.begin() + static_cast<std::ptrdiff_t>(m), n.records.end());
            sep = right.records.front().key;
        } else {
            const std::size_t m = n.keys.size() / 2;
            sep = n.keys[m];
            left.keys.assign(n.keys.begin(), n.keys.begin() + static_cast<std::ptrdiff_t>(m));
            left.children.assign(n.children.begin(), n.children.begin() + static_cast<std::ptrdiff_t>(m + 1));
            right.keys.assign(n.keys.begin() + static_cast<std::ptrdiff_t>(m + 1), n.keys.end());
            right.children.assign(n.children.begin() + static_cast<std::ptrdiff_t>(m + 1), n.children.end());
        }
        split_into(std::move(left), out);
        out.seps.push_back(sep);
        split_into(std::move(right), out);
    }

    /// Replaces the node at path[level] with `n`, splitting as needed and
    /// propagating pointer changes upward.
    void commit(Path& path, std::size_t level, Node n) {
        ++commitDepth_;
        commit_node(path, level, std::move(n));
        if (--commitDepth_ == 0) inflight_.clear();
    }

    void commit_node(Path& path, std::size_t level, Node n) {
        Pieces pieces;
        split_into(std::move(n), pieces);
        Step& step = path[level];
        const bool isRoot = level == 0;
        const bool split = pieces.nodes.size() > 1;
        std::vector<PageId> locs(pieces.nodes.size());
        std::vector<PageId> materialized;
        std::vector<PageId> toFree;

        switch (cfg_.variant) {
        case Variant::BTree:
            locs[0] = step.loc;
            write_replace(step.loc, pieces.nodes[0], isRoot && !split);
            for (std::size_t k = 1; k < locs.size(); ++k) {
                locs[k] = fresh_page();
                write_new(locs[k], pieces.nodes[k], false);
            }
            break;
        case Variant::VMTreeOW:
            locs[0] = step.loc;
            write_overwrite(step, pieces.nodes[0], isRoot && !split);
            for (std::size_t k = 1; k < locs.size(); ++k) {
                locs[k] = fresh_page();
                write_new(locs[k], pieces.nodes[k], false);
            }
            break;
        case Variant::VMTree:
            for (auto& piece : pieces.nodes) {
                for (auto& c : piece.children) {
                    if (auto m = mapping_for(c)) {
                        materialized.push_back(c);
                        c = *m;
                    }
                }
            }
            for (std::size_t k = 0; k < locs.size(); ++k) {
                locs[k] = fresh_page();
                // A node that keeps its identity records its lineage; split
                // results start new lineages so they stay invisible until the
                // parent commits them.
                const PageId prev = (!split && !isRoot) ? step.ref : kNoPage;
                write_new(locs[k], pieces.nodes[k], isRoot && !split, prev);
            }
            for (PageId c : materialized) {
                table_.remove(c);
                pending_.erase(c);
            }
            pool_.invalidate(step.loc);
            toFree.push_back(step.loc);
            break;
        }

        if (!split) {
            if (cfg_.variant == Variant::VMTree) {
                if (isRoot) {
                    set_root(locs[0]);
                } else if (table_.put(step.ref, locs[0]) == MappingTable::PutResult::TableFull) {
                    ++stats_.tableFullFlushes;
                    Node parent = path[level - 1].node;
                    parent.children[path[level - 1].childIdx] = locs[0];
                    commit(path, level - 1, std::move(parent));
                }
            }
            for (PageId p : toFree) storage_->mark_free(p);
            return;
        }

        ++stats_.splits;
        if (isRoot) {
            Node root;
            root.leaf = false;
            root.keys = pieces.seps;
            root.children = locs;
            const PageId loc = fresh_page();
            write_new(loc, root, true);
            set_root(loc);
            ++state_.height;
            ++stats_.rootSplits;
        } else {
            Node parent = path[level - 1].node;
            const std::size_t idx = path[level - 1].childIdx;
            const PageId oldRef = parent.children[idx];
            if (cfg_.variant == Variant::VMTree) parent.children[idx] = locs[0];
            parent.keys.insert(parent.keys.begin() + static_cast<std::ptrdiff_t>(idx), pieces.seps.begin(),
                               pieces.seps.end());
            parent.children.insert(parent.children.begin() + static_cast<std::ptrdiff_t>(idx + 1), locs.begin() + 1,
                                   locs.end());
            commit(path, level - 1, std::move(parent));
            if (cfg_.variant == Variant::VMTree) {
                table_.remove(oldRef);
                pending_.erase(oldRef);
            }
        }
        for (PageId p : toFree) storage_->mark_free(p);
    }

    // ---- searches ------------------------------------------------------

    bool find_leftmost(PageId loc, Key key, std::optional<Value>& out) {
        const Node n = load_node(loc);
        if (n.leaf) {
            auto it = std::lower_bound(n.records.begin(), n.records.end(), key,
                                       [](const Record& r, Key k) { return r.key < k; });
            if (it != n.records.end() && it->key == key) {
                out = it->value;
                return true;
            }
            return false;
        }
        std::size_t c = search_sorted(n.keys, key);
        while (true) {
            if (find_leftmost(resolve(n.children[c]), key, out)) return true;
            if (c < n.keys.size() && n.keys[c] == key)
                ++c;
            else
                return false;
        }
    }

    void collect(PageId loc, Key lo, Key hi, std::vector<Record>& out) {
        const Node n = load_node(loc);
        if (n.leaf) {
            for (const auto& r : n.records)
                if (r.key >= lo && r.key <= hi) out.push_back(r);
            return;
        }
        const std::size_t first = search_sorted(n.keys, lo);
        const auto last = static_cast<std::size_t>(std::upper_bound(n.keys.begin(), n.keys.end(), hi) - n.keys.begin());
        for (std::size_t c = first; c <= last; ++c) collect(resolve(n.children[c]), lo, hi, out);
    }

    bool reaches(PageId loc, Key key, PageId target) {
        if (loc == target) return true;
        const Node n = load_node(loc);
        if (n.leaf) return false;
        const std::size_t first = search_sorted(n.keys, key);
        const auto last = static_cast<std::size_t>(std::upper_bound(n.keys.begin(), n.keys.end(), key) - n.keys.begin());
        for (std::size_t c = first; c <= last; ++c)
            if (reaches(resolve(n.children[c]), key, target)) return true;
        return false;
    }

    // Finds the parent holding pointer `ref` (whose node now lives at
    // `target`) and rewrites it with a direct pointer.
    void materialize_pending(PageId ref, PageId target) {
        const Node child = to_node(dev_.peek(target));
        std::optional<Key> probe;
        if (child.size() > 0) probe = child.leaf ? child.records.front().key : child.keys.front();
        Path path;
        if (!find_parent_path(state_.rootLoc, kNoPage, ref, probe, path))
            throw Error(ErrorCode::BadFormat, "recovered mapping has no parent");
        Node parent = path.back().node;
        commit(path, path.size() - 1, std::move(parent));
        pending_.erase(ref);
    }

    bool find_parent_path(PageId loc, PageId ref, PageId wanted, const std::optional<Key>& key, Path& path) {
        Step step;
        step.ref = ref;
        step.loc = loc;
        const auto bytes = fetch(loc);
        step.bytes.assign(bytes.begin(), bytes.end());
        step.node = to_node(step.bytes);
        if (step.node.leaf) return false;
        std::size_t first = 0, last = step.node.keys.size();
        if (key) {
            first = search_sorted(step.node.keys, *key);
            last = static_cast<std::size_t>(std::upper_bound(step.node.keys.begin(), step.node.keys.end(), *key) -
                                            step.node.keys.begin());
        }
        for (std::size_t c = first; c <= last; ++c) {
            step.childIdx = c;
            if (step.node.children[c] == wanted) {
                path.push_back(step);
                return true;
            }
        }
        path.push_back(step);
        for (std::size_t c = first; c <= last; ++c) {
            path.back().childIdx = c;
            const PageId childRef = path.back().node.children[c];
            if (find_parent_path(resolve(childRef), childRef, wanted, key, path)) return true;
        }
        path.pop_back();
        return false;
    }

    void validate_node(PageId loc, std::uint32_t depth, std::optional<Key> lo, std::optional<Key> hi, bool isRoot,
                       std::optional<std::uint32_t>& leafDepth, std::uint64_t& total, std::string& err) const {
        if (!err.empty()) return;
        const auto bytes = dev_.peek(loc);
        const auto h = decode_header(bytes);
        if (!h) {
            err = "unformatted page " + std::to_string(loc);
            return;
        }
        if (h->isRoot != isRoot) {
            err = "root flag wrong on page " + std::to_string(loc);
            return;
        }
        const Node n = to_node(bytes);
        auto inRange = [&](Key k) { return (!lo || k >= *lo) && (!hi || k <= *hi); };
        if (n.leaf) {
            if (leafDepth && *leafDepth != depth) err = "leaves at different depths";
            leafDepth = depth;
            if (!isRoot && n.records.size() < (state_.leafCap + 1) / 2) err = "underfull leaf " + std::to_string(loc);
            for (std::size_t i = 0; i < n.records.size(); ++i) {
                if (!inRange(n.records[i].key)) err = "leaf key outside parent range at " + std::to_string(loc);
                if (i > 0 && n.records[i].key < n.records[i - 1].key) err = "unsorted leaf " + std::to_string(loc);
            }
            total += n.records.size();
            return;
        }
        if (n.children.size() != n.keys.size() + 1) {
            err = "child count mismatch at " + std::to_string(loc);
            return;
        }
        if (!isRoot && n.children.size() < (state_.interiorCap + 2) / 2) err = "underfull interior " + std::to_string(loc);
        if (isRoot && n.children.size() < 2) err = "root with a single child";
        for (std::size_t i = 0; i < n.keys.size(); ++i) {
            if (!inRange(n.keys[i])) err = "separator outside parent range at " + std::to_string(loc);
            if (i > 0 && n.keys[i] < n.keys[i - 1]) err = "unsorted separators at " + std::to_string(loc);
        }
        for (std::size_t c = 0; c < n.children.size() && err.empty(); ++c) {
            const std::optional<Key> clo = c == 0 ? lo : std::optional<Key>(n.keys[c - 1]);
            const std::optional<Key> chi = c == n.keys.size() ? hi : std::optional<Key>(n.keys[c]);
            validate_node(resolve(n.children[c]), depth + 1, clo, chi, false, leafDepth, total, err);
        }
    }

    FlashDevice& dev_;
    EngineConfig cfg_;
    NodeFormat format_;
    State state_;
    BufferPool pool_;
    MappingTable table_;
    std::optional<StorageManager> storage_;
    std::map<PageId, PageId> pending_;  // recovered mappings that did not fit the table
    std::set<PageId> inflight_;          // written by the current update, not yet linked
    int commitDepth_ = 0;
    EngineStats stats_;
    std::optional<RecoveryState> lastRecovery_;
};

}  // namespace vmtree
