#pragma once

// In-memory log of pending inserts.  When full it is sorted and applied as a
// batch, so records that land in the same leaf cost one leaf write.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <vector>

#include "vmtree/index_engine.hpp"

namespace vmtree {

class OpLog {
public:
    OpLog(std::size_t pages, std::uint32_t pageSize, std::uint32_t recordWidth)
        : bytes_(pages * pageSize), capacity_(recordWidth == 0 ? 0 : bytes_ / recordWidth) {
        log_.reserve(capacity_);
    }

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return log_.size(); }
    bool empty() const { return log_.empty(); }
    bool full() const { return log_.size() >= capacity_; }
    std::size_t footprint_bytes() const { return bytes_; }

    void append(Record r) { log_.push_back(r); }

    /// Pending records sorted by key; equal keys keep arrival order.
    std::vector<Record> drain() {
        std::vector<Record> out;
        out.swap(log_);
        std::stable_sort(out.begin(), out.end(), [](const Record& a, const Record& b) { return a.key < b.key; });
        log_.reserve(capacity_);
        return out;
    }

private:
    std::size_t bytes_;
    std::size_t capacity_;
    std::vector<Record> log_;
};

/// Index with an optional write buffer in front of the engine.  Queries
/// flush pending inserts first.
class Index {
public:
    Index(FlashDevice& device, EngineConfig config, std::size_t writeBufferPages = 0)
        : engine_(device, config), log_(writeBufferPages, device.page_size(), config.recordWidth) {}

    Index(IndexEngine engine, std::size_t writeBufferPages)
        : engine_(std::move(engine)),
          log_(writeBufferPages, engine_.device().page_size(), engine_.config().recordWidth) {}

    IndexEngine& engine() { return engine_; }
    const IndexEngine& engine() const { return engine_; }
    const OpLog& log() const { return log_; }
    std::uint64_t batch_flushes() const { return batchFlushes_; }

    void insert(Key key, Value value) {
        if (log_.capacity() == 0) {
            engine_.insert(key, value);
            return;
        }
        engine_.format().check_key(key);
        log_.append({key, value});
        if (log_.full()) flush();
    }

    void flush() {
        if (log_.empty()) return;
        const auto batch = log_.drain();
        engine_.insert_batch(batch);
        ++batchFlushes_;
    }

    std::optional<Value> get(Key key) {
        flush();
        return engine_.get(key);
    }

    std::vector<Record> range(Key lo, Key hi) {
        flush();
        return engine_.range(lo, hi);
    }

    MemoryFootprint memory_footprint() const {
        auto m = engine_.memory_footprint();
        m.writeBuffer = log_.footprint_bytes();
        return m;
    }

private:
    IndexEngine engine_;
    OpLog log_;
    std::uint64_t batchFlushes_ = 0;
};

}  // namespace vmtree
