#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <set>
#include <vector>

#include "convsink/dialogue.hpp"

namespace convsink {

enum class PositionTag { First, Sink, Window };

struct CacheDelta {
    std::size_t position = 0;
    PositionTag tag = PositionTag::Window;
    std::vector<std::size_t> evicted;  // emptied atomically at utterance starts
};

struct CacheStats {
    std::size_t resident_count = 0;
    std::size_t sink_count = 0;
    std::size_t window_count = 0;
    std::size_t peak_resident = 0;
    std::size_t evicted_total = 0;
};

struct EvictionRecord {
    std::size_t step = 0;      // the step whose observation triggered it
    std::size_t position = 0;  // what got dropped
};

// Retention policy for streaming generation: keep the start token, every EoU
// (sink) forever, and the non-sink tokens of the previous and current
// utterances. Eviction triggers on the first token after an EoU: at that
// moment the utterance-before-previous loses its non-sink positions.
class StreamingCache {
public:
    // Positions must arrive as 0, 1, 2, ... with the EoU flag from the stream.
    CacheDelta observe(std::size_t position, bool is_eou);

    // Ascending resident positions; equals the allowed keys of the streaming
    // mask row at the last observed position for uniform streams.
    std::vector<std::size_t> attended_positions() const;

    CacheStats stats() const;

    const std::vector<EvictionRecord>& eviction_log() const { return log_; }

    bool empty() const { return step_ < 0; }
    std::size_t sinks_seen() const { return sinks_.size(); }

    // Longest payload (EoU excluded) of any utterance so far, counting the
    // in-progress utterance's tokens observed so far.
    std::size_t max_payload_seen() const { return max_payload_; }

private:
    long long step_ = -1;
    bool last_was_eou_ = false;
    std::set<std::size_t> resident_;
    std::vector<std::size_t> sinks_;
    std::vector<std::size_t> prev_window_;  // non-sink positions, previous utterance
    std::vector<std::size_t> cur_window_;   // non-sink positions, current utterance
    std::size_t peak_ = 0;
    std::size_t evicted_total_ = 0;
    std::size_t max_payload_ = 0;
    std::vector<EvictionRecord> log_;
};

// CSV with header "step,evicted_position", one row per evicted position.
void write_eviction_log_csv(std::ostream& out, const StreamingCache& cache);

// Streams `trace` through a fresh cache and writes per-step occupancy rows:
// "step,resident,sinks,window,dense_equiv" (dense_equiv = step + 1).
void write_cache_trace_csv(std::ostream& out, const StreamTrace& trace);

}  // namespace convsink
