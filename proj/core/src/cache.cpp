#include "convsink/cache.hpp"

#include <algorithm>
#include <ostream>

namespace convsink {

CacheDelta StreamingCache::observe(std::size_t position, bool is_eou) {
    if (static_cast<long long>(position) != step_ + 1) {
        throw ValidationError("OutOfOrder",
                              "expected position " + std::to_string(step_ + 1) + ", got " +
                                  std::to_string(position));
    }
    if (position == 0 && is_eou) {
        throw ValidationError("BadStream", "the start token cannot be an EoU");
    }

    CacheDelta delta;
    delta.position = position;

    // First token after an EoU: a new utterance begins, so the utterance
    // before the previous one loses its non-sink positions, atomically.
    if (last_was_eou_) {
        for (std::size_t p : prev_window_) {
            resident_.erase(p);
            log_.push_back({position, p});
            delta.evicted.push_back(p);
        }
        evicted_total_ += prev_window_.size();
        prev_window_ = std::move(cur_window_);
        cur_window_.clear();
    }

    resident_.insert(position);
    if (position == 0) {
        delta.tag = PositionTag::First;
    } else if (is_eou) {
        delta.tag = PositionTag::Sink;
        sinks_.push_back(position);
    } else {
        delta.tag = PositionTag::Window;
        cur_window_.push_back(position);
        max_payload_ = std::max(max_payload_, cur_window_.size());
    }

    last_was_eou_ = is_eou;
    step_ = static_cast<long long>(position);
    peak_ = std::max(peak_, resident_.size());
    return delta;
}

std::vector<std::size_t> StreamingCache::attended_positions() const {
    if (empty()) throw ValidationError("EmptyCache", "no positions observed yet");
    return {resident_.begin(), resident_.end()};
}

CacheStats StreamingCache::stats() const {
    CacheStats s;
    s.resident_count = resident_.size();
    s.sink_count = sinks_.size();
    s.window_count = prev_window_.size() + cur_window_.size();
    s.peak_resident = peak_;
    s.evicted_total = evicted_total_;
    return s;
}

void write_eviction_log_csv(std::ostream& out, const StreamingCache& cache) {
    out << "step,evicted_position\n";
    for (const auto& rec : cache.eviction_log()) {
        out << rec.step << ',' << rec.position << '\n';
    }
}

void write_cache_trace_csv(std::ostream& out, const StreamTrace& trace) {
    out << "step,resident,sinks,window,dense_equiv\n";
    StreamingCache cache;
    for (std::size_t p = 0; p < trace.size(); ++p) {
        cache.observe(p, trace.is_eou[p]);
        const CacheStats s = cache.stats();
        out << p << ',' << s.resident_count << ',' << s.sink_count << ',' << s.window_count
            << ',' << (p + 1) << '\n';
    }
}

}  // namespace convsink
