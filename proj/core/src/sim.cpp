#include "convsink/sim.hpp"

#include <algorithm>
#include <ostream>

#include "convsink/error.hpp"

namespace convsink {

std::string policy_name(const MaskKind& kind) {
    switch (kind.pattern) {
        case MaskPattern::Dense:
            return "dense";
        case MaskPattern::Local:
            return "local";
        case MaskPattern::StreamingLlm:
            return "strllm";
        case MaskPattern::Streaming:
            return "convsink";
        default:
            throw ValidationError("BadPolicy", "mask pattern has no cache policy");
    }
}

SimResult simulate(const StreamTrace& trace, const MaskKind& policy) {
    const std::size_t n = trace.is_eou.size();
    if (n == 0) throw ValidationError("EmptyStream", "trace has no tokens");
    const std::string name = policy_name(policy);

    SimResult result;
    result.rows.reserve(n);

    if (policy.pattern == MaskPattern::Streaming) {
        // The simulator must report exactly what the cache module does, so it
        // streams through a real StreamingCache rather than re-deriving counts.
        StreamingCache cache;
        for (std::size_t step = 0; step < n; ++step) {
            const CacheDelta delta = cache.observe(step, trace.is_eou[step]);
            const CacheStats stats = cache.stats();
            result.rows.push_back({step, name, stats.resident_count,
                                   cache.attended_positions().size(), delta.evicted.size()});
        }
        const CacheStats stats = cache.stats();
        result.summary.peak_resident = stats.peak_resident;
        result.summary.final_resident = stats.resident_count;
    } else {
        // Windowed policies admit closed-form accounting: a fixed number of
        // pinned prefix positions plus a sliding window of recent ones.
        std::size_t pinned = 0, window = 0;
        switch (policy.pattern) {
            case MaskPattern::Dense:
                pinned = 0;
                window = n;  // never fills, so nothing is evicted
                break;
            case MaskPattern::Local:
                if (policy.window == 0) throw ValidationError("BadWindow", "local needs w >= 1");
                pinned = 0;
                window = policy.window;
                break;
            case MaskPattern::StreamingLlm:
                if (policy.window == 0) throw ValidationError("BadWindow", "strllm needs w >= 1");
                pinned = policy.n_sink;
                window = policy.window;
                break;
            default:
                break;  // unreachable, policy_name already rejected it
        }
        const std::size_t cap = pinned + window;
        std::size_t peak = 0, resident = 0;
        for (std::size_t step = 0; step < n; ++step) {
            const std::size_t evictions = (step + 1 > cap) ? 1 : 0;
            resident = std::min(step + 1, cap);
            peak = std::max(peak, resident);
            result.rows.push_back({step, name, resident, resident, evictions});
        }
        result.summary.peak_resident = peak;
        result.summary.final_resident = resident;
    }

    result.summary.dense_ratio =
        static_cast<double>(n) / static_cast<double>(result.summary.peak_resident);
    return result;
}

void write_sim_csv(std::ostream& out, const SimResult& result) {
    out << "step,policy,resident_kv,attended_kv,evictions\n";
    for (const auto& row : result.rows) {
        out << row.step << ',' << row.policy << ',' << row.resident_kv << ','
            << row.attended_kv << ',' << row.evictions << '\n';
    }
}

}  // namespace convsink
