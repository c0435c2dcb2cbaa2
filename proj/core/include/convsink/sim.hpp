#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "convsink/cache.hpp"
#include "convsink/dialogue.hpp"
#include "convsink/mask.hpp"

namespace convsink {

struct SimRow {
    std::size_t step = 0;
    std::string policy;
    std::size_t resident_kv = 0;
    std::size_t attended_kv = 0;  // keys visible to the query at this step
    std::size_t evictions = 0;    // positions dropped at this step
};

struct SimSummary {
    std::size_t peak_resident = 0;
    std::size_t final_resident = 0;
    double dense_ratio = 0.0;  // dense peak (= stream length) / policy peak
};

struct SimResult {
    std::vector<SimRow> rows;
    SimSummary summary;
};

std::string policy_name(const MaskKind& kind);

// Streams the trace through the chosen retention policy. The Streaming
// pattern delegates to StreamingCache; Dense/Local/StreamingLlm use their
// closed-form window accounting.
SimResult simulate(const StreamTrace& trace, const MaskKind& policy);

// CSV with header "step,policy,resident_kv,attended_kv,evictions".
void write_sim_csv(std::ostream& out, const SimResult& result);

}  // namespace convsink
