#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "convsink/dialogue.hpp"

namespace convsink {

// Boolean attention mask. bits(i, j) == true means query position i may
// attend key position j. All builders produce causal masks (j <= i) with
// every row i >= 1 self-visible; row 0 allows only position 0.
class MaskMatrix {
public:
    explicit MaskMatrix(std::size_t n);

    std::size_t size() const { return n_; }

    bool at(std::size_t i, std::size_t j) const { return bits_[i * n_ + j] != 0; }
    void set(std::size_t i, std::size_t j, bool allowed) {
        bits_[i * n_ + j] = allowed ? 1 : 0;
    }

    std::vector<std::size_t> allowed_keys(std::size_t row) const;
    std::size_t row_count(std::size_t row) const;

    bool operator==(const MaskMatrix& other) const {
        return n_ == other.n_ && bits_ == other.bits_;
    }

private:
    std::size_t n_;
    std::vector<std::uint8_t> bits_;
};

enum class MaskPattern { Dense, Local, StreamingLlm, Streaming, Smr, Lmr };

struct MaskKind {
    MaskPattern pattern = MaskPattern::Dense;
    std::size_t window = 0;  // Local, StreamingLlm
    std::size_t n_sink = 1;  // StreamingLlm

    static MaskKind dense() { return {MaskPattern::Dense, 0, 0}; }
    static MaskKind local(std::size_t w) { return {MaskPattern::Local, w, 0}; }
    static MaskKind streaming_llm(std::size_t n_sink, std::size_t w) {
        return {MaskPattern::StreamingLlm, w, n_sink};
    }
    static MaskKind streaming() { return {MaskPattern::Streaming, 0, 0}; }
    static MaskKind smr() { return {MaskPattern::Smr, 0, 0}; }
    static MaskKind lmr() { return {MaskPattern::Lmr, 0, 0}; }
};

using UttPair = std::pair<std::size_t, std::size_t>;

// (1,2), (3,4), ... covering utterances 1..T; throws UnpairedUtterance if T is odd.
std::vector<UttPair> consecutive_pairs(std::size_t utterance_count);

// Streaming inference pattern: row i allows j <= i when j is the start token,
// any sink, or lies in the utterance containing i or the one before it.
MaskMatrix streaming_mask_semantic(const SegmentMap& seg);

// Same pattern from the closed-form piecewise rule over a uniform layout
// (T utterances of extent l). Kept as an independent oracle for the semantic
// builder; rejects nothing but only the uniform shape is expressible.
MaskMatrix streaming_mask_formula(std::size_t utterances, std::size_t tokens_per_utterance);

// Short-memory reconstruction pattern over (u, u') pairs: u rows see the start
// token and their own prefix; u' rows additionally see exactly the paired u's
// sink, never u's payload.
MaskMatrix smr_mask_semantic(const SegmentMap& seg, std::span<const UttPair> pairing);

// Closed-form SMR rule for s pairs of extent-l utterances (N = 1 + 2*s*l).
MaskMatrix smr_mask_formula(std::size_t pair_count, std::size_t tokens_per_utterance);

// Long-memory reactivation pattern over (query, response) pairs. Query rows
// see {start} + all sinks + own prefix; response rows additionally see the
// full paired query; a response's own sink row is restricted to the response
// itself (causally), intentionally excluding position 0.
MaskMatrix lmr_mask_semantic(const SegmentMap& seg, std::span<const UttPair> qr_pairs);

// Dense causal, Local(w), StreamingLlm(n_sink, w).
MaskMatrix baseline_mask(const MaskKind& kind, const SegmentMap& seg);

// Dispatch over every pattern; Smr/Lmr use consecutive pairing.
MaskMatrix build_mask(const MaskKind& kind, const SegmentMap& seg);

// CSV with header "query,key,allowed", one row per (i, j) pair.
void write_mask_csv(std::ostream& out, const MaskMatrix& mask);

// Plain PGM (P2), 0 = forbidden, 255 = allowed, row i = query i.
void write_mask_pgm(std::ostream& out, const MaskMatrix& mask);

}  // namespace convsink
