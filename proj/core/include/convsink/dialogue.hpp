#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "convsink/error.hpp"

namespace convsink {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;  // assembled ids, length N

struct Utterance {
    std::string role;             // may be empty (role tags optional)
    std::vector<TokenId> tokens;  // payload only, the EoU is appended on assembly
};

struct Conversation {
    std::string id;
    std::vector<Utterance> utterances;
};

// Per-position segmentation of an assembled sequence. Position 0 is the
// conversation-start token; utterances 1..T partition positions [1, N) in
// order and each utterance ends at its EoU token, the position that acts as
// that utterance's attention sink.
class SegmentMap {
public:
    // bounds are half-open [begin, end) ranges, one per utterance, 1-based
    // coverage of positions 1..n-1. The last position of each range is its EoU.
    SegmentMap(std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> utt_bounds);

    std::size_t size() const { return n_; }
    std::size_t utterance_count() const { return bounds_.size(); }

    bool is_first(std::size_t pos) const { return pos == 0; }
    bool is_sink(std::size_t pos) const;

    // 0 for the start token, otherwise the 1-based utterance ordinal.
    std::size_t utt_index(std::size_t pos) const;

    // 1-based utterance -> half-open position range.
    std::pair<std::size_t, std::size_t> utt_bounds(std::size_t utt) const;

    // Position of the EoU ending utterance `utt` (1-based).
    std::size_t sink_of(std::size_t utt) const;

    // Payload token count of utterance `utt`, i.e. its extent minus the EoU.
    std::size_t payload_length(std::size_t utt) const;

    const std::vector<std::size_t>& sink_positions() const { return sinks_; }

    // Mean tokens per utterance including the EoU: (N-1)/T.
    double avg_len() const;

    std::string to_json() const;
    static SegmentMap from_json(const std::string& text);

    bool operator==(const SegmentMap& other) const {
        return n_ == other.n_ && bounds_ == other.bounds_;
    }

private:
    std::size_t n_ = 0;
    std::vector<std::pair<std::size_t, std::size_t>> bounds_;
    std::vector<std::size_t> sinks_;
    std::vector<std::size_t> utt_of_;  // size n_, 0 at position 0
};

struct AssembleResult {
    TokenSeq ids;
    SegmentMap seg;
};

// Flattens a conversation to [bos, u1..., eou, u2..., eou, ...] and the
// matching SegmentMap. Payload tokens must not equal bos or eou.
AssembleResult assemble(const Conversation& conv, TokenId bos, TokenId eou);

// Inverse direction: recovers the SegmentMap from an assembled sequence.
// ids[0] must be bos and the sequence must end with eou. Empty-payload
// utterances are legal but reported through `warnings` when provided.
SegmentMap segment(const TokenSeq& ids, TokenId bos, TokenId eou,
                   std::vector<std::string>* warnings = nullptr);

// Uniform layout: T utterances of extent l each (payload l-1 plus EoU),
// N = 1 + T*l, sinks at k*l for k = 1..T.
SegmentMap layout_uniform(std::size_t utterances, std::size_t tokens_per_utterance);

// One EoU flag per stream position; position 0 is the start token.
struct StreamTrace {
    std::vector<bool> is_eou;
    std::size_t size() const { return is_eou.size(); }
};

StreamTrace trace_from_segmap(const SegmentMap& seg);
// Concatenates all conversations' utterances into one long stream.
StreamTrace trace_from_conversations(const std::vector<Conversation>& convs,
                                     std::size_t* total_utterances = nullptr);

// JSONL: one conversation per line,
// {"id": str, "utterances": [{"role": str, "tokens": [int, ...]}, ...]}.
// Malformed lines raise ValidationError with the 1-based line number in the
// message. Role-alternation violations are warnings, not errors.
std::vector<Conversation> read_conversations_jsonl(std::istream& in,
                                                   std::vector<std::string>* warnings = nullptr);
void write_conversations_jsonl(std::ostream& out, const std::vector<Conversation>& convs);

// Whitespace-to-id demo tokenizer for CLI use only: each line becomes one
// utterance, words map to ids 3,4,... in order of first appearance.
Conversation demo_tokenize(const std::string& id, const std::vector<std::string>& lines);

}  // namespace convsink
