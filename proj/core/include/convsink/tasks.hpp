#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "convsink/dialogue.hpp"
#include "convsink/mask.hpp"

namespace convsink {

enum class TaskKind { Smr, Lmr, Supervised };

std::string task_name(TaskKind task);
TaskKind task_from_name(const std::string& name);

// How a sample's mask is rebuilt (JSONL never stores the dense grid). Printed
// as "name(k=v,...)" with keys sorted, e.g. "strllm(bos=1,eou=2,nsink=1,w=4)".
struct MaskSpec {
    std::string name;                           // streaming|smr|smr_nosink|lmr|dense|local|strllm
    std::map<std::string, long long> params;    // always carries bos and eou

    std::string to_string() const;
    static MaskSpec parse(const std::string& text);

    bool operator==(const MaskSpec& other) const = default;
};

MaskMatrix mask_from_spec(const MaskSpec& spec, const SegmentMap& seg);

struct TrainingSample {
    TokenSeq ids;
    SegmentMap seg{2, {{1, 2}}};  // placeholder shape, builders overwrite
    MaskMatrix mask{2};
    std::vector<std::size_t> predict_positions;  // each p >= 1 targets ids[p]
    TaskKind task = TaskKind::Supervised;
    MaskSpec mask_spec;
    std::vector<std::size_t> meta_source_utts;   // provenance of the payload
};

// Rebuilds the mask (and spec) of `sample` from another constructor, keeping
// layout and predict positions. Used to swap training patterns per experiment.
TrainingSample remasked(TrainingSample sample, MaskSpec spec);

// [bos, u1, eou, u1', eou, u2, eou, u2', eou, ...] where each u' slot repeats
// the paired u's tokens (teacher forcing); predict positions are all u'
// positions including the u' EoU, so targets are just ids at those positions.
TrainingSample build_smr_sample(std::span<const std::vector<TokenId>> utterances,
                                TokenId bos, TokenId eou);

struct QRPair {
    std::vector<TokenId> query;
    std::vector<TokenId> response;
};

// [bos, q1, eou, r1, eou, ..., ql, eou, rl, eou, qx, eou, rx, eou] with the
// recall pair appended verbatim from 1-based index x; predict positions are
// the appended response's tokens including its EoU.
TrainingSample build_lmr_sample(std::span<const QRPair> pairs, std::size_t x,
                                TokenId bos, TokenId eou);

// Plain next-token sample under the streaming mask; predicts every position
// from 1 on (position 1's prediction comes from the start-token row and can
// be excluded).
TrainingSample build_supervised_sample(const Conversation& conv, TokenId bos, TokenId eou,
                                       bool include_first_prediction = true);

struct SyntheticParams {
    std::size_t n_pairs = 24;
    std::size_t key_len = 2;
    std::size_t val_len = 2;
    std::int32_t vocab = 32;  // ids 0 reserved, 1 bos, 2 eou, payload 3..vocab-1
    TokenId bos = 1;
    TokenId eou = 2;
};

// Key-value dialogue: queries are random key strings (distinct within one
// conversation), responses a permutation of value tokens keyed by (seed,
// conversation salt, key). The same key maps to different responses in
// different conversations, so answering the recall pair requires reading the
// history rather than memorising a global function.
Conversation gen_synthetic_dialogue(std::uint64_t seed, const SyntheticParams& params);

std::vector<QRPair> qr_pairs_from_conversation(const Conversation& conv);

// smr_count SMR samples + lmr_count LMR samples from the synthetic generator,
// shuffled together deterministically.
std::vector<TrainingSample> build_cotraining_stream(std::size_t smr_count,
                                                    std::size_t lmr_count,
                                                    std::uint64_t seed,
                                                    const SyntheticParams& params = {});

// JSONL: {"ids": [...], "predict": [...], "task": "smr", "mask": "smr(bos=1,eou=2)"}.
void write_samples_jsonl(std::ostream& out, std::span<const TrainingSample> samples);
std::vector<TrainingSample> read_samples_jsonl(std::istream& in);

// Drops the u' -> paired-sink edges from an SMR mask, the control used to
// show reconstruction really flows through the sink.
void ablate_smr_sink_edges(TrainingSample& sample);

}  // namespace convsink
