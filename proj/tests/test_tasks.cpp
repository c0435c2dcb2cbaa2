#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"

#include "convsink/error.hpp"
#include "convsink/tasks.hpp"

using namespace convsink;

namespace {

std::vector<std::size_t> keys(const MaskMatrix& m, std::size_t row) {
    return m.allowed_keys(row);
}

}  // namespace

TEST_CASE("mask spec printing and parsing") {
    const MaskSpec spec{"strllm", {{"w", 4}, {"nsink", 1}, {"bos", 1}, {"eou", 2}}};
    CHECK(spec.to_string() == "strllm(bos=1,eou=2,nsink=1,w=4)");
    CHECK(MaskSpec::parse(spec.to_string()) == spec);

    const MaskSpec plain{"smr", {{"bos", 1}, {"eou", 2}}};
    CHECK(MaskSpec::parse("smr(bos=1,eou=2)") == plain);

    CHECK_THROWS_AS(MaskSpec::parse("smr"), ValidationError);
    CHECK_THROWS_AS(MaskSpec::parse("smr(bos=1"), ValidationError);
    CHECK_THROWS_AS(MaskSpec::parse("smr(bos=x)"), ValidationError);
    CHECK_THROWS_AS(MaskSpec::parse(""), ValidationError);
}

TEST_CASE("mask_from_spec rejects unknown names") {
    const SegmentMap seg = layout_uniform(2, 2);
    CHECK_THROWS_AS(mask_from_spec(MaskSpec{"zigzag", {{"bos", 1}, {"eou", 2}}}, seg),
                    ValidationError);
}

TEST_CASE("build_smr_sample lays out copy slots behind sinks") {
    const std::vector<std::vector<TokenId>> utts{{7, 8}};
    const TrainingSample sample = build_smr_sample(utts, 1, 2);

    CHECK(sample.ids == TokenSeq{1, 7, 8, 2, 7, 8, 2});
    CHECK(sample.predict_positions == std::vector<std::size_t>{4, 5, 6});
    CHECK(sample.task == TaskKind::Smr);
    CHECK(sample.mask_spec.name == "smr");

    // The copy-slot rows may reach the original only through its sink.
    CHECK(keys(sample.mask, 4) == std::vector<std::size_t>{0, 3, 4});
    CHECK(keys(sample.mask, 5) == std::vector<std::size_t>{0, 3, 4, 5});

    CHECK_THROWS_AS(build_smr_sample({}, 1, 2), ValidationError);
    const std::vector<std::vector<TokenId>> bad{{7, 2}};
    CHECK_THROWS_AS(build_smr_sample(bad, 1, 2), ValidationError);
}

TEST_CASE("build_smr_sample with two utterances of different lengths") {
    const std::vector<std::vector<TokenId>> utts{{4, 5}, {6, 7, 8}};
    const TrainingSample sample = build_smr_sample(utts, 1, 2);
    CHECK(sample.ids == TokenSeq{1, 4, 5, 2, 4, 5, 2, 6, 7, 8, 2, 6, 7, 8, 2});
    // Copy positions of both pairs, each including the slot's own EoU.
    CHECK(sample.predict_positions ==
          std::vector<std::size_t>{4, 5, 6, 11, 12, 13, 14});
    CHECK(sample.meta_source_utts == std::vector<std::size_t>{0, 1});
}

TEST_CASE("build_lmr_sample appends the recalled pair") {
    const std::vector<QRPair> pairs{{{10, 11}, {20, 21}}, {{12, 13}, {22, 23}}};
    const TrainingSample sample = build_lmr_sample(pairs, 1, 1, 2);

    CHECK(sample.ids == TokenSeq{1, 10, 11, 2, 20, 21, 2, 12, 13, 2, 22, 23, 2,
                                 10, 11, 2, 20, 21, 2});
    CHECK(sample.predict_positions == std::vector<std::size_t>{16, 17, 18});
    CHECK(sample.task == TaskKind::Lmr);
    CHECK(sample.meta_source_utts == std::vector<std::size_t>{1});

    CHECK_THROWS_AS(build_lmr_sample(pairs, 0, 1, 2), ValidationError);
    CHECK_THROWS_AS(build_lmr_sample(pairs, 3, 1, 2), ValidationError);
    CHECK_THROWS_AS(build_lmr_sample({}, 1, 1, 2), ValidationError);
}

TEST_CASE("lmr recall rows reach history only through sinks") {
    // Four history pairs plus the appended recall of pair 1. The rows that
    // produce the recalled response (one before each predict position) must
    // not see pair 1's payload directly, only its sinks.
    std::vector<QRPair> pairs;
    for (TokenId k = 0; k < 4; ++k) {
        pairs.push_back({{static_cast<TokenId>(10 + k)}, {static_cast<TokenId>(20 + k)}});
    }
    const TrainingSample sample = build_lmr_sample(pairs, 1, 1, 2);
    REQUIRE(sample.ids.size() == 21);  // bos + (4 history + 1 recall) pairs, extent 2 each

    // History pair 1: q1 payload at 1, sink 2; r1 payload at 3, sink 4.
    for (const std::size_t p : sample.predict_positions) {
        const std::size_t row = p - 1;
        if (sample.seg.is_sink(row) && sample.seg.utt_index(row) % 2 == 0) {
            continue;  // a response sink row sees only its own utterance
        }
        CHECK_FALSE(sample.mask.at(row, 1));
        CHECK_FALSE(sample.mask.at(row, 3));
        CHECK(sample.mask.at(row, 2));
        CHECK(sample.mask.at(row, 4));
    }
}

TEST_CASE("build_supervised_sample covers every next-token position") {
    Conversation conv;
    conv.id = "c";
    conv.utterances = {{"a", {5, 6}}, {"b", {7}}};
    const TrainingSample all = build_supervised_sample(conv, 1, 2);
    CHECK(all.ids == TokenSeq{1, 5, 6, 2, 7, 2});
    CHECK(all.predict_positions == std::vector<std::size_t>{1, 2, 3, 4, 5});
    CHECK(all.task == TaskKind::Supervised);
    CHECK(all.mask_spec.name == "streaming");

    const TrainingSample tail = build_supervised_sample(conv, 1, 2, false);
    CHECK(tail.predict_positions == std::vector<std::size_t>{2, 3, 4, 5});
}

TEST_CASE("remasked swaps the pattern but keeps layout and targets") {
    const std::vector<std::vector<TokenId>> utts{{7, 8}};
    const TrainingSample smr = build_smr_sample(utts, 1, 2);
    const TrainingSample swapped =
        remasked(smr, MaskSpec{"strllm", {{"bos", 1}, {"eou", 2}, {"nsink", 1}, {"w", 2}}});

    CHECK(swapped.ids == smr.ids);
    CHECK(swapped.predict_positions == smr.predict_positions);
    CHECK(swapped.mask_spec.name == "strllm");
    CHECK(keys(swapped.mask, 5) == std::vector<std::size_t>{0, 4, 5});

    // bos/eou ride along even when the new spec omits them.
    const TrainingSample dense = remasked(smr, MaskSpec{"dense", {}});
    CHECK(dense.mask_spec.params.at("bos") == 1);
    CHECK(dense.mask_spec.params.at("eou") == 2);
    CHECK(dense.mask.row_count(5) == 6);
}

TEST_CASE("ablate_smr_sink_edges removes exactly the sink reach") {
    const std::vector<std::vector<TokenId>> utts{{7, 8, 9}};
    TrainingSample sample = build_smr_sample(utts, 1, 2);
    const MaskMatrix before = sample.mask;
    ablate_smr_sink_edges(sample);

    CHECK(sample.mask_spec.name == "smr_nosink");
    // Copy rows 5..8 lose the paired sink (position 4) and nothing else.
    for (std::size_t i = 0; i < sample.ids.size(); ++i) {
        for (std::size_t j = 0; j < sample.ids.size(); ++j) {
            if (i >= 5 && i <= 8 && j == 4) {
                CHECK(before.at(i, j));
                CHECK_FALSE(sample.mask.at(i, j));
            } else {
                CHECK(sample.mask.at(i, j) == before.at(i, j));
            }
        }
    }
    // With the sink gone, no copy row can reach any original-utterance content.
    for (std::size_t row = 5; row <= 8; ++row) {
        for (std::size_t j = 1; j <= 4; ++j) CHECK_FALSE(sample.mask.at(row, j));
    }

    TrainingSample lmr = build_lmr_sample(std::vector<QRPair>{{{5}, {6}}}, 1, 1, 2);
    CHECK_THROWS_AS(ablate_smr_sink_edges(lmr), ValidationError);
}

TEST_CASE("synthetic dialogues are deterministic and well-formed") {
    SyntheticParams params;
    params.n_pairs = 6;
    params.key_len = 2;
    params.val_len = 2;
    params.vocab = 32;

    const Conversation a = gen_synthetic_dialogue(9, params);
    const Conversation b = gen_synthetic_dialogue(9, params);
    const Conversation c = gen_synthetic_dialogue(10, params);
    REQUIRE(a.utterances.size() == 12);

    bool same_ab = true;
    bool same_ac = a.utterances.size() == c.utterances.size();
    for (std::size_t u = 0; u < a.utterances.size(); ++u) {
        same_ab = same_ab && a.utterances[u].tokens == b.utterances[u].tokens;
        if (same_ac) same_ac = a.utterances[u].tokens == c.utterances[u].tokens;
    }
    CHECK(same_ab);
    CHECK_FALSE(same_ac);

    // Keys are distinct within one conversation.
    std::set<std::vector<TokenId>> seen;
    for (std::size_t u = 0; u < a.utterances.size(); u += 2) {
        seen.insert(a.utterances[u].tokens);
    }
    CHECK(seen.size() == 6);

    // Payload ids stay inside [3, vocab).
    for (const Utterance& utt : a.utterances) {
        REQUIRE_FALSE(utt.tokens.empty());
        for (const TokenId t : utt.tokens) {
            CHECK(t >= 3);
            CHECK(t < 32);
        }
    }
}

TEST_CASE("responses are keyed per conversation") {
    SyntheticParams params;
    params.n_pairs = 24;
    params.key_len = 1;
    params.val_len = 2;
    params.vocab = 64;

    // Three conversations draw 72 keys from 61 single-token candidates, so
    // cross-conversation key overlap is guaranteed; the salted response map
    // must then produce a differing response for at least one shared key.
    std::vector<std::vector<QRPair>> all;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        all.push_back(qr_pairs_from_conversation(gen_synthetic_dialogue(seed, params)));
    }
    bool overlap = false, differ = false;
    for (std::size_t i = 0; i < all.size(); ++i) {
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            for (const QRPair& pa : all[i]) {
                for (const QRPair& pb : all[j]) {
                    if (pa.query != pb.query) continue;
                    overlap = true;
                    differ = differ || pa.response != pb.response;
                }
            }
        }
    }
    CHECK(overlap);
    CHECK(differ);
}

TEST_CASE("qr_pairs_from_conversation rejects odd utterance counts") {
    Conversation conv;
    conv.utterances = {{"a", {5}}, {"b", {6}}, {"a", {7}}};
    CHECK_THROWS_AS(qr_pairs_from_conversation(conv), ValidationError);
}

TEST_CASE("vocab guard on the generator") {
    SyntheticParams params;
    params.n_pairs = 24;
    params.key_len = 1;
    params.vocab = 16;  // 13 payload ids cannot host 24 distinct keys
    CHECK_THROWS_AS(gen_synthetic_dialogue(1, params), ValidationError);
}

TEST_CASE("cotraining stream composition") {
    SyntheticParams params;
    params.n_pairs = 4;
    params.vocab = 32;
    const auto stream = build_cotraining_stream(6, 3, 11, params);
    REQUIRE(stream.size() == 9);
    std::size_t smr = 0, lmr = 0;
    for (const TrainingSample& s : stream) {
        smr += s.task == TaskKind::Smr ? 1 : 0;
        lmr += s.task == TaskKind::Lmr ? 1 : 0;
    }
    CHECK(smr == 6);
    CHECK(lmr == 3);

    const auto again = build_cotraining_stream(6, 3, 11, params);
    bool identical = true;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        identical = identical && stream[i].ids == again[i].ids &&
                    stream[i].task == again[i].task;
    }
    CHECK(identical);

    CHECK(build_cotraining_stream(0, 5, 11, params).size() == 5);
}

TEST_CASE("samples JSONL round-trip") {
    SyntheticParams params;
    params.n_pairs = 2;
    params.vocab = 32;
    const auto stream = build_cotraining_stream(2, 2, 13, params);

    std::ostringstream out;
    write_samples_jsonl(out, stream);

    std::istringstream in(out.str());
    const auto back = read_samples_jsonl(in);
    REQUIRE(back.size() == stream.size());
    for (std::size_t i = 0; i < stream.size(); ++i) {
        CHECK(back[i].ids == stream[i].ids);
        CHECK(back[i].predict_positions == stream[i].predict_positions);
        CHECK(back[i].task == stream[i].task);
        CHECK(back[i].mask_spec == stream[i].mask_spec);
        CHECK(back[i].mask == stream[i].mask);
    }

    std::istringstream bad("{\"ids\": [1,5,2]}\nnot json\n");
    try {
        read_samples_jsonl(bad);
        CHECK(false);
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("line") != std::string::npos);
    }
}
