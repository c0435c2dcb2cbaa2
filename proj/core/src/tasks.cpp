#include "convsink/tasks.hpp"

#include <algorithm>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace convsink {

std::string task_name(TaskKind task) {
    switch (task) {
        case TaskKind::Smr: return "smr";
        case TaskKind::Lmr: return "lmr";
        case TaskKind::Supervised: return "supervised";
    }
    return "supervised";
}

TaskKind task_from_name(const std::string& name) {
    if (name == "smr") return TaskKind::Smr;
    if (name == "lmr") return TaskKind::Lmr;
    if (name == "supervised") return TaskKind::Supervised;
    throw ValidationError("BadTask", "unknown task '" + name + "'");
}

std::string MaskSpec::to_string() const {
    std::ostringstream out;
    out << name << '(';
    bool first = true;
    for (const auto& [k, v] : params) {
        if (!first) out << ',';
        out << k << '=' << v;
        first = false;
    }
    out << ')';
    return out.str();
}

MaskSpec MaskSpec::parse(const std::string& text) {
    const auto open = text.find('(');
    if (open == std::string::npos || text.back() != ')') {
        throw ValidationError("BadMaskSpec", "expected name(k=v,...), got '" + text + "'");
    }
    MaskSpec spec;
    spec.name = text.substr(0, open);
    std::string body = text.substr(open + 1, text.size() - open - 2);
    std::istringstream in(body);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) {
            throw ValidationError("BadMaskSpec", "expected k=v in '" + item + "'");
        }
        try {
            spec.params[item.substr(0, eq)] = std::stoll(item.substr(eq + 1));
        } catch (const std::exception&) {
            throw ValidationError("BadMaskSpec", "non-integer value in '" + item + "'");
        }
    }
    return spec;
}

namespace {

long long spec_param(const MaskSpec& spec, const std::string& key) {
    const auto it = spec.params.find(key);
    if (it == spec.params.end()) {
        throw ValidationError("BadMaskSpec", spec.name + " needs parameter '" + key + "'");
    }
    return it->second;
}

MaskSpec base_spec(std::string name, TokenId bos, TokenId eou) {
    MaskSpec spec;
    spec.name = std::move(name);
    spec.params["bos"] = bos;
    spec.params["eou"] = eou;
    return spec;
}

}  // namespace

MaskMatrix mask_from_spec(const MaskSpec& spec, const SegmentMap& seg) {
    if (spec.name == "streaming") return streaming_mask_semantic(seg);
    if (spec.name == "smr") {
        return smr_mask_semantic(seg, consecutive_pairs(seg.utterance_count()));
    }
    if (spec.name == "smr_nosink") {
        MaskMatrix mask = smr_mask_semantic(seg, consecutive_pairs(seg.utterance_count()));
        for (std::size_t u = 1; u + 1 <= seg.utterance_count(); u += 2) {
            const std::size_t sink = seg.sink_of(u);
            const auto [b, e] = seg.utt_bounds(u + 1);
            for (std::size_t i = b; i < e; ++i) mask.set(i, sink, false);
        }
        return mask;
    }
    if (spec.name == "lmr") {
        return lmr_mask_semantic(seg, consecutive_pairs(seg.utterance_count()));
    }
    if (spec.name == "dense") return baseline_mask(MaskKind::dense(), seg);
    if (spec.name == "local") {
        return baseline_mask(MaskKind::local(static_cast<std::size_t>(spec_param(spec, "w"))), seg);
    }
    if (spec.name == "strllm") {
        return baseline_mask(
            MaskKind::streaming_llm(static_cast<std::size_t>(spec_param(spec, "nsink")),
                                    static_cast<std::size_t>(spec_param(spec, "w"))),
            seg);
    }
    throw ValidationError("BadMaskSpec", "unknown mask constructor '" + spec.name + "'");
}

TrainingSample remasked(TrainingSample sample, MaskSpec spec) {
    spec.params["bos"] = sample.mask_spec.params.at("bos");
    spec.params["eou"] = sample.mask_spec.params.at("eou");
    sample.mask = mask_from_spec(spec, sample.seg);
    sample.mask_spec = std::move(spec);
    return sample;
}

void ablate_smr_sink_edges(TrainingSample& sample) {
    if (sample.task != TaskKind::Smr) {
        throw ValidationError("BadTask", "sink ablation applies to SMR samples");
    }
    MaskSpec spec = sample.mask_spec;
    spec.name = "smr_nosink";
    sample.mask = mask_from_spec(spec, sample.seg);
    sample.mask_spec = std::move(spec);
}

TrainingSample build_smr_sample(std::span<const std::vector<TokenId>> utterances,
                                TokenId bos, TokenId eou) {
    if (utterances.empty()) {
        throw ValidationError("ValidationError", "need at least one utterance to pair");
    }
    Conversation conv;
    conv.id = "smr";
    for (const auto& u : utterances) {
        conv.utterances.push_back({"", u});   // u
        conv.utterances.push_back({"", u});   // u', the copy slot carries the same tokens
    }
    auto [ids, seg] = assemble(conv, bos, eou);

    TrainingSample sample;
    sample.ids = std::move(ids);
    sample.seg = std::move(seg);
    sample.task = TaskKind::Smr;
    sample.mask_spec = base_spec("smr", bos, eou);
    sample.mask = mask_from_spec(sample.mask_spec, sample.seg);
    for (std::size_t u = 2; u <= sample.seg.utterance_count(); u += 2) {
        const auto [b, e] = sample.seg.utt_bounds(u);
        for (std::size_t p = b; p < e; ++p) sample.predict_positions.push_back(p);
    }
    sample.meta_source_utts.resize(utterances.size());
    std::iota(sample.meta_source_utts.begin(), sample.meta_source_utts.end(), 0);
    return sample;
}

TrainingSample build_lmr_sample(std::span<const QRPair> pairs, std::size_t x,
                                TokenId bos, TokenId eou) {
    if (pairs.empty()) throw ValidationError("ValidationError", "need at least one (q, r) pair");
    if (x < 1 || x > pairs.size()) {
        throw ValidationError("IndexOutOfRange",
                              "recall index " + std::to_string(x) + " outside 1.." +
                                  std::to_string(pairs.size()));
    }
    Conversation conv;
    conv.id = "lmr";
    for (const auto& p : pairs) {
        conv.utterances.push_back({"A", p.query});
        conv.utterances.push_back({"B", p.response});
    }
    conv.utterances.push_back({"A", pairs[x - 1].query});     // q_x', verbatim
    conv.utterances.push_back({"B", pairs[x - 1].response});  // r_x', the recall target
    auto [ids, seg] = assemble(conv, bos, eou);

    TrainingSample sample;
    sample.ids = std::move(ids);
    sample.seg = std::move(seg);
    sample.task = TaskKind::Lmr;
    sample.mask_spec = base_spec("lmr", bos, eou);
    sample.mask = mask_from_spec(sample.mask_spec, sample.seg);
    const auto [b, e] = sample.seg.utt_bounds(sample.seg.utterance_count());
    for (std::size_t p = b; p < e; ++p) sample.predict_positions.push_back(p);
    sample.meta_source_utts = {x};
    return sample;
}

TrainingSample build_supervised_sample(const Conversation& conv, TokenId bos, TokenId eou,
                                       bool include_first_prediction) {
    auto [ids, seg] = assemble(conv, bos, eou);
    TrainingSample sample;
    sample.ids = std::move(ids);
    sample.seg = std::move(seg);
    sample.task = TaskKind::Supervised;
    sample.mask_spec = base_spec("streaming", bos, eou);
    sample.mask = mask_from_spec(sample.mask_spec, sample.seg);
    for (std::size_t p = include_first_prediction ? 1 : 2; p < sample.ids.size(); ++p) {
        sample.predict_positions.push_back(p);
    }
    sample.meta_source_utts.resize(conv.utterances.size());
    std::iota(sample.meta_source_utts.begin(), sample.meta_source_utts.end(), 0);
    return sample;
}

namespace {

std::uint64_t mix64(std::uint64_t h, std::uint64_t value) {
    h ^= value + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

}  // namespace

Conversation gen_synthetic_dialogue(std::uint64_t seed, const SyntheticParams& params) {
    const std::int64_t alphabet = static_cast<std::int64_t>(params.vocab) - 3;
    if (params.n_pairs < 1 || params.key_len < 1 || params.val_len < 1) {
        throw ValidationError("ValidationError", "n_pairs, key_len, val_len must be positive");
    }
    if (alphabet < 2) {
        throw ValidationError("VocabTooSmall", "need at least two payload ids");
    }
    if (static_cast<std::int64_t>(params.val_len) > alphabet) {
        throw ValidationError("VocabTooSmall", "val_len exceeds the payload alphabet");
    }
    double key_space = 1.0;
    for (std::size_t i = 0; i < params.key_len && key_space < 1e18; ++i) {
        key_space *= static_cast<double>(alphabet);
    }
    if (static_cast<double>(params.n_pairs) > key_space / 2.0) {
        throw ValidationError("VocabTooSmall", "key space too small for distinct keys");
    }

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::int64_t> tok(0, alphabet - 1);

    Conversation conv;
    conv.id = "synthetic-" + std::to_string(seed);
    std::vector<std::vector<TokenId>> keys;
    while (keys.size() < params.n_pairs) {
        std::vector<TokenId> key(params.key_len);
        for (auto& t : key) t = static_cast<TokenId>(3 + tok(rng));
        if (std::find(keys.begin(), keys.end(), key) != keys.end()) continue;  // keys stay distinct
        keys.push_back(std::move(key));
    }
    for (const auto& key : keys) {
        // The response is a permutation of value tokens keyed by (seed,
        // conversation, key): the same key answers differently in other
        // conversations, so recall cannot be shortcut by a global mapping.
        std::uint64_t h = mix64(0x51ab5f1517e4ca35ull, seed);
        for (TokenId t : key) h = mix64(h, static_cast<std::uint64_t>(t));
        std::mt19937_64 vrng(h);
        std::vector<TokenId> pool(static_cast<std::size_t>(alphabet));
        std::iota(pool.begin(), pool.end(), 3);
        std::shuffle(pool.begin(), pool.end(), vrng);
        conv.utterances.push_back({"A", key});
        conv.utterances.push_back({"B", {pool.begin(), pool.begin() + params.val_len}});
    }
    return conv;
}

std::vector<QRPair> qr_pairs_from_conversation(const Conversation& conv) {
    if (conv.utterances.size() % 2 != 0) {
        throw ValidationError("UnpairedUtterance", "conversation has an odd utterance count");
    }
    std::vector<QRPair> pairs;
    for (std::size_t k = 0; k + 1 < conv.utterances.size(); k += 2) {
        pairs.push_back({conv.utterances[k].tokens, conv.utterances[k + 1].tokens});
    }
    return pairs;
}

std::vector<TrainingSample> build_cotraining_stream(std::size_t smr_count,
                                                    std::size_t lmr_count,
                                                    std::uint64_t seed,
                                                    const SyntheticParams& params) {
    std::vector<TrainingSample> stream;
    stream.reserve(smr_count + lmr_count);
    std::mt19937_64 rng(mix64(0x7c0ffee5ull, seed));
    for (std::size_t i = 0; i < smr_count; ++i) {
        const Conversation conv = gen_synthetic_dialogue(mix64(seed, 2 * i + 1), params);
        std::uniform_int_distribution<std::size_t> pick(0, conv.utterances.size() - 1);
        std::vector<std::vector<TokenId>> utts = {conv.utterances[pick(rng)].tokens};
        stream.push_back(build_smr_sample(utts, params.bos, params.eou));
    }
    for (std::size_t i = 0; i < lmr_count; ++i) {
        const Conversation conv = gen_synthetic_dialogue(mix64(seed, 2 * i + 2), params);
        const auto pairs = qr_pairs_from_conversation(conv);
        std::uniform_int_distribution<std::size_t> pick(1, pairs.size());
        stream.push_back(build_lmr_sample(pairs, pick(rng), params.bos, params.eou));
    }
    std::shuffle(stream.begin(), stream.end(), rng);
    return stream;
}

void write_samples_jsonl(std::ostream& out, std::span<const TrainingSample> samples) {
    for (const auto& s : samples) {
        nlohmann::json j;
        j["ids"] = s.ids;
        j["predict"] = s.predict_positions;
        j["task"] = task_name(s.task);
        j["mask"] = s.mask_spec.to_string();
        out << j.dump() << '\n';
    }
}

std::vector<TrainingSample> read_samples_jsonl(std::istream& in) {
    std::vector<TrainingSample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("BadSample", "line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            TrainingSample s;
            s.ids = j.at("ids").get<TokenSeq>();
            s.predict_positions = j.at("predict").get<std::vector<std::size_t>>();
            s.task = task_from_name(j.at("task").get<std::string>());
            s.mask_spec = MaskSpec::parse(j.at("mask").get<std::string>());
            s.seg = segment(s.ids, static_cast<TokenId>(spec_param(s.mask_spec, "bos")),
                            static_cast<TokenId>(spec_param(s.mask_spec, "eou")));
            s.mask = mask_from_spec(s.mask_spec, s.seg);
            samples.push_back(std::move(s));
        } catch (const ValidationError& e) {
            throw ValidationError("BadSample",
                                  "line " + std::to_string(line_no) + ": " + e.what());
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("BadSample", "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return samples;
}

}  // namespace convsink
