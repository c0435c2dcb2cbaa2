#include "convsink/dialogue.hpp"

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace convsink {

SegmentMap::SegmentMap(std::size_t n, std::vector<std::pair<std::size_t, std::size_t>> utt_bounds)
    : n_(n), bounds_(std::move(utt_bounds)) {
    if (n_ < 1) {
        throw ValidationError("EmptySequence", "segment map needs at least the start token");
    }
    utt_of_.assign(n_, 0);
    std::size_t expect = 1;
    for (std::size_t k = 0; k < bounds_.size(); ++k) {
        auto [b, e] = bounds_[k];
        if (b != expect || e <= b || e > n_) {
            throw ValidationError("BadUtteranceBounds",
                                  "utterance ranges must partition positions 1..N-1 in order");
        }
        for (std::size_t p = b; p < e; ++p) utt_of_[p] = k + 1;
        sinks_.push_back(e - 1);
        expect = e;
    }
    if (expect != n_) {
        throw ValidationError("BadUtteranceBounds", "utterance ranges must cover through N-1");
    }
}

bool SegmentMap::is_sink(std::size_t pos) const {
    return std::binary_search(sinks_.begin(), sinks_.end(), pos);
}

std::size_t SegmentMap::utt_index(std::size_t pos) const {
    if (pos >= n_) throw ValidationError("IndexOutOfRange", "position beyond sequence");
    return utt_of_[pos];
}

std::pair<std::size_t, std::size_t> SegmentMap::utt_bounds(std::size_t utt) const {
    if (utt < 1 || utt > bounds_.size()) {
        throw ValidationError("IndexOutOfRange", "utterance ordinal out of range");
    }
    return bounds_[utt - 1];
}

std::size_t SegmentMap::sink_of(std::size_t utt) const {
    if (utt < 1 || utt > sinks_.size()) {
        throw ValidationError("IndexOutOfRange", "utterance ordinal out of range");
    }
    return sinks_[utt - 1];
}

std::size_t SegmentMap::payload_length(std::size_t utt) const {
    auto [b, e] = utt_bounds(utt);
    return e - b - 1;
}

double SegmentMap::avg_len() const {
    if (bounds_.empty()) throw ValidationError("EmptyConversation", "no utterances");
    return static_cast<double>(n_ - 1) / static_cast<double>(bounds_.size());
}

std::string SegmentMap::to_json() const {
    nlohmann::json j;
    j["n"] = n_;
    auto& arr = j["utt_bounds"] = nlohmann::json::array();
    for (auto [b, e] : bounds_) arr.push_back({b, e});
    return j.dump();
}

SegmentMap SegmentMap::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("BadSegmentMapJson", e.what());
    }
    if (!j.is_object() || !j.contains("n") || !j.contains("utt_bounds")) {
        throw ValidationError("BadSegmentMapJson", "expected {\"n\":..., \"utt_bounds\":[[b,e],...]}");
    }
    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    for (const auto& pair : j.at("utt_bounds")) {
        if (!pair.is_array() || pair.size() != 2) {
            throw ValidationError("BadSegmentMapJson", "utt_bounds entries must be [begin, end]");
        }
        bounds.emplace_back(pair[0].get<std::size_t>(), pair[1].get<std::size_t>());
    }
    return SegmentMap(j.at("n").get<std::size_t>(), std::move(bounds));
}

AssembleResult assemble(const Conversation& conv, TokenId bos, TokenId eou) {
    if (bos == eou) throw ValidationError("BadSpecialTokens", "bos and eou must differ");
    if (conv.utterances.empty()) {
        throw ValidationError("EmptyConversation", "conversation '" + conv.id + "' has no utterances");
    }
    TokenSeq ids;
    ids.push_back(bos);
    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    for (std::size_t k = 0; k < conv.utterances.size(); ++k) {
        const auto& utt = conv.utterances[k];
        if (utt.tokens.empty()) {
            throw ValidationError("EmptyUtterance",
                                  "utterance " + std::to_string(k + 1) + " has no tokens");
        }
        std::size_t begin = ids.size();
        for (TokenId t : utt.tokens) {
            if (t == eou) {
                throw ValidationError("EouInPayload",
                                      "utterance " + std::to_string(k + 1) + " contains the eou id");
            }
            if (t == bos) {
                throw ValidationError("BosInPayload",
                                      "utterance " + std::to_string(k + 1) + " contains the bos id");
            }
            ids.push_back(t);
        }
        ids.push_back(eou);
        bounds.emplace_back(begin, ids.size());
    }
    SegmentMap seg(ids.size(), std::move(bounds));
    return {std::move(ids), std::move(seg)};
}

SegmentMap segment(const TokenSeq& ids, TokenId bos, TokenId eou,
                   std::vector<std::string>* warnings) {
    if (bos == eou) throw ValidationError("BadSpecialTokens", "bos and eou must differ");
    if (ids.empty() || ids[0] != bos) {
        throw ValidationError("MissingBos", "sequence must start with the bos id");
    }
    if (ids.back() != eou) {
        throw ValidationError("TrailingTokens", "sequence must end with an eou id");
    }
    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    std::size_t begin = 1;
    for (std::size_t p = 1; p < ids.size(); ++p) {
        if (ids[p] == bos) {
            throw ValidationError("BosInPayload",
                                  "bos id at position " + std::to_string(p));
        }
        if (ids[p] == eou) {
            if (warnings != nullptr && p == begin) {
                warnings->push_back("utterance " + std::to_string(bounds.size() + 1) +
                                    " has an empty payload");
            }
            bounds.emplace_back(begin, p + 1);
            begin = p + 1;
        }
    }
    return SegmentMap(ids.size(), std::move(bounds));
}

SegmentMap layout_uniform(std::size_t utterances, std::size_t tokens_per_utterance) {
    if (utterances < 1 || tokens_per_utterance < 1) {
        throw ValidationError("BadLayout", "need at least one utterance of at least one token");
    }
    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    bounds.reserve(utterances);
    for (std::size_t k = 0; k < utterances; ++k) {
        bounds.emplace_back(1 + k * tokens_per_utterance, 1 + (k + 1) * tokens_per_utterance);
    }
    return SegmentMap(1 + utterances * tokens_per_utterance, std::move(bounds));
}

StreamTrace trace_from_segmap(const SegmentMap& seg) {
    StreamTrace trace;
    trace.is_eou.assign(seg.size(), false);
    for (std::size_t s : seg.sink_positions()) trace.is_eou[s] = true;
    return trace;
}

StreamTrace trace_from_conversations(const std::vector<Conversation>& convs,
                                     std::size_t* total_utterances) {
    StreamTrace trace;
    trace.is_eou.push_back(false);  // the start token
    std::size_t utts = 0;
    for (const auto& conv : convs) {
        for (const auto& utt : conv.utterances) {
            if (utt.tokens.empty()) {
                throw ValidationError("EmptyUtterance",
                                      "conversation '" + conv.id + "' has an empty utterance");
            }
            for (std::size_t i = 0; i < utt.tokens.size(); ++i) trace.is_eou.push_back(false);
            trace.is_eou.push_back(true);
            ++utts;
        }
    }
    if (utts == 0) throw ValidationError("EmptyConversation", "no utterances in trace");
    if (total_utterances != nullptr) *total_utterances = utts;
    return trace;
}

namespace {

Conversation conversation_from_json(const nlohmann::json& j, std::size_t line_no,
                                    std::vector<std::string>* warnings) {
    auto fail = [line_no](const std::string& why) -> ValidationError {
        return ValidationError("BadConversation",
                               "line " + std::to_string(line_no) + ": " + why);
    };
    if (!j.is_object() || !j.contains("id") || !j.contains("utterances")) {
        throw fail("expected {\"id\":..., \"utterances\":[...]}");
    }
    Conversation conv;
    conv.id = j.at("id").get<std::string>();
    if (!j.at("utterances").is_array() || j.at("utterances").empty()) {
        throw fail("utterances must be a non-empty array");
    }
    std::string prev_role;
    bool roles_present = true;
    for (const auto& u : j.at("utterances")) {
        if (!u.is_object() || !u.contains("tokens")) throw fail("utterance needs a tokens array");
        Utterance utt;
        if (u.contains("role")) utt.role = u.at("role").get<std::string>();
        roles_present = roles_present && !utt.role.empty();
        for (const auto& t : u.at("tokens")) {
            if (!t.is_number_integer()) throw fail("tokens must be integers");
            auto v = t.get<long long>();
            if (v < 0) throw fail("token ids must be non-negative");
            utt.tokens.push_back(static_cast<TokenId>(v));
        }
        if (utt.tokens.empty()) throw fail("utterance has no tokens");
        conv.utterances.push_back(std::move(utt));
    }
    if (roles_present && warnings != nullptr) {
        for (std::size_t k = 1; k < conv.utterances.size(); ++k) {
            if (conv.utterances[k].role == conv.utterances[k - 1].role) {
                warnings->push_back("line " + std::to_string(line_no) +
                                    ": roles do not alternate at utterance " + std::to_string(k + 1));
                break;
            }
        }
    }
    return conv;
}

}  // namespace

std::vector<Conversation> read_conversations_jsonl(std::istream& in,
                                                   std::vector<std::string>* warnings) {
    std::vector<Conversation> convs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("BadConversation",
                                  "line " + std::to_string(line_no) + ": " + e.what());
        }
        convs.push_back(conversation_from_json(j, line_no, warnings));
    }
    return convs;
}

void write_conversations_jsonl(std::ostream& out, const std::vector<Conversation>& convs) {
    for (const auto& conv : convs) {
        nlohmann::json j;
        j["id"] = conv.id;
        auto& arr = j["utterances"] = nlohmann::json::array();
        for (const auto& utt : conv.utterances) {
            nlohmann::json u;
            u["role"] = utt.role;
            u["tokens"] = utt.tokens;
            arr.push_back(std::move(u));
        }
        out << j.dump() << '\n';
    }
}

Conversation demo_tokenize(const std::string& id, const std::vector<std::string>& lines) {
    Conversation conv;
    conv.id = id;
    std::map<std::string, TokenId> ids;
    TokenId next = 3;
    const char* roles[2] = {"A", "B"};
    for (std::size_t k = 0; k < lines.size(); ++k) {
        Utterance utt;
        utt.role = roles[k % 2];
        std::istringstream words(lines[k]);
        std::string word;
        while (words >> word) {
            auto [it, inserted] = ids.emplace(word, next);
            if (inserted) ++next;
            utt.tokens.push_back(it->second);
        }
        if (!utt.tokens.empty()) conv.utterances.push_back(std::move(utt));
    }
    return conv;
}

}  // namespace convsink
