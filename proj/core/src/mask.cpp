#include "convsink/mask.hpp"

#include <cmath>
#include <ostream>

namespace convsink {

MaskMatrix::MaskMatrix(std::size_t n) : n_(n), bits_(n * n, 0) {
    if (n < 1) throw ValidationError("EmptySequence", "mask needs at least one position");
}

std::vector<std::size_t> MaskMatrix::allowed_keys(std::size_t row) const {
    std::vector<std::size_t> keys;
    for (std::size_t j = 0; j < n_; ++j) {
        if (at(row, j)) keys.push_back(j);
    }
    return keys;
}

std::size_t MaskMatrix::row_count(std::size_t row) const {
    std::size_t count = 0;
    for (std::size_t j = 0; j < n_; ++j) count += at(row, j) ? 1 : 0;
    return count;
}

std::vector<UttPair> consecutive_pairs(std::size_t utterance_count) {
    if (utterance_count == 0 || utterance_count % 2 != 0) {
        throw ValidationError("UnpairedUtterance",
                              "pairing requires an even positive utterance count, got " +
                                  std::to_string(utterance_count));
    }
    std::vector<UttPair> pairs;
    for (std::size_t u = 1; u <= utterance_count; u += 2) pairs.emplace_back(u, u + 1);
    return pairs;
}

namespace {

void validate_pairing(const SegmentMap& seg, std::span<const UttPair> pairing) {
    const std::size_t t = seg.utterance_count();
    if (pairing.size() * 2 != t) {
        throw ValidationError("UnpairedUtterance", "pairing must cover every utterance exactly once");
    }
    std::size_t expect = 1;
    for (auto [a, b] : pairing) {
        if (a != expect || b != expect + 1) {
            throw ValidationError("BadPairing", "pairs must be consecutive (odd, even) ordinals");
        }
        expect += 2;
    }
}

}  // namespace

MaskMatrix streaming_mask_semantic(const SegmentMap& seg) {
    const std::size_t n = seg.size();
    MaskMatrix mask(n);
    mask.set(0, 0, true);
    for (std::size_t i = 1; i < n; ++i) {
        const std::size_t k = seg.utt_index(i);
        for (std::size_t j = 0; j <= i; ++j) {
            if (j == 0 || seg.is_sink(j)) {
                mask.set(i, j, true);
                continue;
            }
            const std::size_t kj = seg.utt_index(j);
            if (kj == k || kj + 1 == k) mask.set(i, j, true);
        }
    }
    return mask;
}

MaskMatrix streaming_mask_formula(std::size_t utterances, std::size_t tokens_per_utterance) {
    const std::size_t t = utterances;
    const std::size_t l = tokens_per_utterance;
    if (t < 1 || l < 1) throw ValidationError("BadLayout", "need T >= 1 and l >= 1");
    const std::size_t n = 1 + t * l;
    MaskMatrix mask(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ceil_il = (i + l - 1) / l;  // ceil(i / l), 0 at i = 0
        for (std::size_t j = 0; j <= i; ++j) {
            bool allowed = false;
            if (j % l == 0) {
                allowed = true;  // j = k*l <= i, including the start token
            } else if (1 <= j && i <= l) {
                allowed = true;  // fully causal inside the first utterance
            } else if (ceil_il >= 2 && j > (ceil_il - 2) * l) {
                allowed = true;  // the two-utterance sliding span, sinks handled above
            }
            if (allowed) mask.set(i, j, true);
        }
    }
    return mask;
}

MaskMatrix smr_mask_semantic(const SegmentMap& seg, std::span<const UttPair> pairing) {
    validate_pairing(seg, pairing);
    const std::size_t n = seg.size();
    MaskMatrix mask(n);
    mask.set(0, 0, true);
    std::vector<std::size_t> paired_sink(seg.utterance_count() + 1, 0);  // u' ordinal -> sink of u
    for (auto [u, uprime] : pairing) paired_sink[uprime] = seg.sink_of(u);
    for (std::size_t i = 1; i < n; ++i) {
        const std::size_t k = seg.utt_index(i);
        mask.set(i, 0, true);
        const auto [b, e] = seg.utt_bounds(k);
        for (std::size_t j = b; j <= i && j < e; ++j) mask.set(i, j, true);
        if (k % 2 == 0) mask.set(i, paired_sink[k], true);  // even ordinal = the copy slot u'
    }
    return mask;
}

MaskMatrix smr_mask_formula(std::size_t pair_count, std::size_t tokens_per_utterance) {
    const std::size_t s = pair_count;
    const std::size_t l = tokens_per_utterance;
    if (s < 1 || l < 1) throw ValidationError("BadLayout", "need s >= 1 and l >= 1");
    const std::size_t n = 1 + 2 * s * l;
    MaskMatrix mask(n);
    mask.set(0, 0, true);
    for (std::size_t i = 1; i < n; ++i) {
        mask.set(i, 0, true);
        const std::size_t ceil_il = (i + l - 1) / l;
        const std::size_t lower = (ceil_il - 1) * l;
        if (ceil_il % 2 == 0) {
            for (std::size_t j = lower; j <= i; ++j) mask.set(i, j, true);
        } else {
            for (std::size_t j = lower + 1; j <= i; ++j) mask.set(i, j, true);
        }
    }
    return mask;
}

MaskMatrix lmr_mask_semantic(const SegmentMap& seg, std::span<const UttPair> qr_pairs) {
    validate_pairing(seg, qr_pairs);
    const std::size_t n = seg.size();
    MaskMatrix mask(n);
    mask.set(0, 0, true);
    std::vector<std::size_t> paired_query(seg.utterance_count() + 1, 0);  // response ordinal -> query
    for (auto [q, r] : qr_pairs) paired_query[r] = q;
    for (std::size_t i = 1; i < n; ++i) {
        const std::size_t k = seg.utt_index(i);
        const bool is_response = (k % 2 == 0);
        const auto [b, e] = seg.utt_bounds(k);
        if (is_response && i == e - 1) {
            // A response's sink summarises only its own utterance; it does not
            // see the start token. Deliberate: its content must be readable
            // through the sink column alone.
            for (std::size_t j = b; j <= i; ++j) mask.set(i, j, true);
            continue;
        }
        mask.set(i, 0, true);
        for (std::size_t s : seg.sink_positions()) {
            if (s <= i) mask.set(i, s, true);
        }
        for (std::size_t j = b; j <= i && j < e; ++j) mask.set(i, j, true);
        if (is_response) {
            const auto [qb, qe] = seg.utt_bounds(paired_query[k]);
            for (std::size_t j = qb; j < qe; ++j) mask.set(i, j, true);
        }
    }
    return mask;
}

MaskMatrix baseline_mask(const MaskKind& kind, const SegmentMap& seg) {
    const std::size_t n = seg.size();
    MaskMatrix mask(n);
    switch (kind.pattern) {
        case MaskPattern::Dense:
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j <= i; ++j) mask.set(i, j, true);
            }
            break;
        case MaskPattern::Local:
            if (kind.window < 1) throw ValidationError("BadWindow", "local window must be >= 1");
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = (i + 1 >= kind.window ? i + 1 - kind.window : 0); j <= i; ++j) {
                    mask.set(i, j, true);
                }
            }
            break;
        case MaskPattern::StreamingLlm:
            if (kind.window < 1 || kind.n_sink < 1) {
                throw ValidationError("BadWindow", "strllm needs window >= 1 and n_sink >= 1");
            }
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    if (j < kind.n_sink || i - j < kind.window) mask.set(i, j, true);
                }
            }
            break;
        default:
            throw ValidationError("BadPattern", "baseline_mask handles dense/local/strllm only");
    }
    return mask;
}

MaskMatrix build_mask(const MaskKind& kind, const SegmentMap& seg) {
    switch (kind.pattern) {
        case MaskPattern::Streaming:
            return streaming_mask_semantic(seg);
        case MaskPattern::Smr:
            return smr_mask_semantic(seg, consecutive_pairs(seg.utterance_count()));
        case MaskPattern::Lmr:
            return lmr_mask_semantic(seg, consecutive_pairs(seg.utterance_count()));
        default:
            return baseline_mask(kind, seg);
    }
}

void write_mask_csv(std::ostream& out, const MaskMatrix& mask) {
    out << "query,key,allowed\n";
    for (std::size_t i = 0; i < mask.size(); ++i) {
        for (std::size_t j = 0; j < mask.size(); ++j) {
            out << i << ',' << j << ',' << (mask.at(i, j) ? 1 : 0) << '\n';
        }
    }
}

void write_mask_pgm(std::ostream& out, const MaskMatrix& mask) {
    out << "P2\n" << mask.size() << ' ' << mask.size() << "\n255\n";
    for (std::size_t i = 0; i < mask.size(); ++i) {
        for (std::size_t j = 0; j < mask.size(); ++j) {
            out << (mask.at(i, j) ? 255 : 0) << (j + 1 == mask.size() ? '\n' : ' ');
        }
    }
}

}  // namespace convsink
