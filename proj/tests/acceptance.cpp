// Acceptance harness: one line per criterion, PASS or FAIL, with the measured
// values and elapsed time. Exits with the number of failed criteria.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "convsink/cache.hpp"
#include "convsink/dialogue.hpp"
#include "convsink/experiment.hpp"
#include "convsink/mask.hpp"
#include "convsink/model.hpp"
#include "convsink/sim.hpp"
#include "convsink/tasks.hpp"
#include "convsink/trainer.hpp"

using namespace convsink;

namespace {

// Pinned tolerances and budgets. Counting checks are exact; the slope bands,
// accuracy thresholds, and wall-clock budgets are fixed here, not configurable.
constexpr double kGradTolerance = 1e-4;        // max relative error, eps = 1e-5
constexpr double kSlopeLow = 0.9, kSlopeHigh = 1.1;
constexpr double kDenseSlopeLow = 14.4, kDenseSlopeHigh = 17.6;  // 0.9*l .. 1.1*l, l = 16
constexpr std::size_t kPeakCap = 129;          // 1 + 64 + 2*32
constexpr double kRatioFloor = 15.0;
constexpr double kSmrAccuracyFloor = 0.90;
constexpr double kAblatedCeiling = 0.30;
constexpr double kRecallGapFloor = 0.40;
constexpr double kMaskEquivBudget = 10.0;      // seconds
constexpr double kCacheBoundBudget = 30.0;
constexpr double kComplexityBudget = 5.0;
constexpr double kScalingBudget = 10.0;
constexpr double kGradBudget = 120.0;
constexpr double kSmrBudget = 600.0;
constexpr double kLmrBudget = 900.0;

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

int failures = 0;

void report(int criterion, bool pass, const std::string& detail, double secs) {
    std::printf("criterion %2d %s  %s  (%.1fs)\n", criterion, pass ? "PASS" : "FAIL",
                detail.c_str(), secs);
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* pattern, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), pattern, a, b);
    return buf;
}

// 1. The closed-form piecewise rules and the semantic builders agree entry for
//    entry on every small uniform layout.
void criterion_mask_equivalence() {
    Timer timer;
    std::size_t checked = 0, mismatches = 0;
    for (std::size_t t = 1; t <= 8; ++t) {
        for (std::size_t l = 1; l <= 6; ++l) {
            if (!(streaming_mask_formula(t, l) ==
                  streaming_mask_semantic(layout_uniform(t, l)))) {
                ++mismatches;
            }
            ++checked;
        }
    }
    for (std::size_t s = 1; s <= 6; ++s) {
        for (std::size_t l = 1; l <= 6; ++l) {
            if (!(smr_mask_formula(s, l) ==
                  smr_mask_semantic(layout_uniform(2 * s, l), consecutive_pairs(2 * s)))) {
                ++mismatches;
            }
            ++checked;
        }
    }
    const double secs = timer.seconds();
    report(1, mismatches == 0 && secs < kMaskEquivBudget,
           std::to_string(checked) + " layouts, " + std::to_string(mismatches) + " mismatches",
           secs);
}

// 2. Retention bound on random variable-length streams, with equality at the
//    utterance boundaries of uniform streams.
void criterion_cache_bound() {
    Timer timer;
    std::mt19937_64 rng(20260814);
    std::uniform_int_distribution<std::size_t> tt(1, 50);
    std::uniform_int_distribution<std::size_t> ee(1, 40);
    std::size_t violations = 0;
    for (int stream = 0; stream < 1000; ++stream) {
        const std::size_t t = tt(rng);
        StreamingCache cache;
        std::size_t pos = 0;
        cache.observe(pos++, false);
        for (std::size_t u = 0; u < t; ++u) {
            const std::size_t extent = ee(rng);
            for (std::size_t k = 0; k + 1 < extent; ++k) {
                cache.observe(pos++, false);
                if (cache.stats().resident_count >
                    1 + cache.sinks_seen() + 2 * cache.max_payload_seen()) {
                    ++violations;
                }
            }
            cache.observe(pos++, true);
            if (cache.stats().resident_count >
                1 + cache.sinks_seen() + 2 * cache.max_payload_seen()) {
                ++violations;
            }
        }
    }

    // Uniform streams: the bound is met with equality at every utterance
    // boundary once two utterances have completed (both windows full).
    std::size_t equality_misses = 0;
    for (std::size_t t = 2; t <= 12; ++t) {
        for (std::size_t l = 1; l <= 8; ++l) {
            const StreamTrace trace = trace_from_segmap(layout_uniform(t, l));
            StreamingCache cache;
            for (std::size_t pos = 0; pos < trace.size(); ++pos) {
                cache.observe(pos, trace.is_eou[pos]);
                if (trace.is_eou[pos] && cache.sinks_seen() >= 2) {
                    const std::size_t bound =
                        1 + cache.sinks_seen() + 2 * cache.max_payload_seen();
                    if (cache.stats().resident_count != bound) ++equality_misses;
                }
            }
        }
    }
    const double secs = timer.seconds();
    report(2, violations == 0 && equality_misses == 0 && secs < kCacheBoundBudget,
           std::to_string(violations) + " bound violations, " +
               std::to_string(equality_misses) + " boundary equality misses",
           secs);
}

// 3. After every step of a uniform stream the cache's attended set equals the
//    streaming mask row of that position.
void criterion_cache_mask_agreement() {
    Timer timer;
    std::size_t disagreements = 0;
    for (std::size_t t = 1; t <= 8; ++t) {
        for (std::size_t l = 1; l <= 6; ++l) {
            const SegmentMap seg = layout_uniform(t, l);
            const StreamTrace trace = trace_from_segmap(seg);
            const MaskMatrix mask = streaming_mask_semantic(seg);
            StreamingCache cache;
            for (std::size_t pos = 0; pos < seg.size(); ++pos) {
                cache.observe(pos, trace.is_eou[pos]);
                if (cache.attended_positions() != mask.allowed_keys(pos)) ++disagreements;
            }
        }
    }
    report(3, disagreements == 0, std::to_string(disagreements) + " disagreements",
           timer.seconds());
}

// 4. Headline complexity figure: T=64, l=32 (N=2049).
void criterion_complexity_ratio() {
    Timer timer;
    const SimResult res = simulate(trace_from_segmap(layout_uniform(64, 32)),
                                   MaskKind::streaming());
    const bool pass = res.summary.peak_resident <= kPeakCap &&
                      res.summary.dense_ratio >= kRatioFloor;
    const double secs = timer.seconds();
    report(4, pass && secs < kComplexityBudget,
           fmt("peak %.0f, dense ratio %.2f", static_cast<double>(res.summary.peak_resident),
               res.summary.dense_ratio),
           secs);
}

// 5. Peak occupancy scales linearly in T under the streaming policy and as
//    N = 1 + T*l under dense retention.
void criterion_scaling_law() {
    Timer timer;
    const std::size_t l = 16;
    const std::vector<std::size_t> ts{8, 16, 32, 64, 128};
    double sx = 0, sc = 0, sd = 0, sxx = 0, sxc = 0, sxd = 0;
    for (const std::size_t t : ts) {
        const StreamTrace trace = trace_from_segmap(layout_uniform(t, l));
        const double conv = static_cast<double>(
            simulate(trace, MaskKind::streaming()).summary.peak_resident);
        const double dense = static_cast<double>(
            simulate(trace, MaskKind::dense()).summary.peak_resident);
        const double x = static_cast<double>(t);
        sx += x; sc += conv; sd += dense; sxx += x * x; sxc += x * conv; sxd += x * dense;
    }
    const double n = static_cast<double>(ts.size());
    const double conv_slope = (n * sxc - sx * sc) / (n * sxx - sx * sx);
    const double dense_slope = (n * sxd - sx * sd) / (n * sxx - sx * sx);
    const bool pass = conv_slope >= kSlopeLow && conv_slope <= kSlopeHigh &&
                      dense_slope >= kDenseSlopeLow && dense_slope <= kDenseSlopeHigh;
    const double secs = timer.seconds();
    report(5, pass && secs < kScalingBudget,
           fmt("convsink slope %.3f, dense slope %.2f", conv_slope, dense_slope), secs);
}

// 6. Finite differences agree with the analytic gradient under every mask
//    pattern the training tasks use.
void criterion_gradient_fidelity() {
    Timer timer;
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.d_model = 12;
    mc.d_ff = 32;
    mc.vocab_size = 12;
    mc.max_seq_len = 48;  // the widest random recall sample below reaches N = 41

    double worst = 0.0;
    std::mt19937_64 rng(99);
    std::uniform_int_distribution<TokenId> tok(3, 11);
    std::uniform_int_distribution<std::size_t> len(1, 3);

    auto random_utterance = [&] {
        std::vector<TokenId> u(len(rng));
        for (TokenId& t : u) t = tok(rng);
        return u;
    };

    for (int round = 0; round < 10; ++round) {
        mc.seed = 1000 + static_cast<std::uint64_t>(round);
        TinyTransformer model(mc);

        Conversation conv;
        conv.id = "grad";
        const std::size_t n_utts = len(rng);
        for (std::size_t u = 0; u < n_utts; ++u) conv.utterances.push_back({"", random_utterance()});
        TrainingSample streaming = build_supervised_sample(conv, 1, 2);

        std::vector<std::vector<TokenId>> utts{random_utterance()};
        TrainingSample smr = build_smr_sample(utts, 1, 2);

        std::vector<QRPair> pairs;
        const std::size_t n_pairs = 1 + len(rng);
        for (std::size_t p = 0; p < n_pairs; ++p) {
            pairs.push_back({random_utterance(), random_utterance()});
        }
        std::uniform_int_distribution<std::size_t> pick_x(1, n_pairs);
        TrainingSample lmr = build_lmr_sample(pairs, pick_x(rng), 1, 2);

        for (TrainingSample* sample : {&streaming, &smr, &lmr}) {
            const GradCheckResult res = grad_check(model, *sample, 1e-5);
            worst = std::max(worst, res.max_rel_error);
        }
    }
    const double secs = timer.seconds();
    report(6, worst <= kGradTolerance && secs < kGradBudget,
           fmt("max relative error %.2e over 30 samples", worst), secs);
}

// 7. Masked-out tokens change nothing, bit for bit, in a 1-layer model under
//    the streaming mask on the 3x3 layout.
void criterion_information_flow() {
    Timer timer;
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_model = 16;
    mc.d_ff = 32;
    mc.vocab_size = 12;
    mc.max_seq_len = 10;
    mc.seed = 5;
    TinyTransformer model(mc);

    const SegmentMap seg = layout_uniform(3, 3);
    const MaskMatrix mask = streaming_mask_semantic(seg);
    TokenSeq ids(seg.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(3 + (i % 9));

    const Matrix base = model.forward(ids, mask);
    std::size_t leaks = 0;
    for (std::size_t j = 0; j < seg.size(); ++j) {
        TokenSeq mutated = ids;
        mutated[j] = static_cast<TokenId>(ids[j] == 3 ? 4 : 3);
        const Matrix out = model.forward(mutated, mask);
        for (std::size_t i = 0; i < seg.size(); ++i) {
            if (mask.at(i, j)) continue;
            for (std::size_t v = 0; v < mc.vocab_size; ++v) {
                if (out.at(i, v) != base.at(i, v)) ++leaks;
            }
        }
    }
    report(7, leaks == 0, std::to_string(leaks) + " leaked logits", timer.seconds());
}

// 8. SMR reconstruction trains through the sink; the sink-ablated control
//    cannot reconstruct.
void criterion_smr_reconstruction() {
    Timer timer;
    ExperimentConfig cfg = default_experiment_config("ablate-sink");
    cfg.seed = 0;
    const nlohmann::json report_json = nlohmann::json::parse(run_experiment(cfg));
    const double smr = report_json["metrics"]["accuracy_smr"].get<double>();
    const double ablated = report_json["metrics"]["accuracy_ablated"].get<double>();
    const double secs = timer.seconds();
    report(8, smr > kSmrAccuracyFloor && ablated <= kAblatedCeiling && secs < kSmrBudget,
           fmt("reconstruction %.3f, sink-ablated %.3f", smr, ablated), secs);
}

// 9. Recall through retained sinks beats the short-window policy that evicted
//    the recalled pair.
void criterion_lmr_recall() {
    Timer timer;
    ExperimentConfig cfg = default_experiment_config("lmr-recall");
    cfg.seed = 0;
    const nlohmann::json report_json = nlohmann::json::parse(run_experiment(cfg));
    const double conv = report_json["metrics"]["accuracy_convsink"].get<double>();
    const double strllm = report_json["metrics"]["accuracy_strllm"].get<double>();
    const double secs = timer.seconds();
    report(9, conv - strllm > kRecallGapFloor && secs < kLmrBudget,
           fmt("convsink %.3f, strllm %.3f", conv, strllm), secs);
}

// 10. The sink statistic separates constructed uniform and sink-peaked heads
//     exactly.
void criterion_sink_statistic() {
    Timer timer;
    const SegmentMap seg = layout_uniform(4, 4);
    const std::size_t n = seg.size();

    auto fill_uniform = [&](AttnMap& map, std::size_t l, std::size_t h) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j <= i; ++j) {
                map.at(l, h, i, j) = 1.0 / static_cast<double>(i + 1);
            }
        }
    };
    auto fill_peaked = [&](AttnMap& map, std::size_t l, std::size_t h) {
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t sink = n;
            for (const std::size_t s : seg.sink_positions()) {
                if (s <= i) sink = s;
            }
            if (sink == n) {
                for (std::size_t j = 0; j <= i; ++j) {
                    map.at(l, h, i, j) = 1.0 / static_cast<double>(i + 1);
                }
            } else if (i == sink) {
                map.at(l, h, i, sink) = 1.0;
            } else {
                map.at(l, h, i, sink) = 0.9;
                for (std::size_t j = 0; j <= i; ++j) {
                    if (j != sink) map.at(l, h, i, j) = 0.1 / static_cast<double>(i);
                }
            }
        }
    };

    AttnMap uniform(2, 2, n), peaked(2, 2, n), mixed(2, 4, n);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t h = 0; h < 2; ++h) {
            fill_uniform(uniform, l, h);
            fill_peaked(peaked, l, h);
        }
        for (std::size_t h = 0; h < 4; ++h) fill_uniform(mixed, l, h);
    }
    fill_peaked(mixed, 0, 0);
    fill_peaked(mixed, 1, 1);
    fill_peaked(mixed, 1, 2);

    const double frac_uniform = conv_head_fraction(uniform, seg, 3.0);
    const double frac_peaked = conv_head_fraction(peaked, seg, 3.0);
    const double frac_mixed = conv_head_fraction(mixed, seg, 3.0);
    const bool pass = frac_uniform == 0.0 && frac_peaked == 1.0 && frac_mixed == 0.375;
    report(10, pass,
           fmt("fractions %.3f / %.3f", frac_uniform, frac_peaked) +
               fmt(" / %.3f (want 0, 1, 0.375)", frac_mixed),
           timer.seconds());
}

// 11. Bit-exact reports per seed, for every experiment.
void criterion_determinism() {
    Timer timer;
    std::size_t diffs = 0;
    for (const char* name : {"smr-recon", "ablate-sink", "lmr-recall"}) {
        ExperimentConfig cfg = default_experiment_config(name);
        cfg.seed = 42;
        cfg.steps = 25;
        cfg.n_train = 24;
        cfg.n_eval = 8;
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.d_ff = 32;
        if (cfg.name == "lmr-recall") {
            cfg.qr_pairs = 4;
            cfg.recall_x = 1;
            cfg.model.max_seq_len = 40;
        }
        const std::string first = run_experiment(cfg);
        const std::string second = run_experiment(cfg);
        if (first != second) ++diffs;
    }
    report(11, diffs == 0, std::to_string(diffs) + " experiments with differing reports",
           timer.seconds());
}

void guarded(int criterion, void (*fn)()) {
    try {
        fn();
    } catch (const std::exception& e) {
        report(criterion, false, std::string("exception: ") + e.what(), 0.0);
    }
}

}  // namespace

int main() {
    guarded(1, criterion_mask_equivalence);
    guarded(2, criterion_cache_bound);
    guarded(3, criterion_cache_mask_agreement);
    guarded(4, criterion_complexity_ratio);
    guarded(5, criterion_scaling_law);
    guarded(6, criterion_gradient_fidelity);
    guarded(7, criterion_information_flow);
    guarded(8, criterion_smr_reconstruction);
    guarded(9, criterion_lmr_recall);
    guarded(10, criterion_sink_statistic);
    guarded(11, criterion_determinism);
    if (failures == 0) {
        std::printf("all 11 criteria passed\n");
    } else {
        std::printf("%d criteria failed\n", failures);
    }
    return failures;
}
