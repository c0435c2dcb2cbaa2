// Microbenchmarks for the hot paths: mask construction, cache accounting over
// a stream, the retention simulator, and a model forward pass. The interesting
// readout is how each scales with the number of utterances T at fixed
// utterance extent, mirroring the occupancy scaling the simulator reports.
#include <benchmark/benchmark.h>

#include "convsink/cache.hpp"
#include "convsink/dialogue.hpp"
#include "convsink/mask.hpp"
#include "convsink/model.hpp"
#include "convsink/sim.hpp"

namespace {

using namespace convsink;

constexpr std::size_t kExtent = 16;

void BM_mask_streaming_semantic(benchmark::State& state) {
    const SegmentMap seg = layout_uniform(static_cast<std::size_t>(state.range(0)), kExtent);
    for (auto _ : state) {
        benchmark::DoNotOptimize(streaming_mask_semantic(seg));
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_mask_streaming_semantic)->RangeMultiplier(2)->Range(4, 64)->Complexity();

void BM_mask_streaming_formula(benchmark::State& state) {
    const auto t = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(streaming_mask_formula(t, kExtent));
    }
    state.SetComplexityN(state.range(0));
}
BENCHMARK(BM_mask_streaming_formula)->RangeMultiplier(2)->Range(4, 64)->Complexity();

void BM_mask_smr_semantic(benchmark::State& state) {
    const auto pairs = static_cast<std::size_t>(state.range(0));
    const SegmentMap seg = layout_uniform(2 * pairs, kExtent);
    const std::vector<UttPair> pairing = consecutive_pairs(2 * pairs);
    for (auto _ : state) {
        benchmark::DoNotOptimize(smr_mask_semantic(seg, pairing));
    }
}
BENCHMARK(BM_mask_smr_semantic)->RangeMultiplier(2)->Range(2, 16);

// Per-token cost of cache accounting, the operation a serving loop would run
// on every generated token. Expect flat cost as T grows: the resident set is
// bounded, so observe() never touches more than O(T + l) state.
void BM_cache_stream(benchmark::State& state) {
    const StreamTrace trace =
        trace_from_segmap(layout_uniform(static_cast<std::size_t>(state.range(0)), kExtent));
    for (auto _ : state) {
        StreamingCache cache;
        for (std::size_t pos = 0; pos < trace.size(); ++pos) {
            cache.observe(pos, trace.is_eou[pos]);
        }
        benchmark::DoNotOptimize(cache.stats());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                            static_cast<std::int64_t>(trace.size()));
}
BENCHMARK(BM_cache_stream)->RangeMultiplier(2)->Range(8, 256);

void BM_simulate_streaming(benchmark::State& state) {
    const StreamTrace trace =
        trace_from_segmap(layout_uniform(static_cast<std::size_t>(state.range(0)), kExtent));
    for (auto _ : state) {
        benchmark::DoNotOptimize(simulate(trace, MaskKind::streaming()));
    }
}
BENCHMARK(BM_simulate_streaming)->RangeMultiplier(2)->Range(8, 128);

void BM_model_forward(benchmark::State& state) {
    const auto t = static_cast<std::size_t>(state.range(0));
    const SegmentMap seg = layout_uniform(t, 8);
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 4;
    mc.d_model = 64;
    mc.d_ff = 128;
    mc.vocab_size = 32;
    mc.max_seq_len = seg.size();
    const TinyTransformer model(mc);
    const MaskMatrix mask = streaming_mask_semantic(seg);
    TokenSeq ids(seg.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(3 + i % 29);
    for (auto _ : state) {
        benchmark::DoNotOptimize(model.forward(ids, mask));
    }
}
BENCHMARK(BM_model_forward)->RangeMultiplier(2)->Range(2, 16);

}  // namespace

BENCHMARK_MAIN();
