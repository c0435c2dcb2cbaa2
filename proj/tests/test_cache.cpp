#include <algorithm>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"

#include "convsink/cache.hpp"
#include "convsink/error.hpp"
#include "convsink/mask.hpp"

using namespace convsink;

namespace {

// Runs a uniform stream through a fresh cache up to and including `last`.
StreamingCache run_uniform(std::size_t t, std::size_t l, std::size_t last) {
    const StreamTrace trace = trace_from_segmap(layout_uniform(t, l));
    StreamingCache cache;
    for (std::size_t pos = 0; pos <= last; ++pos) cache.observe(pos, trace.is_eou[pos]);
    return cache;
}

}  // namespace

TEST_CASE("uniform(3,3): eviction fires on the first token after the second sink") {
    const StreamTrace trace = trace_from_segmap(layout_uniform(3, 3));
    StreamingCache cache;
    for (std::size_t pos = 0; pos < 7; ++pos) {
        const CacheDelta d = cache.observe(pos, trace.is_eou[pos]);
        CHECK(d.position == pos);
        CHECK(d.evicted.empty());
    }
    const CacheDelta d = cache.observe(7, trace.is_eou[7]);
    CHECK(d.evicted == std::vector<std::size_t>{1, 2});

    cache.observe(8, trace.is_eou[8]);
    CHECK(cache.attended_positions() == std::vector<std::size_t>{0, 3, 4, 5, 6, 7, 8});

    cache.observe(9, trace.is_eou[9]);
    const CacheStats stats = cache.stats();
    CHECK(stats.resident_count == 8);
    CHECK(stats.sink_count == 3);
    CHECK(stats.evicted_total == 2);
    CHECK(cache.sinks_seen() == 3);
}

TEST_CASE("position tags and the empty/ordering errors") {
    StreamingCache cache;
    CHECK(cache.empty());
    CHECK_THROWS_AS(cache.attended_positions(), ValidationError);

    const CacheDelta first = cache.observe(0, false);
    CHECK(first.tag == PositionTag::First);
    CHECK(first.evicted.empty());
    CHECK_FALSE(cache.empty());

    CHECK(cache.observe(1, false).tag == PositionTag::Window);
    CHECK(cache.observe(2, true).tag == PositionTag::Sink);
    CHECK_THROWS_AS(cache.observe(2, false), ValidationError);
    CHECK_THROWS_AS(cache.observe(5, false), ValidationError);

    StreamingCache bad;
    CHECK_THROWS_AS(bad.observe(0, true), ValidationError);
}

TEST_CASE("uniform(2,4): both utterances stay resident, nothing evicts") {
    const StreamingCache cache = run_uniform(2, 4, 8);
    std::vector<std::size_t> expect(9);
    for (std::size_t i = 0; i < 9; ++i) expect[i] = i;
    CHECK(cache.attended_positions() == expect);
    CHECK(cache.stats().evicted_total == 0);
    CHECK(cache.stats().peak_resident == 9);
}

TEST_CASE("stats on a fresh cache are all zero") {
    const CacheStats stats = StreamingCache{}.stats();
    CHECK(stats.resident_count == 0);
    CHECK(stats.peak_resident == 0);
    CHECK(stats.evicted_total == 0);
}

TEST_CASE("attended set equals the streaming mask row, exhaustively") {
    for (std::size_t t = 1; t <= 8; ++t) {
        for (std::size_t l = 1; l <= 6; ++l) {
            const SegmentMap seg = layout_uniform(t, l);
            const StreamTrace trace = trace_from_segmap(seg);
            const MaskMatrix mask = streaming_mask_semantic(seg);
            StreamingCache cache;
            for (std::size_t pos = 0; pos < seg.size(); ++pos) {
                cache.observe(pos, trace.is_eou[pos]);
                CHECK(cache.attended_positions() == mask.allowed_keys(pos));
            }
        }
    }
}

TEST_CASE("random variable-length streams respect the retention bound") {
    std::mt19937_64 rng(41);
    std::uniform_int_distribution<std::size_t> tt(1, 12);
    std::uniform_int_distribution<std::size_t> ll(1, 9);
    for (int round = 0; round < 200; ++round) {
        const std::size_t t = tt(rng);
        std::vector<bool> eou{false};  // start token
        for (std::size_t u = 0; u < t; ++u) {
            const std::size_t payload = ll(rng) - 1;
            for (std::size_t k = 0; k < payload; ++k) eou.push_back(false);
            eou.push_back(true);
        }
        StreamingCache cache;
        std::size_t last_sinks = 0;
        std::vector<std::size_t> prev_resident;
        for (std::size_t pos = 0; pos < eou.size(); ++pos) {
            cache.observe(pos, eou[pos]);
            const CacheStats stats = cache.stats();
            // 1 + sinks + two utterances' worth of payload, never more.
            CHECK(stats.resident_count <=
                  1 + cache.sinks_seen() + 2 * cache.max_payload_seen());
            CHECK(cache.sinks_seen() >= last_sinks);
            last_sinks = cache.sinks_seen();
            // Evicted positions never come back.
            const std::vector<std::size_t> resident = cache.attended_positions();
            for (std::size_t p : prev_resident) {
                const bool still = std::binary_search(resident.begin(), resident.end(), p);
                const bool readmitted = !still && p > pos;
                CHECK_FALSE(readmitted);
            }
            prev_resident = resident;
        }
    }
}

TEST_CASE("uniform occupancy at sink steps: 1 + k sinks + both payloads") {
    for (std::size_t l = 1; l <= 6; ++l) {
        for (std::size_t t = 2; t <= 6; ++t) {
            const StreamTrace trace = trace_from_segmap(layout_uniform(t, l));
            StreamingCache cache;
            for (std::size_t pos = 0; pos < trace.size(); ++pos) {
                cache.observe(pos, trace.is_eou[pos]);
                const std::size_t k = cache.sinks_seen();
                if (trace.is_eou[pos] && k >= 2) {
                    CHECK(cache.stats().resident_count == 1 + k + 2 * (l - 1));
                }
            }
        }
    }
}

TEST_CASE("peak occupancy stays within the uniform bound") {
    const StreamingCache cache = run_uniform(10, 4, 40);
    CHECK(cache.stats().peak_resident <= 1 + 10 + 2 * 4);
}

TEST_CASE("eviction log CSV") {
    std::ostringstream out;
    write_eviction_log_csv(out, run_uniform(3, 2, 6));
    CHECK(out.str() == "step,evicted_position\n5,1\n");

    std::ostringstream out2;
    write_eviction_log_csv(out2, run_uniform(3, 3, 9));
    CHECK(out2.str() == "step,evicted_position\n7,1\n7,2\n");
}

TEST_CASE("cache trace CSV for uniform(3,2)") {
    std::ostringstream out;
    write_cache_trace_csv(out, trace_from_segmap(layout_uniform(3, 2)));
    CHECK(out.str() ==
          "step,resident,sinks,window,dense_equiv\n"
          "0,1,0,0,1\n"
          "1,2,0,1,2\n"
          "2,3,1,1,3\n"
          "3,4,1,2,4\n"
          "4,5,2,2,5\n"
          "5,5,2,2,6\n"
          "6,6,3,2,7\n");
}

TEST_CASE("final occupancy grows linearly in T while dense grows as N") {
    // Slope of final resident count against T should be ~1 when l is fixed;
    // dense storage is N = 1 + T*l, slope l. A least-squares fit over a few
    // doublings keeps this robust to the constant term.
    const std::size_t l = 4;
    const std::vector<std::size_t> ts{4, 8, 16, 32};
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const std::size_t t : ts) {
        const SegmentMap seg = layout_uniform(t, l);
        const StreamingCache cache = run_uniform(t, l, seg.size() - 1);
        const double x = static_cast<double>(t);
        const double y = static_cast<double>(cache.stats().resident_count);
        sx += x; sy += y; sxx += x * x; sxy += x * y;
    }
    const double n = static_cast<double>(ts.size());
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(slope == doctest::Approx(1.0).epsilon(0.1));
}
