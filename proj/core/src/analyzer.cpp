#include "convsink/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace convsink {

Matrix AttnMap::head(std::size_t l, std::size_t h) const {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) m.at(i, j) = at(l, h, i, j);
    }
    return m;
}

double aggregation_ratio(const Matrix& head, const SegmentMap& seg, const MaskMatrix* allowed) {
    const std::size_t n = head.rows;
    if (head.cols != n || seg.size() != n) {
        throw ValidationError("LengthMismatch", "attention map and segment map disagree on N");
    }
    if (allowed != nullptr && allowed->size() != n) {
        throw ValidationError("LengthMismatch", "mask and attention map disagree on N");
    }

    // Column mean over the queries for which the column is a legal key:
    // causal (j <= i), and mask-allowed when a mask is supplied. This keeps
    // late columns comparable with early ones.
    auto column_mean = [&](std::size_t j, bool& defined) {
        double sum = 0.0;
        std::size_t count = 0;
        for (std::size_t i = j; i < n; ++i) {
            if (allowed != nullptr && !allowed->at(i, j)) continue;
            sum += head.at(i, j);
            ++count;
        }
        defined = count > 0;
        return defined ? sum / static_cast<double>(count) : 0.0;
    };

    double sink_sum = 0.0, normal_sum = 0.0;
    std::size_t sink_cols = 0, normal_cols = 0;
    for (std::size_t j = 1; j < n; ++j) {  // the start-token column stays out of both pools
        bool defined = false;
        const double mean = column_mean(j, defined);
        if (!defined) continue;
        if (seg.is_sink(j)) {
            sink_sum += mean;
            ++sink_cols;
        } else {
            normal_sum += mean;
            ++normal_cols;
        }
    }
    if (sink_cols == 0) throw ValidationError("NoSinkColumns", "no sink column has a legal query");
    if (normal_cols == 0) {
        throw ValidationError("NoNormalColumns", "no normal column has a legal query");
    }
    const double normal_mean = normal_sum / static_cast<double>(normal_cols);
    if (normal_mean == 0.0) {
        throw ValidationError("NoNormalColumns", "normal columns carry zero attention");
    }
    return (sink_sum / static_cast<double>(sink_cols)) / normal_mean;
}

double conv_head_fraction(const AttnMap& map, const SegmentMap& seg, double threshold,
                          const MaskMatrix* allowed) {
    if (map.layers == 0 || map.heads == 0) {
        throw ValidationError("ValidationError", "attention map has no heads");
    }
    std::size_t hits = 0;
    for (std::size_t l = 0; l < map.layers; ++l) {
        for (std::size_t h = 0; h < map.heads; ++h) {
            if (aggregation_ratio(map.head(l, h), seg, allowed) >= threshold) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(map.layers * map.heads);
}

void export_map_csv(std::ostream& out, const AttnMap& map) {
    out << "layer,head,query,key,weight\n";
    char buf[40];
    for (std::size_t l = 0; l < map.layers; ++l) {
        for (std::size_t h = 0; h < map.heads; ++h) {
            for (std::size_t i = 0; i < map.n; ++i) {
                for (std::size_t j = 0; j < map.n; ++j) {
                    std::snprintf(buf, sizeof(buf), "%.17g", map.at(l, h, i, j));
                    out << l << ',' << h << ',' << i << ',' << j << ',' << buf << '\n';
                }
            }
        }
    }
}

AttnMap import_map_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ValidationError("BadAttnCsv", "empty input");
    if (line.find("layer,head,query,key,weight") != 0) {
        throw ValidationError("BadAttnCsv", "unexpected header '" + line + "'");
    }
    struct Entry {
        std::size_t l, h, i, j;
        double w;
    };
    std::vector<Entry> entries;
    std::size_t layers = 0, heads = 0, n = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        Entry e{};
        if (std::sscanf(line.c_str(), "%zu,%zu,%zu,%zu,%lf", &e.l, &e.h, &e.i, &e.j, &e.w) != 5) {
            throw ValidationError("BadAttnCsv", "line " + std::to_string(line_no));
        }
        layers = std::max(layers, e.l + 1);
        heads = std::max(heads, e.h + 1);
        n = std::max({n, e.i + 1, e.j + 1});
        entries.push_back(e);
    }
    if (entries.empty()) throw ValidationError("BadAttnCsv", "no data rows");
    AttnMap map(layers, heads, n);
    for (const auto& e : entries) map.at(e.l, e.h, e.i, e.j) = e.w;

    // Defined rows must be left stochastic-ish; tolerate empty rows (queries
    // outside this head's coverage) but reject anything else off by > 1e-5.
    for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < n; ++j) sum += map.at(l, h, i, j);
                if (sum != 0.0 && std::abs(sum - 1.0) > 1e-5) {
                    throw ValidationError("BadAttnCsv",
                                          "row " + std::to_string(i) + " sums to " +
                                              std::to_string(sum));
                }
            }
        }
    }
    return map;
}

void export_map_pgm(const AttnMap& map, const SegmentMap& seg, const std::string& path_stem) {
    nlohmann::json index;
    index["n"] = map.n;
    index["sinks"] = seg.sink_positions();
    auto& files = index["heads"] = nlohmann::json::array();
    for (std::size_t l = 0; l < map.layers; ++l) {
        for (std::size_t h = 0; h < map.heads; ++h) {
            const std::string file =
                path_stem + "_l" + std::to_string(l) + "_h" + std::to_string(h) + ".pgm";
            std::ofstream out(file, std::ios::trunc);
            if (!out) throw RuntimeFailure("IoFailure", "cannot write " + file);
            double peak = 0.0;
            for (std::size_t i = 0; i < map.n; ++i) {
                for (std::size_t j = 0; j < map.n; ++j) {
                    peak = std::max(peak, map.at(l, h, i, j));
                }
            }
            const double scale = peak > 0.0 ? 255.0 / peak : 0.0;
            out << "P2\n" << map.n << ' ' << map.n << "\n255\n";
            for (std::size_t i = 0; i < map.n; ++i) {
                for (std::size_t j = 0; j < map.n; ++j) {
                    out << static_cast<int>(std::lround(map.at(l, h, i, j) * scale))
                        << (j + 1 == map.n ? '\n' : ' ');
                }
            }
            files.push_back({{"layer", l}, {"head", h}, {"file", file}});
        }
    }
    std::ofstream idx(path_stem + "_index.json", std::ios::trunc);
    if (!idx) throw RuntimeFailure("IoFailure", "cannot write " + path_stem + "_index.json");
    idx << index.dump(2) << '\n';
}

std::string analyze_report_json(const AttnMap& map, const SegmentMap& seg, double threshold) {
    nlohmann::json report;
    report["n"] = map.n;
    report["threshold"] = threshold;
    auto& heads = report["heads"] = nlohmann::json::array();
    for (std::size_t l = 0; l < map.layers; ++l) {
        for (std::size_t h = 0; h < map.heads; ++h) {
            const double ratio = aggregation_ratio(map.head(l, h), seg);
            heads.push_back({{"layer", l}, {"head", h}, {"ratio", ratio}});
        }
    }
    report["conv_head_fraction"] = conv_head_fraction(map, seg, threshold);
    return report.dump(2);
}

}  // namespace convsink
