#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "convsink/dialogue.hpp"
#include "convsink/mask.hpp"
#include "convsink/matrix.hpp"

namespace convsink {

// Post-softmax attention weights, layers x heads x N x N. Rows with at least
// one allowed key sum to 1.
struct AttnMap {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t n = 0;
    std::vector<double> w;

    AttnMap() = default;
    AttnMap(std::size_t layers_, std::size_t heads_, std::size_t n_)
        : layers(layers_), heads(heads_), n(n_), w(layers_ * heads_ * n_ * n_, 0.0) {}

    double& at(std::size_t l, std::size_t h, std::size_t i, std::size_t j) {
        return w[((l * heads + h) * n + i) * n + j];
    }
    double at(std::size_t l, std::size_t h, std::size_t i, std::size_t j) const {
        return w[((l * heads + h) * n + i) * n + j];
    }

    Matrix head(std::size_t l, std::size_t h) const;
};

// Mean sink-column attention divided by mean normal-column attention for one
// head. Each column is averaged only over queries for which it is a legal key
// (causal, and mask-allowed when a mask is given); the start-token column is
// excluded from the normal-column pool. Throws NoSinkColumns/NoNormalColumns.
double aggregation_ratio(const Matrix& head, const SegmentMap& seg,
                         const MaskMatrix* allowed = nullptr);

// Fraction of (layer, head) pairs whose aggregation ratio is >= threshold.
double conv_head_fraction(const AttnMap& map, const SegmentMap& seg,
                          double threshold = 3.0, const MaskMatrix* allowed = nullptr);

// CSV with header "layer,head,query,key,weight", one row per entry, printed
// with enough digits to reload within 1e-9.
void export_map_csv(std::ostream& out, const AttnMap& map);
AttnMap import_map_csv(std::istream& in);

// One P2 graymap per head (<stem>_l<L>_h<H>.pgm, weights scaled to the head's
// max) plus <stem>_index.json marking the sink columns.
void export_map_pgm(const AttnMap& map, const SegmentMap& seg, const std::string& path_stem);

// Per-head ratios, conv-head fraction, and the threshold, as a JSON report.
std::string analyze_report_json(const AttnMap& map, const SegmentMap& seg, double threshold);

}  // namespace convsink
