#pragma once

// Pixel-level AUROC and the per-region-overlap curve area (AUPRO).

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <queue>
#include <span>
#include <utility>
#include <vector>

#include "pyramidflow/errors.hpp"

namespace pyramidflow {

/// P(score of random positive > score of random negative), ties counted 1/2.
/// Mann-Whitney rank formulation with mid-ranks for tied scores.
inline double pixel_auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw MetricError("pixel_auroc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t positives = 0;
    for (auto l : labels) positives += l != 0;
    const std::size_t negatives = n - positives;
    if (positives == 0 || negatives == 0) throw MetricError("pixel_auroc: labels must contain both classes");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        // ranks i+1 .. j share the mid-rank
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum += mid;
        i = j;
    }
    const double p = static_cast<double>(positives), q = static_cast<double>(negatives);
    return (rank_sum - p * (p + 1) / 2) / (p * q);
}

/// 8-connected component labelling of a binary h x w mask.
/// Returns per-pixel labels (0 = background, 1..count) and the count.
inline std::pair<std::vector<int>, int> label_regions(std::span<const std::uint8_t> mask, std::size_t h,
                                                      std::size_t w) {
    if (mask.size() != h * w) throw MetricError("label_regions: mask size mismatch");
    std::vector<int> labels(h * w, 0);
    int count = 0;
    std::queue<std::size_t> frontier;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (!mask[start] || labels[start]) continue;
        labels[start] = ++count;
        frontier.push(start);
        while (!frontier.empty()) {
            const std::size_t p = frontier.front();
            frontier.pop();
            const auto i = static_cast<std::ptrdiff_t>(p / w), j = static_cast<std::ptrdiff_t>(p % w);
            for (std::ptrdiff_t di = -1; di <= 1; ++di)
                for (std::ptrdiff_t dj = -1; dj <= 1; ++dj) {
                    const auto ni = i + di, nj = j + dj;
                    const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
                    if (ni < 0 || nj < 0 || ni >= sh || nj >= sw) continue;
                    const auto q = static_cast<std::size_t>(ni) * w + static_cast<std::size_t>(nj);
                    if (mask[q] && !labels[q]) {
                        labels[q] = count;
                        frontier.push(q);
                    }
                }
        }
    }
    return {std::move(labels), count};
}

struct ProCurvePoint {
    double fpr = 0;
    double pro = 0;
};

/// PRO curve over a descending sweep of every distinct score. `regions[k]` is
/// 0 for normal pixels and the 1-based region id otherwise.
inline std::vector<ProCurvePoint> pro_curve(std::span<const double> scores, std::span<const int> regions,
                                            int region_count) {
    if (scores.size() != regions.size()) throw MetricError("pro_curve: scores and regions differ in length");
    if (region_count <= 0) throw MetricError("pro_curve: ground truth has no anomalous region");
    std::vector<std::size_t> region_size(static_cast<std::size_t>(region_count) + 1, 0);
    for (int r : regions) {
        if (r < 0 || r > region_count) throw MetricError("pro_curve: region id out of range");
        ++region_size[static_cast<std::size_t>(r)];
    }
    const std::size_t normal = region_size[0];
    if (normal == 0) throw MetricError("pro_curve: no normal pixels, FPR undefined");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<std::size_t> hits(region_size.size(), 0);
    std::vector<ProCurvePoint> curve{{0.0, 0.0}};
    std::size_t false_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            const int r = regions[order[j]];
            if (r == 0) ++false_pos;
            else ++hits[static_cast<std::size_t>(r)];
            ++j;
        }
        double overlap = 0;
        for (std::size_t r = 1; r < hits.size(); ++r)
            overlap += static_cast<double>(hits[r]) / static_cast<double>(region_size[r]);
        curve.push_back({static_cast<double>(false_pos) / static_cast<double>(normal),
                         overlap / static_cast<double>(region_count)});
        i = j;
    }
    return curve;
}

/// Trapezoidal area under the curve for FPR in [0, limit], divided by limit.
inline double normalized_area(const std::vector<ProCurvePoint>& curve, double fpr_limit) {
    if (!(fpr_limit > 0 && fpr_limit <= 1)) throw MetricError("fpr_limit must lie in (0, 1]");
    double area = 0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        const auto a = curve[k - 1], b = curve[k];
        if (a.fpr >= fpr_limit) break;
        if (b.fpr <= fpr_limit) {
            area += (b.fpr - a.fpr) * (a.pro + b.pro) / 2;
        } else {
            const double t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
            const double pro_at = a.pro + t * (b.pro - a.pro);
            area += (fpr_limit - a.fpr) * (a.pro + pro_at) / 2;
            break;
        }
    }
    return area / fpr_limit;
}

inline double aupro(std::span<const double> scores, std::span<const std::uint8_t> mask, std::size_t h,
                    std::size_t w, double fpr_limit = 0.3) {
    if (scores.size() != h * w) throw MetricError("aupro: score map size mismatch");
    auto [regions, count] = label_regions(mask, h, w);
    if (count == 0) throw MetricError("aupro: mask is empty");
    return normalized_area(pro_curve(scores, regions, count), fpr_limit);
}

/// One score map with its ground-truth mask, for pooled evaluation.
struct ScoredMask {
    std::vector<double> scores;
    std::vector<std::uint8_t> mask;
    std::size_t h = 0, w = 0;
};

/// AUPRO over a set of images: regions from every mask, FPR over every normal pixel.
inline double aupro_pooled(const std::vector<ScoredMask>& items, double fpr_limit = 0.3) {
    std::vector<double> scores;
    std::vector<int> regions;
    int count = 0;
    for (const auto& it : items) {
        auto [labels, c] = label_regions(it.mask, it.h, it.w);
        if (it.scores.size() != labels.size()) throw MetricError("aupro_pooled: score map size mismatch");
        for (auto& l : labels)
            if (l) l += count;
        count += c;
        scores.insert(scores.end(), it.scores.begin(), it.scores.end());
        regions.insert(regions.end(), labels.begin(), labels.end());
    }
    if (count == 0) throw MetricError("aupro_pooled: no anomalous regions in any mask");
    return normalized_area(pro_curve(scores, regions, count), fpr_limit);
}

}  // namespace pyramidflow
