#pragma once

// Independent reference implementations used only by tests. These stay
// deliberately naive: exhaustive enumeration and literal formula
// transcriptions, never sharing code paths with the library internals they
// check (except for the shared pair-cost function, which both sides must
// agree on by construction).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "ssta/cam.hpp"
#include "ssta/detr.hpp"
#include "ssta/train_eval.hpp"

namespace ssta_test {

// Exhaustive minimum-cost injective assignment of ground truths to queries.
struct BruteForceMatch {
    std::vector<int> query_for_gt;
    double cost = 0.0;
};

inline BruteForceMatch brute_force_match(const ssta::DetectionSet& pred, const ssta::GroundTruthSet& gt,
                                         const ssta::LossWeights& weights) {
    const int m = gt.count();
    const int nq = pred.class_scores.rows();
    ssta::Mat cost(std::max(m, 1), nq);
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < nq; ++i) cost(j, i) = ssta::matching_cost(pred, gt, j, i, weights);

    BruteForceMatch best;
    best.cost = std::numeric_limits<double>::infinity();
    std::vector<int> current(m, -1);
    std::vector<char> used(nq, 0);
    std::function<void(int, double)> recurse = [&](int j, double acc) {
        if (j == m) {
            if (acc < best.cost) {
                best.cost = acc;
                best.query_for_gt = current;
            }
            return;
        }
        for (int i = 0; i < nq; ++i) {
            if (used[i]) continue;
            used[i] = 1;
            current[j] = i;
            recurse(j + 1, acc + cost(j, i));
            used[i] = 0;
        }
    };
    if (m == 0) {
        best.cost = 0.0;
        best.query_for_gt.clear();
    } else {
        recurse(0, 0.0);
    }
    return best;
}

// Total assignment cost summed in ascending ground-truth order (both the
// matcher result and the brute-force result are costed through this, so
// equality comparisons are exact).
inline double assignment_cost(const ssta::DetectionSet& pred, const ssta::GroundTruthSet& gt,
                              const std::vector<int>& query_for_gt, const ssta::LossWeights& weights) {
    double total = 0.0;
    for (int j = 0; j < gt.count(); ++j) total += ssta::matching_cost(pred, gt, j, query_for_gt[j], weights);
    return total;
}

// Straightforward transcription of the detection loss formula.
inline double naive_detection_loss(const ssta::DetectionSet& pred, const ssta::GroundTruthSet& gt,
                                   const ssta::MatchResult& match, const ssta::LossWeights& weights) {
    const int nq = pred.class_scores.rows();
    const int k = pred.class_scores.cols();
    double l_cls = 0.0;
    for (int i = 0; i < nq; ++i) {
        int target = k - 1;
        double w = weights.no_object;
        for (int j = 0; j < gt.count(); ++j) {
            if (match.query_for_gt[j] == i) {
                target = gt.objects[j].category - 1;
                w = 1.0;
            }
        }
        l_cls += -w * std::log(std::clamp(pred.class_scores(i, target), 1e-12, 1.0));
    }
    l_cls /= nq;

    double l_reg = 0.0;
    for (int j = 0; j < gt.count(); ++j) {
        const int q = match.query_for_gt[j];
        const std::array<double, 4> pb = {pred.boxes(q, 0), pred.boxes(q, 1), pred.boxes(q, 2), pred.boxes(q, 3)};
        double l1 = 0.0;
        for (int c = 0; c < 4; ++c) l1 += std::abs(gt.objects[j].bbox[c] - pb[c]);
        l_reg += weights.l1 * l1 + weights.giou * (1.0 - ssta::box_giou_cxcywh(gt.objects[j].bbox, pb));
    }
    if (gt.count() > 0) l_reg /= gt.count();
    return l_cls + l_reg;
}

// Dense CAM oracle: evaluates the bilinear kernel B(t, loc) for every
// integral cell t instead of scattering.
inline ssta::Mat dense_cam_oracle(const ssta::AttentionTrace& trace) {
    const int h = trace.grid_h;
    const int w = trace.grid_w;
    ssta::Mat per_query(trace.queries, h * w);
    for (int q = 0; q < trace.queries; ++q) {
        for (int l = 0; l < trace.layers; ++l) {
            for (int hd = 0; hd < trace.heads; ++hd) {
                for (int p = 0; p < trace.points; ++p) {
                    const auto& s = trace.at(l, q, hd, p);
                    double y = s.ref_y * (h - 1) + s.off_y;
                    double x = s.ref_x * (w - 1) + s.off_x;
                    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
                    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
                    for (int ty = 0; ty < h; ++ty) {
                        for (int tx = 0; tx < w; ++tx) {
                            const double by = std::max(0.0, 1.0 - std::abs(y - ty));
                            const double bx = std::max(0.0, 1.0 - std::abs(x - tx));
                            per_query(q, ty * w + tx) += s.weight * by * bx / (trace.layers * trace.heads);
                        }
                    }
                }
            }
        }
    }
    return per_query;
}

// Literal per-class mean over queries predicted as that class.
inline ssta::Mat naive_ccam(const ssta::CrossAttentionMap& cam, const ssta::DetectionSet& pred) {
    const int nq = cam.per_query.rows();
    const int nk = cam.per_query.cols();
    const int k = pred.class_scores.cols();
    ssta::Mat out(nk, k);
    for (int c = 0; c < k; ++c) {
        int count = 0;
        std::vector<int> members;
        for (int q = 0; q < nq; ++q) {
            int best = 0;
            for (int cc = 1; cc < k; ++cc)
                if (pred.class_scores(q, cc) > pred.class_scores(q, best)) best = cc;
            if (best == c) {
                members.push_back(q);
                ++count;
            }
        }
        if (count == 0) continue;
        for (int t = 0; t < nk; ++t) {
            double acc = 0.0;
            for (int q : members) acc += cam.per_query(q, t);
            out(t, c) = acc / count;
        }
    }
    return out;
}

// Exhaustive AP: every prefix of the score-sorted detection list is
// re-matched from scratch to produce one PR point, then the interpolated
// precision at each achieved recall is found by rescanning all prefixes.
inline double exhaustive_ap(std::vector<ssta::ApDetection> detections,
                            const std::vector<ssta::ApGroundTruth>& gts, double iou_threshold) {
    if (gts.empty()) return 0.0;
    std::stable_sort(detections.begin(), detections.end(),
                     [](const ssta::ApDetection& a, const ssta::ApDetection& b) { return a.score > b.score; });

    auto prefix_tp = [&](std::size_t upto) {
        std::vector<char> used(gts.size(), 0);
        int tp = 0;
        for (std::size_t d = 0; d < upto; ++d) {
            double best_iou = 0.0;
            int best = -1;
            for (std::size_t g = 0; g < gts.size(); ++g) {
                if (used[g] || gts[g].image_id != detections[d].image_id) continue;
                const double iou = ssta::box_iou_cxcywh(detections[d].bbox, gts[g].bbox);
                if (iou >= iou_threshold && iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<int>(g);
                }
            }
            if (best >= 0) {
                used[best] = 1;
                ++tp;
            }
        }
        return tp;
    };

    const int n_gt = static_cast<int>(gts.size());
    std::vector<double> precision(detections.size()), recall(detections.size());
    for (std::size_t d = 0; d < detections.size(); ++d) {
        const int tp = prefix_tp(d + 1);
        precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
        recall[d] = static_cast<double>(tp) / n_gt;
    }

    double ap = 0.0;
    double prev = 0.0;
    for (std::size_t d = 0; d < detections.size(); ++d) {
        if (recall[d] <= prev) continue;
        double p_star = 0.0;
        for (std::size_t e = d; e < detections.size(); ++e) p_star = std::max(p_star, precision[e]);
        ap += (recall[d] - prev) * p_star;
        prev = recall[d];
    }
    return ap;
}

inline ssta::AttentionTrace random_trace(int layers, int queries, int heads, int points, int grid_h,
                                         int grid_w, ssta::Rng& rng, bool allow_out_of_bounds = true) {
    ssta::AttentionTrace trace;
    trace.layers = layers;
    trace.queries = queries;
    trace.heads = heads;
    trace.points = points;
    trace.grid_h = grid_h;
    trace.grid_w = grid_w;
    trace.samples.resize(static_cast<std::size_t>(layers) * queries * heads * points);
    const double spread = allow_out_of_bounds ? 3.0 : 0.5;
    for (int l = 0; l < layers; ++l) {
        for (int q = 0; q < queries; ++q) {
            for (int h = 0; h < heads; ++h) {
                double total = 0.0;
                for (int p = 0; p < points; ++p) {
                    auto& s = trace.at(l, q, h, p);
                    s.ref_y = rng.uniform();
                    s.ref_x = rng.uniform();
                    s.off_y = rng.uniform(-spread * grid_h, spread * grid_h) * (allow_out_of_bounds ? 1.0 : 0.1);
                    s.off_x = rng.uniform(-spread * grid_w, spread * grid_w) * (allow_out_of_bounds ? 1.0 : 0.1);
                    s.weight = rng.uniform(0.01, 1.0);
                    total += s.weight;
                }
                for (int p = 0; p < points; ++p) trace.at(l, q, h, p).weight /= total;  // per-head softmax contract
            }
        }
    }
    return trace;
}

}  // namespace ssta_test
