#pragma once

#include <array>
#include <string>
#include <vector>

#include "ssta/detr.hpp"

namespace ssta {

// Attention mass scattered back onto the token grid. Each per-query row is a
// probability vector; `averaged` is its column mean over all queries.
struct CrossAttentionMap {
    Mat per_query;                 // N_q x N_k
    std::vector<double> averaged;  // N_k
    int grid_h = 0;
    int grid_w = 0;
};

// W[t] = M[t] where M[t] >= mean(M), else 0.
struct SpatialWeights {
    std::vector<double> weights;
    double threshold = 0.0;
};

// Column k = mean per-query map over queries predicted as class k (zero
// vector when no query predicts k). Classes include "no object".
struct CategoryCAM {
    Mat ccam;  // N_k x K
    std::vector<int> per_class_counts;
};

struct ScatterCell {
    int token_index;
    double mass;
};

// Distributes `weight` over the (up to 4) integer cells around `location`
// (y, x in grid units, clamped into the grid). Masses sum to `weight`.
std::vector<ScatterCell> bilinear_scatter(double y, double x, double weight, int grid_h, int grid_w);

CrossAttentionMap compute_cam(const AttentionTrace& trace);

SpatialWeights spatial_weights(const CrossAttentionMap& cam);

CategoryCAM compute_ccam(const CrossAttentionMap& cam, const DetectionSet& pred);

// Text grid format: first line "H W", then H lines of W floats (row-major).
void write_cam_grid(const std::string& path, const std::vector<double>& grid, int grid_h, int grid_w);
std::vector<double> read_cam_grid(const std::string& path, int* grid_h, int* grid_w);

}  // namespace ssta
