#include "ssta/cam.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "ssta/common.hpp"

namespace ssta {

std::vector<ScatterCell> bilinear_scatter(double y, double x, double weight, int grid_h, int grid_w) {
    if (weight < 0.0) throw std::invalid_argument("bilinear_scatter: negative weight");
    y = std::clamp(y, 0.0, static_cast<double>(grid_h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(grid_w - 1));
    int y0 = static_cast<int>(std::floor(y));
    int x0 = static_cast<int>(std::floor(x));
    if (y0 > grid_h - 2) y0 = std::max(grid_h - 2, 0);
    if (x0 > grid_w - 2) x0 = std::max(grid_w - 2, 0);
    const double fy = y - y0;
    const double fx = x - x0;
    const int y1 = std::min(y0 + 1, grid_h - 1);
    const int x1 = std::min(x0 + 1, grid_w - 1);

    std::vector<ScatterCell> out;
    out.reserve(4);
    auto emit = [&](int yy, int xx, double coeff) {
        if (coeff == 0.0) return;
        out.push_back({yy * grid_w + xx, weight * coeff});
    };
    emit(y0, x0, (1.0 - fy) * (1.0 - fx));
    emit(y0, x1, (1.0 - fy) * fx);
    emit(y1, x0, fy * (1.0 - fx));
    emit(y1, x1, fy * fx);
    if (out.empty()) out.push_back({y0 * grid_w + x0, weight});  // weight == 0 at a corner
    return out;
}

CrossAttentionMap compute_cam(const AttentionTrace& trace) {
    if (trace.empty()) throw std::invalid_argument("compute_cam: empty trace");
    const int nk = trace.grid_h * trace.grid_w;
    CrossAttentionMap cam;
    cam.grid_h = trace.grid_h;
    cam.grid_w = trace.grid_w;
    cam.per_query = Mat(trace.queries, nk);

    const double norm = 1.0 / (static_cast<double>(trace.layers) * trace.heads);
    for (int l = 0; l < trace.layers; ++l) {
        for (int q = 0; q < trace.queries; ++q) {
            double* row = cam.per_query.row(q);
            for (int h = 0; h < trace.heads; ++h) {
                for (int p = 0; p < trace.points; ++p) {
                    const AttentionSample& s = trace.at(l, q, h, p);
                    const double y = s.ref_y * (trace.grid_h - 1) + s.off_y;
                    const double x = s.ref_x * (trace.grid_w - 1) + s.off_x;
                    for (const ScatterCell& cell : bilinear_scatter(y, x, s.weight * norm, trace.grid_h, trace.grid_w))
                        row[cell.token_index] += cell.mass;
                }
            }
        }
    }

    cam.averaged.assign(nk, 0.0);
    for (int q = 0; q < trace.queries; ++q) {
        const double* row = cam.per_query.row(q);
        for (int t = 0; t < nk; ++t) cam.averaged[t] += row[t];
    }
    for (int t = 0; t < nk; ++t) cam.averaged[t] /= trace.queries;
    return cam;
}

SpatialWeights spatial_weights(const CrossAttentionMap& cam) {
    SpatialWeights w;
    const std::size_t nk = cam.averaged.size();
    double mean = 0.0;
    for (double v : cam.averaged) mean += v;
    mean /= static_cast<double>(nk);
    w.threshold = mean;
    w.weights.assign(nk, 0.0);
    for (std::size_t t = 0; t < nk; ++t)
        if (cam.averaged[t] >= mean) w.weights[t] = cam.averaged[t];
    return w;
}

CategoryCAM compute_ccam(const CrossAttentionMap& cam, const DetectionSet& pred) {
    const int nq = cam.per_query.rows();
    const int nk = cam.per_query.cols();
    if (pred.class_scores.rows() != nq)
        throw std::invalid_argument("compute_ccam: query count mismatch");
    const int k = pred.class_scores.cols();

    CategoryCAM out;
    out.ccam = Mat(nk, k);
    out.per_class_counts.assign(k, 0);
    for (int q = 0; q < nq; ++q) {
        int best = 0;
        for (int c = 1; c < k; ++c)
            if (pred.class_scores(q, c) > pred.class_scores(q, best)) best = c;
        ++out.per_class_counts[best];
        const double* row = cam.per_query.row(q);
        for (int t = 0; t < nk; ++t) out.ccam(t, best) += row[t];
    }
    for (int c = 0; c < k; ++c) {
        if (out.per_class_counts[c] == 0) continue;
        const double inv = 1.0 / out.per_class_counts[c];
        for (int t = 0; t < nk; ++t) out.ccam(t, c) *= inv;
    }
    return out;
}

void write_cam_grid(const std::string& path, const std::vector<double>& grid, int grid_h, int grid_w) {
    if (static_cast<int>(grid.size()) != grid_h * grid_w)
        throw std::invalid_argument("write_cam_grid: size mismatch");
    std::ofstream f(path);
    if (!f) throw DataError("write_cam_grid: cannot open " + path);
    f << grid_h << " " << grid_w << "\n";
    char buf[40];
    for (int y = 0; y < grid_h; ++y) {
        for (int x = 0; x < grid_w; ++x) {
            std::snprintf(buf, sizeof(buf), "%.12g", grid[static_cast<std::size_t>(y) * grid_w + x]);
            f << buf << (x + 1 == grid_w ? "" : " ");
        }
        f << "\n";
    }
    if (!f) throw DataError("write_cam_grid: write failed for " + path);
}

std::vector<double> read_cam_grid(const std::string& path, int* grid_h, int* grid_w) {
    std::ifstream f(path);
    if (!f) throw DataError("read_cam_grid: cannot open " + path);
    int h = 0, w = 0;
    if (!(f >> h >> w) || h <= 0 || w <= 0) throw ParseError(path, 0, "bad grid header");
    std::vector<double> grid(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!(f >> grid[i])) {
            const auto pos = f.tellg();
            throw ParseError(path, pos < 0 ? 0 : static_cast<std::size_t>(pos), "truncated grid");
        }
    }
    *grid_h = h;
    *grid_w = w;
    return grid;
}

}  // namespace ssta
