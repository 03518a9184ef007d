#include "ssta/detr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "ssta/common.hpp"

namespace ssta {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kBoxEps = 1e-7;
constexpr double kLogEps = 1e-12;

struct Corners {
    double x1, y1, x2, y2;
};

Corners to_corners(const std::array<double, 4>& b) {
    return {b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0};
}

void check_finite(const Mat& m, const char* what) {
    for (std::size_t i = 0; i < m.size(); ++i)
        if (!std::isfinite(m.at(i))) throw NumericalError(std::string(what) + ": non-finite value");
}

std::array<int, 4> layer_strides(int total) {
    std::array<int, 4> s = {1, 1, 1, 1};
    int rem = total;
    for (int i = 0; i < 4 && rem > 1; ++i) {
        if (rem % 2 != 0) throw ConfigError("backbone stride must be a power of two <= 16");
        s[i] = 2;
        rem /= 2;
    }
    if (rem != 1) throw ConfigError("backbone stride must be a power of two <= 16");
    return s;
}

}  // namespace

Mat sinusoidal_position_encoding(int grid_h, int grid_w, int dim) {
    if (dim % 2 != 0) throw ConfigError("hidden_dim must be even for 2-d position encoding");
    const int half = dim / 2;
    Mat pe(grid_h * grid_w, dim);
    for (int y = 0; y < grid_h; ++y) {
        for (int x = 0; x < grid_w; ++x) {
            double* row = pe.row(y * grid_w + x);
            const double ny = (y + 0.5) / grid_h * 2.0 * kPi;
            const double nx = (x + 0.5) / grid_w * 2.0 * kPi;
            for (int i = 0; i < half; ++i) {
                const double div = std::pow(10000.0, 2.0 * (i / 2) / half);
                row[i] = (i % 2 == 0) ? std::sin(ny / div) : std::cos(ny / div);
                row[half + i] = (i % 2 == 0) ? std::sin(nx / div) : std::cos(nx / div);
            }
        }
    }
    return pe;
}

double box_iou_cxcywh(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const Corners ca = to_corners(a);
    const Corners cb = to_corners(b);
    const double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    const double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    const double inter = iw * ih;
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    return inter / (uni + kBoxEps);
}

double box_giou_cxcywh(const std::array<double, 4>& a, const std::array<double, 4>& b) {
    const Corners ca = to_corners(a);
    const Corners cb = to_corners(b);
    const double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    const double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    const double inter = iw * ih;
    const double uni = a[2] * a[3] + b[2] * b[3] - inter;
    const double iou = inter / (uni + kBoxEps);
    const double ew = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
    const double eh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
    const double enclose = ew * eh;
    return iou - (enclose - uni) / (enclose + kBoxEps);
}

double matching_cost(const DetectionSet& pred, const GroundTruthSet& gt, int gt_idx, int query_idx,
                     const LossWeights& weights) {
    const GroundTruthObject& obj = gt.objects[gt_idx];
    const std::array<double, 4> pb = {pred.boxes(query_idx, 0), pred.boxes(query_idx, 1),
                                      pred.boxes(query_idx, 2), pred.boxes(query_idx, 3)};
    double l1 = 0.0;
    for (int c = 0; c < 4; ++c) l1 += std::abs(obj.bbox[c] - pb[c]);
    const double score = pred.class_scores(query_idx, obj.category - 1);
    return -score + weights.l1 * l1 + weights.giou * (1.0 - box_giou_cxcywh(obj.bbox, pb));
}

MatchResult hungarian_match(const DetectionSet& pred, const GroundTruthSet& gt, const LossWeights& weights) {
    const int m = gt.count();
    const int nq = pred.class_scores.rows();
    if (m > nq) throw std::invalid_argument("hungarian_match: more ground-truth objects than queries");
    MatchResult result;
    if (m == 0) return result;
    check_finite(pred.class_scores, "hungarian_match scores");
    check_finite(pred.boxes, "hungarian_match boxes");
    for (const auto& obj : gt.objects) {
        if (obj.category < 1 || obj.category > pred.class_scores.cols() - 1)
            throw std::invalid_argument("hungarian_match: category out of range");
    }

    // Square cost matrix: rows beyond m are zero-cost fillers, which leaves
    // the optimum over real rows unchanged.
    const int n = nq;
    Mat cost(n, n);
    for (int j = 0; j < m; ++j)
        for (int i = 0; i < n; ++i) cost(j, i) = matching_cost(pred, gt, j, i, weights);

    // Jonker-Volgenant style shortest augmenting paths with potentials.
    // Ties in the column scan resolve to the lowest query index.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (int r = 1; r <= n; ++r) {
        p[0] = r;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = inf;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    result.query_for_gt.assign(m, -1);
    for (int j = 1; j <= n; ++j) {
        const int row = p[j] - 1;
        if (row >= 0 && row < m) result.query_for_gt[row] = j - 1;
    }
    return result;
}

double detection_loss(const DetectionSet& pred, const GroundTruthSet& gt, const MatchResult& match,
                      const LossWeights& weights) {
    check_finite(pred.class_scores, "detection_loss scores");
    check_finite(pred.boxes, "detection_loss boxes");
    const int nq = pred.class_scores.rows();
    const int k = pred.class_scores.cols();
    const int m = gt.count();
    if (static_cast<int>(match.query_for_gt.size()) != m)
        throw std::invalid_argument("detection_loss: match/gt size mismatch");

    std::vector<int> target(nq, k - 1);
    std::vector<double> weight(nq, weights.no_object);
    for (int j = 0; j < m; ++j) {
        const int q = match.query_for_gt[j];
        target[q] = gt.objects[j].category - 1;
        weight[q] = 1.0;
    }
    double l_cls = 0.0;
    for (int i = 0; i < nq; ++i)
        l_cls -= weight[i] * std::log(std::clamp(pred.class_scores(i, target[i]), kLogEps, 1.0));
    l_cls /= nq;

    double l_reg = 0.0;
    if (m > 0) {
        for (int j = 0; j < m; ++j) {
            const int q = match.query_for_gt[j];
            const std::array<double, 4> pb = {pred.boxes(q, 0), pred.boxes(q, 1), pred.boxes(q, 2),
                                              pred.boxes(q, 3)};
            double l1 = 0.0;
            for (int c = 0; c < 4; ++c) l1 += std::abs(gt.objects[j].bbox[c] - pb[c]);
            l_reg += weights.l1 * l1 + weights.giou * (1.0 - box_giou_cxcywh(gt.objects[j].bbox, pb));
        }
        l_reg /= m;
    }
    return l_cls + l_reg;
}

DetrModel::DetrModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    Rng rng(hash_combine(seed, 0x5574a11ULL));
    const int d = config_.hidden_dim;
    if (d % config_.heads != 0) throw ConfigError("hidden_dim must be divisible by heads");
    const auto strides = layer_strides(config_.stride);

    int cin = 3;
    for (int i = 0; i < 4; ++i) {
        const int cout = kBackboneChannels[i];
        backbone[i].w = &store_.create("backbone." + std::to_string(i) + ".w",
                                       xavier_uniform(cout, cin * 9, rng));
        backbone[i].b = &store_.create("backbone." + std::to_string(i) + ".b", Mat(1, cout));
        backbone[i].spec = ConvSpec{cin, 0, 0, cout, 3, strides[i], 1};
        cin = cout;
    }
    input_proj = Linear(store_, "input_proj", cin, d, rng);

    encoder.resize(config_.enc_layers);
    for (int l = 0; l < config_.enc_layers; ++l) {
        auto& e = encoder[l];
        const std::string p = "encoder." + std::to_string(l);
        e.wq = Linear(store_, p + ".wq", d, d, rng);
        e.wk = Linear(store_, p + ".wk", d, d, rng);
        e.wv = Linear(store_, p + ".wv", d, d, rng);
        e.wo = Linear(store_, p + ".wo", d, d, rng);
        e.ln1 = LayerNorm(store_, p + ".ln1", d);
        e.ffn1 = Linear(store_, p + ".ffn1", d, config_.ffn_dim, rng);
        e.ffn2 = Linear(store_, p + ".ffn2", config_.ffn_dim, d, rng);
        e.ln2 = LayerNorm(store_, p + ".ln2", d);
    }

    query_embed = &store_.create("query_embed", normal_init(config_.num_queries, d, 1.0, rng));
    reference_head = Linear(store_, "reference_head", d, 2, rng);

    decoder.resize(config_.dec_layers);
    for (int l = 0; l < config_.dec_layers; ++l) {
        auto& dl = decoder[l];
        const std::string p = "decoder." + std::to_string(l);
        dl.self_wq = Linear(store_, p + ".self_wq", d, d, rng);
        dl.self_wk = Linear(store_, p + ".self_wk", d, d, rng);
        dl.self_wv = Linear(store_, p + ".self_wv", d, d, rng);
        dl.self_wo = Linear(store_, p + ".self_wo", d, d, rng);
        dl.ln1 = LayerNorm(store_, p + ".ln1", d);
        dl.sampling_offsets = Linear(store_, p + ".sampling_offsets", d, config_.heads * config_.points * 2, rng);
        dl.attn_weights = Linear(store_, p + ".attn_weights", d, config_.heads * config_.points, rng);
        dl.value_proj = Linear(store_, p + ".value_proj", d, d, rng);
        dl.out_proj = Linear(store_, p + ".out_proj", d, d, rng);
        dl.ln2 = LayerNorm(store_, p + ".ln2", d);
        dl.ffn1 = Linear(store_, p + ".ffn1", d, config_.ffn_dim, rng);
        dl.ffn2 = Linear(store_, p + ".ffn2", config_.ffn_dim, d, rng);
        dl.ln3 = LayerNorm(store_, p + ".ln3", d);

        // Zero offset/weight projections with radially spread offset biases:
        // initial sampling is an evenly weighted ring around the reference.
        dl.sampling_offsets.w->value.fill(0.0);
        dl.attn_weights.w->value.fill(0.0);
        for (int h = 0; h < config_.heads; ++h) {
            const double theta = 2.0 * kPi * h / config_.heads;
            for (int pt = 0; pt < config_.points; ++pt) {
                const double radius = 0.5 * (pt + 1);
                dl.sampling_offsets.b->value(0, (h * config_.points + pt) * 2 + 0) = std::sin(theta) * radius;
                dl.sampling_offsets.b->value(0, (h * config_.points + pt) * 2 + 1) = std::cos(theta) * radius;
            }
        }
    }

    class_head = Linear(store_, "class_head", d, config_.num_classes(), rng);
    box_head1 = Linear(store_, "box_head1", d, d, rng);
    box_head2 = Linear(store_, "box_head2", d, d, rng);
    box_head3 = Linear(store_, "box_head3", d, 4, rng);
}

DetrModel::GridVars DetrModel::build_backbone(Tape& t, const ImageTensor& image) const {
    if (image.height < 32 || image.width < 32)
        throw ConfigError("image dimensions must be at least 32x32");
    if (image.height % config_.stride != 0 || image.width % config_.stride != 0)
        throw ConfigError("image dimensions must be divisible by the backbone stride");

    Mat x(3, image.height * image.width);
    std::copy(image.pixels.begin(), image.pixels.end(), x.data());
    Var cur = t.constant(std::move(x));
    int h = image.height;
    int w = image.width;
    for (int i = 0; i < 4; ++i) {
        ConvSpec spec = backbone[i].spec;
        spec.height = h;
        spec.width = w;
        cur = t.relu(t.conv2d(cur, t.param(*backbone[i].w), t.param(*backbone[i].b), spec));
        h = spec.out_height();
        w = spec.out_width();
    }
    return GridVars{cur, kBackboneChannels[3], h, w};
}

DetrModel::TokenVars DetrModel::build_tokenize(Tape& t, const GridVars& grid) const {
    // 1x1 channel projection, then row-major flatten of the spatial grid.
    Var tokens = t.add_rowvec(t.matmul(grid.features, t.param(*input_proj.w), /*trans_a=*/true),
                              t.param(*input_proj.b));
    Var pos = t.constant(sinusoidal_position_encoding(grid.height, grid.width, config_.hidden_dim));
    return TokenVars{tokens, grid.height, grid.width, pos};
}

Var DetrModel::build_dense_mha(Tape& t, Var q_in, Var k_in, Var v_in, const Linear& wq, const Linear& wk,
                               const Linear& wv, const Linear& wo) const {
    const int d = config_.hidden_dim;
    const int dh = d / config_.heads;
    Var q = wq(t, q_in);
    Var k = wk(t, k_in);
    Var v = wv(t, v_in);
    std::vector<Var> heads_out;
    heads_out.reserve(config_.heads);
    for (int h = 0; h < config_.heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var attn = t.softmax_rows(scores);
        heads_out.push_back(t.matmul(attn, vh));
    }
    return wo(t, t.concat_cols(heads_out));
}

Var DetrModel::build_encoder(Tape& t, const TokenVars& tokens) const {
    Var x = tokens.tokens;
    for (const auto& layer : encoder) {
        Var qk = t.add(x, tokens.pos);
        Var sa = build_dense_mha(t, qk, qk, x, layer.wq, layer.wk, layer.wv, layer.wo);
        x = layer.ln1(t, t.add(x, sa));
        Var ff = layer.ffn2(t, t.relu(layer.ffn1(t, x)));
        x = layer.ln2(t, t.add(x, ff));
    }
    return x;
}

DetrModel::CrossAttnVars DetrModel::build_cross_attention(Tape& t, int layer, Var query_in, Var ref_embed,
                                                          Var enc_tokens, int grid_h, int grid_w) const {
    const auto& dl = decoder[layer];
    const int heads = config_.heads;
    const int points = config_.points;
    const int nq = t.value(query_in).rows();

    // Reference points from the learned query embeddings, squashed to [0,1]^2.
    Var ref = t.sigmoid(reference_head(t, ref_embed));
    Var gy = t.scale(t.slice_cols(ref, 0, 1), static_cast<double>(grid_h - 1));
    Var gx = t.scale(t.slice_cols(ref, 1, 2), static_cast<double>(grid_w - 1));
    Var ref_grid = t.concat_cols({gy, gx});
    std::vector<Var> tiles(static_cast<std::size_t>(heads) * points, ref_grid);
    Var ref_tiled = t.concat_cols(tiles);

    Var offsets = dl.sampling_offsets(t, query_in);
    Var locs = t.add(ref_tiled, offsets);

    Var logits = dl.attn_weights(t, query_in);
    std::vector<Var> head_attn;
    head_attn.reserve(heads);
    for (int h = 0; h < heads; ++h)
        head_attn.push_back(t.softmax_rows(t.slice_cols(logits, h * points, (h + 1) * points)));
    Var attn = t.concat_cols(head_attn);

    Var values = dl.value_proj(t, enc_tokens);
    Var sampled = t.deformable_attend(values, locs, attn, grid_h, grid_w, heads);
    Var out = dl.out_proj(t, sampled);

    CrossAttnVars result;
    result.output = out;
    result.slice.layers = 1;
    result.slice.queries = nq;
    result.slice.heads = heads;
    result.slice.points = points;
    result.slice.grid_h = grid_h;
    result.slice.grid_w = grid_w;
    result.slice.samples.resize(static_cast<std::size_t>(nq) * heads * points);
    const Mat& refv = t.value(ref);
    const Mat& offv = t.value(offsets);
    const Mat& attnv = t.value(attn);
    for (int q = 0; q < nq; ++q) {
        for (int h = 0; h < heads; ++h) {
            for (int p = 0; p < points; ++p) {
                AttentionSample& s = result.slice.at(0, q, h, p);
                s.ref_y = refv(q, 0);
                s.ref_x = refv(q, 1);
                s.off_y = offv(q, (h * points + p) * 2 + 0);
                s.off_x = offv(q, (h * points + p) * 2 + 1);
                s.weight = attnv(q, h * points + p);
            }
        }
    }
    return result;
}

DetrModel::DecoderVars DetrModel::build_decoder(Tape& t, Var enc_tokens, const TokenVars& layout) const {
    const int nq = config_.num_queries;
    const int d = config_.hidden_dim;

    Var qe = t.param(*query_embed);
    Var content = t.constant(Mat(nq, d));

    DecoderVars out;
    out.trace.layers = config_.dec_layers;
    out.trace.queries = nq;
    out.trace.heads = config_.heads;
    out.trace.points = config_.points;
    out.trace.grid_h = layout.grid_h;
    out.trace.grid_w = layout.grid_w;
    out.trace.samples.resize(static_cast<std::size_t>(config_.dec_layers) * nq * config_.heads * config_.points);

    for (int l = 0; l < config_.dec_layers; ++l) {
        const auto& dl = decoder[l];
        Var qk = t.add(content, qe);
        Var sa = build_dense_mha(t, qk, qk, content, dl.self_wq, dl.self_wk, dl.self_wv, dl.self_wo);
        content = dl.ln1(t, t.add(content, sa));

        Var query_in = t.add(content, qe);
        CrossAttnVars ca = build_cross_attention(t, l, query_in, qe, enc_tokens, layout.grid_h, layout.grid_w);
        std::copy(ca.slice.samples.begin(), ca.slice.samples.end(),
                  out.trace.samples.begin() +
                      static_cast<std::size_t>(l) * nq * config_.heads * config_.points);
        content = dl.ln2(t, t.add(content, ca.output));

        Var ff = dl.ffn2(t, t.relu(dl.ffn1(t, content)));
        content = dl.ln3(t, t.add(content, ff));
    }

    out.decoded = content;
    out.class_logits = class_head(t, content);
    out.boxes = t.sigmoid(box_head3(t, t.relu(box_head2(t, t.relu(box_head1(t, content))))));
    return out;
}

DetrModel::ForwardVars DetrModel::build_forward(Tape& t, const ImageTensor& image) const {
    ForwardVars fv;
    GridVars grid = build_backbone(t, image);
    fv.cnn_tokens = build_tokenize(t, grid);
    fv.enc_tokens = build_encoder(t, fv.cnn_tokens);
    TokenVars enc_layout = fv.cnn_tokens;
    enc_layout.tokens = fv.enc_tokens;
    fv.decoder = build_decoder(t, fv.enc_tokens, enc_layout);
    return fv;
}

Var DetrModel::build_detection_loss(Tape& t, Var class_logits, Var boxes, const GroundTruthSet& gt,
                                    const MatchResult& match, const LossWeights& weights) const {
    const Mat& logits = t.value(class_logits);
    const int nq = logits.rows();
    const int k = logits.cols();
    const int m = gt.count();

    Mat target_weight(nq, k);
    std::vector<char> matched(nq, 0);
    for (int j = 0; j < m; ++j) {
        const int q = match.query_for_gt[j];
        target_weight(q, gt.objects[j].category - 1) = 1.0;
        matched[q] = 1;
    }
    for (int i = 0; i < nq; ++i)
        if (!matched[i]) target_weight(i, k - 1) = weights.no_object;

    Var logp = t.log_softmax_rows(class_logits);
    Var l_cls = t.scale(t.sum(t.mul(logp, t.constant(std::move(target_weight)))), -1.0 / nq);
    if (m == 0) return l_cls;

    std::vector<int> q_idx(match.query_for_gt.begin(), match.query_for_gt.end());
    Var pb = t.gather_rows(boxes, q_idx);
    Mat gt_boxes(m, 4);
    for (int j = 0; j < m; ++j)
        for (int c = 0; c < 4; ++c) gt_boxes(j, c) = gt.objects[j].bbox[c];
    Var gb = t.constant(std::move(gt_boxes));

    Var l1_total = t.sum(t.abs_(t.sub(pb, gb)));

    auto corners = [&](Var b) {
        Var cx = t.slice_cols(b, 0, 1);
        Var cy = t.slice_cols(b, 1, 2);
        Var w = t.slice_cols(b, 2, 3);
        Var h = t.slice_cols(b, 3, 4);
        Var hw = t.scale(w, 0.5);
        Var hh = t.scale(h, 0.5);
        return std::array<Var, 6>{t.sub(cx, hw), t.sub(cy, hh), t.add(cx, hw), t.add(cy, hh), w, h};
    };
    auto ca = corners(pb);
    auto cb = corners(gb);
    Var iw = t.relu(t.sub(t.min2(ca[2], cb[2]), t.max2(ca[0], cb[0])));
    Var ih = t.relu(t.sub(t.min2(ca[3], cb[3]), t.max2(ca[1], cb[1])));
    Var inter = t.mul(iw, ih);
    Var area_sum = t.add(t.mul(ca[4], ca[5]), t.mul(cb[4], cb[5]));
    Var uni = t.sub(area_sum, inter);
    Var iou = t.div(inter, t.add_scalar(uni, kBoxEps));
    Var ew = t.sub(t.max2(ca[2], cb[2]), t.min2(ca[0], cb[0]));
    Var eh = t.sub(t.max2(ca[3], cb[3]), t.min2(ca[1], cb[1]));
    Var enclose = t.mul(ew, eh);
    Var giou = t.sub(iou, t.div(t.sub(enclose, uni), t.add_scalar(enclose, kBoxEps)));
    // sum of (1 - giou) over matched pairs
    Var giou_total = t.add_scalar(t.scale(t.sum(giou), -1.0), static_cast<double>(m));

    Var l_reg = t.scale(t.add(t.scale(l1_total, weights.l1), t.scale(giou_total, weights.giou)), 1.0 / m);
    return t.add(l_cls, l_reg);
}

DetectionSet DetrModel::detections_from(const Tape& t, const DecoderVars& dec) const {
    DetectionSet d;
    d.class_scores = softmax_rows(t.value(dec.class_logits));
    d.boxes = t.value(dec.boxes);
    return d;
}

FeatureGrid DetrModel::backbone_forward(const ImageTensor& image) const {
    Tape t(false);
    GridVars g = build_backbone(t, image);
    FeatureGrid out;
    out.features = t.value(g.features);
    out.channels = g.channels;
    out.height = g.height;
    out.width = g.width;
    out.stride = config_.stride;
    return out;
}

TokenSequence DetrModel::tokenize(const FeatureGrid& grid) const {
    Tape t(false);
    GridVars g{t.constant(grid.features), grid.channels, grid.height, grid.width};
    TokenVars tv = build_tokenize(t, g);
    TokenSequence seq;
    seq.tokens = t.value(tv.tokens);
    seq.grid_h = grid.height;
    seq.grid_w = grid.width;
    seq.tap = TokenTap::cnn;
    seq.pos = t.value(tv.pos);
    return seq;
}

TokenSequence DetrModel::encoder_forward(const TokenSequence& tokens) const {
    if (tokens.tap != TokenTap::cnn)
        throw std::invalid_argument("encoder_forward: expected cnn-tap tokens");
    Tape t(false);
    TokenVars tv{t.constant(tokens.tokens), tokens.grid_h, tokens.grid_w, t.constant(tokens.pos)};
    Var enc = build_encoder(t, tv);
    TokenSequence out = tokens;
    out.tokens = t.value(enc);
    out.tap = TokenTap::encoder;
    return out;
}

std::pair<QuerySet, AttentionTrace> DetrModel::deformable_cross_attention(const QuerySet& queries,
                                                                          const TokenSequence& tokens) const {
    if (tokens.tap != TokenTap::encoder)
        throw std::invalid_argument("deformable_cross_attention: expected encoder-tap tokens");
    Tape t(false);
    Var embed = t.constant(queries.embeddings);
    Var query_in = t.add(t.constant(queries.decoded), embed);
    Var enc = t.constant(tokens.tokens);
    CrossAttnVars ca = build_cross_attention(t, 0, query_in, embed, enc, tokens.grid_h, tokens.grid_w);
    QuerySet out = queries;
    out.decoded = t.value(ca.output);
    return {out, ca.slice};
}

std::pair<DetectionSet, AttentionTrace> DetrModel::decoder_forward(const TokenSequence& enc_tokens) const {
    if (enc_tokens.tap != TokenTap::encoder)
        throw std::invalid_argument("decoder_forward: expected encoder-tap tokens");
    Tape t(false);
    TokenVars layout{t.constant(enc_tokens.tokens), enc_tokens.grid_h, enc_tokens.grid_w,
                     t.constant(enc_tokens.pos)};
    DecoderVars dec = build_decoder(t, layout.tokens, layout);
    return {detections_from(t, dec), dec.trace};
}

DetrModel::ForwardPass DetrModel::forward(const ImageTensor& image) const {
    Tape t(false);
    ForwardVars fv = build_forward(t, image);
    ForwardPass out;
    out.cnn_tokens.tokens = t.value(fv.cnn_tokens.tokens);
    out.cnn_tokens.grid_h = fv.cnn_tokens.grid_h;
    out.cnn_tokens.grid_w = fv.cnn_tokens.grid_w;
    out.cnn_tokens.tap = TokenTap::cnn;
    out.cnn_tokens.pos = t.value(fv.cnn_tokens.pos);
    out.enc_tokens = out.cnn_tokens;
    out.enc_tokens.tokens = t.value(fv.enc_tokens);
    out.enc_tokens.tap = TokenTap::encoder;
    out.detections = detections_from(t, fv.decoder);
    out.trace = fv.decoder.trace;
    return out;
}

}  // namespace ssta
