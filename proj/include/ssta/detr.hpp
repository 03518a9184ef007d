#pragma once

#include <array>
#include <utility>
#include <vector>

#include "ssta/autodiff.hpp"
#include "ssta/nn.hpp"

namespace ssta {

struct ModelConfig {
    int stride = 8;  // total backbone downsampling; backbone layer strides multiply to this
    int hidden_dim = 64;
    int enc_layers = 2;
    int dec_layers = 2;
    int heads = 4;
    int points = 4;
    int num_queries = 20;
    int num_fg_classes = 3;
    int ffn_dim = 128;
    int disc_hidden = 256;
    double grl_scale = 1.0;

    int num_classes() const { return num_fg_classes + 1; }  // + "no object"
    int no_object_class() const { return num_fg_classes; }
};

struct LossWeights {
    double l1 = 5.0;
    double giou = 2.0;
    double no_object = 0.1;
};

// Channel-major planar RGB, values in [0,1].
struct ImageTensor {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // 3 * height * width

    ImageTensor() = default;
    ImageTensor(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(3) * h * w, 0.0) {}
    double& at(int c, int y, int x) { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

struct FeatureGrid {
    Mat features;  // channels x (height*width)
    int channels = 0;
    int height = 0;
    int width = 0;
    int stride = 0;
};

enum class TokenTap { cnn, encoder };

// Flattened grid tokens, row-major: sequence index t <-> cell (t / W, t % W).
struct TokenSequence {
    Mat tokens;  // N_k x hidden_dim
    int grid_h = 0;
    int grid_w = 0;
    TokenTap tap = TokenTap::cnn;
    Mat pos;  // N_k x hidden_dim sinusoidal encoding; added at attention inputs only

    int count() const { return tokens.rows(); }
};

struct QuerySet {
    Mat embeddings;  // N_q x hidden_dim (learned)
    Mat decoded;     // N_q x hidden_dim
};

// One cross-attention sample as used in the forward pass.
struct AttentionSample {
    double ref_y = 0.0;  // reference point in [0,1]^2
    double ref_x = 0.0;
    double off_y = 0.0;  // offset in grid units
    double off_x = 0.0;
    double weight = 0.0;  // softmax weight, sums to 1 over points per (layer, query, head)
};

struct AttentionTrace {
    int layers = 0;
    int queries = 0;
    int heads = 0;
    int points = 0;
    int grid_h = 0;
    int grid_w = 0;
    std::vector<AttentionSample> samples;  // layers*queries*heads*points

    bool empty() const { return samples.empty(); }
    AttentionSample& at(int l, int q, int h, int p) {
        return samples[((static_cast<std::size_t>(l) * queries + q) * heads + h) * points + p];
    }
    const AttentionSample& at(int l, int q, int h, int p) const {
        return samples[((static_cast<std::size_t>(l) * queries + q) * heads + h) * points + p];
    }
};

struct DetectionSet {
    Mat class_scores;  // N_q x K probabilities, rows sum to 1
    Mat boxes;         // N_q x 4 normalized (cx, cy, w, h) in [0,1]
};

struct GroundTruthObject {
    std::array<double, 4> bbox;  // normalized (cx, cy, w, h)
    int category = 1;            // 1..C_fg
};

struct GroundTruthSet {
    std::vector<GroundTruthObject> objects;
    int count() const { return static_cast<int>(objects.size()); }
};

// query_for_gt[j] = query index assigned to ground-truth j (injective).
struct MatchResult {
    std::vector<int> query_for_gt;
};

// Hidden-layer widths of the strided conv stack; the 1x1 projection maps the
// last width to hidden_dim.
inline constexpr std::array<int, 4> kBackboneChannels = {8, 16, 32, 64};

Mat sinusoidal_position_encoding(int grid_h, int grid_w, int dim);

double box_iou_cxcywh(const std::array<double, 4>& a, const std::array<double, 4>& b);
double box_giou_cxcywh(const std::array<double, 4>& a, const std::array<double, 4>& b);

// Pair cost used by both the matcher and its brute-force oracle.
double matching_cost(const DetectionSet& pred, const GroundTruthSet& gt, int gt_idx, int query_idx,
                     const LossWeights& weights);

MatchResult hungarian_match(const DetectionSet& pred, const GroundTruthSet& gt,
                            const LossWeights& weights = LossWeights{});

double detection_loss(const DetectionSet& pred, const GroundTruthSet& gt, const MatchResult& match,
                      const LossWeights& weights = LossWeights{});

class DetrModel {
  public:
    DetrModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParamStore& params() { return store_; }

    // Tape-level graph builders (used by training); value-level wrappers below.
    struct GridVars {
        Var features;
        int channels, height, width;
    };
    struct TokenVars {
        Var tokens;
        int grid_h, grid_w;
        Var pos;  // constant node
    };
    struct DecoderVars {
        Var class_logits;  // N_q x K
        Var boxes;         // N_q x 4 (sigmoid)
        AttentionTrace trace;
        Var decoded;  // N_q x hidden_dim
    };

    GridVars build_backbone(Tape& t, const ImageTensor& image) const;
    TokenVars build_tokenize(Tape& t, const GridVars& grid) const;
    Var build_encoder(Tape& t, const TokenVars& tokens) const;
    DecoderVars build_decoder(Tape& t, Var enc_tokens, const TokenVars& layout) const;

    // Single deformable cross-attention application (one layer slice).
    struct CrossAttnVars {
        Var output;  // N_q x hidden_dim (after output projection)
        AttentionTrace slice;
    };
    CrossAttnVars build_cross_attention(Tape& t, int layer, Var query_in, Var ref_embed, Var enc_tokens,
                                        int grid_h, int grid_w) const;

    // Value-level operations.
    FeatureGrid backbone_forward(const ImageTensor& image) const;
    TokenSequence tokenize(const FeatureGrid& grid) const;
    TokenSequence encoder_forward(const TokenSequence& tokens) const;
    std::pair<QuerySet, AttentionTrace> deformable_cross_attention(const QuerySet& queries,
                                                                   const TokenSequence& tokens) const;
    std::pair<DetectionSet, AttentionTrace> decoder_forward(const TokenSequence& enc_tokens) const;

    struct ForwardPass {
        TokenSequence cnn_tokens;
        TokenSequence enc_tokens;
        DetectionSet detections;
        AttentionTrace trace;
    };
    ForwardPass forward(const ImageTensor& image) const;

    // Tape-level full pipeline for training.
    struct ForwardVars {
        TokenVars cnn_tokens;
        Var enc_tokens;
        DecoderVars decoder;
    };
    ForwardVars build_forward(Tape& t, const ImageTensor& image) const;

    Var build_detection_loss(Tape& t, Var class_logits, Var boxes, const GroundTruthSet& gt,
                             const MatchResult& match, const LossWeights& weights = LossWeights{}) const;

    DetectionSet detections_from(const Tape& t, const DecoderVars& dec) const;

    // Exposed for targeted tests that pin attention internals.
    struct EncoderLayer {
        Linear wq, wk, wv, wo;
        LayerNorm ln1;
        Linear ffn1, ffn2;
        LayerNorm ln2;
    };
    struct DecoderLayer {
        Linear self_wq, self_wk, self_wv, self_wo;
        LayerNorm ln1;
        Linear sampling_offsets;  // hidden -> heads*points*2 (y,x interleaved)
        Linear attn_weights;      // hidden -> heads*points
        Linear value_proj;
        Linear out_proj;
        LayerNorm ln2;
        Linear ffn1, ffn2;
        LayerNorm ln3;
    };

    struct ConvLayer {
        Param* w;
        Param* b;
        ConvSpec spec;  // height/width filled per input
    };

    std::array<ConvLayer, 4> backbone;
    Linear input_proj;
    std::vector<EncoderLayer> encoder;
    Param* query_embed = nullptr;
    Linear reference_head;  // hidden -> 2, sigmoid -> (ry, rx) in [0,1]^2
    std::vector<DecoderLayer> decoder;
    Linear class_head;
    Linear box_head1, box_head2, box_head3;

  private:
    Var build_dense_mha(Tape& t, Var q_in, Var k_in, Var v_in, const Linear& wq, const Linear& wk,
                        const Linear& wv, const Linear& wo) const;

    ModelConfig config_;
    ParamStore store_;
};

}  // namespace ssta
