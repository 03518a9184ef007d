#pragma once

#include <string>
#include <vector>

#include "ssta/cam.hpp"
#include "ssta/detr.hpp"

namespace ssta {

enum class Mode { source_only, ta, spata, semta, ssta };

Mode mode_from_string(const std::string& s);
std::string mode_to_string(Mode m);

// d = 1 for source, 0 for target.
enum class DomainLabel : int { target = 0, source = 1 };

// 3-layer MLP over tokens; out_dim 1 for the binary discriminator, 2K for
// the multi-class one.
struct Discriminator {
    Linear fc1, fc2, fc3;
    int in_dim = 0;
    int out_dim = 0;

    Discriminator() = default;
    Discriminator(ParamStore& store, const std::string& name, int in, int hidden, int out, Rng& rng)
        : fc1(store, name + ".fc1", in, hidden, rng),
          fc2(store, name + ".fc2", hidden, hidden, rng),
          fc3(store, name + ".fc3", hidden, out, rng),
          in_dim(in),
          out_dim(out) {}

    Var logits(Tape& t, Var tokens) const {
        constexpr double kSlope = 0.2;
        return fc3(t, t.leaky_relu(fc2(t, t.leaky_relu(fc1(t, tokens), kSlope)), kSlope));
    }
};

// Per-image inputs derived from the decoder trace; treated as constants by
// the alignment losses (no gradient flows back through them).
struct CamGuides {
    SpatialWeights weights;
    Mat knowledge;  // N_k x K per-token s vectors, rows sum to 1
};

constexpr double kProbEps = 1e-7;

// Forward identity; reverse-mode gradient negated and scaled.
TokenSequence grl_apply(const TokenSequence& tokens);

// Tape-level losses. `tokens` is expected to already be behind a GRL node.
Var build_vanilla_ta_loss(Tape& t, Var tokens, DomainLabel label, const Discriminator& disc);
Var build_spatial_ta_loss(Tape& t, Var tokens, DomainLabel label, const Discriminator& disc,
                          const SpatialWeights& weights);
Var build_semantic_ta_loss(Tape& t, Var tokens, const Mat& domain_embedding, const Discriminator& disc);
Var build_ssta_loss(Tape& t, Var tokens, const SpatialWeights& weights, const Mat& domain_embedding,
                    const Discriminator& disc);

// Value-level operations.
double vanilla_ta_loss(const TokenSequence& tokens, DomainLabel label, const Discriminator& disc);
double spatial_ta_loss(const TokenSequence& tokens, DomainLabel label, const Discriminator& disc,
                       const SpatialWeights& weights);
double semantic_ta_loss(const Mat& token, const std::vector<double>& domain_embedding,
                        const Discriminator& disc);
double ssta_loss(const TokenSequence& tokens, const SpatialWeights& weights, const CategoryCAM& ccam,
                 DomainLabel label, const Discriminator& disc);

// Row softmax over the category axis of the CCAM.
Mat domain_knowledge(const CategoryCAM& ccam);

// Source -> [0 ; s], target -> [s ; 0].
std::vector<double> build_domain_embedding(const std::vector<double>& s, DomainLabel label);
Mat build_domain_embedding_rows(const Mat& knowledge, DomainLabel label);

// The two per-tap discriminators for each discriminator family.
struct AlignmentHeads {
    Discriminator binary_cnn;
    Discriminator binary_enc;
    Discriminator multiclass_cnn;
    Discriminator multiclass_enc;

    AlignmentHeads() = default;
    AlignmentHeads(ParamStore& store, int hidden_dim, int disc_hidden, int num_classes, Rng& rng)
        : binary_cnn(store, "disc.binary_cnn", hidden_dim, disc_hidden, 1, rng),
          binary_enc(store, "disc.binary_enc", hidden_dim, disc_hidden, 1, rng),
          multiclass_cnn(store, "disc.multiclass_cnn", hidden_dim, disc_hidden, 2 * num_classes, rng),
          multiclass_enc(store, "disc.multiclass_enc", hidden_dim, disc_hidden, 2 * num_classes, rng) {}
};

// L_da^c + L_da^e for the given mode; the same CAM-derived guides apply at
// both taps. `cnn_tokens` / `enc_tokens` are raw (pre-GRL) token vars.
Var build_adaptation_objective(Tape& t, Var cnn_tokens, Var enc_tokens, const CamGuides& guides,
                               DomainLabel label, Mode mode, const AlignmentHeads& heads, double grl_scale);

double adaptation_objective(const TokenSequence& cnn_tokens, const TokenSequence& enc_tokens,
                            const CamGuides& guides, DomainLabel label, Mode mode,
                            const AlignmentHeads& heads, double grl_scale = 1.0);

}  // namespace ssta
