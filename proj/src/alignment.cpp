#include "ssta/alignment.hpp"

#include <cmath>
#include <stdexcept>

#include "ssta/common.hpp"

namespace ssta {

Mode mode_from_string(const std::string& s) {
    if (s == "source_only") return Mode::source_only;
    if (s == "ta") return Mode::ta;
    if (s == "spata") return Mode::spata;
    if (s == "semta") return Mode::semta;
    if (s == "ssta") return Mode::ssta;
    throw ConfigError("unknown mode: " + s);
}

std::string mode_to_string(Mode m) {
    switch (m) {
        case Mode::source_only: return "source_only";
        case Mode::ta: return "ta";
        case Mode::spata: return "spata";
        case Mode::semta: return "semta";
        case Mode::ssta: return "ssta";
    }
    throw ConfigError("unknown mode value");
}

TokenSequence grl_apply(const TokenSequence& tokens) { return tokens; }

namespace {

// Per-token binary cross-entropy column: -[d log D(z) + (1-d) log(1-D(z))].
Var per_token_binary_ce(Tape& t, Var tokens, DomainLabel label, const Discriminator& disc) {
    Var prob = t.clamp(t.sigmoid(disc.logits(t, tokens)), kProbEps, 1.0 - kProbEps);
    if (label == DomainLabel::source) return t.scale(t.log_(prob), -1.0);
    return t.scale(t.log_(t.add_scalar(t.scale(prob, -1.0), 1.0)), -1.0);
}

// Per-token soft cross-entropy column against a 2K-dim embedding row.
Var per_token_soft_ce(Tape& t, Var tokens, const Mat& domain_embedding, const Discriminator& disc) {
    Var logits = disc.logits(t, tokens);
    if (t.value(logits).cols() != domain_embedding.cols())
        throw std::invalid_argument("semantic loss: embedding dimension mismatch");
    if (t.value(logits).rows() != domain_embedding.rows())
        throw std::invalid_argument("semantic loss: token count mismatch");
    Var probs = t.clamp(t.softmax_rows(logits), kProbEps, 1.0 - kProbEps);
    Var ce = t.row_sums(t.mul(t.log_(probs), t.constant(domain_embedding)));
    return t.scale(ce, -1.0);
}

Mat one_plus_weights(const SpatialWeights& weights, int n_tokens) {
    if (static_cast<int>(weights.weights.size()) != n_tokens)
        throw std::invalid_argument("spatial weights: token count mismatch");
    Mat w(n_tokens, 1);
    for (int i = 0; i < n_tokens; ++i) w(i, 0) = 1.0 + weights.weights[i];
    return w;
}

}  // namespace

Var build_vanilla_ta_loss(Tape& t, Var tokens, DomainLabel label, const Discriminator& disc) {
    return t.mean(per_token_binary_ce(t, tokens, label, disc));
}

Var build_spatial_ta_loss(Tape& t, Var tokens, DomainLabel label, const Discriminator& disc,
                          const SpatialWeights& weights) {
    Var ce = per_token_binary_ce(t, tokens, label, disc);
    Var w = t.constant(one_plus_weights(weights, t.value(ce).rows()));
    return t.mean(t.mul(ce, w));
}

Var build_semantic_ta_loss(Tape& t, Var tokens, const Mat& domain_embedding, const Discriminator& disc) {
    return t.mean(per_token_soft_ce(t, tokens, domain_embedding, disc));
}

Var build_ssta_loss(Tape& t, Var tokens, const SpatialWeights& weights, const Mat& domain_embedding,
                    const Discriminator& disc) {
    Var ce = per_token_soft_ce(t, tokens, domain_embedding, disc);
    Var w = t.constant(one_plus_weights(weights, t.value(ce).rows()));
    return t.mean(t.mul(ce, w));
}

double vanilla_ta_loss(const TokenSequence& tokens, DomainLabel label, const Discriminator& disc) {
    Tape t(false);
    return t.scalar(build_vanilla_ta_loss(t, t.constant(tokens.tokens), label, disc));
}

double spatial_ta_loss(const TokenSequence& tokens, DomainLabel label, const Discriminator& disc,
                       const SpatialWeights& weights) {
    Tape t(false);
    return t.scalar(build_spatial_ta_loss(t, t.constant(tokens.tokens), label, disc, weights));
}

double semantic_ta_loss(const Mat& token, const std::vector<double>& domain_embedding,
                        const Discriminator& disc) {
    Mat emb(token.rows(), static_cast<int>(domain_embedding.size()));
    for (int r = 0; r < token.rows(); ++r)
        for (std::size_t c = 0; c < domain_embedding.size(); ++c) emb(r, static_cast<int>(c)) = domain_embedding[c];
    Tape t(false);
    return t.scalar(build_semantic_ta_loss(t, t.constant(token), emb, disc));
}

double ssta_loss(const TokenSequence& tokens, const SpatialWeights& weights, const CategoryCAM& ccam,
                 DomainLabel label, const Discriminator& disc) {
    const Mat knowledge = domain_knowledge(ccam);
    const Mat emb = build_domain_embedding_rows(knowledge, label);
    Tape t(false);
    return t.scalar(build_ssta_loss(t, t.constant(tokens.tokens), weights, emb, disc));
}

Mat domain_knowledge(const CategoryCAM& ccam) { return softmax_rows(ccam.ccam); }

std::vector<double> build_domain_embedding(const std::vector<double>& s, DomainLabel label) {
    double total = 0.0;
    for (double v : s) total += v;
    if (std::abs(total - 1.0) > 1e-6)
        throw std::invalid_argument("build_domain_embedding: s must sum to 1");
    const std::size_t k = s.size();
    std::vector<double> d(2 * k, 0.0);
    if (label == DomainLabel::source) {
        for (std::size_t i = 0; i < k; ++i) d[k + i] = s[i];
    } else {
        for (std::size_t i = 0; i < k; ++i) d[i] = s[i];
    }
    return d;
}

Mat build_domain_embedding_rows(const Mat& knowledge, DomainLabel label) {
    const int n = knowledge.rows();
    const int k = knowledge.cols();
    Mat emb(n, 2 * k);
    const int off = label == DomainLabel::source ? k : 0;
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < k; ++c) emb(r, off + c) = knowledge(r, c);
    return emb;
}

Var build_adaptation_objective(Tape& t, Var cnn_tokens, Var enc_tokens, const CamGuides& guides,
                               DomainLabel label, Mode mode, const AlignmentHeads& heads, double grl_scale) {
    Var cnn = t.grl(cnn_tokens, grl_scale);
    Var enc = t.grl(enc_tokens, grl_scale);
    switch (mode) {
        case Mode::ta:
            return t.add(build_vanilla_ta_loss(t, cnn, label, heads.binary_cnn),
                         build_vanilla_ta_loss(t, enc, label, heads.binary_enc));
        case Mode::spata:
            return t.add(build_spatial_ta_loss(t, cnn, label, heads.binary_cnn, guides.weights),
                         build_spatial_ta_loss(t, enc, label, heads.binary_enc, guides.weights));
        case Mode::semta: {
            const Mat emb = build_domain_embedding_rows(guides.knowledge, label);
            return t.add(build_semantic_ta_loss(t, cnn, emb, heads.multiclass_cnn),
                         build_semantic_ta_loss(t, enc, emb, heads.multiclass_enc));
        }
        case Mode::ssta: {
            const Mat emb = build_domain_embedding_rows(guides.knowledge, label);
            return t.add(build_ssta_loss(t, cnn, guides.weights, emb, heads.multiclass_cnn),
                         build_ssta_loss(t, enc, guides.weights, emb, heads.multiclass_enc));
        }
        case Mode::source_only:
            break;
    }
    throw ConfigError("adaptation objective undefined for mode " + mode_to_string(mode));
}

double adaptation_objective(const TokenSequence& cnn_tokens, const TokenSequence& enc_tokens,
                            const CamGuides& guides, DomainLabel label, Mode mode,
                            const AlignmentHeads& heads, double grl_scale) {
    Tape t(false);
    return t.scalar(build_adaptation_objective(t, t.constant(cnn_tokens.tokens),
                                               t.constant(enc_tokens.tokens), guides, label, mode, heads,
                                               grl_scale));
}

}  // namespace ssta
