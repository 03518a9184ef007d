#include "ssta/train_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ssta/common.hpp"
#include "ssta/nn.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace ssta {

void TrainConfig::validate() const {
    if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
    if (warmup_epochs < 0 || epochs < warmup_epochs)
        throw ConfigError("need epochs >= warmup_epochs >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
}

namespace {

json config_to_json_obj(const TrainConfig& c) {
    return json{{"mode", mode_to_string(c.mode)},
                {"lambda", c.lambda},
                {"lr", c.lr},
                {"lr_decay_factor", c.lr_decay_factor},
                {"lr_decay_epoch", c.lr_decay_epoch},
                {"epochs", c.epochs},
                {"warmup_epochs", c.warmup_epochs},
                {"batch_size", c.batch_size},
                {"seed", c.seed},
                {"stride", c.model.stride},
                {"hidden_dim", c.model.hidden_dim},
                {"enc_layers", c.model.enc_layers},
                {"dec_layers", c.model.dec_layers},
                {"heads", c.model.heads},
                {"points", c.model.points},
                {"num_queries", c.model.num_queries},
                {"num_classes", c.model.num_fg_classes},
                {"ffn_dim", c.model.ffn_dim},
                {"disc_hidden", c.model.disc_hidden},
                {"grl_scale", c.model.grl_scale},
                {"lambda_l1", c.loss.l1},
                {"lambda_giou", c.loss.giou},
                {"no_object_weight", c.loss.no_object}};
}

TrainConfig config_from_json_obj(const json& j, const std::string& origin) {
    TrainConfig c;
    try {
        if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("lambda", c.lambda);
        get("lr", c.lr);
        get("lr_decay_factor", c.lr_decay_factor);
        get("lr_decay_epoch", c.lr_decay_epoch);
        get("epochs", c.epochs);
        get("warmup_epochs", c.warmup_epochs);
        get("batch_size", c.batch_size);
        get("seed", c.seed);
        get("stride", c.model.stride);
        get("hidden_dim", c.model.hidden_dim);
        get("enc_layers", c.model.enc_layers);
        get("dec_layers", c.model.dec_layers);
        get("heads", c.model.heads);
        get("points", c.model.points);
        get("num_queries", c.model.num_queries);
        get("num_classes", c.model.num_fg_classes);
        get("ffn_dim", c.model.ffn_dim);
        get("disc_hidden", c.model.disc_hidden);
        get("grl_scale", c.model.grl_scale);
        get("lambda_l1", c.loss.l1);
        get("lambda_giou", c.loss.giou);
        get("no_object_weight", c.loss.no_object);
    } catch (const json::exception& e) {
        throw ParseError(origin, 0, e.what());
    }
    c.validate();
    return c;
}

}  // namespace

TrainConfig train_config_from_json(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(origin, e.byte, e.what());
    }
    return config_from_json_obj(j, origin);
}

TrainConfig train_config_from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return train_config_from_json(ss.str(), path);
}

std::string train_config_to_json(const TrainConfig& config) { return config_to_json_obj(config).dump(2); }

CamGuides cam_guides_from_trace(const AttentionTrace& trace, const DetectionSet& detections) {
    const CrossAttentionMap cam = compute_cam(trace);
    CamGuides guides;
    guides.weights = spatial_weights(cam);
    guides.knowledge = domain_knowledge(compute_ccam(cam, detections));
    return guides;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::uint64_t shape_digest(ParamStore& store) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : store.entries()) {
        h = fnv1a(p->name.data(), p->name.size(), h);
        const int dims[2] = {p->value.rows(), p->value.cols()};
        h = fnv1a(dims, sizeof(dims), h);
    }
    return h;
}

constexpr char kCheckpointMagic[8] = {'S', 'S', 'T', 'A', 'C', 'K', 'P', '1'};

}  // namespace

void save_checkpoint(const std::string& path, SstaModel& model, const TrainConfig& config, int epoch) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_checkpoint: cannot open " + path);
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const auto& entries = model.params().entries();
    const std::uint64_t count = entries.size();
    f.write(reinterpret_cast<const char*>(&count), sizeof(count));
    for (const auto& p : entries) {
        const std::uint32_t name_len = static_cast<std::uint32_t>(p->name.size());
        const std::int32_t rows = p->value.rows();
        const std::int32_t cols = p->value.cols();
        f.write(reinterpret_cast<const char*>(&name_len), sizeof(name_len));
        f.write(p->name.data(), name_len);
        f.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
        f.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
        f.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(double)));
    }
    if (!f) throw DataError("save_checkpoint: write failed for " + path);

    json sidecar{{"config", json::parse(train_config_to_json(config))},
                 {"seed", config.seed},
                 {"epoch", epoch},
                 {"shape_digest", shape_digest(model.params())}};
    std::ofstream sf(path + ".json");
    if (!sf) throw DataError("save_checkpoint: cannot open " + path + ".json");
    sf << sidecar.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream sf(path + ".json");
    if (!sf) throw DataError("load_checkpoint: cannot open sidecar " + path + ".json");
    json sidecar;
    try {
        sf >> sidecar;
    } catch (const json::parse_error& e) {
        throw ParseError(path + ".json", e.byte, e.what());
    }

    LoadedCheckpoint out;
    out.config = config_from_json_obj(sidecar.at("config"), path + ".json");
    out.epoch = sidecar.value("epoch", 0);
    out.model = std::make_unique<SstaModel>(out.config.model, out.config.seed);

    const std::uint64_t expect_digest = sidecar.at("shape_digest").get<std::uint64_t>();
    if (expect_digest != shape_digest(out.model->params()))
        throw DataError("load_checkpoint: model shape digest mismatch for " + path);

    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw DataError("load_checkpoint: bad magic in " + path);
    std::uint64_t count = 0;
    f.read(reinterpret_cast<char*>(&count), sizeof(count));
    const auto& entries = out.model->params().entries();
    if (count != entries.size()) throw DataError("load_checkpoint: parameter count mismatch in " + path);
    for (const auto& p : entries) {
        std::uint32_t name_len = 0;
        f.read(reinterpret_cast<char*>(&name_len), sizeof(name_len));
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        std::int32_t rows = 0, cols = 0;
        f.read(reinterpret_cast<char*>(&rows), sizeof(rows));
        f.read(reinterpret_cast<char*>(&cols), sizeof(cols));
        if (!f || name != p->name || rows != p->value.rows() || cols != p->value.cols())
            throw DataError("load_checkpoint: shape mismatch at parameter " + p->name + " in " + path);
        f.read(reinterpret_cast<char*>(p->value.data()),
               static_cast<std::streamsize>(p->value.size() * sizeof(double)));
        if (!f) throw DataError("load_checkpoint: truncated tensor data in " + path);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Average precision

double compute_ap(std::vector<ApDetection> detections, const std::vector<ApGroundTruth>& ground_truths,
                  double iou_threshold) {
    const int n_gt = static_cast<int>(ground_truths.size());
    if (n_gt == 0) return 0.0;
    std::stable_sort(detections.begin(), detections.end(),
                     [](const ApDetection& a, const ApDetection& b) { return a.score > b.score; });

    std::vector<char> gt_used(ground_truths.size(), 0);
    std::vector<char> is_tp(detections.size(), 0);
    for (std::size_t d = 0; d < detections.size(); ++d) {
        double best_iou = 0.0;
        int best_gt = -1;
        for (std::size_t g = 0; g < ground_truths.size(); ++g) {
            if (gt_used[g] || ground_truths[g].image_id != detections[d].image_id) continue;
            const double iou = box_iou_cxcywh(detections[d].bbox, ground_truths[g].bbox);
            if (iou >= iou_threshold && iou > best_iou) {
                best_iou = iou;
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            gt_used[best_gt] = 1;
            is_tp[d] = 1;
        }
    }

    // All-point interpolation: step through detections in score order and
    // integrate max-precision-to-the-right over recall.
    std::vector<double> precision(detections.size());
    std::vector<double> recall(detections.size());
    int tp = 0;
    for (std::size_t d = 0; d < detections.size(); ++d) {
        tp += is_tp[d];
        precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
        recall[d] = static_cast<double>(tp) / n_gt;
    }
    for (int d = static_cast<int>(detections.size()) - 2; d >= 0; --d)
        precision[d] = std::max(precision[d], precision[d + 1]);

    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t d = 0; d < detections.size(); ++d) {
        if (recall[d] > prev_recall) {
            ap += (recall[d] - prev_recall) * precision[d];
            prev_recall = recall[d];
        }
    }
    return ap;
}

EvalReport evaluate_model(const SstaModel& model, const Dataset& data) {
    const int no_object = model.detr.config().no_object_class();
    std::map<int, std::vector<ApDetection>> detections;
    std::map<int, std::vector<ApGroundTruth>> ground_truths;

    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto fp = model.detr.forward(data.images[i]);
        const Mat& scores = fp.detections.class_scores;
        for (int q = 0; q < scores.rows(); ++q) {
            int best = 0;
            for (int c = 1; c < scores.cols(); ++c)
                if (scores(q, c) > scores(q, best)) best = c;
            if (best == no_object) continue;
            ApDetection det;
            det.image_id = static_cast<int>(i);
            det.score = scores(q, best);
            for (int c = 0; c < 4; ++c) det.bbox[c] = fp.detections.boxes(q, c);
            detections[best + 1].push_back(det);
        }
        for (const auto& obj : data.annotations[i].objects)
            ground_truths[obj.category].push_back({static_cast<int>(i), obj.bbox});
    }

    EvalReport report;
    double sum = 0.0;
    int classes = 0;
    for (const auto& [category, gts] : ground_truths) {
        auto it = detections.find(category);
        const double ap = compute_ap(it == detections.end() ? std::vector<ApDetection>{} : it->second, gts);
        report.ap_per_class[category] = ap;
        sum += ap;
        ++classes;
    }
    report.map = classes > 0 ? sum / classes : 0.0;
    return report;
}

EvalReport evaluate(const std::string& checkpoint_path, const std::string& data_root,
                    const std::string& split, const std::string& domain) {
    if (split != "train" && split != "val") throw ConfigError("split must be train or val");
    if (domain != "source" && domain != "target") throw ConfigError("domain must be source or target");
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    const Dataset data = read_dataset((fs::path(data_root) / domain / split).string());
    return evaluate_model(*ckpt.model, data);
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct StepAccumulator {
    double l_det = 0.0;
    double l_da_c = 0.0;
    double l_da_e = 0.0;
    int det_count = 0;
    int da_count = 0;
};

void check_term(double value, const char* term) {
    if (!std::isfinite(value))
        throw NumericalError(std::string("non-finite loss term ") + term);
}

// One image's contribution: builds the graph, backprops the weighted total.
void accumulate_image(SstaModel& model, const TrainConfig& config, const ImageTensor& image,
                      const GroundTruthSet* gt, DomainLabel label, bool align_active,
                      double det_norm, double da_norm, StepAccumulator& acc) {
    Tape tape;
    const auto fv = model.detr.build_forward(tape, image);

    std::vector<Var> loss_terms;
    if (gt != nullptr) {
        const DetectionSet det = model.detr.detections_from(tape, fv.decoder);
        const MatchResult match = hungarian_match(det, *gt, config.loss);
        Var l_det = model.detr.build_detection_loss(tape, fv.decoder.class_logits, fv.decoder.boxes, *gt,
                                                    match, config.loss);
        check_term(tape.scalar(l_det), "l_det");
        acc.l_det += tape.scalar(l_det);
        acc.det_count += 1;
        loss_terms.push_back(tape.scale(l_det, det_norm));
    }

    if (align_active) {
        const DetectionSet det = model.detr.detections_from(tape, fv.decoder);
        const CamGuides guides = cam_guides_from_trace(fv.decoder.trace, det);
        Var cnn = tape.grl(fv.cnn_tokens.tokens, config.model.grl_scale);
        Var enc = tape.grl(fv.enc_tokens, config.model.grl_scale);
        Var da_c = 0, da_e = 0;
        switch (config.mode) {
            case Mode::ta:
                da_c = build_vanilla_ta_loss(tape, cnn, label, model.heads.binary_cnn);
                da_e = build_vanilla_ta_loss(tape, enc, label, model.heads.binary_enc);
                break;
            case Mode::spata:
                da_c = build_spatial_ta_loss(tape, cnn, label, model.heads.binary_cnn, guides.weights);
                da_e = build_spatial_ta_loss(tape, enc, label, model.heads.binary_enc, guides.weights);
                break;
            case Mode::semta: {
                const Mat emb = build_domain_embedding_rows(guides.knowledge, label);
                da_c = build_semantic_ta_loss(tape, cnn, emb, model.heads.multiclass_cnn);
                da_e = build_semantic_ta_loss(tape, enc, emb, model.heads.multiclass_enc);
                break;
            }
            case Mode::ssta: {
                const Mat emb = build_domain_embedding_rows(guides.knowledge, label);
                da_c = build_ssta_loss(tape, cnn, guides.weights, emb, model.heads.multiclass_cnn);
                da_e = build_ssta_loss(tape, enc, guides.weights, emb, model.heads.multiclass_enc);
                break;
            }
            case Mode::source_only:
                throw ConfigError("alignment requested in source_only mode");
        }
        check_term(tape.scalar(da_c), "l_da_c");
        check_term(tape.scalar(da_e), "l_da_e");
        acc.l_da_c += tape.scalar(da_c);
        acc.l_da_e += tape.scalar(da_e);
        acc.da_count += 1;
        loss_terms.push_back(tape.scale(tape.add(da_c, da_e), config.lambda * da_norm));
    }

    if (loss_terms.empty()) return;
    Var total = loss_terms[0];
    for (std::size_t i = 1; i < loss_terms.size(); ++i) total = tape.add(total, loss_terms[i]);
    tape.backward(total);
}

std::vector<int> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.next_u64() % i;
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

}  // namespace

MetricsReport train(const TrainConfig& config, const std::string& data_root, const std::string& out_dir) {
    config.validate();
    const Dataset source_train = read_dataset((fs::path(data_root) / "source" / "train").string());
    const Dataset target_train = read_dataset((fs::path(data_root) / "target" / "train").string());
    const Dataset source_val = read_dataset((fs::path(data_root) / "source" / "val").string());
    const Dataset target_val = read_dataset((fs::path(data_root) / "target" / "val").string());
    if (source_train.size() == 0) throw DataError("empty source training split under " + data_root);

    fs::create_directories(out_dir);

    SstaModel model(config.model, config.seed);
    AdamOptimizer optimizer(model.params().all());

    // Independent shuffle streams so the source schedule does not depend on
    // whether alignment is active.
    Rng source_rng(hash_combine(config.seed, 0x50aceULL));
    Rng target_rng(hash_combine(config.seed, 0x7a63eULL));

    const bool adapt_mode = config.mode != Mode::source_only && config.lambda > 0.0;
    if (adapt_mode && target_train.size() == 0) throw DataError("empty target training split under " + data_root);

    std::vector<GroundTruthSet> source_gt;
    source_gt.reserve(source_train.size());
    for (const auto& rec : source_train.annotations) source_gt.push_back(ground_truth_from(rec));

    MetricsReport report;
    const int steps_per_epoch = static_cast<int>(source_train.size()) / config.batch_size;
    std::size_t target_cursor = 0;
    std::vector<int> target_order;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const bool align_active = adapt_mode && epoch >= config.warmup_epochs;
        const double lr = epoch >= config.lr_decay_epoch ? config.lr * config.lr_decay_factor : config.lr;
        const std::vector<int> source_order = shuffled_indices(source_train.size(), source_rng);

        EpochStats stats;
        stats.epoch = epoch;
        int det_images = 0;
        int da_images = 0;

        for (int step = 0; step < steps_per_epoch; ++step) {
            StepAccumulator acc;
            const int ns = config.batch_size;
            const int nt = align_active ? config.batch_size : 0;
            const double det_norm = 1.0 / ns;
            const double da_norm = nt > 0 ? 1.0 / (ns + nt) : 0.0;

            for (int b = 0; b < ns; ++b) {
                const int i = source_order[static_cast<std::size_t>(step) * ns + b];
                accumulate_image(model, config, source_train.images[i], &source_gt[i], DomainLabel::source,
                                 align_active, det_norm, da_norm, acc);
            }
            for (int b = 0; b < nt; ++b) {
                if (target_cursor >= target_order.size()) {
                    target_order = shuffled_indices(target_train.size(), target_rng);
                    target_cursor = 0;
                }
                const int i = target_order[target_cursor++];
                accumulate_image(model, config, target_train.images[i], nullptr, DomainLabel::target,
                                 align_active, det_norm, da_norm, acc);
            }
            optimizer.step(lr);

            stats.l_det += acc.l_det;
            stats.l_da_c += acc.l_da_c;
            stats.l_da_e += acc.l_da_e;
            det_images += acc.det_count;
            da_images += acc.da_count;
        }

        if (det_images > 0) stats.l_det /= det_images;
        if (da_images > 0) {
            stats.l_da_c /= da_images;
            stats.l_da_e /= da_images;
        }
        stats.total = stats.l_det + config.lambda * (stats.l_da_c + stats.l_da_e);
        report.epochs.push_back(stats);
    }

    save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), model, config, config.epochs);
    write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), report.epochs);

    report.source_val = evaluate_model(model, source_val);
    report.target_val = evaluate_model(model, target_val);
    write_report_json((fs::path(out_dir) / "report.json").string(), report);
    return report;
}

void export_cam(const std::string& checkpoint_path, const std::string& image_path,
                const std::string& out_path) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    const ImageTensor image = read_ppm(image_path);
    const auto fp = ckpt.model->detr.forward(image);
    const CrossAttentionMap cam = compute_cam(fp.trace);
    const SpatialWeights weights = spatial_weights(cam);

    write_cam_grid(out_path, cam.averaged, cam.grid_h, cam.grid_w);
    write_cam_grid(out_path + ".support", weights.weights, cam.grid_h, cam.grid_w);

    std::printf("grid %dx%d threshold %.6g support %d/%zu\n", cam.grid_h, cam.grid_w, weights.threshold,
                static_cast<int>(std::count_if(weights.weights.begin(), weights.weights.end(),
                                               [](double w) { return w > 0.0; })),
                weights.weights.size());
    for (int q = 0; q < cam.per_query.rows(); ++q) {
        double row_sum = 0.0;
        for (int t = 0; t < cam.per_query.cols(); ++t) row_sum += cam.per_query(q, t);
        const Mat& scores = fp.detections.class_scores;
        int best = 0;
        for (int c = 1; c < scores.cols(); ++c)
            if (scores(q, c) > scores(q, best)) best = c;
        std::printf("query %2d: class %d score %.4f cam_mass %.6f\n", q, best, scores(q, best), row_sum);
    }
}

void write_metrics_csv(const std::string& path, const std::vector<EpochStats>& epochs) {
    std::ofstream f(path);
    if (!f) throw DataError("write_metrics_csv: cannot open " + path);
    f << "epoch,l_det,l_da_c,l_da_e,total\n";
    char buf[160];
    for (const auto& e : epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.l_det, e.l_da_c, e.l_da_e,
                      e.total);
        f << buf;
    }
}

void write_report_json(const std::string& path, const MetricsReport& report) {
    json per_class_src = json::object();
    for (const auto& [cat, ap] : report.source_val.ap_per_class)
        per_class_src[std::to_string(cat)] = ap;
    json per_class_tgt = json::object();
    for (const auto& [cat, ap] : report.target_val.ap_per_class)
        per_class_tgt[std::to_string(cat)] = ap;
    json j{{"source_val", {{"ap_per_class", per_class_src}, {"map", report.source_val.map}}},
           {"target_val", {{"ap_per_class", per_class_tgt}, {"map", report.target_val.map}}}};
    std::ofstream f(path);
    if (!f) throw DataError("write_report_json: cannot open " + path);
    f << j.dump(2) << "\n";
}

}  // namespace ssta
