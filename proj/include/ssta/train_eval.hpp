#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ssta/alignment.hpp"
#include "ssta/cam.hpp"
#include "ssta/data_synth.hpp"
#include "ssta/detr.hpp"

namespace ssta {

struct TrainConfig {
    Mode mode = Mode::source_only;
    double lambda = 1.0;
    double lr = 1e-4;
    double lr_decay_factor = 0.1;
    int lr_decay_epoch = 40;
    int epochs = 50;
    int warmup_epochs = 5;  // source-only detection pre-training
    int batch_size = 2;     // per domain; each step pairs this many source and target images
    std::uint64_t seed = 0;
    ModelConfig model;
    LossWeights loss;

    void validate() const;
};

TrainConfig train_config_from_json_file(const std::string& path);
TrainConfig train_config_from_json(const std::string& text, const std::string& origin);
std::string train_config_to_json(const TrainConfig& config);

struct EpochStats {
    int epoch = 0;
    double l_det = 0.0;
    double l_da_c = 0.0;
    double l_da_e = 0.0;
    double total = 0.0;
};

struct EvalReport {
    std::map<int, double> ap_per_class;  // category -> AP@0.5
    double map = 0.0;
};

struct MetricsReport {
    std::vector<EpochStats> epochs;
    EvalReport source_val;
    EvalReport target_val;
};

// Detector plus the per-tap discriminators; everything the optimizer updates.
struct SstaModel {
    DetrModel detr;
    AlignmentHeads heads;

    SstaModel(const ModelConfig& config, std::uint64_t seed) : detr(config, seed) {
        Rng rng(hash_combine(seed, 0xd15cULL));
        heads = AlignmentHeads(detr.params(), config.hidden_dim, config.disc_hidden, config.num_classes(), rng);
    }

    ParamStore& params() { return detr.params(); }
};

// Per-image CAM-derived guides (stop-gradient inputs to alignment).
CamGuides cam_guides_from_trace(const AttentionTrace& trace, const DetectionSet& detections);

// Binary blob of parameter tensors plus a JSON sidecar (config, seed, epoch,
// shape digest) at <path>.json.
void save_checkpoint(const std::string& path, SstaModel& model, const TrainConfig& config, int epoch);

struct LoadedCheckpoint {
    TrainConfig config;
    int epoch = 0;
    std::unique_ptr<SstaModel> model;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Pooled single-class detections for AP evaluation.
struct ApDetection {
    int image_id = 0;
    double score = 0.0;
    std::array<double, 4> bbox{};
};
struct ApGroundTruth {
    int image_id = 0;
    std::array<double, 4> bbox{};
};

// Greedy score-descending matching at the IoU threshold; area under the
// all-point interpolated precision-recall curve.
double compute_ap(std::vector<ApDetection> detections, const std::vector<ApGroundTruth>& ground_truths,
                  double iou_threshold = 0.5);

EvalReport evaluate_model(const SstaModel& model, const Dataset& data);
EvalReport evaluate(const std::string& checkpoint_path, const std::string& data_root,
                    const std::string& split, const std::string& domain);

MetricsReport train(const TrainConfig& config, const std::string& data_root, const std::string& out_dir);

void export_cam(const std::string& checkpoint_path, const std::string& image_path,
                const std::string& out_path);

void write_metrics_csv(const std::string& path, const std::vector<EpochStats>& epochs);
void write_report_json(const std::string& path, const MetricsReport& report);

}  // namespace ssta
