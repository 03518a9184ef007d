#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssta/data_synth.hpp"
#include "ssta/train_eval.hpp"

using json = nlohmann::json;

namespace {

json report_to_json(const ssta::EvalReport& report) {
    json per_class = json::object();
    for (const auto& [cat, ap] : report.ap_per_class) per_class[std::to_string(cat)] = ap;
    return json{{"ap_per_class", per_class}, {"map", report.map}};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-domain detection transformer with spatial- and semantic-aware token alignment"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "Generate the paired synthetic source/target dataset");
    std::string gen_out;
    int num_train = 800;
    int num_val = 200;
    std::uint64_t gen_seed = 0;
    std::string shift_name = "fog";
    int gen_threads = 1;
    gen->add_option("--out", gen_out, "Output dataset root")->required();
    gen->add_option("--num-train", num_train, "Training images per domain");
    gen->add_option("--num-val", num_val, "Validation images per domain");
    gen->add_option("--seed", gen_seed, "Generation seed");
    gen->add_option("--shift", shift_name, "Domain shift preset: fog | none");
    gen->add_option("--threads", gen_threads, "Generation worker threads");

    // train
    auto* tr = app.add_subcommand("train", "Train a detector");
    std::string tr_config_path;
    std::string tr_data;
    std::string tr_out;
    std::optional<std::string> tr_mode;
    std::optional<double> tr_lambda;
    std::optional<std::uint64_t> tr_seed;
    std::optional<int> tr_epochs;
    std::optional<int> tr_warmup;
    std::optional<double> tr_lr;
    std::optional<int> tr_batch;
    tr->add_option("--config", tr_config_path, "JSON config file (flags override)");
    tr->add_option("--data", tr_data, "Dataset root")->required();
    tr->add_option("--out", tr_out, "Output directory")->required();
    tr->add_option("--mode", tr_mode, "source_only | ta | spata | semta | ssta");
    tr->add_option("--lambda", tr_lambda, "Adaptation loss trade-off");
    tr->add_option("--seed", tr_seed, "Training seed");
    tr->add_option("--epochs", tr_epochs, "Total epochs");
    tr->add_option("--warmup-epochs", tr_warmup, "Source-only pre-training epochs");
    tr->add_option("--lr", tr_lr, "Initial learning rate");
    tr->add_option("--batch-size", tr_batch, "Images per domain per step");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint");
    std::string ev_checkpoint, ev_data, ev_split = "val", ev_domain = "target";
    ev->add_option("--checkpoint", ev_checkpoint, "Checkpoint file")->required();
    ev->add_option("--data", ev_data, "Dataset root")->required();
    ev->add_option("--split", ev_split, "train | val");
    ev->add_option("--domain", ev_domain, "source | target");

    // export-cam
    auto* ex = app.add_subcommand("export-cam", "Export the averaged attention map for one image");
    std::string ex_checkpoint, ex_image, ex_out;
    ex->add_option("--checkpoint", ex_checkpoint, "Checkpoint file")->required();
    ex->add_option("--image", ex_image, "Input PPM image")->required();
    ex->add_option("--out", ex_out, "Output text grid (support mask at <out>.support)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            ssta::SceneSpec scene;
            scene.seed = gen_seed;
            ssta::DomainShiftSpec shift;
            if (shift_name == "fog") {
                shift = ssta::fog_preset(gen_seed + 1);
            } else if (shift_name != "none") {
                std::cerr << "unknown shift preset: " << shift_name << "\n";
                return 1;
            }
            ssta::generate_dataset_tree(gen_out, num_train, num_val, scene, shift, gen_threads);
            std::printf("wrote %d train / %d val images per domain under %s\n", num_train, num_val,
                        gen_out.c_str());
        } else if (tr->parsed()) {
            ssta::TrainConfig config;
            if (!tr_config_path.empty()) config = ssta::train_config_from_json_file(tr_config_path);
            if (tr_mode) config.mode = ssta::mode_from_string(*tr_mode);
            if (tr_lambda) config.lambda = *tr_lambda;
            if (tr_seed) config.seed = *tr_seed;
            if (tr_epochs) config.epochs = *tr_epochs;
            if (tr_warmup) config.warmup_epochs = *tr_warmup;
            if (tr_lr) config.lr = *tr_lr;
            if (tr_batch) config.batch_size = *tr_batch;

            const ssta::MetricsReport report = ssta::train(config, tr_data, tr_out);
            json j{{"source_val", report_to_json(report.source_val)},
                   {"target_val", report_to_json(report.target_val)}};
            std::cout << j.dump(2) << "\n";
        } else if (ev->parsed()) {
            const ssta::EvalReport report = ssta::evaluate(ev_checkpoint, ev_data, ev_split, ev_domain);
            std::cout << report_to_json(report).dump(2) << "\n";
        } else if (ex->parsed()) {
            ssta::export_cam(ex_checkpoint, ex_image, ex_out);
        }
    } catch (const ssta::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const ssta::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ssta::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
