#pragma once

// Workflow orchestration: run configuration, the three training stages,
// latent materialization, inference, evaluation and report emission.

#include "tavit/checkpoint.hpp"
#include "tavit/metrics.hpp"

namespace tavit {

// Plain-text key = value configuration; command-line flags override file
// values. A snapshot is written beside every run's outputs.
struct RunConfig {
    uint64_t seed = 1;
    std::filesystem::path data_dir = "data";
    std::filesystem::path out_dir = "out";

    // dataset
    int64_t patients = 64;
    int64_t image_size = 64;
    int64_t slices = 32;

    // training plan
    int64_t epochs = 20;
    int64_t batch_size = 8;
    int64_t patience = 10;
    bool augment = true;
    std::string variant = "tavit-t1w-flair";

    // model scale (desk defaults; paper scale remains selectable)
    int64_t base_width = 4;
    int64_t bottleneck_channels = 16;
    int64_t embed_dim = 16;
    int64_t heads = 2;
    int64_t layers = 1;
    int64_t mlp_ratio = 2;
    int64_t patch = 1;
    int64_t tile = 16;
    bool use_tiled = true;
    bool gelu_mlp = true;
    bool layernorm_sqrt = true;

    AdamWHyper opt;

    std::string serialize() const;
    // Throws ContractError on unknown keys or unparseable values.
    void set(const std::string& key, const std::string& value);
    void validate() const;
};

RunConfig read_run_config(const std::filesystem::path& path);
void write_run_config(const std::filesystem::path& path, const RunConfig& cfg);

TransformerConfig transformer_config(const RunConfig& cfg);
// variant in {mprvit, tavit-t1w, tavit-t1w-flair}; "seg" and "latent" name the
// auxiliary stage models.
ModelConfig model_config_for(const RunConfig& cfg, const std::string& variant);
int64_t variant_input_channels(const std::string& variant);

std::filesystem::path checkpoint_path(const RunConfig& cfg, const std::string& name);

// Phantom dataset on disk (volumes, seg maps, manifest); returns the dataset
// hash it prints.
uint64_t cmd_gen_data(const RunConfig& cfg);

struct TrainResult {
    std::vector<EpochLoss> history;
    int64_t best_epoch = 0;
    double best_val = 0;
};

// Trains one stage, writes the best checkpoint, a loss CSV and a config
// snapshot. stage == latent also materializes per-patient latents (from the
// ground-truth segmentation for train/val, from the predicted segmentation for
// test) and requires the segmentation checkpoint.
TrainResult cmd_train(const RunConfig& cfg, Stage stage);

// Predicted T1C volumes for the test split, written under pred/<variant>/.
void cmd_infer(const RunConfig& cfg);

// Builds the metric report over every variant with predictions on disk (or
// the explicit list), writes report.csv / aggregates.csv / violin CSVs.
// Throws on NaN metrics.
MetricReport cmd_evaluate(const RunConfig& cfg, std::vector<std::string> variants = {});

// Recomputes aggregates and violin CSVs from an existing report.csv.
void cmd_report(const RunConfig& cfg);

// Shared helpers (also used by tests).
std::vector<PatientData> load_split(const RunConfig& cfg, const std::string& split,
                                    bool with_latents);
std::string baseline_variant(const std::vector<std::string>& variants);

}  // namespace tavit
