// tavit: phantom dataset generation, three-stage training, inference and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.

#include <CLI11.hpp>

#include "tavit/pipeline.hpp"

using namespace tavit;

namespace {

struct Flags {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<std::string> data_dir, out_dir, variant;
    std::optional<int64_t> image_size, slices, patients, epochs, batch_size;
    std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* app, Flags& f) {
    app->add_option("--config", f.config, "key = value config file");
    app->add_option("--seed", f.seed, "root seed");
    app->add_option("--data-dir", f.data_dir, "dataset directory");
    app->add_option("--out-dir", f.out_dir, "output directory");
    app->add_option("--image-size", f.image_size, "in-plane image extent");
    app->add_option("--slices", f.slices, "slices per patient");
    app->add_option("--patients", f.patients, "patient count");
    app->add_option("--epochs", f.epochs, "max training epochs");
    app->add_option("--batch-size", f.batch_size, "slices per batch");
    app->add_option("--variant", f.variant, "mprvit | tavit-t1w | tavit-t1w-flair");
    app->add_option("--set", f.overrides, "extra key=value config overrides")->take_all();
}

RunConfig resolve(const Flags& f) {
    RunConfig cfg;
    if (!f.config.empty()) cfg = read_run_config(f.config);
    if (f.seed) cfg.seed = *f.seed;
    if (f.data_dir) cfg.data_dir = *f.data_dir;
    if (f.out_dir) cfg.out_dir = *f.out_dir;
    if (f.image_size) cfg.image_size = *f.image_size;
    if (f.slices) cfg.slices = *f.slices;
    if (f.patients) cfg.patients = *f.patients;
    if (f.epochs) cfg.epochs = *f.epochs;
    if (f.batch_size) cfg.batch_size = *f.batch_size;
    if (f.variant) cfg.variant = *f.variant;
    for (const auto& kv : f.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ContractError("--set expects key=value, got " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tumor-aware MRI synthesis pipeline"};
    app.require_subcommand(1);

    Flags f;
    std::string stage_arg;

    auto* gen = app.add_subcommand("gen-data", "generate the phantom dataset");
    add_common(gen, f);

    auto* train = app.add_subcommand("train", "train one pipeline stage");
    train->add_option("stage", stage_arg, "seg | latent | tavit")->required();
    add_common(train, f);

    auto* infer = app.add_subcommand("infer", "predict T1C volumes for the test split");
    add_common(infer, f);

    auto* evaluate = app.add_subcommand("evaluate", "compute metric reports over predictions");
    add_common(evaluate, f);

    auto* report = app.add_subcommand("report", "recompute aggregates and violin CSVs");
    add_common(report, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        const RunConfig cfg = resolve(f);
        if (gen->parsed()) {
            cmd_gen_data(cfg);
        } else if (train->parsed()) {
            Stage stage;
            if (stage_arg == "seg") stage = Stage::segmentation;
            else if (stage_arg == "latent") stage = Stage::latent;
            else if (stage_arg == "tavit") stage = Stage::synthesis;
            else throw ContractError("unknown training stage: " + stage_arg +
                                     " (expected seg | latent | tavit)");
            cmd_train(cfg, stage);
        } else if (infer->parsed()) {
            cmd_infer(cfg);
        } else if (evaluate->parsed()) {
            cmd_evaluate(cfg);
        } else if (report->parsed()) {
            cmd_report(cfg);
        }
    } catch (const ContractError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
