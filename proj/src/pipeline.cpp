#include "tavit/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

namespace tavit {

// ---------------------------------------------------------------------------
// Run configuration

std::string RunConfig::serialize() const {
    std::ostringstream os;
    os << "seed = " << seed << "\n"
       << "data_dir = " << data_dir.generic_string() << "\n"
       << "out_dir = " << out_dir.generic_string() << "\n"
       << "patients = " << patients << "\n"
       << "image_size = " << image_size << "\n"
       << "slices = " << slices << "\n"
       << "epochs = " << epochs << "\n"
       << "batch_size = " << batch_size << "\n"
       << "patience = " << patience << "\n"
       << "augment = " << (augment ? 1 : 0) << "\n"
       << "variant = " << variant << "\n"
       << "base_width = " << base_width << "\n"
       << "bottleneck_channels = " << bottleneck_channels << "\n"
       << "embed_dim = " << embed_dim << "\n"
       << "heads = " << heads << "\n"
       << "layers = " << layers << "\n"
       << "mlp_ratio = " << mlp_ratio << "\n"
       << "patch = " << patch << "\n"
       << "tile = " << tile << "\n"
       << "use_tiled = " << (use_tiled ? 1 : 0) << "\n"
       << "gelu_mlp = " << (gelu_mlp ? 1 : 0) << "\n"
       << "layernorm_sqrt = " << (layernorm_sqrt ? 1 : 0) << "\n";
    os.precision(17);
    os << "lr = " << opt.lr << "\n"
       << "beta1 = " << opt.beta1 << "\n"
       << "beta2 = " << opt.beta2 << "\n"
       << "eps = " << opt.eps << "\n"
       << "weight_decay = " << opt.weight_decay << "\n";
    return os.str();
}

void RunConfig::set(const std::string& key, const std::string& value) {
    try {
        if (key == "seed") seed = std::stoull(value);
        else if (key == "data_dir") data_dir = value;
        else if (key == "out_dir") out_dir = value;
        else if (key == "patients") patients = std::stoll(value);
        else if (key == "image_size") image_size = std::stoll(value);
        else if (key == "slices") slices = std::stoll(value);
        else if (key == "epochs") epochs = std::stoll(value);
        else if (key == "batch_size") batch_size = std::stoll(value);
        else if (key == "patience") patience = std::stoll(value);
        else if (key == "augment") augment = std::stoll(value) != 0;
        else if (key == "variant") variant = value;
        else if (key == "base_width") base_width = std::stoll(value);
        else if (key == "bottleneck_channels") bottleneck_channels = std::stoll(value);
        else if (key == "embed_dim") embed_dim = std::stoll(value);
        else if (key == "heads") heads = std::stoll(value);
        else if (key == "layers") layers = std::stoll(value);
        else if (key == "mlp_ratio") mlp_ratio = std::stoll(value);
        else if (key == "patch") patch = std::stoll(value);
        else if (key == "tile") tile = std::stoll(value);
        else if (key == "use_tiled") use_tiled = std::stoll(value) != 0;
        else if (key == "gelu_mlp") gelu_mlp = std::stoll(value) != 0;
        else if (key == "layernorm_sqrt") layernorm_sqrt = std::stoll(value) != 0;
        else if (key == "lr") opt.lr = std::stod(value);
        else if (key == "beta1") opt.beta1 = std::stod(value);
        else if (key == "beta2") opt.beta2 = std::stod(value);
        else if (key == "eps") opt.eps = std::stod(value);
        else if (key == "weight_decay") opt.weight_decay = std::stod(value);
        else throw ContractError("unknown config key: " + key);
    } catch (const std::invalid_argument&) {
        throw ContractError("bad value for config key " + key + ": " + value);
    } catch (const std::out_of_range&) {
        throw ContractError("out-of-range value for config key " + key + ": " + value);
    }
}

void RunConfig::validate() const {
    if (patients < 3) throw ContractError("need at least 3 patients (one per split)");
    if (slices < 1) throw ContractError("slices must be >= 1");
    if (epochs < 1) throw ContractError("epochs must be >= 1");
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (patience < 0) throw ContractError("patience must be >= 0");
    model_config_for(*this, "tavit-t1w-flair").validate();
}

RunConfig read_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open config: " + path.string());
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            s.erase(0, s.find_first_not_of(" \t"));
            auto e = s.find_last_not_of(" \t\r");
            s.erase(e == std::string::npos ? 0 : e + 1);
            return s;
        };
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("malformed config line " + std::to_string(lineno) + " in " +
                              path.string() + ": " + line);
        cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void write_run_config(const std::filesystem::path& path, const RunConfig& cfg) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw FormatError("cannot write config: " + path.string());
        f << cfg.serialize();
    }
    std::filesystem::rename(tmp, path);
}

TransformerConfig transformer_config(const RunConfig& cfg) {
    TransformerConfig tf;
    tf.embed_dim = cfg.embed_dim;
    tf.heads = cfg.heads;
    tf.layers = cfg.layers;
    tf.mlp_ratio = cfg.mlp_ratio;
    tf.patch = cfg.patch;
    tf.tile = cfg.tile;
    tf.use_tiled = cfg.use_tiled;
    tf.gelu_mlp = cfg.gelu_mlp;
    tf.layernorm_sqrt = cfg.layernorm_sqrt;
    return tf;
}

int64_t variant_input_channels(const std::string& variant) {
    if (variant == "mprvit" || variant == "tavit-t1w-flair" || variant == "seg") return 2;
    if (variant == "tavit-t1w" || variant == "latent") return 1;
    throw ContractError("unknown variant: " + variant);
}

ModelConfig model_config_for(const RunConfig& cfg, const std::string& variant) {
    const int64_t in_ch = variant_input_channels(variant);
    const bool conditioned = variant.rfind("tavit-", 0) == 0;
    const auto tf = transformer_config(cfg);
    return conditioned
               ? tavit_config(in_ch, cfg.image_size, cfg.base_width, cfg.bottleneck_channels, tf)
               : mprvit_config(in_ch, cfg.image_size, cfg.base_width, cfg.bottleneck_channels, tf);
}

std::filesystem::path checkpoint_path(const RunConfig& cfg, const std::string& name) {
    return cfg.out_dir / "ckpt" / (name + ".tavc");
}

// ---------------------------------------------------------------------------
// Dataset generation

uint64_t cmd_gen_data(const RunConfig& cfg) {
    cfg.validate();
    std::filesystem::create_directories(cfg.data_dir);

    std::vector<std::string> ids;
    for (int64_t i = 0; i < cfg.patients; ++i) {
        std::ostringstream os;
        os << "p" << std::setw(4) << std::setfill('0') << i;
        ids.push_back(os.str());
    }
    const DatasetSplit split = split_patients(ids, {0.8, 0.1, 0.1}, cfg.seed);
    auto split_of = [&](const std::string& id) -> std::string {
        if (std::find(split.val.begin(), split.val.end(), id) != split.val.end()) return "val";
        if (std::find(split.test.begin(), split.test.end(), id) != split.test.end()) return "test";
        return "train";
    };

    Manifest manifest;
    manifest.seed = cfg.seed;
    manifest.image_size = cfg.image_size;
    manifest.slices = cfg.slices;
    PhantomConfig pcfg;
    pcfg.slices = cfg.slices;
    pcfg.size = cfg.image_size;
    for (const auto& id : ids) {
        Phantom ph = generate_phantom(derive_seed(cfg.seed, "patient." + id), pcfg);
        ManifestEntry e;
        e.patient = id;
        e.split = split_of(id);
        e.t1w = id + "_t1w.tav";
        e.flair = id + "_flair.tav";
        e.t1c = id + "_t1c.tav";
        e.seg = id + "_seg.tav";
        write_volume(cfg.data_dir / e.t1w, ph.t1w);
        write_volume(cfg.data_dir / e.flair, ph.flair);
        write_volume(cfg.data_dir / e.t1c, ph.t1c);
        write_segmap(cfg.data_dir / e.seg, ph.seg);
        manifest.entries.push_back(std::move(e));
    }
    write_manifest(cfg.data_dir / "manifest.txt", manifest);
    const uint64_t h = dataset_hash(cfg.data_dir);
    std::cout << "dataset_hash " << std::hex << h << std::dec << "\n";
    return h;
}

// ---------------------------------------------------------------------------
// Training

std::vector<PatientData> load_split(const RunConfig& cfg, const std::string& split,
                                    bool with_latents) {
    const Manifest m = read_manifest(cfg.data_dir / "manifest.txt");
    const auto entries = m.in_split(split);
    if (entries.empty()) throw ContractError("empty split: " + split);
    std::vector<PatientData> out;
    for (const auto* e : entries) {
        PatientData pd;
        pd.patient = e->patient;
        pd.t1w = read_volume(cfg.data_dir / e->t1w);
        pd.flair = read_volume(cfg.data_dir / e->flair);
        pd.t1c = read_volume(cfg.data_dir / e->t1c);
        pd.seg = read_segmap(cfg.data_dir / e->seg);
        if (with_latents) {
            const auto lp = cfg.out_dir / "latents" / (e->patient + ".tav");
            if (!std::filesystem::exists(lp))
                throw ContractError("latent missing for patient " + e->patient +
                                    "; run `train latent` first");
            pd.latent = read_volume(lp);
        }
        out.push_back(std::move(pd));
    }
    return out;
}

namespace {

std::string stage_name(Stage stage) {
    switch (stage) {
        case Stage::segmentation: return "seg";
        case Stage::latent: return "latent";
        case Stage::synthesis: return "synthesis";
    }
    return "?";
}

double run_epoch(Model<float>& model, const SliceBatcher& batcher, uint64_t epoch_seed,
                 bool augment, AdamW<float>* opt) {
    double total = 0;
    int64_t count = 0;
    const bool conditioned = model.is_conditioned();
    for (const auto& batch : batcher.epoch_batches(epoch_seed, augment)) {
        const int64_t B = batch.inputs->shape[0];
        if (opt) {
            Tape<float> tape;
            TapeScope<float> scope(tape);
            auto pred = model.forward(batch.inputs, conditioned ? batch.latent : nullptr,
                                      /*training=*/true);
            auto loss = l1_loss(pred, batch.target);
            opt->zero_grad();
            tape.backward(loss);
            opt->step();
            total += double(loss->data[0]) * double(B);
        } else {
            auto pred = model.forward(batch.inputs, conditioned ? batch.latent : nullptr,
                                      /*training=*/false);
            auto loss = l1_loss(pred, batch.target);
            total += double(loss->data[0]) * double(B);
        }
        count += B;
    }
    return total / double(count);
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<EpochLoss>& history) {
    std::ostringstream os;
    os << "epoch,train_l1,val_l1\n";
    os.precision(12);
    for (const auto& e : history) os << e.epoch << "," << e.train_l1 << "," << e.val_l1 << "\n";
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw FormatError("cannot write loss history: " + path.string());
        f << os.str();
    }
    std::filesystem::rename(tmp, path);
}

TrainResult train_model(const RunConfig& cfg, Model<float>& model, const std::string& name,
                        const SliceBatcher& train, const SliceBatcher& val) {
    AdamW<float> opt(model.store.params, cfg.opt);
    TrainResult res;
    res.best_val = std::numeric_limits<double>::infinity();
    const auto ckpt = checkpoint_path(cfg, name);
    std::filesystem::create_directories(ckpt.parent_path());
    for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const uint64_t eseed = derive_seed(cfg.seed, name + ".epoch." + std::to_string(epoch));
        EpochLoss el;
        el.epoch = epoch;
        el.train_l1 = run_epoch(model, train, eseed, cfg.augment, &opt);
        el.val_l1 = run_epoch(model, val, derive_seed(cfg.seed, name + ".val"), false, nullptr);
        res.history.push_back(el);
        if (el.val_l1 < res.best_val) {
            res.best_val = el.val_l1;
            res.best_epoch = epoch;
            save_checkpoint(ckpt, model, cfg.seed, uint32_t(epoch));
        }
        std::cout << name << " epoch " << epoch << " train_l1 " << el.train_l1 << " val_l1 "
                  << el.val_l1 << "\n";
        if (early_stop(res.history, cfg.patience)) {
            std::cout << name << " early stop at epoch " << epoch << "\n";
            break;
        }
    }
    write_loss_csv(cfg.out_dir / ("loss_" + name + ".csv"), res.history);
    write_run_config(cfg.out_dir / ("config_" + name + ".txt"), cfg);
    return res;
}

SegMap predict_segmentation(Model<float>& seg_model, const PatientData& pd) {
    const int64_t d = pd.t1w.extents[0], h = pd.t1w.extents[1], w = pd.t1w.extents[2];
    SegMap pred;
    pred.extents = pd.t1w.extents;
    pred.patient = pd.patient;
    pred.labels.resize(size_t(d * h * w));
    const int64_t plane = h * w;
    for (int64_t z = 0; z < d; ++z) {
        auto in = make_tensor<float>({1, 2, h, w});
        for (int64_t i = 0; i < plane; ++i) {
            in->data[i] = to_model_range(pd.t1w.values[z * plane + i]);
            in->data[plane + i] = to_model_range(pd.flair.values[z * plane + i]);
        }
        auto out = seg_model.forward(in, nullptr, /*training=*/false);
        for (int64_t i = 0; i < plane; ++i)
            pred.labels[size_t(z * plane + i)] = seg_level_to_label(out->data[i]);
    }
    return pred;
}

Volume extract_patient_latent(Model<float>& latent_model, const SegMap& seg) {
    const int64_t d = seg.extents[0], h = seg.extents[1], w = seg.extents[2];
    const int64_t plane = h * w;
    Volume lat;
    lat.patient = seg.patient;
    lat.modality = "LATENT";
    for (int64_t z = 0; z < d; ++z) {
        auto in = make_tensor<float>({1, 1, h, w});
        for (int64_t i = 0; i < plane; ++i)
            in->data[i] = seg_label_to_level(seg.labels[size_t(z * plane + i)]);
        auto t = latent_model.extract_latent(in);  // (1,C,h/4,w/4)
        if (lat.extents.empty()) {
            lat.extents = {d, t->shape[1], t->shape[2], t->shape[3]};
            lat.values.resize(size_t(lat.numel()));
        }
        std::copy(t->data.begin(), t->data.end(),
                  lat.values.begin() + size_t(z * t->numel()));
    }
    return lat;
}

void materialize_latents(const RunConfig& cfg, Model<float>& latent_model) {
    const auto seg_ckpt = checkpoint_path(cfg, "seg");
    if (!std::filesystem::exists(seg_ckpt))
        throw ContractError("segmentation checkpoint missing at " + seg_ckpt.string() +
                            "; run `train seg` first");
    Model<float> seg_model(model_config_for(cfg, "seg"), cfg.seed);
    load_checkpoint(seg_ckpt, seg_model);

    std::filesystem::create_directories(cfg.out_dir / "latents");
    std::filesystem::create_directories(cfg.out_dir / "seg_pred");
    const Manifest m = read_manifest(cfg.data_dir / "manifest.txt");
    for (const auto& e : m.entries) {
        PatientData pd;
        pd.patient = e.patient;
        pd.t1w = read_volume(cfg.data_dir / e.t1w);
        pd.flair = read_volume(cfg.data_dir / e.flair);
        pd.seg = read_segmap(cfg.data_dir / e.seg);
        pd.seg.patient = e.patient;
        SegMap source = pd.seg;
        if (e.split == "test") {
            // test-time latents come from the predicted segmentation
            source = predict_segmentation(seg_model, pd);
            write_segmap(cfg.out_dir / "seg_pred" / (e.patient + ".tav"), source);
        }
        write_volume(cfg.out_dir / "latents" / (e.patient + ".tav"),
                     extract_patient_latent(latent_model, source));
    }
}

}  // namespace

TrainResult cmd_train(const RunConfig& cfg, Stage stage) {
    cfg.validate();
    std::filesystem::create_directories(cfg.out_dir);
    switch (stage) {
        case Stage::segmentation: {
            Model<float> model(model_config_for(cfg, "seg"), cfg.seed);
            SliceBatcher train(load_split(cfg, "train", false), stage, 2, cfg.batch_size);
            SliceBatcher val(load_split(cfg, "val", false), stage, 2, cfg.batch_size);
            return train_model(cfg, model, "seg", train, val);
        }
        case Stage::latent: {
            const auto seg_ckpt = checkpoint_path(cfg, "seg");
            if (!std::filesystem::exists(seg_ckpt))
                throw ContractError("segmentation checkpoint missing at " + seg_ckpt.string() +
                                    "; run `train seg` first");
            Model<float> model(model_config_for(cfg, "latent"), cfg.seed);
            SliceBatcher train(load_split(cfg, "train", false), stage, 1, cfg.batch_size);
            SliceBatcher val(load_split(cfg, "val", false), stage, 1, cfg.batch_size);
            TrainResult res = train_model(cfg, model, "latent", train, val);
            // reload the best epoch before extracting latents
            load_checkpoint(checkpoint_path(cfg, "latent"), model);
            materialize_latents(cfg, model);
            return res;
        }
        case Stage::synthesis: {
            const int64_t in_ch = variant_input_channels(cfg.variant);
            if (cfg.variant.rfind("tavit-", 0) != 0 && cfg.variant != "mprvit")
                throw ContractError("unknown synthesis variant: " + cfg.variant);
            Model<float> model(model_config_for(cfg, cfg.variant), cfg.seed);
            SliceBatcher train(load_split(cfg, "train", true), stage, in_ch, cfg.batch_size);
            SliceBatcher val(load_split(cfg, "val", true), stage, in_ch, cfg.batch_size);
            return train_model(cfg, model, cfg.variant, train, val);
        }
    }
    throw ContractError("unknown training stage");
}

// ---------------------------------------------------------------------------
// Inference

void cmd_infer(const RunConfig& cfg) {
    cfg.validate();
    const int64_t in_ch = variant_input_channels(cfg.variant);
    Model<float> model(model_config_for(cfg, cfg.variant), cfg.seed);
    const auto ckpt = checkpoint_path(cfg, cfg.variant);
    if (!std::filesystem::exists(ckpt))
        throw ContractError("checkpoint missing at " + ckpt.string() + "; run `train tavit --variant " +
                            cfg.variant + "` first");
    load_checkpoint(ckpt, model);

    const bool conditioned = model.is_conditioned();
    const auto pred_dir = cfg.out_dir / "pred" / cfg.variant;
    std::filesystem::create_directories(pred_dir);
    for (const auto& pd : load_split(cfg, "test", conditioned)) {
        const int64_t d = pd.t1w.extents[0], h = pd.t1w.extents[1], w = pd.t1w.extents[2];
        const int64_t plane = h * w;
        Volume out;
        out.extents = pd.t1w.extents;
        out.values.resize(size_t(d * plane));
        out.modality = "PRED";
        out.patient = pd.patient;
        for (int64_t z = 0; z < d; ++z) {
            auto in = make_tensor<float>({1, in_ch, h, w});
            for (int64_t i = 0; i < plane; ++i)
                in->data[i] = to_model_range(pd.t1w.values[z * plane + i]);
            if (in_ch == 2)
                for (int64_t i = 0; i < plane; ++i)
                    in->data[plane + i] = to_model_range(pd.flair.values[z * plane + i]);
            Tensor<float> seg_latent;
            if (conditioned) {
                const auto& lat = *pd.latent;
                const int64_t lplane = lat.extents[1] * lat.extents[2] * lat.extents[3];
                seg_latent = make_tensor<float>({1, lat.extents[1], lat.extents[2], lat.extents[3]});
                std::copy(lat.values.begin() + size_t(z * lplane),
                          lat.values.begin() + size_t((z + 1) * lplane), seg_latent->data.begin());
            }
            auto y = model.forward(in, seg_latent, /*training=*/false);
            for (int64_t i = 0; i < plane; ++i)
                out.values[size_t(z * plane + i)] =
                    std::clamp(from_model_range(y->data[i]), 0.0f, 1.0f);
        }
        write_volume(pred_dir / (pd.patient + ".tav"), out);
    }
}

// ---------------------------------------------------------------------------
// Evaluation and reports

std::string baseline_variant(const std::vector<std::string>& variants) {
    if (variants.empty()) throw ContractError("no variants to evaluate");
    for (const auto& v : variants)
        if (v == "tavit-t1w-flair") return v;
    return variants.front();
}

MetricReport cmd_evaluate(const RunConfig& cfg, std::vector<std::string> variants) {
    cfg.validate();
    const auto pred_root = cfg.out_dir / "pred";
    if (variants.empty() && std::filesystem::exists(pred_root)) {
        for (const auto& d : std::filesystem::directory_iterator(pred_root))
            if (d.is_directory()) variants.push_back(d.path().filename().string());
        std::sort(variants.begin(), variants.end());
    }
    const bool have_seg = std::filesystem::exists(cfg.out_dir / "seg_pred");
    if (variants.empty() && !have_seg)
        throw ContractError("no predictions found under " + pred_root.string());

    const Manifest m = read_manifest(cfg.data_dir / "manifest.txt");
    std::map<std::string, Volume> references;
    std::map<std::string, SegMap> seg_gt;
    for (const auto* e : m.in_split("test")) {
        references[e->patient] = read_volume(cfg.data_dir / e->t1c);
        seg_gt[e->patient] = read_segmap(cfg.data_dir / e->seg);
    }

    std::vector<VariantPredictions> preds;
    for (const auto& v : variants) {
        VariantPredictions vp;
        vp.name = v;
        for (const auto& [pid, ref] : references) {
            const auto p = pred_root / v / (pid + ".tav");
            if (!std::filesystem::exists(p))
                throw ContractError("missing prediction for variant " + v + ", patient " + pid);
            vp.volumes[pid] = read_volume(p);
        }
        preds.push_back(std::move(vp));
    }
    if (have_seg) {
        VariantPredictions vp;
        vp.name = "seg";
        for (const auto& [pid, ref] : references)
            vp.segmaps[pid] = read_segmap(cfg.out_dir / "seg_pred" / (pid + ".tav"));
        preds.push_back(std::move(vp));
    }

    std::vector<std::string> names;
    for (const auto& p : preds) names.push_back(p.name);
    const std::string baseline = baseline_variant(variants.empty() ? names : variants);

    MetricReport report = build_report(preds, references, seg_gt, baseline);
    if (report.any_nan()) throw std::runtime_error("metric report contains NaN values");
    write_report_csv(cfg.out_dir / "report.csv", report);
    write_aggregate_csv(cfg.out_dir / "aggregates.csv", report);
    write_violin_csvs(cfg.out_dir, report);
    return report;
}

void cmd_report(const RunConfig& cfg) {
    const auto path = cfg.out_dir / "report.csv";
    MetricReport rows = read_report_csv(path);
    if (rows.rows.empty()) throw ContractError("empty report: " + path.string());
    std::vector<std::string> variants;
    for (const auto& r : rows.rows)
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end())
            variants.push_back(r.variant);
    MetricReport report = recompute_aggregates(rows, baseline_variant(variants));
    write_aggregate_csv(cfg.out_dir / "aggregates.csv", report);
    write_violin_csvs(cfg.out_dir, report);
}

}  // namespace tavit
