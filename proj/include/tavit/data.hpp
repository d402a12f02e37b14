#pragma once

// Synthetic phantom dataset generation, preprocessing, the TAV1 volume file
// format, dataset manifests and deterministic slice batching.

#include <filesystem>
#include <optional>

#include "tavit/tensor.hpp"

namespace tavit {

// Segmentation labels.
enum : uint8_t {
    kLabelBackground = 0,
    kLabelNecroticCore = 1,
    kLabelBrain = 2,
    kLabelEdema = 3,
    kLabelEnhancing = 4,
};

struct Volume {
    std::vector<int64_t> extents;  // (d,h,w) for image volumes
    std::vector<float> values;     // [0,1] on disk
    std::string modality;          // T1W | FLAIR | T1C | PRED | LATENT
    std::string patient;

    int64_t numel() const {
        int64_t n = 1;
        for (auto e : extents) n *= e;
        return n;
    }
};

struct SegMap {
    std::vector<int64_t> extents;  // (d,h,w)
    std::vector<uint8_t> labels;
    std::string patient;

    int64_t numel() const {
        int64_t n = 1;
        for (auto e : extents) n *= e;
        return n;
    }
};

struct Phantom {
    Volume t1w, flair, t1c;
    SegMap seg;
    bool has_tumor = false;
};

struct PhantomConfig {
    int64_t slices = 32;
    int64_t size = 64;  // final in-plane extent; generation runs at 2x then downsamples
};

// Deterministic per seed. T1C is an analytic function of T1W, FLAIR and the
// labels: enhancing rim +0.4, necrotic core -0.3, edema +0.1, brain tissue
// T1W plus a small FLAIR-dependent term.
Phantom generate_phantom(uint64_t patient_seed, const PhantomConfig& cfg);

// Catmull-Rom (a = -0.5) cubic-convolution downsampling of the in-plane
// extents by 2, edge-clamped, output clamped to [0,1].
Volume bicubic_downsample(const Volume& vol);

// Labels {0..4} <-> intensity levels {-1,-0.5,0,0.5,1}.
Tensor<float> seg_encode(const SegMap& seg);
SegMap seg_decode(const Tensor<float>& img, const std::string& patient);
float seg_label_to_level(uint8_t label);
uint8_t seg_level_to_label(float value);

struct DatasetSplit {
    std::vector<std::string> train, val, test;
};

// Deterministic patient-disjoint split; counts by largest remainder.
DatasetSplit split_patients(const std::vector<std::string>& ids,
                            const std::vector<double>& fractions, uint64_t seed);

// TAV1 container.
void write_volume(const std::filesystem::path& path, const Volume& vol);
void write_segmap(const std::filesystem::path& path, const SegMap& seg);
Volume read_volume(const std::filesystem::path& path);
SegMap read_segmap(const std::filesystem::path& path);

struct ManifestEntry {
    std::string patient;
    std::string split;  // train | val | test
    std::filesystem::path t1w, flair, t1c, seg;
};

struct Manifest {
    uint64_t seed = 0;
    int64_t image_size = 0;
    int64_t slices = 0;
    std::vector<ManifestEntry> entries;

    std::vector<const ManifestEntry*> in_split(const std::string& split) const;
};

void write_manifest(const std::filesystem::path& path, const Manifest& m);
Manifest read_manifest(const std::filesystem::path& path);

// Hash over the manifest and every file it references.
uint64_t dataset_hash(const std::filesystem::path& data_dir);

// ---------------------------------------------------------------------------
// Batching

enum class Stage { segmentation, latent, synthesis };

struct PatientData {
    std::string patient;
    Volume t1w, flair, t1c;
    SegMap seg;
    std::optional<Volume> latent;  // (d, c, h/4, w/4), synthesis stage only
};

struct SliceBatch {
    Tensor<float> inputs;          // (B,C,h,w) in [-1,1]
    Tensor<float> target;          // (B,1,h,w) in [-1,1]
    Tensor<float> latent;          // (B,c,h/4,w/4) or null
    std::vector<int64_t> patients; // index into the split's patient list
    std::vector<int64_t> zs;
};

// In-memory split with a deterministic batching iterator.
class SliceBatcher {
public:
    // input_channels 1: T1W only; 2: T1W+FLAIR. For the latent stage the
    // encoded segmentation map is both input and target.
    SliceBatcher(std::vector<PatientData> patients, Stage stage, int64_t input_channels,
                 int64_t batch_size);

    // Deterministic order for a given epoch seed; augment flips slice pairs
    // (inputs, target, seg-derived latent) jointly with probability 0.5.
    std::vector<SliceBatch> epoch_batches(uint64_t epoch_seed, bool augment) const;

    int64_t slice_count() const { return int64_t(index_.size()); }
    const std::vector<PatientData>& patients() const { return patients_; }

private:
    std::vector<PatientData> patients_;
    Stage stage_;
    int64_t input_channels_;
    int64_t batch_size_;
    std::vector<std::pair<int64_t, int64_t>> index_;  // (patient, z)
};

// Maps [0,1] disk values to the [-1,1] model range and back.
inline float to_model_range(float v) { return 2.0f * v - 1.0f; }
inline float from_model_range(float v) { return 0.5f * (v + 1.0f); }

}  // namespace tavit
