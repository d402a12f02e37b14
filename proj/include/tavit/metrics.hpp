#pragma once

// Volumetric evaluation metrics (overlap, error, correlation, SSIM), region
// masking, paired significance testing and report assembly.

#include <map>

#include "tavit/data.hpp"

namespace tavit {

enum class Region { whole_brain, whole_tumor };

inline const char* region_name(Region r) {
    return r == Region::whole_brain ? "whole_brain" : "whole_tumor";
}

struct RegionMask {
    std::vector<int64_t> extents;
    std::vector<uint8_t> mask;  // 0/1
    Region region = Region::whole_brain;
};

// whole_brain: any nonzero label; whole_tumor: union of labels {1,3,4};
// always derived from the ground-truth segmentation map.
RegionMask region_mask(const SegMap& seg_gt, Region region);

// Voxels outside the region set to exactly 0; metric denominators keep the
// full voxel count.
Volume mask_region(const Volume& vol, const SegMap& seg_gt, Region region);

double dsc(const RegionMask& gt, const RegionMask& pt);
double jaccard(const RegionMask& gt, const RegionMask& pt);
double rmsd(const Volume& x, const Volume& y);
double nmse(const Volume& x, const Volume& y);
double psnr(const Volume& x, const Volume& y, double max_i);  // 100 dB cap at zero MSE
double ncc(const Volume& x, const Volume& y);

struct SsimOptions {
    int window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

// Gaussian-windowed SSIM per 2-D slice over valid window positions, averaged
// over the volume.
double ssim(const Volume& x, const Volume& y, const SsimOptions& opt = {});

// Two-sided paired Student's t-test on per-patient differences. All-zero
// differences return p = 1; zero-variance nonzero differences return p = 0.
double paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

// Regularized incomplete beta function (used by the t-distribution CDF).
double incomplete_beta(double a, double b, double x);

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
    std::string variant;
    std::string patient;
    std::string region;
    std::string metric;
    double value = 0;
};

struct MetricAggregate {
    std::string variant;
    std::string region;
    std::string metric;
    double mean = 0;
    double stddev = 0;
    double p_vs_baseline = 1.0;
};

struct MetricReport {
    std::vector<MetricRow> rows;
    std::vector<MetricAggregate> aggregates;

    std::vector<double> values_for(const std::string& variant, const std::string& region,
                                   const std::string& metric) const;
    bool any_nan() const;
};

struct VariantPredictions {
    std::string name;
    std::map<std::string, Volume> volumes;  // patient -> predicted T1C
    std::map<std::string, SegMap> segmaps;  // patient -> predicted segmentation
};

// Synthesis variants get NMSE/PSNR/NCC/SSIM per region; segmentation variants
// get DSC/J over the whole-tumor masks plus RMSD over the encoded maps.
// p-values are paired t-tests against the designated baseline variant.
MetricReport build_report(const std::vector<VariantPredictions>& variants,
                          const std::map<std::string, Volume>& references,
                          const std::map<std::string, SegMap>& seg_gt,
                          const std::string& baseline);

void write_report_csv(const std::filesystem::path& path, const MetricReport& report);
void write_aggregate_csv(const std::filesystem::path& path, const MetricReport& report);
// One CSV per (metric, region) with a column per variant.
void write_violin_csvs(const std::filesystem::path& dir, const MetricReport& report);

MetricReport read_report_csv(const std::filesystem::path& path);
// Recomputes aggregates (means/stddevs/p-values) from per-patient rows.
MetricReport recompute_aggregates(const MetricReport& rows_only, const std::string& baseline);

}  // namespace tavit
