#include "tavit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace tavit {

namespace {

void check_extents(const std::vector<int64_t>& a, const std::vector<int64_t>& b,
                   const char* what) {
    if (a != b)
        throw ContractError(std::string(what) + " extent mismatch: " + shape_str(a) + " vs " +
                            shape_str(b));
}

}  // namespace

RegionMask region_mask(const SegMap& seg_gt, Region region) {
    RegionMask m;
    m.extents = seg_gt.extents;
    m.region = region;
    m.mask.resize(seg_gt.labels.size());
    for (size_t i = 0; i < seg_gt.labels.size(); ++i) {
        const uint8_t l = seg_gt.labels[i];
        const bool in = (region == Region::whole_brain)
                            ? l != kLabelBackground
                            : (l == kLabelNecroticCore || l == kLabelEdema || l == kLabelEnhancing);
        m.mask[i] = in ? 1 : 0;
    }
    return m;
}

Volume mask_region(const Volume& vol, const SegMap& seg_gt, Region region) {
    check_extents(vol.extents, seg_gt.extents, "mask_region");
    Volume out = vol;
    const RegionMask m = region_mask(seg_gt, region);
    for (size_t i = 0; i < out.values.size(); ++i)
        if (!m.mask[i]) out.values[i] = 0.0f;
    return out;
}

double dsc(const RegionMask& gt, const RegionMask& pt) {
    check_extents(gt.extents, pt.extents, "dsc");
    int64_t inter = 0, a = 0, b = 0;
    for (size_t i = 0; i < gt.mask.size(); ++i) {
        a += gt.mask[i] != 0;
        b += pt.mask[i] != 0;
        inter += (gt.mask[i] && pt.mask[i]);
    }
    if (a + b == 0) return 1.0;  // agreement on absence
    return 2.0 * double(inter) / double(a + b);
}

double jaccard(const RegionMask& gt, const RegionMask& pt) {
    check_extents(gt.extents, pt.extents, "jaccard");
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < gt.mask.size(); ++i) {
        inter += (gt.mask[i] && pt.mask[i]);
        uni += (gt.mask[i] || pt.mask[i]);
    }
    if (uni == 0) return 1.0;
    return double(inter) / double(uni);
}

double rmsd(const Volume& x, const Volume& y) {
    return std::sqrt(nmse(x, y));
}

double nmse(const Volume& x, const Volume& y) {
    check_extents(x.extents, y.extents, "nmse");
    const int64_t n = x.numel();
    if (n == 0) throw ContractError("nmse on empty volume");
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(x.values[i]) - double(y.values[i]);
        acc += d * d;
    }
    return acc / double(n);
}

double psnr(const Volume& x, const Volume& y, double max_i) {
    if (max_i <= 0) throw ContractError("psnr requires max_i > 0");
    const double mse = nmse(x, y);
    if (mse == 0) return 100.0;  // documented cap
    return 10.0 * std::log10(max_i * max_i / mse);
}

double ncc(const Volume& x, const Volume& y) {
    check_extents(x.extents, y.extents, "ncc");
    const int64_t n = x.numel();
    double mx = 0, my = 0;
    for (int64_t i = 0; i < n; ++i) {
        mx += x.values[i];
        my += y.values[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double dx = double(x.values[i]) - mx;
        const double dy = double(y.values[i]) - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0) throw ContractError("ncc: undefined correlation on constant input");
    return sxy / (std::sqrt(sxx) * std::sqrt(syy));
}

double ssim(const Volume& x, const Volume& y, const SsimOptions& opt) {
    check_extents(x.extents, y.extents, "ssim");
    if (x.extents.size() != 3) throw ContractError("ssim expects a 3-D volume");
    const int64_t d = x.extents[0], h = x.extents[1], w = x.extents[2];
    const int win = opt.window;
    if (win > h || win > w)
        throw ContractError("ssim window " + std::to_string(win) + " larger than slice " +
                            std::to_string(h) + "x" + std::to_string(w));

    // normalized Gaussian window
    std::vector<double> g(size_t(win) * win);
    const int half = win / 2;
    double gsum = 0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double dy = i - half, dx = j - half;
            g[size_t(i) * win + j] = std::exp(-(dx * dx + dy * dy) / (2 * opt.sigma * opt.sigma));
            gsum += g[size_t(i) * win + j];
        }
    for (auto& v : g) v /= gsum;

    const double c1 = (opt.k1 * opt.dynamic_range) * (opt.k1 * opt.dynamic_range);
    const double c2 = (opt.k2 * opt.dynamic_range) * (opt.k2 * opt.dynamic_range);

    double total = 0;
    int64_t count = 0;
    for (int64_t z = 0; z < d; ++z) {
        const float* xs = x.values.data() + z * h * w;
        const float* ys = y.values.data() + z * h * w;
        for (int64_t oy = 0; oy + win <= h; ++oy)
            for (int64_t ox = 0; ox + win <= w; ++ox) {
                double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double wgt = g[size_t(i) * win + j];
                        const double xv = xs[(oy + i) * w + ox + j];
                        const double yv = ys[(oy + i) * w + ox + j];
                        mx += wgt * xv;
                        my += wgt * yv;
                        sxx += wgt * xv * xv;
                        syy += wgt * yv * yv;
                        sxy += wgt * xv * yv;
                    }
                sxx -= mx * mx;
                syy -= my * my;
                sxy -= mx * my;
                const double val = ((2 * mx * my + c1) * (2 * sxy + c2)) /
                                   ((mx * mx + my * my + c1) * (sxx + syy + c2));
                total += val;
                ++count;
            }
    }
    return total / double(count);
}

// ---------------------------------------------------------------------------
// Paired t-test

namespace {

// Lentz continued fraction for the regularized incomplete beta
double betacf(double a, double b, double x) {
    const int kMaxIter = 300;
    const double eps = 3e-14, fpmin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double dd = 1.0 - qab * x / qap;
    if (std::abs(dd) < fpmin) dd = fpmin;
    dd = 1.0 / dd;
    double h = dd;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        dd = 1.0 + aa * dd;
        if (std::abs(dd) < fpmin) dd = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        dd = 1.0 / dd;
        h *= dd * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        dd = 1.0 + aa * dd;
        if (std::abs(dd) < fpmin) dd = fpmin;
        c = 1.0 + aa / c;
        if (std::abs(c) < fpmin) c = fpmin;
        dd = 1.0 / dd;
        const double del = dd * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ContractError("paired_ttest requires equal-length samples");
    const int64_t n = int64_t(a.size());
    if (n < 2) throw ContractError("paired_ttest requires at least 2 pairs");
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += a[i] - b[i];
    mean /= double(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = (a[i] - b[i]) - mean;
        var += d * d;
    }
    var /= double(n - 1);
    if (var == 0.0) {
        return mean == 0.0 ? 1.0 : 0.0;  // degenerate: no spread in the differences
    }
    const double t = mean / std::sqrt(var / double(n));
    const double df = double(n - 1);
    return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

// ---------------------------------------------------------------------------
// Report assembly

std::vector<double> MetricReport::values_for(const std::string& variant, const std::string& region,
                                             const std::string& metric) const {
    std::vector<double> out;
    for (const auto& r : rows)
        if (r.variant == variant && r.region == region && r.metric == metric)
            out.push_back(r.value);
    return out;
}

bool MetricReport::any_nan() const {
    for (const auto& r : rows)
        if (std::isnan(r.value)) return true;
    for (const auto& a : aggregates)
        if (std::isnan(a.mean) || std::isnan(a.stddev)) return true;
    return false;
}

namespace {

Volume encoded_seg_volume(const SegMap& seg) {
    Volume v;
    v.extents = seg.extents;
    v.values.resize(seg.labels.size());
    // intensity levels mapped to [0,1]
    for (size_t i = 0; i < seg.labels.size(); ++i)
        v.values[i] = 0.5f * (seg_label_to_level(seg.labels[i]) + 1.0f);
    return v;
}

}  // namespace

MetricReport build_report(const std::vector<VariantPredictions>& variants,
                          const std::map<std::string, Volume>& references,
                          const std::map<std::string, SegMap>& seg_gt,
                          const std::string& baseline) {
    // consistent patient sets across variants
    std::set<std::string> patients;
    for (const auto& [pid, vol] : references) patients.insert(pid);
    for (const auto& v : variants) {
        std::set<std::string> vp;
        for (const auto& [pid, vol] : v.volumes) vp.insert(pid);
        for (const auto& [pid, s] : v.segmaps) vp.insert(pid);
        if (vp != patients)
            throw ContractError("variant " + v.name + " patient set does not match references");
    }
    for (const auto& pid : patients)
        if (!seg_gt.count(pid))
            throw ContractError("missing ground-truth segmentation for patient " + pid);

    MetricReport report;
    for (const auto& v : variants) {
        for (const auto& pid : patients) {
            const SegMap& gt_seg = seg_gt.at(pid);
            if (!v.volumes.empty()) {
                const Volume& pred = v.volumes.at(pid);
                const Volume& ref = references.at(pid);
                for (Region region : {Region::whole_brain, Region::whole_tumor}) {
                    const Volume mp = mask_region(pred, gt_seg, region);
                    const Volume mr = mask_region(ref, gt_seg, region);
                    double max_i = 0;
                    for (float x : mr.values) max_i = std::max(max_i, double(x));
                    if (max_i <= 0) max_i = 1.0;
                    auto push = [&](const char* metric, double value) {
                        report.rows.push_back({v.name, pid, region_name(region), metric, value});
                    };
                    push("nmse", nmse(mp, mr));
                    push("psnr", psnr(mp, mr, max_i));
                    double ncc_v;
                    try {
                        ncc_v = ncc(mp, mr);
                    } catch (const ContractError&) {
                        ncc_v = std::numeric_limits<double>::quiet_NaN();
                    }
                    push("ncc", ncc_v);
                    push("ssim", ssim(mp, mr));
                }
            }
            if (!v.segmaps.empty()) {
                const SegMap& pred_seg = v.segmaps.at(pid);
                const RegionMask gt_m = region_mask(gt_seg, Region::whole_tumor);
                const RegionMask pt_m = region_mask(pred_seg, Region::whole_tumor);
                report.rows.push_back(
                    {v.name, pid, region_name(Region::whole_tumor), "dsc", dsc(gt_m, pt_m)});
                report.rows.push_back(
                    {v.name, pid, region_name(Region::whole_tumor), "jaccard", jaccard(gt_m, pt_m)});
                report.rows.push_back(
                    {v.name, pid, region_name(Region::whole_tumor), "rmsd",
                     rmsd(encoded_seg_volume(pred_seg), encoded_seg_volume(gt_seg))});
            }
        }
    }
    MetricReport full = recompute_aggregates(report, baseline);
    return full;
}

MetricReport recompute_aggregates(const MetricReport& rows_only, const std::string& baseline) {
    MetricReport report;
    report.rows = rows_only.rows;
    // preserve first-appearance order of (variant, region, metric)
    std::vector<std::tuple<std::string, std::string, std::string>> keys;
    for (const auto& r : report.rows) {
        auto key = std::make_tuple(r.variant, r.region, r.metric);
        if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
    }
    for (const auto& [variant, region, metric] : keys) {
        const auto vals = report.values_for(variant, region, metric);
        MetricAggregate agg;
        agg.variant = variant;
        agg.region = region;
        agg.metric = metric;
        double mean = 0;
        for (double v : vals) mean += v;
        mean /= double(vals.size());
        double var = 0;
        for (double v : vals) var += (v - mean) * (v - mean);
        agg.mean = mean;
        agg.stddev = vals.size() > 1 ? std::sqrt(var / double(vals.size() - 1)) : 0.0;
        const auto base_vals = report.values_for(baseline, region, metric);
        if (base_vals.size() == vals.size() && vals.size() >= 2)
            agg.p_vs_baseline = paired_ttest(vals, base_vals);
        report.aggregates.push_back(agg);
    }
    return report;
}

// ---------------------------------------------------------------------------
// CSV emission

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw FormatError("cannot write: " + path.string());
        f << text;
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const MetricReport& report) {
    std::ostringstream os;
    os << "variant,patient,region,metric,value\n";
    for (const auto& r : report.rows)
        os << r.variant << "," << r.patient << "," << r.region << "," << r.metric << ","
           << fmt(r.value) << "\n";
    write_text_atomic(path, os.str());
}

void write_aggregate_csv(const std::filesystem::path& path, const MetricReport& report) {
    std::ostringstream os;
    os << "variant,region,metric,mean,std,p_vs_baseline\n";
    for (const auto& a : report.aggregates)
        os << a.variant << "," << a.region << "," << a.metric << "," << fmt(a.mean) << ","
           << fmt(a.stddev) << "," << fmt(a.p_vs_baseline) << "\n";
    write_text_atomic(path, os.str());
}

void write_violin_csvs(const std::filesystem::path& dir, const MetricReport& report) {
    std::set<std::pair<std::string, std::string>> mr;  // (metric, region)
    std::vector<std::string> variants;
    std::vector<std::string> patients;
    for (const auto& r : report.rows) {
        mr.insert({r.metric, r.region});
        if (std::find(variants.begin(), variants.end(), r.variant) == variants.end())
            variants.push_back(r.variant);
        if (std::find(patients.begin(), patients.end(), r.patient) == patients.end())
            patients.push_back(r.patient);
    }
    for (const auto& [metric, region] : mr) {
        std::ostringstream os;
        os << "patient";
        std::vector<std::string> present;
        for (const auto& v : variants)
            if (!report.values_for(v, region, metric).empty()) {
                present.push_back(v);
                os << "," << v;
            }
        os << "\n";
        for (const auto& pid : patients) {
            bool any = false;
            std::ostringstream row;
            row << pid;
            for (const auto& v : present) {
                double val = std::numeric_limits<double>::quiet_NaN();
                for (const auto& r : report.rows)
                    if (r.variant == v && r.patient == pid && r.region == region && r.metric == metric) {
                        val = r.value;
                        any = true;
                        break;
                    }
                row << "," << fmt(val);
            }
            if (any) os << row.str() << "\n";
        }
        write_text_atomic(dir / ("violin_" + metric + "_" + region + ".csv"), os.str());
    }
}

MetricReport read_report_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open report: " + path.string());
    MetricReport report;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        MetricRow r;
        std::string value;
        std::getline(is, r.variant, ',');
        std::getline(is, r.patient, ',');
        std::getline(is, r.region, ',');
        std::getline(is, r.metric, ',');
        std::getline(is, value, ',');
        r.value = std::stod(value);
        report.rows.push_back(std::move(r));
    }
    return report;
}

}  // namespace tavit
