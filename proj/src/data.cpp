#include "tavit/data.hpp"

#include <array>
#include <cmath>
#include <fstream>

#include "tavit/io.hpp"

namespace tavit {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct SmoothTexture {
    // low-frequency sinusoid mixture, band-limited so the 4x bottleneck can
    // represent it
    struct Wave {
        double fx, fy, fz, phase, amp;
    };
    std::array<Wave, 3> waves;
    double base;

    static SmoothTexture make(Rng& rng, double base) {
        SmoothTexture t;
        t.base = base;
        for (auto& w : t.waves) {
            const double f = rng.uniform(0.8, 2.6);
            const double theta = rng.uniform(0, 2 * kPi);
            w.fx = f * std::cos(theta);
            w.fy = f * std::sin(theta);
            w.fz = rng.uniform(0.3, 1.0);
            w.phase = rng.uniform(0, 2 * kPi);
            w.amp = rng.uniform(0.03, 0.07);
        }
        return t;
    }
    double eval(double u, double v, double zn) const {
        double s = base;
        for (const auto& w : waves)
            s += w.amp * std::sin(2 * kPi * (w.fx * u + w.fy * v + w.fz * zn) + w.phase);
        return s;
    }
};

struct PhantomGeometry {
    double cx, cy, ax, ay;      // brain ellipse
    bool tumor = false;
    double tx, ty, tz;          // tumor center (normalized)
    double re, rz;              // edema radii (in-plane fraction, z fraction)

    double brain_profile(double zn) const {
        const double q = (zn - 0.5) / 0.48;
        const double s = 1.0 - q * q;
        return s > 0 ? std::sqrt(s) : 0.0;
    }
    bool inside_brain(double u, double v, double zn) const {
        const double p = brain_profile(zn);
        if (p < 0.2) return false;
        const double du = (u - cx) / (ax * p);
        const double dv = (v - cy) / (ay * p);
        return du * du + dv * dv <= 1.0;
    }
    // 0 = outside tumor; otherwise normalized radial distance in (0,1]
    double tumor_rho(double u, double v, double zn) const {
        if (!tumor) return 0.0;
        const double du = (u - tx) / re;
        const double dv = (v - ty) / re;
        const double dz = (zn - tz) / rz;
        const double r2 = du * du + dv * dv + dz * dz;
        return r2 <= 1.0 ? std::sqrt(r2) : 0.0;
    }
    uint8_t label_at(double u, double v, double zn) const {
        if (!inside_brain(u, v, zn)) return kLabelBackground;
        if (tumor) {
            const double du = (u - tx) / re;
            const double dv = (v - ty) / re;
            const double dz = (zn - tz) / rz;
            const double r = std::sqrt(du * du + dv * dv + dz * dz);
            if (r <= 0.35) return kLabelNecroticCore;
            if (r <= 0.62) return kLabelEnhancing;
            if (r <= 1.0) return kLabelEdema;
        }
        return kLabelBrain;
    }
};

PhantomGeometry make_geometry(Rng& rng) {
    PhantomGeometry g;
    g.cx = 0.5 + rng.uniform(-0.03, 0.03);
    g.cy = 0.5 + rng.uniform(-0.03, 0.03);
    g.ax = rng.uniform(0.32, 0.38);
    g.ay = rng.uniform(0.28, 0.34);
    g.tumor = rng.bernoulli(0.9);
    // draw tumor parameters unconditionally so the stream stays aligned
    const double angle = rng.uniform(0, 2 * kPi);
    const double rad = rng.uniform(0.15, 0.45);
    g.tx = g.cx + rad * g.ax * std::cos(angle);
    g.ty = g.cy + rad * g.ay * std::sin(angle);
    g.tz = rng.uniform(0.4, 0.6);
    g.re = rng.uniform(0.11, 0.16);
    g.rz = rng.uniform(0.28, 0.42);
    return g;
}

// Analytic contrast rule. The enhancing rim and necrotic core are invisible
// in T1W/FLAIR (they carry plain brain texture) so the segmentation latent is
// genuinely informative for T1C synthesis; edema is bright in FLAIR.
void sample_voxel(const PhantomGeometry& g, const SmoothTexture& t1w_tex,
                  const SmoothTexture& flair_tex, double u, double v, double zn,
                  float* t1w, float* flair, float* t1c) {
    const uint8_t label = g.label_at(u, v, zn);
    double vt1w, vflair, vt1c;
    if (label == kLabelBackground) {
        vt1w = vflair = vt1c = 0.02;
    } else {
        vt1w = t1w_tex.eval(u, v, zn);
        vflair = flair_tex.eval(u, v, zn);
        if (label == kLabelEdema) vflair += 0.25;
        switch (label) {
            case kLabelEnhancing: vt1c = vt1w + 0.4; break;
            case kLabelNecroticCore: vt1c = vt1w - 0.3; break;
            case kLabelEdema: vt1c = vt1w + 0.1; break;
            default: vt1c = vt1w + 0.3 * (vflair - 0.1); break;
        }
    }
    auto clamp01 = [](double x) { return float(std::min(1.0, std::max(0.0, x))); };
    *t1w = clamp01(vt1w);
    *flair = clamp01(vflair);
    *t1c = clamp01(vt1c);
}

void minmax_normalize(Volume& v) {
    float lo = v.values[0], hi = v.values[0];
    for (float x : v.values) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const float range = hi - lo;
    if (range <= 0) return;
    for (float& x : v.values) x = (x - lo) / range;
}

}  // namespace

Phantom generate_phantom(uint64_t patient_seed, const PhantomConfig& cfg) {
    Rng rng(patient_seed);
    const PhantomGeometry geo = make_geometry(rng);
    const SmoothTexture t1w_tex = SmoothTexture::make(rng, 0.55);
    const SmoothTexture flair_tex = SmoothTexture::make(rng, 0.45);

    const int64_t d = cfg.slices;
    const int64_t gen = 2 * cfg.size;  // generate at 2x, bicubic down to final

    Phantom ph;
    ph.has_tumor = geo.tumor;
    auto init_vol = [&](Volume& v, const char* modality) {
        v.extents = {d, gen, gen};
        v.values.resize(size_t(d * gen * gen));
        v.modality = modality;
    };
    init_vol(ph.t1w, "T1W");
    init_vol(ph.flair, "FLAIR");
    init_vol(ph.t1c, "T1C");

    for (int64_t z = 0; z < d; ++z) {
        const double zn = (double(z) + 0.5) / double(d);
        for (int64_t y = 0; y < gen; ++y) {
            const double v = (double(y) + 0.5) / double(gen);
            for (int64_t x = 0; x < gen; ++x) {
                const double u = (double(x) + 0.5) / double(gen);
                const size_t i = size_t((z * gen + y) * gen + x);
                sample_voxel(geo, t1w_tex, flair_tex, u, v, zn,
                             &ph.t1w.values[i], &ph.flair.values[i], &ph.t1c.values[i]);
            }
        }
    }
    ph.t1w = bicubic_downsample(ph.t1w);
    ph.flair = bicubic_downsample(ph.flair);
    ph.t1c = bicubic_downsample(ph.t1c);
    minmax_normalize(ph.t1w);
    minmax_normalize(ph.flair);
    minmax_normalize(ph.t1c);

    // labels evaluated analytically at the final resolution
    ph.seg.extents = {d, cfg.size, cfg.size};
    ph.seg.labels.resize(size_t(d * cfg.size * cfg.size));
    for (int64_t z = 0; z < d; ++z) {
        const double zn = (double(z) + 0.5) / double(d);
        for (int64_t y = 0; y < cfg.size; ++y) {
            const double v = (double(y) + 0.5) / double(cfg.size);
            for (int64_t x = 0; x < cfg.size; ++x) {
                const double u = (double(x) + 0.5) / double(cfg.size);
                ph.seg.labels[size_t((z * cfg.size + y) * cfg.size + x)] = geo.label_at(u, v, zn);
            }
        }
    }
    return ph;
}

// ---------------------------------------------------------------------------
// Bicubic downsampling

namespace {

// cubic convolution kernel, a = -0.5, sampled at half-pixel offsets for a
// factor-2 center-aligned grid: weights over neighbors at distances
// 1.5, 0.5, 0.5, 1.5
constexpr float kW_far = -0.0625f;
constexpr float kW_near = 0.5625f;

void downsample_axis(const float* in, int64_t n, int64_t stride, float* out, int64_t out_stride) {
    const int64_t m = n / 2;
    auto at = [&](int64_t i) {
        i = std::min(n - 1, std::max<int64_t>(0, i));  // edge clamp
        return in[i * stride];
    };
    for (int64_t j = 0; j < m; ++j) {
        const int64_t c = 2 * j;  // sample point sits between c and c+1
        out[j * out_stride] = kW_far * at(c - 1) + kW_near * at(c) + kW_near * at(c + 1) +
                              kW_far * at(c + 2);
    }
}

}  // namespace

Volume bicubic_downsample(const Volume& vol) {
    if (vol.extents.size() != 3) throw ContractError("bicubic_downsample expects a 3-D volume");
    const int64_t d = vol.extents[0], h = vol.extents[1], w = vol.extents[2];
    if (h % 2 != 0 || w % 2 != 0)
        throw ContractError("bicubic_downsample requires even in-plane extents, got " +
                            shape_str(vol.extents));
    Volume out;
    out.extents = {d, h / 2, w / 2};
    out.values.resize(size_t(d * (h / 2) * (w / 2)));
    out.modality = vol.modality;
    out.patient = vol.patient;

    std::vector<float> tmp(size_t(h * (w / 2)));
    for (int64_t z = 0; z < d; ++z) {
        const float* slice = vol.values.data() + z * h * w;
        // rows first
        for (int64_t y = 0; y < h; ++y)
            downsample_axis(slice + y * w, w, 1, tmp.data() + y * (w / 2), 1);
        // then columns
        float* oslice = out.values.data() + z * (h / 2) * (w / 2);
        for (int64_t x = 0; x < w / 2; ++x)
            downsample_axis(tmp.data() + x, h, w / 2, oslice + x, w / 2);
    }
    for (float& v : out.values) v = std::min(1.0f, std::max(0.0f, v));
    return out;
}

// ---------------------------------------------------------------------------
// Segmentation intensity encoding

float seg_label_to_level(uint8_t label) {
    if (label > 4) throw ContractError("segmentation label out of range: " + std::to_string(label));
    return -1.0f + 0.5f * float(label);
}

uint8_t seg_level_to_label(float value) {
    // snap to the nearest of {-1,-0.5,0,0.5,1}
    int idx = int(std::lround((double(value) + 1.0) / 0.5));
    idx = std::min(4, std::max(0, idx));
    return uint8_t(idx);
}

Tensor<float> seg_encode(const SegMap& seg) {
    auto t = make_tensor<float>(seg.extents);
    for (size_t i = 0; i < seg.labels.size(); ++i) t->data[i] = seg_label_to_level(seg.labels[i]);
    return t;
}

SegMap seg_decode(const Tensor<float>& img, const std::string& patient) {
    SegMap s;
    s.extents = img->shape;
    s.patient = patient;
    s.labels.resize(img->data.size());
    for (size_t i = 0; i < img->data.size(); ++i) s.labels[i] = seg_level_to_label(img->data[i]);
    return s;
}

// ---------------------------------------------------------------------------
// Patient splits

DatasetSplit split_patients(const std::vector<std::string>& ids,
                            const std::vector<double>& fractions, uint64_t seed) {
    if (fractions.size() != 3) throw ContractError("split_patients expects three fractions");
    double fsum = 0;
    for (double f : fractions) fsum += f;
    if (std::abs(fsum - 1.0) > 1e-6) throw ContractError("split fractions must sum to 1");
    if (ids.size() < fractions.size())
        throw ContractError("fewer patients (" + std::to_string(ids.size()) + ") than splits");

    std::vector<std::string> shuffled = ids;
    Rng rng(seed);
    rng.shuffle(shuffled);

    // largest-remainder apportionment
    const int64_t n = int64_t(ids.size());
    std::array<int64_t, 3> counts{};
    std::array<double, 3> rema{};
    int64_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = fractions[i] * double(n);
        counts[i] = int64_t(std::floor(exact + 1e-9));
        rema[i] = exact - double(counts[i]);
        assigned += counts[i];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rema[i] > rema[best]) best = i;
        ++counts[best];
        rema[best] = -1;
        ++assigned;
    }

    DatasetSplit out;
    auto it = shuffled.begin();
    out.train.assign(it, it + counts[0]);
    it += counts[0];
    out.val.assign(it, it + counts[1]);
    it += counts[1];
    out.test.assign(it, it + counts[2]);
    return out;
}

// ---------------------------------------------------------------------------
// TAV1 container: magic "TAV1", version u16, kind u8 (0 intensity, 1 labels),
// extent count u8, extents u32 LE, payload, trailing u64 checksum.

namespace {

constexpr uint16_t kVolumeVersion = 1;

void write_tav1(const std::filesystem::path& path, uint8_t kind,
                const std::vector<int64_t>& extents, const float* fdata,
                const uint8_t* ldata, int64_t count) {
    if (extents.empty() || extents.size() > 255)
        throw ContractError("TAV1 extent count out of range");
    for (auto e : extents)
        if (e <= 0 || e > int64_t(UINT32_MAX))
            throw ContractError("TAV1 extent out of range: " + shape_str(extents));
    ByteWriter w;
    w.put_bytes("TAV1", 4);
    w.put_u16(kVolumeVersion);
    w.put_u8(kind);
    w.put_u8(uint8_t(extents.size()));
    for (auto e : extents) w.put_u32(uint32_t(e));
    if (kind == 0)
        for (int64_t i = 0; i < count; ++i) w.put_f32(fdata[i]);
    else
        w.put_bytes(ldata, size_t(count));
    w.write_file(path);
}

struct Tav1Payload {
    uint8_t kind;
    std::vector<int64_t> extents;
    std::vector<float> fvalues;
    std::vector<uint8_t> lvalues;
};

Tav1Payload read_tav1(const std::filesystem::path& path) {
    ByteReader r(path);
    char magic[4];
    r.get_bytes(magic, 4);
    if (std::memcmp(magic, "TAV1", 4) != 0) throw FormatError("bad magic in " + path.string());
    const uint16_t ver = r.get_u16();
    if (ver != kVolumeVersion)
        throw FormatError("unsupported TAV1 version " + std::to_string(ver));
    Tav1Payload p;
    p.kind = r.get_u8();
    if (p.kind > 1) throw FormatError("unknown TAV1 kind " + std::to_string(p.kind));
    const uint8_t rank = r.get_u8();
    if (rank == 0) throw FormatError("TAV1 with zero extents");
    int64_t count = 1;
    p.extents.resize(rank);
    for (auto& e : p.extents) {
        e = int64_t(r.get_u32());
        if (e == 0) throw FormatError("TAV1 zero extent");
        if (count > (int64_t(1) << 40) / e) throw FormatError("TAV1 extent overflow");
        count *= e;
    }
    if (p.kind == 0) {
        p.fvalues.resize(size_t(count));
        for (auto& v : p.fvalues) v = r.get_f32();
    } else {
        p.lvalues.resize(size_t(count));
        r.get_bytes(p.lvalues.data(), size_t(count));
    }
    return p;
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Volume& vol) {
    write_tav1(path, 0, vol.extents, vol.values.data(), nullptr, vol.numel());
}

void write_segmap(const std::filesystem::path& path, const SegMap& seg) {
    write_tav1(path, 1, seg.extents, nullptr, seg.labels.data(), seg.numel());
}

Volume read_volume(const std::filesystem::path& path) {
    auto p = read_tav1(path);
    if (p.kind != 0) throw FormatError("expected intensity volume, found label map: " + path.string());
    Volume v;
    v.extents = std::move(p.extents);
    v.values = std::move(p.fvalues);
    return v;
}

SegMap read_segmap(const std::filesystem::path& path) {
    auto p = read_tav1(path);
    if (p.kind != 1) throw FormatError("expected label map, found intensity volume: " + path.string());
    SegMap s;
    s.extents = std::move(p.extents);
    s.labels = std::move(p.lvalues);
    return s;
}

// ---------------------------------------------------------------------------
// Manifest

std::vector<const ManifestEntry*> Manifest::in_split(const std::string& split) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(&e);
    return out;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
    std::ostringstream os;
    os << "# tavit dataset manifest\n";
    os << "seed " << m.seed << "\n";
    os << "image_size " << m.image_size << "\n";
    os << "slices " << m.slices << "\n";
    for (const auto& e : m.entries)
        os << "patient " << e.patient << " " << e.split << " " << e.t1w.generic_string() << " "
           << e.flair.generic_string() << " " << e.t1c.generic_string() << " "
           << e.seg.generic_string() << "\n";
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw FormatError("cannot write manifest: " + path.string());
        f << os.str();
    }
    std::filesystem::rename(tmp, path);
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open manifest: " + path.string());
    Manifest m;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string key;
        is >> key;
        if (key == "seed")
            is >> m.seed;
        else if (key == "image_size")
            is >> m.image_size;
        else if (key == "slices")
            is >> m.slices;
        else if (key == "patient") {
            ManifestEntry e;
            std::string t1w, flair, t1c, seg;
            is >> e.patient >> e.split >> t1w >> flair >> t1c >> seg;
            if (!is) throw FormatError("malformed manifest line: " + line);
            e.t1w = t1w;
            e.flair = flair;
            e.t1c = t1c;
            e.seg = seg;
            m.entries.push_back(std::move(e));
        }
    }
    return m;
}

uint64_t dataset_hash(const std::filesystem::path& data_dir) {
    const auto manifest_path = data_dir / "manifest.txt";
    Manifest m = read_manifest(manifest_path);
    uint64_t h = 0xcbf29ce484222325ull;
    auto hash_file = [&h](const std::filesystem::path& p) {
        std::ifstream f(p, std::ios::binary);
        if (!f) throw FormatError("dataset file missing: " + p.string());
        std::ostringstream ss;
        ss << f.rdbuf();
        const std::string s = ss.str();
        h = fnv1a(s.data(), s.size(), h);
    };
    hash_file(manifest_path);
    for (const auto& e : m.entries) {
        hash_file(data_dir / e.t1w);
        hash_file(data_dir / e.flair);
        hash_file(data_dir / e.t1c);
        hash_file(data_dir / e.seg);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Batching

SliceBatcher::SliceBatcher(std::vector<PatientData> patients, Stage stage,
                           int64_t input_channels, int64_t batch_size)
    : patients_(std::move(patients)), stage_(stage), input_channels_(input_channels),
      batch_size_(batch_size) {
    if (patients_.empty()) throw ContractError("empty split for batching");
    if (batch_size_ < 1) throw ContractError("batch size must be >= 1");
    for (int64_t p = 0; p < int64_t(patients_.size()); ++p) {
        const auto& pd = patients_[p];
        if (stage_ == Stage::synthesis && !pd.latent)
            throw ContractError("synthesis stage requires latents; missing for patient " + pd.patient);
        for (int64_t z = 0; z < pd.t1w.extents[0]; ++z) index_.emplace_back(p, z);
    }
}

std::vector<SliceBatch> SliceBatcher::epoch_batches(uint64_t epoch_seed, bool augment) const {
    auto order = index_;
    Rng rng(epoch_seed);
    rng.shuffle(order);

    const int64_t h = patients_[0].t1w.extents[1];
    const int64_t w = patients_[0].t1w.extents[2];

    std::vector<SliceBatch> batches;
    for (size_t start = 0; start < order.size(); start += size_t(batch_size_)) {
        const int64_t B = std::min<int64_t>(batch_size_, int64_t(order.size() - start));
        SliceBatch batch;
        batch.inputs = make_tensor<float>({B, input_channels_, h, w});
        batch.target = make_tensor<float>({B, 1, h, w});
        int64_t lc = 0, lh = 0, lw = 0;
        if (stage_ == Stage::synthesis) {
            const auto& lat = *patients_[0].latent;
            lc = lat.extents[1];
            lh = lat.extents[2];
            lw = lat.extents[3];
            batch.latent = make_tensor<float>({B, lc, lh, lw});
        }
        for (int64_t b = 0; b < B; ++b) {
            const auto [p, z] = order[start + b];
            batch.patients.push_back(p);
            batch.zs.push_back(z);
            const auto& pd = patients_[p];
            const bool flip = augment && rng.bernoulli(0.5);

            const int64_t plane = h * w;
            auto copy_plane = [&](const float* src, float* dst, bool map_range) {
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x) {
                        float v = src[y * w + (flip ? w - 1 - x : x)];
                        dst[y * w + x] = map_range ? to_model_range(v) : v;
                    }
            };

            float* in0 = batch.inputs->data.data() + b * input_channels_ * plane;
            float* tgt = batch.target->data.data() + b * plane;
            switch (stage_) {
                case Stage::segmentation: {
                    copy_plane(pd.t1w.values.data() + z * plane, in0, true);
                    if (input_channels_ == 2)
                        copy_plane(pd.flair.values.data() + z * plane, in0 + plane, true);
                    // target: encoded segmentation slice, already in [-1,1]
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t x = 0; x < w; ++x)
                            tgt[y * w + x] = seg_label_to_level(
                                pd.seg.labels[size_t(z * plane + y * w + (flip ? w - 1 - x : x))]);
                    break;
                }
                case Stage::latent: {
                    for (int64_t y = 0; y < h; ++y)
                        for (int64_t x = 0; x < w; ++x) {
                            const float lv = seg_label_to_level(
                                pd.seg.labels[size_t(z * plane + y * w + (flip ? w - 1 - x : x))]);
                            in0[y * w + x] = lv;
                            tgt[y * w + x] = lv;
                        }
                    break;
                }
                case Stage::synthesis: {
                    copy_plane(pd.t1w.values.data() + z * plane, in0, true);
                    if (input_channels_ == 2)
                        copy_plane(pd.flair.values.data() + z * plane, in0 + plane, true);
                    copy_plane(pd.t1c.values.data() + z * plane, tgt, true);
                    const auto& lat = *pd.latent;
                    const float* lsrc = lat.values.data() + z * lc * lh * lw;
                    float* ldst = batch.latent->data.data() + b * lc * lh * lw;
                    for (int64_t c = 0; c < lc; ++c)
                        for (int64_t y = 0; y < lh; ++y)
                            for (int64_t x = 0; x < lw; ++x)
                                ldst[(c * lh + y) * lw + x] =
                                    lsrc[(c * lh + y) * lw + (flip ? lw - 1 - x : x)];
                    break;
                }
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace tavit
