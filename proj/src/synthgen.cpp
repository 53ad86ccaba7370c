#include "pcdf/synthgen.hpp"

#include "pcdf/eval.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

namespace pcdf {

// ---- degradation table -------------------------------------------------

DegradationProfile degradation_for(const ConditionRecord& cond) {
    DegradationProfile p;
    switch (cond.illumination) {
        case Illumination::Overexposure: p.rgb_gain = 2.5; break;
        case Illumination::Normal: break;
        case Illumination::Dim: p.rgb_gain = 0.5; break;
        case Illumination::Twilight: p.rgb_gain = 0.35; break;
        case Illumination::NearNight:
            p.rgb_gain = 0.2;
            p.rgb_noise_sigma = 0.08;
            break;
        case Illumination::Night:
            p.rgb_gain = 0.05;
            p.rgb_noise_sigma = 0.25;
            break;
    }
    switch (cond.weather) {
        case Weather::Foggy:
            p.rgb_blur_radius = 2;
            p.rgb_contrast = 0.6;
            p.ir_blur_radius = 2;
            p.ir_contrast *= 0.6;
            break;
        case Weather::Snowy: p.rgb_speckle_frac = 0.03; break;
        case Weather::Rainy: p.rgb_streaks = 8; break;
        case Weather::Night:
            p.rgb_gain = std::min(p.rgb_gain, 0.05);
            p.rgb_noise_sigma = std::max(p.rgb_noise_sigma, 0.25);
            break;
        case Weather::Sunny:
        case Weather::Cloudy:
        case Weather::AfterRain:
            break;
    }
    // thermal crossover: at noon, object and background radiance converge
    if (cond.time == TimeOfDay::Noon) p.ir_contrast *= 0.1;
    return p;
}

double rgb_corruption_score(const DegradationProfile& p) {
    return std::abs(std::log2(p.rgb_gain)) * 0.25 + p.rgb_noise_sigma * 4.0 +
           p.rgb_blur_radius * 0.5 + (1.0 - p.rgb_contrast) * 1.5 +
           p.rgb_speckle_frac * 10.0 + p.rgb_streaks * 0.05;
}

double ir_corruption_score(const DegradationProfile& p) {
    return p.ir_noise_sigma * 4.0 + p.ir_blur_radius * 0.5 + (1.0 - p.ir_contrast) * 1.5;
}

Dominant reliability_tag(const DegradationProfile& p) {
    const double sr = rgb_corruption_score(p);
    const double si = ir_corruption_score(p);
    if (std::abs(sr - si) <= 0.1 * std::max(sr, si)) return Dominant::balanced;
    return sr < si ? Dominant::rgb : Dominant::ir;
}

std::string_view to_string(Dominant d) {
    switch (d) {
        case Dominant::rgb: return "rgb";
        case Dominant::ir: return "ir";
        default: return "balanced";
    }
}

// ---- scene rendering -----------------------------------------------------

namespace {

constexpr std::array<double, kNumClasses> kClassAspect = {
    2.0, 1.6, 1.2, 3.2, 2.8, 2.6, 0.9, 2.2, 1.4, 1.1, 2.4};

constexpr std::array<std::array<double, 3>, kNumClasses> kClassColor = {{
    {0.85, 0.15, 0.15}, {0.15, 0.35, 0.85}, {0.9, 0.85, 0.2}, {0.2, 0.8, 0.3},
    {0.7, 0.3, 0.8},    {0.95, 0.55, 0.1},  {0.2, 0.85, 0.85}, {0.6, 0.6, 0.6},
    {0.95, 0.4, 0.6},   {0.5, 0.35, 0.15},  {0.1, 0.5, 0.45}}};

int sample_tail_class(Rng& rng, int class_count, double ratio) {
    double total = 0, p = 1;
    for (int k = 0; k < class_count; ++k, p *= ratio) total += p;
    double u = rng.uniform() * total;
    p = 1;
    for (int k = 0; k < class_count; ++k, p *= ratio) {
        if (u < p) return k;
        u -= p;
    }
    return class_count - 1;
}

bool inside_box(const OrientedBox& b, double x, double y) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double dx = x - b.cx, dy = y - b.cy;
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    return std::abs(u) <= b.w * 0.5 && std::abs(v) <= b.h * 0.5;
}

void box_blur(Raster& img, int radius) {
    if (radius <= 0) return;
    Raster tmp = img;
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double acc = 0;
                int n = 0;
                for (int dy = -radius; dy <= radius; ++dy)
                    for (int dx = -radius; dx <= radius; ++dx) {
                        const int sx = x + dx, sy = y + dy;
                        if (sx < 0 || sx >= img.width || sy < 0 || sy >= img.height) continue;
                        acc += tmp.at(c, sy, sx);
                        ++n;
                    }
                img.at(c, y, x) = acc / n;
            }
}

void clip01(Raster& img) {
    for (double& v : img.data) v = std::clamp(v, 0.0, 1.0);
}

} // namespace

GeneratedPair generate_pair(const SceneSpec& spec) {
    if (spec.width < 32 || spec.height < 32)
        throw ValidationError("generate_pair: image size must be at least 32x32");
    if (spec.object_count < 0)
        throw ValidationError("generate_pair: object_count must be >= 0");
    spec.condition.validate();

    GeneratedPair out;
    out.condition = spec.condition;
    const DegradationProfile prof = degradation_for(spec.condition);
    out.dominant = reliability_tag(prof);

    Rng rng(mix_seed(spec.seed, 0x5ce4e));
    const int W = spec.width, H = spec.height;

    // smooth background fields
    Raster rgb(W, H, 3);
    Raster ir(W, H, 1);
    std::array<double, 3> base{}, amp{};
    for (int c = 0; c < 3; ++c) {
        base[static_cast<size_t>(c)] = rng.uniform(0.3, 0.55);
        amp[static_cast<size_t>(c)] = rng.uniform(0.02, 0.08);
    }
    const double fx = rng.uniform(0.5, 2.0), fy = rng.uniform(0.5, 2.0);
    const double phase = rng.uniform(0, 6.283185307179586);
    const double ir_base = rng.uniform(0.28, 0.4);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double wave =
                std::sin(6.283185307179586 * (fx * x / W + fy * y / H) + phase);
            for (int c = 0; c < 3; ++c)
                rgb.at(c, y, x) = base[static_cast<size_t>(c)] +
                                  amp[static_cast<size_t>(c)] * wave;
            ir.at(0, y, x) = ir_base + 0.03 * wave;
        }

    // object placement: altitude shrinks objects, angle foreshortens them
    const double alt_scale = 150.0 / spec.condition.altitude_m;
    const double foreshorten = 1.0 - 0.45 * (spec.condition.angle_deg / 75.0);
    const double theta_max = spec.theta_max_deg * 3.14159265358979323846 / 180.0;
    const double min_side = std::min(W, H);

    for (int i = 0; i < spec.object_count; ++i) {
        const int cls = sample_tail_class(rng, spec.class_count, spec.class_tail_ratio);
        const double aspect = kClassAspect[static_cast<size_t>(cls)];
        double len = 0.22 * min_side * alt_scale * rng.uniform(0.85, 1.15);
        len = std::clamp(len, 6.0, 0.45 * min_side);
        OrientedBox box;
        box.class_id = cls;
        box.w = len;
        box.h = std::max(3.0, len / aspect * foreshorten);
        box.theta = rng.uniform(-theta_max, theta_max);

        bool placed = false;
        for (int attempt = 0; attempt < 60; ++attempt) {
            const double margin = 0.5 * std::max(box.w, box.h) + 1.0;
            box.cx = rng.uniform(margin, W - margin);
            box.cy = rng.uniform(margin, H - margin);
            bool ok = true;
            for (const auto& other : out.boxes)
                if (rotated_iou(box, other) > 0.25) {
                    ok = false;
                    break;
                }
            if (ok) {
                placed = true;
                break;
            }
        }
        if (!placed)
            throw Error("generate_pair: cannot place object " + std::to_string(i) +
                        " within the overlap budget (seed " + std::to_string(spec.seed) + ")");
        out.boxes.push_back(box);
    }

    // draw objects; IR contrast carries the thermal-crossover effect
    for (const auto& box : out.boxes) {
        const auto& color = kClassColor[static_cast<size_t>(box.class_id)];
        const double jitter = rng.uniform(-0.05, 0.05);
        const double hot = 0.85 + jitter;
        const int x0 = std::max(0, static_cast<int>(box.cx - box.w - box.h));
        const int x1 = std::min(W - 1, static_cast<int>(box.cx + box.w + box.h));
        const int y0 = std::max(0, static_cast<int>(box.cy - box.w - box.h));
        const int y1 = std::min(H - 1, static_cast<int>(box.cy + box.w + box.h));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                if (!inside_box(box, x + 0.5, y + 0.5)) continue;
                for (int c = 0; c < 3; ++c)
                    rgb.at(c, y, x) = color[static_cast<size_t>(c)] + jitter;
                double& v = ir.at(0, y, x);
                v = v + (hot - v) * prof.ir_contrast;
            }
    }

    // RGB degradations: contrast, gain, blur, streaks, speckle, noise
    if (prof.rgb_contrast != 1.0)
        for (double& v : rgb.data) v = 0.5 + (v - 0.5) * prof.rgb_contrast;
    if (prof.rgb_gain != 1.0)
        for (double& v : rgb.data) v *= prof.rgb_gain;
    box_blur(rgb, prof.rgb_blur_radius);
    for (int k = 0; k < prof.rgb_streaks; ++k) {
        const int col = static_cast<int>(rng.below(static_cast<uint64_t>(W)));
        for (int y = 0; y < H; ++y)
            for (int c = 0; c < 3; ++c)
                rgb.at(c, y, col) = std::min(1.0, rgb.at(c, y, col) + 0.4);
    }
    if (prof.rgb_speckle_frac > 0)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (rng.uniform() < prof.rgb_speckle_frac)
                    for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = 1.0;
    if (prof.rgb_noise_sigma > 0)
        for (double& v : rgb.data) v += rng.normal(0.0, prof.rgb_noise_sigma);
    clip01(rgb);

    // IR degradations
    box_blur(ir, prof.ir_blur_radius);
    if (prof.ir_noise_sigma > 0)
        for (double& v : ir.data) v += rng.normal(0.0, prof.ir_noise_sigma);
    clip01(ir);

    if (spec.misalign) {
        // rigid misalignment so box geometry transforms exactly
        const double phi = rng.uniform(-0.035, 0.035);
        const double tx = rng.uniform(-1.5, 1.5), ty = rng.uniform(-1.5, 1.5);
        const double c = std::cos(phi), s = std::sin(phi);
        Homography m;  // aligned -> warped frame
        m.m = {c, -s, tx, s, c, ty, 0, 0, 1};
        out.ir_misalignment = m.m;
        const Homography inv = m.inverse();
        ir = warp_and_crop(ir, inv, CropRect{0, 0, W, H});
        out.ir = std::move(ir);
        out.rgb = std::move(rgb);
        return out;
    }

    out.rgb = std::move(rgb);
    out.ir = std::move(ir);
    return out;
}

// ---- homography -----------------------------------------------------------

std::array<double, 2> Homography::apply(double x, double y) const {
    const double w = m[6] * x + m[7] * y + m[8];
    return {(m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w};
}

double Homography::det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

Homography Homography::inverse() const {
    Eigen::Matrix3d a;
    a << m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8];
    Eigen::Matrix3d inv = a.inverse();
    if (std::abs(inv(2, 2)) < 1e-300)
        throw ValidationError("homography inverse is not normalizable");
    inv /= inv(2, 2);
    Homography out;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) out.m[static_cast<size_t>(r * 3 + c)] = inv(r, c);
    return out;
}

namespace {

Eigen::Matrix3d hartley_normalization(const std::vector<std::array<double, 2>>& pts) {
    double mx = 0, my = 0;
    for (const auto& p : pts) {
        mx += p[0];
        my += p[1];
    }
    mx /= pts.size();
    my /= pts.size();
    double dist = 0;
    for (const auto& p : pts)
        dist += std::hypot(p[0] - mx, p[1] - my);
    dist /= pts.size();
    const double scale = dist > 1e-12 ? std::sqrt(2.0) / dist : 1.0;
    Eigen::Matrix3d t;
    t << scale, 0, -scale * mx, 0, scale, -scale * my, 0, 0, 1;
    return t;
}

} // namespace

HomographyEstimate estimate_homography(const std::vector<std::array<double, 2>>& src,
                                       const std::vector<std::array<double, 2>>& dst) {
    if (src.size() < 4 || src.size() != dst.size())
        throw ValidationError("estimate_homography: need >= 4 matched correspondences");
    const Eigen::Matrix3d ts = hartley_normalization(src);
    const Eigen::Matrix3d td = hartley_normalization(dst);

    const auto n = static_cast<Eigen::Index>(src.size());
    Eigen::MatrixXd a(2 * n, 9);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& s = src[static_cast<size_t>(i)];
        const auto& d = dst[static_cast<size_t>(i)];
        const double sx = ts(0, 0) * s[0] + ts(0, 2), sy = ts(1, 1) * s[1] + ts(1, 2);
        const double dx = td(0, 0) * d[0] + td(0, 2), dy = td(1, 1) * d[1] + td(1, 2);
        a.row(2 * i) << -sx, -sy, -1, 0, 0, 0, dx * sx, dx * sy, dx;
        a.row(2 * i + 1) << 0, 0, 0, -sx, -sy, -1, dy * sx, dy * sy, dy;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    // a two-dimensional null space means the correspondences are degenerate
    if (sv(0) < 1e-12 || sv(7) / sv(0) < 1e-10)
        throw ValidationError("estimate_homography: degenerate point configuration");
    const Eigen::VectorXd h = svd.matrixV().col(8);
    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    Eigen::Matrix3d full = td.inverse() * hn * ts;
    if (std::abs(full(2, 2)) < 1e-12)
        throw ValidationError("estimate_homography: result not normalizable (h33 ~ 0)");
    full /= full(2, 2);

    HomographyEstimate est;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) est.h.m[static_cast<size_t>(r * 3 + c)] = full(r, c);
    if (std::abs(est.h.det()) < 1e-12)
        throw ValidationError("estimate_homography: singular estimate");

    double sq = 0;
    for (size_t i = 0; i < src.size(); ++i) {
        const auto p = est.h.apply(src[i][0], src[i][1]);
        const double ex = p[0] - dst[i][0], ey = p[1] - dst[i][1];
        sq += ex * ex + ey * ey;
    }
    est.rms = std::sqrt(sq / static_cast<double>(src.size()));
    return est;
}

Raster warp_and_crop(const Raster& image, const Homography& h, const CropRect& crop) {
    if (crop.width <= 0 || crop.height <= 0)
        throw ValidationError("warp_and_crop: empty crop rectangle");
    Raster out(crop.width, crop.height, image.channels);
    for (int y = 0; y < crop.height; ++y)
        for (int x = 0; x < crop.width; ++x) {
            const auto s = h.apply(crop.x0 + x, crop.y0 + y);
            const double sx = s[0], sy = s[1];
            const int ix = static_cast<int>(std::floor(sx));
            const int iy = static_cast<int>(std::floor(sy));
            const double fx = sx - ix, fy = sy - iy;
            for (int c = 0; c < image.channels; ++c) {
                auto fetch = [&](int px, int py) -> double {
                    if (px < 0 || px >= image.width || py < 0 || py >= image.height)
                        return 0.0;
                    return image.at(c, py, px);
                };
                const double v00 = fetch(ix, iy), v10 = fetch(ix + 1, iy);
                const double v01 = fetch(ix, iy + 1), v11 = fetch(ix + 1, iy + 1);
                out.at(c, y, x) = (1 - fy) * ((1 - fx) * v00 + fx * v10) +
                                  fy * ((1 - fx) * v01 + fx * v11);
            }
        }
    return out;
}

// ---- corpus ---------------------------------------------------------------

std::vector<ConditionMixEntry> default_mix() {
    std::vector<ConditionMixEntry> mix;
    {
        ConditionMixEntry e;
        e.weight = 0.30;
        e.times = {TimeOfDay::Dawn, TimeOfDay::Morning, TimeOfDay::Afternoon};
        e.weathers = {Weather::Sunny, Weather::Cloudy};
        e.illuminations = {Illumination::Normal};
        mix.push_back(e);
    }
    {
        ConditionMixEntry e;  // night: RGB collapses, IR carries the signal
        e.weight = 0.25;
        e.times = {TimeOfDay::Night};
        e.weathers = {Weather::Night};
        e.illuminations = {Illumination::Night};
        mix.push_back(e);
    }
    {
        ConditionMixEntry e;  // overexposed noon: thermal crossover kills IR
        e.weight = 0.25;
        e.times = {TimeOfDay::Noon};
        e.weathers = {Weather::Sunny};
        e.illuminations = {Illumination::Overexposure};
        mix.push_back(e);
    }
    {
        ConditionMixEntry e;
        e.weight = 0.10;
        e.times = {TimeOfDay::NearNight};
        e.weathers = {Weather::Cloudy};
        e.illuminations = {Illumination::Dim, Illumination::Twilight,
                           Illumination::NearNight};
        mix.push_back(e);
    }
    {
        ConditionMixEntry e;
        e.weight = 0.10;
        e.times = {TimeOfDay::Morning, TimeOfDay::Afternoon};
        e.weathers = {Weather::Rainy, Weather::Snowy, Weather::Foggy, Weather::AfterRain};
        e.illuminations = {Illumination::Normal};
        mix.push_back(e);
    }
    return mix;
}

namespace {

const ConditionMixEntry& pick_entry(const std::vector<ConditionMixEntry>& mix, Rng& rng) {
    double total = 0;
    for (const auto& e : mix) total += e.weight;
    if (total <= 0) throw ConfigError("condition mix weights must sum to a positive value");
    double u = rng.uniform() * total;
    for (const auto& e : mix) {
        if (u < e.weight) return e;
        u -= e.weight;
    }
    return mix.back();
}

template <typename T>
T pick(const std::vector<T>& v, Rng& rng) {
    return v[static_cast<size_t>(rng.below(v.size()))];
}

ConditionRecord sample_condition(const ConditionMixEntry& e, Rng& rng) {
    ConditionRecord c;
    c.altitude_m = rng.uniform(std::max(e.altitude_lo, kAltitudeMin),
                               std::min(e.altitude_hi, kAltitudeMax));
    c.angle_deg = rng.uniform(std::max(e.angle_lo, kAngleMin),
                              std::min(e.angle_hi, kAngleMax));
    c.time = pick(e.times, rng);
    c.weather = pick(e.weathers, rng);
    c.illumination = pick(e.illuminations, rng);
    if (e.scenarios.empty())
        c.scenario = static_cast<Scenario>(rng.below(kNumScenarios));
    else
        c.scenario = pick(e.scenarios, rng);
    return c;
}

std::string index_name(int i, const char* suffix) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06d_%s", i, suffix);
    return buf;
}

} // namespace

CorpusResult generate_corpus(const CorpusConfig& cfg, uint64_t seed,
                             const std::string& out_dir) {
    if (cfg.count <= 0) throw ConfigError("corpus count must be positive");
    if (cfg.object_min < 0 || cfg.object_max < cfg.object_min)
        throw ConfigError("corpus object count range is invalid");
    const auto mix = cfg.mix.empty() ? default_mix() : cfg.mix;

    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(fs::path(out_dir) / "images", ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    AnnotationFile anno;
    anno.image_w = cfg.width;
    anno.image_h = cfg.height;
    const int train_count =
        static_cast<int>(std::lround(cfg.count * cfg.train_fraction));

    Rng corpus_rng(mix_seed(seed, 0xc0421));
    for (int i = 0; i < cfg.count; ++i) {
        SceneSpec spec;
        // train and test use disjoint index ranges, so scene seeds never overlap
        spec.seed = mix_seed(seed, static_cast<uint64_t>(i) + 1);
        spec.width = cfg.width;
        spec.height = cfg.height;
        spec.class_count = cfg.class_count;
        spec.class_tail_ratio = cfg.class_tail_ratio;
        spec.theta_max_deg = cfg.theta_max_deg;
        spec.object_count =
            cfg.object_min +
            static_cast<int>(corpus_rng.below(
                static_cast<uint64_t>(cfg.object_max - cfg.object_min + 1)));
        spec.condition = sample_condition(pick_entry(mix, corpus_rng), corpus_rng);

        GeneratedPair pair = generate_pair(spec);

        PairRecord rec;
        rec.id = i;
        rec.is_train = i < train_count;
        rec.rgb_path = "images/" + index_name(i, "rgb.ppm");
        rec.ir_path = "images/" + index_name(i, "ir.pgm");
        rec.condition = pair.condition;
        rec.rgb_boxes = pair.boxes;
        rec.ir_boxes = pair.boxes;
        anno.records.push_back(rec);

        save_raster(pair.rgb, (fs::path(out_dir) / rec.rgb_path).string());
        save_raster(pair.ir, (fs::path(out_dir) / rec.ir_path).string());
    }

    CorpusResult result;
    result.annotation_path = (fs::path(out_dir) / "annotations.txt").string();
    const std::string serialized = serialize_annotations(anno);
    save_annotations(anno, result.annotation_path);
    result.digest = fnv1a64(serialized);
    result.train_count = train_count;
    result.test_count = cfg.count - train_count;
    return result;
}

} // namespace pcdf
