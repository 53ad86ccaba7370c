#pragma once

#include "pcdf/image.hpp"
#include "pcdf/schema.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace pcdf {

/// Per-modality corruption parameters, a pure function of the condition.
struct DegradationProfile {
    double rgb_gain = 1.0;        // multiplicative brightness, clipped to [0,1]
    double rgb_noise_sigma = 0.0;
    int rgb_blur_radius = 0;      // box blur
    double rgb_contrast = 1.0;    // 1 = unchanged, < 1 pulls toward the mean
    double rgb_speckle_frac = 0.0;  // fraction of pixels occluded white
    int rgb_streaks = 0;          // vertical rain streak count
    double ir_noise_sigma = 0.0;
    int ir_blur_radius = 0;
    double ir_contrast = 1.0;     // object-background thermal contrast factor
};

DegradationProfile degradation_for(const ConditionRecord& cond);

/// Scalar corruption scores; higher = more degraded.
double rgb_corruption_score(const DegradationProfile& p);
double ir_corruption_score(const DegradationProfile& p);

enum class Dominant { rgb, ir, balanced };

/// The modality with the strictly lower corruption score dominates; scores
/// within 10% (relative to the larger) are balanced.
Dominant reliability_tag(const DegradationProfile& p);

std::string_view to_string(Dominant d);

struct SceneSpec {
    uint64_t seed = 0;
    int width = 64, height = 64;
    int object_count = 3;
    int class_count = kNumClasses;  // classes drawn from [0, class_count)
    double class_tail_ratio = 0.45; // class k frequency proportional to ratio^k
    ConditionRecord condition;
    double theta_max_deg = 20.0;    // object rotation range (uniform +-)
    bool misalign = false;          // warp the IR frame by a small homography
};

struct GeneratedPair {
    Raster rgb;  // 3 channels
    Raster ir;   // 1 channel
    std::vector<OrientedBox> boxes;      // shared geometry, both modalities
    ConditionRecord condition;
    Dominant dominant = Dominant::balanced;
    // set when spec.misalign: maps aligned (RGB-frame) coordinates to the
    // warped IR frame's coordinates
    std::optional<std::array<double, 9>> ir_misalignment;
};

/// Renders one aligned RGB-IR pair with condition-controlled degradations.
/// Identical (seed, condition) inputs give bit-identical rasters.
GeneratedPair generate_pair(const SceneSpec& spec);

// ---- homography ------------------------------------------------------------

/// Row-major 3x3 matrix, normalized so h[8] = 1.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    std::array<double, 2> apply(double x, double y) const;
    Homography inverse() const;
    double det() const;
};

struct HomographyEstimate {
    Homography h;
    double rms = 0;  // reprojection RMS over the input correspondences
};

/// Least-squares direct linear transform with Hartley normalization.
/// Estimates H such that dst ~ H * src. Requires >= 4 correspondences in
/// general position.
HomographyEstimate estimate_homography(const std::vector<std::array<double, 2>>& src,
                                       const std::vector<std::array<double, 2>>& dst);

struct CropRect {
    double x0 = 0, y0 = 0;
    int width = 0, height = 0;
};

/// Inverse warping: output pixel (x, y) in the crop rect samples the input at
/// h * (x0 + x, y0 + y). Bilinear interpolation, zero fill outside the source.
Raster warp_and_crop(const Raster& image, const Homography& h, const CropRect& crop);

// ---- corpus ----------------------------------------------------------------

/// One weighted condition template; numeric attributes sampled uniformly
/// from the given ranges.
struct ConditionMixEntry {
    double weight = 1.0;
    double altitude_lo = 80, altitude_hi = 300;
    double angle_lo = 0, angle_hi = 75;
    std::vector<TimeOfDay> times = {TimeOfDay::Morning};
    std::vector<Weather> weathers = {Weather::Sunny};
    std::vector<Illumination> illuminations = {Illumination::Normal};
    // scenario sampled uniformly over all 11 unless restricted
    std::vector<Scenario> scenarios = {};
};

struct CorpusConfig {
    int count = 100;
    double train_fraction = 0.8;
    int width = 64, height = 64;
    int object_min = 2, object_max = 4;
    int class_count = kNumClasses;
    double class_tail_ratio = 0.45;  // class k frequency proportional to ratio^k
    double theta_max_deg = 20.0;
    std::vector<ConditionMixEntry> mix;  // empty -> default_mix()
};

std::vector<ConditionMixEntry> default_mix();

struct CorpusResult {
    std::string annotation_path;
    uint64_t digest = 0;  // fnv1a64 of the serialized annotation file
    int train_count = 0;
    int test_count = 0;
};

/// Writes rasters and the annotation file under out_dir. Train and test
/// samples draw from disjoint per-sample seed ranges.
CorpusResult generate_corpus(const CorpusConfig& cfg, uint64_t seed,
                             const std::string& out_dir);

} // namespace pcdf
