#include "pcdf/synthgen.hpp"

#include "pcdf/eval.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace pcdf;

namespace {

ConditionRecord make_cond(Illumination ill, Weather w, TimeOfDay t) {
    ConditionRecord c;
    c.illumination = ill;
    c.weather = w;
    c.time = t;
    return c;
}

double raster_mean(const Raster& r) {
    double s = 0;
    for (double v : r.data) s += v;
    return s / static_cast<double>(r.data.size());
}

} // namespace

TEST_CASE("clear daylight degrades neither modality") {
    const auto p = degradation_for(
        make_cond(Illumination::Normal, Weather::Sunny, TimeOfDay::Morning));
    CHECK(rgb_corruption_score(p) == 0.0);
    CHECK(ir_corruption_score(p) == 0.0);
    CHECK(reliability_tag(p) == Dominant::balanced);
}

TEST_CASE("night collapses RGB and leaves IR untouched") {
    const auto p = degradation_for(
        make_cond(Illumination::Night, Weather::Night, TimeOfDay::Night));
    CHECK(p.rgb_noise_sigma == 0.25);
    // noise at its schedule maximum: every other illumination is milder
    for (int i = 0; i < kNumIlluminations; ++i) {
        const auto q = degradation_for(make_cond(static_cast<Illumination>(i),
                                                 Weather::Sunny, TimeOfDay::Morning));
        CHECK(q.rgb_noise_sigma <= p.rgb_noise_sigma);
    }
    CHECK(p.ir_noise_sigma == 0.0);
    CHECK(p.ir_blur_radius == 0);
    CHECK(p.ir_contrast == 1.0);
    CHECK(reliability_tag(p) == Dominant::ir);
}

TEST_CASE("overexposed noon suppresses IR thermal contrast") {
    const auto p = degradation_for(
        make_cond(Illumination::Overexposure, Weather::Sunny, TimeOfDay::Noon));
    CHECK(p.ir_contrast == doctest::Approx(0.1));
    CHECK(ir_corruption_score(p) > rgb_corruption_score(p));
    CHECK(reliability_tag(p) == Dominant::rgb);
}

TEST_CASE("fog hits both modalities evenly") {
    const auto p = degradation_for(
        make_cond(Illumination::Normal, Weather::Foggy, TimeOfDay::Morning));
    CHECK(p.rgb_blur_radius == 2);
    CHECK(p.ir_blur_radius == 2);
    CHECK(rgb_corruption_score(p) == doctest::Approx(ir_corruption_score(p)));
    CHECK(reliability_tag(p) == Dominant::balanced);
}

TEST_CASE("worsening RGB never flips the tag toward RGB") {
    Rng rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        DegradationProfile p;
        p.rgb_gain = rng.uniform(0.05, 2.5);
        p.rgb_noise_sigma = rng.uniform(0, 0.3);
        p.rgb_blur_radius = static_cast<int>(rng.below(3));
        p.rgb_contrast = rng.uniform(0.4, 1.0);
        p.ir_noise_sigma = rng.uniform(0, 0.3);
        p.ir_blur_radius = static_cast<int>(rng.below(3));
        p.ir_contrast = rng.uniform(0.1, 1.0);
        const Dominant before = reliability_tag(p);

        DegradationProfile worse = p;
        worse.rgb_noise_sigma += rng.uniform(0.01, 0.5);
        const Dominant after = reliability_tag(worse);
        if (before == Dominant::ir) CHECK(after == Dominant::ir);
        if (after == Dominant::rgb) CHECK(before == Dominant::rgb);

        // tag semantics: the dominant side has the strictly lower score
        const double sr = rgb_corruption_score(p), si = ir_corruption_score(p);
        if (before == Dominant::rgb) CHECK(sr < si);
        if (before == Dominant::ir) CHECK(si < sr);
        if (before == Dominant::balanced)
            CHECK(std::abs(sr - si) <= 0.1 * std::max(sr, si) + 1e-15);
    }
}

TEST_CASE("pair generation is deterministic per (seed, condition)") {
    SceneSpec spec;
    spec.seed = 42;
    spec.condition = make_cond(Illumination::Normal, Weather::Sunny, TimeOfDay::Morning);
    const auto a = generate_pair(spec);
    const auto b = generate_pair(spec);
    CHECK(a.rgb.data == b.rgb.data);
    CHECK(a.ir.data == b.ir.data);
    REQUIRE(a.boxes.size() == b.boxes.size());
    for (size_t i = 0; i < a.boxes.size(); ++i) {
        CHECK(a.boxes[i].cx == b.boxes[i].cx);
        CHECK(a.boxes[i].theta == b.boxes[i].theta);
        CHECK(a.boxes[i].class_id == b.boxes[i].class_id);
    }
    spec.seed = 43;
    const auto c = generate_pair(spec);
    CHECK(a.rgb.data != c.rgb.data);
}

TEST_CASE("generated boxes satisfy the annotation invariants") {
    SceneSpec spec;
    spec.seed = 7;
    spec.object_count = 4;
    spec.class_count = 5;
    const auto pair = generate_pair(spec);
    REQUIRE(pair.boxes.size() == 4);
    for (const auto& b : pair.boxes) {
        CHECK(b.class_id >= 0);
        CHECK(b.class_id < 5);
        CHECK(b.w > 0);
        CHECK(b.h > 0);
        CHECK(b.cx >= 0);
        CHECK(b.cx <= spec.width);
        CHECK(b.cy >= 0);
        CHECK(b.cy <= spec.height);
        CHECK(b.theta >= -1.5708);
        CHECK(b.theta < 1.5708);
    }
    for (size_t i = 0; i < pair.boxes.size(); ++i)
        for (size_t j = i + 1; j < pair.boxes.size(); ++j)
            CHECK(rotated_iou(pair.boxes[i], pair.boxes[j]) <= 0.25);
}

TEST_CASE("night pairs are dark in RGB and tagged ir-dominant") {
    SceneSpec spec;
    spec.seed = 11;
    spec.condition = make_cond(Illumination::Night, Weather::Night, TimeOfDay::Night);
    const auto pair = generate_pair(spec);
    CHECK(pair.dominant == Dominant::ir);
    CHECK(raster_mean(pair.rgb) < 0.2);

    spec.condition = make_cond(Illumination::Overexposure, Weather::Sunny, TimeOfDay::Noon);
    const auto hot = generate_pair(spec);
    CHECK(hot.dominant == Dominant::rgb);
    CHECK(raster_mean(hot.rgb) > 0.5);
}

TEST_CASE("homography apply, inverse, det") {
    Homography id;
    const auto p = id.apply(3.5, -2.0);
    CHECK(p[0] == 3.5);
    CHECK(p[1] == -2.0);
    CHECK(id.det() == 1.0);

    Homography t;
    t.m = {1, 0, 4, 0, 1, -2, 0, 0, 1};
    const auto q = t.apply(1, 1);
    CHECK(q[0] == 5.0);
    CHECK(q[1] == -1.0);

    Homography h;
    h.m = {1.1, 0.02, 5.0, -0.03, 0.95, -3.0, 1.5e-4, -8e-5, 1.0};
    const Homography inv = h.inverse();
    for (double x : {0.0, 10.0, 33.0})
        for (double y : {0.0, 7.0, 61.0}) {
            const auto f = h.apply(x, y);
            const auto back = inv.apply(f[0], f[1]);
            CHECK(back[0] == doctest::Approx(x).epsilon(1e-10));
            CHECK(back[1] == doctest::Approx(y).epsilon(1e-10));
        }
}

TEST_CASE("eight exact correspondences recover a projective map") {
    Homography truth;
    truth.m = {1.1, 0.02, 5.0, -0.03, 0.95, -3.0, 1.5e-4, -8e-5, 1.0};
    const std::vector<std::array<double, 2>> src = {{0, 0},   {60, 4},  {8, 55},
                                                    {63, 63}, {30, 10}, {12, 30},
                                                    {45, 40}, {20, 50}};
    std::vector<std::array<double, 2>> dst;
    for (const auto& s : src) dst.push_back(truth.apply(s[0], s[1]));

    const auto est = estimate_homography(src, dst);
    for (int i = 0; i < 9; ++i)
        CHECK(std::abs(est.h.m[static_cast<size_t>(i)] -
                       truth.m[static_cast<size_t>(i)]) < 1e-6);
    CHECK(est.rms < 1e-6);
}

TEST_CASE("degenerate correspondences are rejected") {
    std::vector<std::array<double, 2>> line, dst;
    for (int i = 0; i < 6; ++i) {
        line.push_back({static_cast<double>(i), 2.0 * i});
        dst.push_back({static_cast<double>(i) + 1, 2.0 * i - 3});
    }
    CHECK_THROWS_AS(estimate_homography(line, dst), ValidationError);

    std::vector<std::array<double, 2>> three = {{0, 0}, {1, 0}, {0, 1}};
    CHECK_THROWS_AS(estimate_homography(three, three), ValidationError);
}

TEST_CASE("identity warp reproduces the raster") {
    SceneSpec spec;
    spec.seed = 3;
    const auto pair = generate_pair(spec);
    const Raster out =
        warp_and_crop(pair.rgb, Homography{}, CropRect{0, 0, 64, 64});
    CHECK(out.data == pair.rgb.data);
}

TEST_CASE("integer translation shifts content exactly") {
    Raster img(8, 8, 1);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img.at(0, y, x) = y * 8 + x;
    Homography shift;  // output (x,y) samples input (x+2, y+3)
    shift.m = {1, 0, 2, 0, 1, 3, 0, 0, 1};
    const Raster out = warp_and_crop(img, shift, CropRect{0, 0, 8, 8});
    CHECK(out.at(0, 0, 0) == img.at(0, 3, 2));
    CHECK(out.at(0, 4, 5) == img.at(0, 7, 7));
    CHECK(out.at(0, 5, 0) == 0.0);  // beyond the source: zero fill
    CHECK(out.at(0, 0, 6) == 0.0);
}

TEST_CASE("warp round trip preserves a smooth image above 40 dB") {
    Raster img(48, 48, 1);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x)
            img.at(0, y, x) =
                0.5 + 0.3 * std::sin(2 * 3.14159265 * x / 24.0) *
                          std::cos(2 * 3.14159265 * y / 19.0);
    Homography h;
    const double phi = 2.0 * 3.14159265 / 180.0;
    h.m = {std::cos(phi), -std::sin(phi), 1.3,
           std::sin(phi), std::cos(phi),  -0.7,
           1e-5,          -2e-5,          1.0};
    const Raster once = warp_and_crop(img, h, CropRect{0, 0, 48, 48});
    const Raster back = warp_and_crop(once, h.inverse(), CropRect{0, 0, 48, 48});
    const Raster a = warp_and_crop(img, Homography{}, CropRect{6, 6, 36, 36});
    const Raster b = warp_and_crop(back, Homography{}, CropRect{6, 6, 36, 36});
    CHECK(psnr(a, b) > 40.0);
}

TEST_CASE("misalignment is recoverable from box correspondences") {
    SceneSpec spec;
    spec.seed = 21;
    spec.misalign = true;
    const auto pair = generate_pair(spec);
    REQUIRE(pair.ir_misalignment.has_value());
    Homography truth;
    truth.m = *pair.ir_misalignment;

    spec.misalign = false;
    const auto aligned = generate_pair(spec);
    CHECK(aligned.ir.data != pair.ir.data);
    CHECK(aligned.rgb.data == pair.rgb.data);

    std::vector<std::array<double, 2>> src, dst;
    for (const auto& box : pair.boxes)
        for (const auto& corner : box_corners(box)) {
            src.push_back(corner);
            dst.push_back(truth.apply(corner[0], corner[1]));
        }
    REQUIRE(src.size() >= 8);
    const auto est = estimate_homography(src, dst);
    double sq = 0;
    for (int x : {0, 63})
        for (int y : {0, 63}) {
            const auto a = est.h.apply(x, y);
            const auto b = truth.apply(x, y);
            sq += (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
        }
    CHECK(std::sqrt(sq / 4.0) < 0.5);
}

TEST_CASE("corpus generation is reproducible and split-stable") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "pcdf_corpus_test";
    fs::remove_all(root);

    CorpusConfig cfg;
    cfg.count = 150;
    cfg.width = 32;
    cfg.height = 32;
    cfg.object_min = 2;
    cfg.object_max = 2;
    cfg.class_count = 3;

    const auto r1 = generate_corpus(cfg, 1234, (root / "a").string());
    const auto r2 = generate_corpus(cfg, 1234, (root / "b").string());
    const auto r3 = generate_corpus(cfg, 999, (root / "c").string());
    CHECK(r1.digest == r2.digest);
    CHECK(r1.digest != r3.digest);
    CHECK(r1.train_count == 120);
    CHECK(r1.test_count == 30);

    const AnnotationFile anno = load_annotations(r1.annotation_path);
    REQUIRE(anno.records.size() == 150);
    CHECK(anno.image_w == 32);

    // class frequencies follow the long-tail ratio: strictly more common heads
    std::array<int, 3> hist{};
    std::set<std::string> illums;
    int train_seen = 0;
    for (const auto& rec : anno.records) {
        for (const auto& b : rec.rgb_boxes) hist[static_cast<size_t>(b.class_id)]++;
        illums.insert(std::string(to_string(rec.condition.illumination)));
        train_seen += rec.is_train ? 1 : 0;
        CHECK(rec.rgb_boxes.size() == 2);
    }
    CHECK(train_seen == 120);
    CHECK(hist[0] > hist[1]);
    CHECK(hist[1] > hist[2]);

    // the default mix must exercise both failure regimes
    CHECK(illums.count("Night") == 1);
    CHECK(illums.count("Overexposure") == 1);

    const Raster img = load_raster(root / "a" / anno.records[0].rgb_path);
    CHECK(img.width == 32);
    CHECK(img.channels == 3);
    fs::remove_all(root);
}
