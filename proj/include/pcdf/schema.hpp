#pragma once

#include "pcdf/common.hpp"

#include <array>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace pcdf {

// Condition attributes, canonical order: altitude, angle, time, weather,
// illumination, scenario.
constexpr int kNumAttributes = 6;
constexpr std::array<const char*, kNumAttributes> kAttributeNames = {
    "altitude", "angle", "time", "weather", "illumination", "scenario"};

constexpr double kAltitudeMin = 80.0, kAltitudeMax = 300.0;   // meters
constexpr double kAngleMin = 0.0, kAngleMax = 75.0;           // degrees
constexpr double kAltitudeBucketEdge = 120.0;  // [0,120] / (120,300]
constexpr double kAngleBucketEdge = 30.0;      // [0,30] / (30,75]

enum class TimeOfDay { Dawn, Morning, Noon, Afternoon, NearNight, Night };
enum class Weather { Sunny, Cloudy, Rainy, AfterRain, Snowy, Foggy, Night };
enum class Illumination { Overexposure, Normal, Dim, Twilight, NearNight, Night };
enum class Scenario {
    Road, Neighborhood, ConstructionSite, ParkingLot, Factory,   // named in source data
    Highway, Campus, Stadium, Farmland, Riverside, Orchard       // artifact-chosen fillers
};
enum class ScenarioGroup { Urban, Suburban, Village };

constexpr int kNumTimes = 6, kNumWeathers = 7, kNumIlluminations = 6, kNumScenarios = 11;

std::string_view to_string(TimeOfDay v);
std::string_view to_string(Weather v);
std::string_view to_string(Illumination v);
std::string_view to_string(Scenario v);
std::string_view to_string(ScenarioGroup v);

bool parse_enum(std::string_view s, TimeOfDay& out);
bool parse_enum(std::string_view s, Weather& out);
bool parse_enum(std::string_view s, Illumination& out);
bool parse_enum(std::string_view s, Scenario& out);

ScenarioGroup scenario_group(Scenario s);

// Object classes.
constexpr int kNumClasses = 11;
std::string_view class_code(int class_id);   // "CR", "SV", ...
std::string_view class_name(int class_id);   // "car", "SUV", ...
int class_id_from_code(std::string_view code);  // -1 when unknown

/// The six annotated attributes of one image pair.
struct ConditionRecord {
    double altitude_m = 150.0;
    double angle_deg = 30.0;
    TimeOfDay time = TimeOfDay::Morning;
    Weather weather = Weather::Sunny;
    Illumination illumination = Illumination::Normal;
    Scenario scenario = Scenario::Road;

    /// Throws ValidationError when a numeric attribute is out of range.
    void validate() const;
};

/// Interval label for a numeric attribute ("[0,120]" or "(120,300]").
std::string altitude_bucket(double altitude_m);
std::string angle_bucket(double angle_deg);

/// Bucketed view used for evaluation grouping: numeric attributes replaced
/// by interval labels, categoricals passed through by name.
struct BucketedCondition {
    std::array<std::string, kNumAttributes> values;
};
BucketedCondition bucketize(const ConditionRecord& rec);

/// All bucket labels an attribute can take, in report order.
std::vector<std::string> attribute_buckets(int attribute_index);

/// Rotated rectangle label. theta is radians in [-pi/2, pi/2).
struct OrientedBox {
    double cx = 0, cy = 0;
    double w = 0, h = 0;
    double theta = 0;
    int class_id = 0;
};

double normalize_theta(double theta);

/// One annotated RGB-IR pair.
struct PairRecord {
    long id = 0;
    std::string rgb_path;
    std::string ir_path;
    ConditionRecord condition;
    std::vector<OrientedBox> rgb_boxes;
    std::vector<OrientedBox> ir_boxes;
    bool is_train = true;
};

/// Parsed annotation file. Format documented in docs/annotations.md.
struct AnnotationFile {
    int image_w = 0;
    int image_h = 0;
    std::vector<PairRecord> records;  // sorted by id after parse
};

/// Parses the line-delimited annotation format. Errors carry the source name,
/// 1-based line number, and the offending field.
AnnotationFile parse_annotations(std::istream& in, const std::string& source_name);
AnnotationFile load_annotations(const std::string& path);

/// Canonical serialization: parse(serialize(f)) == f and
/// serialize(parse(canonical bytes)) is byte-identical.
std::string serialize_annotations(const AnnotationFile& f);
void save_annotations(const AnnotationFile& f, const std::string& path);

/// Records of one split ("train" or "test"), sorted by id.
std::vector<PairRecord> load_dataset(const std::string& path, std::string_view split);

} // namespace pcdf
