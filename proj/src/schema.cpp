#include "pcdf/schema.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace pcdf {

namespace {

constexpr std::array<const char*, kNumTimes> kTimeNames = {
    "Dawn", "Morning", "Noon", "Afternoon", "NearNight", "Night"};
constexpr std::array<const char*, kNumWeathers> kWeatherNames = {
    "Sunny", "Cloudy", "Rainy", "AfterRain", "Snowy", "Foggy", "Night"};
constexpr std::array<const char*, kNumIlluminations> kIlluminationNames = {
    "Overexposure", "Normal", "Dim", "Twilight", "NearNight", "Night"};
constexpr std::array<const char*, kNumScenarios> kScenarioNames = {
    "Road", "Neighborhood", "ConstructionSite", "ParkingLot", "Factory",
    "Highway", "Campus", "Stadium", "Farmland", "Riverside", "Orchard"};

constexpr std::array<const char*, kNumClasses> kClassCodes = {
    "CR", "SV", "VN", "BS", "FC", "TK", "ME", "TR", "ER", "CE", "TT"};
constexpr std::array<const char*, kNumClasses> kClassNames = {
    "car", "SUV", "van", "bus", "freight car", "truck",
    "motorcycle", "trailer", "excavator", "crane", "tank truck"};

template <typename E, size_t N>
bool parse_named(std::string_view s, const std::array<const char*, N>& names, E& out) {
    for (size_t i = 0; i < N; ++i) {
        if (s == names[i]) {
            out = static_cast<E>(i);
            return true;
        }
    }
    return false;
}

} // namespace

std::string_view to_string(TimeOfDay v) { return kTimeNames[static_cast<size_t>(v)]; }
std::string_view to_string(Weather v) { return kWeatherNames[static_cast<size_t>(v)]; }
std::string_view to_string(Illumination v) { return kIlluminationNames[static_cast<size_t>(v)]; }
std::string_view to_string(Scenario v) { return kScenarioNames[static_cast<size_t>(v)]; }
std::string_view to_string(ScenarioGroup v) {
    switch (v) {
        case ScenarioGroup::Urban: return "Urban";
        case ScenarioGroup::Suburban: return "Suburban";
        default: return "Village";
    }
}

bool parse_enum(std::string_view s, TimeOfDay& out) { return parse_named(s, kTimeNames, out); }
bool parse_enum(std::string_view s, Weather& out) { return parse_named(s, kWeatherNames, out); }
bool parse_enum(std::string_view s, Illumination& out) { return parse_named(s, kIlluminationNames, out); }
bool parse_enum(std::string_view s, Scenario& out) { return parse_named(s, kScenarioNames, out); }

ScenarioGroup scenario_group(Scenario s) {
    switch (s) {
        case Scenario::Road:
        case Scenario::Neighborhood:
        case Scenario::ParkingLot:
        case Scenario::Highway:
            return ScenarioGroup::Urban;
        case Scenario::ConstructionSite:
        case Scenario::Factory:
        case Scenario::Campus:
        case Scenario::Stadium:
            return ScenarioGroup::Suburban;
        default:
            return ScenarioGroup::Village;
    }
}

std::string_view class_code(int class_id) { return kClassCodes.at(static_cast<size_t>(class_id)); }
std::string_view class_name(int class_id) { return kClassNames.at(static_cast<size_t>(class_id)); }

int class_id_from_code(std::string_view code) {
    for (int i = 0; i < kNumClasses; ++i)
        if (code == kClassCodes[static_cast<size_t>(i)]) return i;
    return -1;
}

void ConditionRecord::validate() const {
    if (!(altitude_m >= kAltitudeMin && altitude_m <= kAltitudeMax))
        throw ValidationError("field 'altitude_m': " + format_double(altitude_m) +
                              " outside [80, 300]");
    if (!(angle_deg >= kAngleMin && angle_deg <= kAngleMax))
        throw ValidationError("field 'angle_deg': " + format_double(angle_deg) +
                              " outside [0, 75]");
}

std::string altitude_bucket(double altitude_m) {
    return altitude_m <= kAltitudeBucketEdge ? "[0,120]" : "(120,300]";
}

std::string angle_bucket(double angle_deg) {
    return angle_deg <= kAngleBucketEdge ? "[0,30]" : "(30,75]";
}

BucketedCondition bucketize(const ConditionRecord& rec) {
    BucketedCondition b;
    b.values[0] = altitude_bucket(rec.altitude_m);
    b.values[1] = angle_bucket(rec.angle_deg);
    b.values[2] = std::string(to_string(rec.time));
    b.values[3] = std::string(to_string(rec.weather));
    b.values[4] = std::string(to_string(rec.illumination));
    b.values[5] = std::string(to_string(rec.scenario));
    return b;
}

std::vector<std::string> attribute_buckets(int attribute_index) {
    std::vector<std::string> out;
    switch (attribute_index) {
        case 0: return {"[0,120]", "(120,300]"};
        case 1: return {"[0,30]", "(30,75]"};
        case 2:
            for (auto* n : kTimeNames) out.emplace_back(n);
            return out;
        case 3:
            for (auto* n : kWeatherNames) out.emplace_back(n);
            return out;
        case 4:
            for (auto* n : kIlluminationNames) out.emplace_back(n);
            return out;
        case 5:
            for (auto* n : kScenarioNames) out.emplace_back(n);
            return out;
        default:
            throw ValidationError("attribute index out of range");
    }
}

double normalize_theta(double theta) {
    const double pi = 3.14159265358979323846;
    double t = std::fmod(theta + pi / 2.0, pi);
    if (t < 0) t += pi;
    return t - pi / 2.0;
}

namespace {

struct Parser {
    std::istream& in;
    const std::string& source;
    int line_no = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw ValidationError(source + ":" + std::to_string(line_no) + ": " + msg);
    }

    double need_double(const std::string& field, std::string_view token) const {
        bool ok = false;
        double v = parse_double(token, ok);
        if (!ok) fail("field '" + field + "': not a number: '" + std::string(token) + "'");
        return v;
    }

    long need_long(const std::string& field, std::string_view token) const {
        bool ok = false;
        long v = parse_long(token, ok);
        if (!ok) fail("field '" + field + "': not an integer: '" + std::string(token) + "'");
        return v;
    }

    /// Splits "key=value"; errors when key does not match.
    std::string keyed(const std::string& key, const std::string& token) const {
        auto eq = token.find('=');
        if (eq == std::string::npos || token.substr(0, eq) != key)
            fail("expected '" + key + "=<value>', got '" + token + "'");
        return token.substr(eq + 1);
    }
};

OrientedBox parse_box(Parser& p, const std::vector<std::string>& tok, int image_w, int image_h) {
    if (tok.size() != 7)
        p.fail("box line needs 7 tokens: <kind> <class> <cx> <cy> <w> <h> <theta>");
    OrientedBox b;
    b.class_id = class_id_from_code(tok[1]);
    if (b.class_id < 0) p.fail("field 'class': unknown class code '" + tok[1] + "'");
    b.cx = p.need_double("cx", tok[2]);
    b.cy = p.need_double("cy", tok[3]);
    b.w = p.need_double("w", tok[4]);
    b.h = p.need_double("h", tok[5]);
    b.theta = normalize_theta(p.need_double("theta", tok[6]));
    if (!(b.w > 0) || !(b.h > 0)) p.fail("field 'w/h': box extents must be positive");
    if (b.cx < 0 || b.cx > image_w || b.cy < 0 || b.cy > image_h)
        p.fail("field 'cx/cy': box center outside image bounds");
    return b;
}

} // namespace

AnnotationFile parse_annotations(std::istream& in, const std::string& source_name) {
    Parser p{in, source_name};
    AnnotationFile file;
    std::string line;
    bool have_header = false;
    bool in_block = false;
    PairRecord rec;
    bool have_rgb = false, have_ir = false, have_cond = false;
    std::set<long> seen_ids;

    while (std::getline(in, line)) {
        ++p.line_no;
        auto tok = split_ws(line);
        if (tok.empty() || tok[0][0] == '#') continue;
        const std::string& kw = tok[0];

        if (!have_header) {
            if (kw != "images" || tok.size() != 3)
                p.fail("expected header 'images <W> <H>'");
            file.image_w = static_cast<int>(p.need_long("image_w", tok[1]));
            file.image_h = static_cast<int>(p.need_long("image_h", tok[2]));
            if (file.image_w < 1 || file.image_h < 1)
                p.fail("field 'images': dimensions must be positive");
            have_header = true;
            continue;
        }

        if (!in_block) {
            if (kw != "pair") p.fail("expected 'pair id=<n> split=<train|test>'");
            if (tok.size() != 3) p.fail("'pair' needs id= and split=");
            rec = PairRecord{};
            rec.id = p.need_long("id", p.keyed("id", tok[1]));
            if (!seen_ids.insert(rec.id).second)
                p.fail("field 'id': duplicate record id " + std::to_string(rec.id));
            std::string split = p.keyed("split", tok[2]);
            if (split != "train" && split != "test")
                p.fail("field 'split': must be 'train' or 'test', got '" + split + "'");
            rec.is_train = (split == "train");
            in_block = true;
            have_rgb = have_ir = have_cond = false;
            continue;
        }

        if (kw == "rgb" || kw == "ir") {
            if (tok.size() != 2) p.fail("'" + kw + "' needs exactly one path token");
            (kw == "rgb" ? rec.rgb_path : rec.ir_path) = tok[1];
            (kw == "rgb" ? have_rgb : have_ir) = true;
        } else if (kw == "cond") {
            if (tok.size() != 7)
                p.fail("'cond' needs 6 key=value fields in order "
                       "altitude_m angle_deg time weather illumination scenario");
            ConditionRecord c;
            c.altitude_m = p.need_double("altitude_m", p.keyed("altitude_m", tok[1]));
            c.angle_deg = p.need_double("angle_deg", p.keyed("angle_deg", tok[2]));
            if (!parse_enum(p.keyed("time", tok[3]), c.time))
                p.fail("field 'time': unknown value '" + p.keyed("time", tok[3]) + "'");
            if (!parse_enum(p.keyed("weather", tok[4]), c.weather))
                p.fail("field 'weather': unknown value '" + p.keyed("weather", tok[4]) + "'");
            if (!parse_enum(p.keyed("illumination", tok[5]), c.illumination))
                p.fail("field 'illumination': unknown value '" +
                       p.keyed("illumination", tok[5]) + "'");
            if (!parse_enum(p.keyed("scenario", tok[6]), c.scenario))
                p.fail("field 'scenario': unknown value '" + p.keyed("scenario", tok[6]) + "'");
            try {
                c.validate();
            } catch (const ValidationError& e) {
                p.fail(e.what());
            }
            rec.condition = c;
            have_cond = true;
        } else if (kw == "rbox") {
            rec.rgb_boxes.push_back(parse_box(p, tok, file.image_w, file.image_h));
        } else if (kw == "ibox") {
            rec.ir_boxes.push_back(parse_box(p, tok, file.image_w, file.image_h));
        } else if (kw == "end") {
            if (!have_rgb) p.fail("record missing 'rgb' line");
            if (!have_ir) p.fail("record missing 'ir' line");
            if (!have_cond) p.fail("record missing 'cond' line");
            file.records.push_back(std::move(rec));
            in_block = false;
        } else {
            p.fail("unknown keyword '" + kw + "'");
        }
    }
    if (in_block) p.fail("unterminated record (missing 'end')");
    if (!have_header) p.fail("empty file: missing 'images <W> <H>' header");

    std::sort(file.records.begin(), file.records.end(),
              [](const PairRecord& a, const PairRecord& b) { return a.id < b.id; });
    return file;
}

AnnotationFile load_annotations(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open annotation file: " + path);
    return parse_annotations(in, path);
}

namespace {

void serialize_box(std::string& out, const char* kind, const OrientedBox& b) {
    out += kind;
    out += ' ';
    out += class_code(b.class_id);
    out += ' ';
    out += format_double(b.cx);
    out += ' ';
    out += format_double(b.cy);
    out += ' ';
    out += format_double(b.w);
    out += ' ';
    out += format_double(b.h);
    out += ' ';
    out += format_double(b.theta);
    out += '\n';
}

} // namespace

std::string serialize_annotations(const AnnotationFile& f) {
    std::string out;
    out += "images " + std::to_string(f.image_w) + " " + std::to_string(f.image_h) + "\n";
    std::vector<const PairRecord*> order;
    order.reserve(f.records.size());
    for (const auto& r : f.records) order.push_back(&r);
    std::sort(order.begin(), order.end(),
              [](const PairRecord* a, const PairRecord* b) { return a->id < b->id; });
    for (const PairRecord* r : order) {
        out += "pair id=" + std::to_string(r->id) +
               " split=" + (r->is_train ? "train" : "test") + "\n";
        out += "rgb " + r->rgb_path + "\n";
        out += "ir " + r->ir_path + "\n";
        const ConditionRecord& c = r->condition;
        out += "cond altitude_m=" + format_double(c.altitude_m) +
               " angle_deg=" + format_double(c.angle_deg) +
               " time=" + std::string(to_string(c.time)) +
               " weather=" + std::string(to_string(c.weather)) +
               " illumination=" + std::string(to_string(c.illumination)) +
               " scenario=" + std::string(to_string(c.scenario)) + "\n";
        for (const auto& b : r->rgb_boxes) serialize_box(out, "rbox", b);
        for (const auto& b : r->ir_boxes) serialize_box(out, "ibox", b);
        out += "end\n";
    }
    return out;
}

void save_annotations(const AnnotationFile& f, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write annotation file: " + path);
    out << serialize_annotations(f);
    if (!out) throw IoError("write failed: " + path);
}

std::vector<PairRecord> load_dataset(const std::string& path, std::string_view split) {
    if (split != "train" && split != "test")
        throw ConfigError("split must be 'train' or 'test', got '" + std::string(split) + "'");
    AnnotationFile f = load_annotations(path);
    std::vector<PairRecord> out;
    const bool want_train = (split == "train");
    for (auto& r : f.records)
        if (r.is_train == want_train) out.push_back(std::move(r));
    return out;
}

} // namespace pcdf
