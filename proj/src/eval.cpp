#include "pcdf/eval.hpp"

#include <algorithm>
#include <cmath>

namespace pcdf {

namespace {

constexpr double kClipEps = 1e-9;

using Point = std::array<double, 2>;

double shoelace_area(const std::vector<Point>& poly) {
    double s = 0;
    const size_t n = poly.size();
    for (size_t i = 0; i < n; ++i) {
        const Point& a = poly[i];
        const Point& b = poly[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    return std::abs(s) * 0.5;
}

double cross_side(const Point& a, const Point& b, const Point& p) {
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
}

Point intersect(const Point& a, const Point& b, const Point& p, const Point& q) {
    // line through a-b intersected with segment p-q (caller guarantees crossing)
    const double a1 = b[1] - a[1], b1 = a[0] - b[0];
    const double c1 = a1 * a[0] + b1 * a[1];
    const double a2 = q[1] - p[1], b2 = p[0] - q[0];
    const double c2 = a2 * p[0] + b2 * p[1];
    const double det = a1 * b2 - a2 * b1;
    return {(b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det};
}

/// Sutherland-Hodgman: clips `subject` by each edge of convex
/// counter-clockwise `clip`.
std::vector<Point> clip_polygon(std::vector<Point> subject, const std::vector<Point>& clip) {
    for (size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
        const Point& ca = clip[i];
        const Point& cb = clip[(i + 1) % clip.size()];
        std::vector<Point> out;
        out.reserve(subject.size() + 2);
        for (size_t j = 0; j < subject.size(); ++j) {
            const Point& p = subject[j];
            const Point& q = subject[(j + 1) % subject.size()];
            const bool pin = cross_side(ca, cb, p) >= -kClipEps;
            const bool qin = cross_side(ca, cb, q) >= -kClipEps;
            if (pin) {
                out.push_back(p);
                if (!qin) out.push_back(intersect(ca, cb, p, q));
            } else if (qin) {
                out.push_back(intersect(ca, cb, p, q));
            }
        }
        subject = std::move(out);
    }
    return subject;
}

} // namespace

double box_area(const OrientedBox& b) { return b.w > 0 && b.h > 0 ? b.w * b.h : 0.0; }

std::array<Point, 4> box_corners(const OrientedBox& b) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    const double hw = b.w * 0.5, hh = b.h * 0.5;
    // counter-clockwise in a y-up frame
    const std::array<Point, 4> local = {{{-hw, -hh}, {hw, -hh}, {hw, hh}, {-hw, hh}}};
    std::array<Point, 4> out;
    for (int i = 0; i < 4; ++i) {
        out[i][0] = b.cx + c * local[i][0] - s * local[i][1];
        out[i][1] = b.cy + s * local[i][0] + c * local[i][1];
    }
    return out;
}

double rotated_iou(const OrientedBox& a, const OrientedBox& b) {
    const double area_a = box_area(a), area_b = box_area(b);
    if (area_a <= 0 || area_b <= 0) return 0.0;
    const auto ca = box_corners(a);
    const auto cb = box_corners(b);
    std::vector<Point> pa(ca.begin(), ca.end());
    std::vector<Point> pb(cb.begin(), cb.end());
    const double inter = shoelace_area(clip_polygon(std::move(pa), pb));
    const double uni = area_a + area_b - inter;
    if (uni <= 0) return 0.0;
    return std::min(1.0, std::max(0.0, inter / uni));
}

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<OrientedBox>& gts,
                             double iou_thresh) {
    MatchResult res;
    res.tp.assign(dets.size(), false);
    res.order.resize(dets.size());
    for (size_t i = 0; i < dets.size(); ++i) res.order[static_cast<size_t>(i)] = static_cast<int>(i);
    std::stable_sort(res.order.begin(), res.order.end(), [&](int a, int b) {
        return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
    });
    std::vector<bool> gt_used(gts.size(), false);
    for (int idx : res.order) {
        const Detection& d = dets[static_cast<size_t>(idx)];
        int best = -1;
        double best_iou = iou_thresh;
        for (size_t j = 0; j < gts.size(); ++j) {
            if (gt_used[j] || gts[j].class_id != d.box.class_id) continue;
            const double iou = rotated_iou(d.box, gts[j]);
            if (iou > best_iou || (best < 0 && iou == best_iou)) {
                best = static_cast<int>(j);
                best_iou = iou;
            }
        }
        if (best >= 0) {
            gt_used[static_cast<size_t>(best)] = true;
            res.tp[static_cast<size_t>(idx)] = true;
        }
    }
    return res;
}

double average_precision(const std::vector<bool>& tp, int gt_count) {
    if (gt_count <= 0) return 0.0;
    const size_t n = tp.size();
    // precision at each prefix, then the running-max envelope from the tail
    std::vector<double> envelope(n);
    int cum_tp = 0;
    for (size_t i = 0; i < n; ++i) {
        if (tp[i]) ++cum_tp;
        envelope[i] = static_cast<double>(cum_tp) / static_cast<double>(i + 1);
    }
    for (size_t i = n; i-- > 1;)
        envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
    double ap = 0;
    for (size_t i = 0; i < n; ++i)
        if (tp[i]) ap += envelope[i] / static_cast<double>(gt_count);
    return ap;
}

ApCell evaluate_samples(const std::vector<const SampleEval*>& samples,
                        double iou_thresh,
                        std::map<int, double>* per_class_out) {
    struct Scored {
        double score;
        bool tp;
    };
    std::map<int, std::vector<Scored>> by_class;
    std::map<int, int> gt_per_class;
    ApCell cell;
    cell.sample_count = static_cast<int>(samples.size());
    for (const SampleEval* s : samples) {
        const auto match = match_detections(s->detections, s->ground_truth, iou_thresh);
        for (int idx : match.order) {
            const Detection& d = s->detections[static_cast<size_t>(idx)];
            by_class[d.box.class_id].push_back({d.score, match.tp[static_cast<size_t>(idx)]});
        }
        for (const auto& g : s->ground_truth) {
            ++gt_per_class[g.class_id];
            ++cell.gt_count;
        }
    }
    double sum_ap = 0;
    int classes = 0;
    for (const auto& [cls, gt_count] : gt_per_class) {
        if (gt_count <= 0) continue;
        auto it = by_class.find(cls);
        std::vector<bool> tp;
        if (it != by_class.end()) {
            auto& scored = it->second;
            std::stable_sort(scored.begin(), scored.end(),
                             [](const Scored& a, const Scored& b) { return a.score > b.score; });
            tp.reserve(scored.size());
            for (const auto& s : scored) tp.push_back(s.tp);
        }
        const double ap = average_precision(tp, gt_count);
        if (per_class_out) (*per_class_out)[cls] = ap;
        sum_ap += ap;
        ++classes;
    }
    if (classes > 0) {
        cell.map50 = sum_ap / classes;
        cell.defined = true;
    }
    return cell;
}

EvalReport condition_report(const std::vector<SampleEval>& samples, double iou_thresh) {
    EvalReport rep;
    rep.sample_count = static_cast<int>(samples.size());
    std::vector<const SampleEval*> all;
    all.reserve(samples.size());
    for (const auto& s : samples) all.push_back(&s);
    const ApCell global = evaluate_samples(all, iou_thresh, &rep.per_class_ap);
    rep.map50 = global.map50;
    rep.defined = global.defined;

    for (int attr = 0; attr < kNumAttributes; ++attr) {
        auto& cells = rep.per_condition[static_cast<size_t>(attr)];
        for (const auto& label : attribute_buckets(attr)) cells[label] = ApCell{};
        std::map<std::string, std::vector<const SampleEval*>> groups;
        for (const auto& s : samples)
            groups[bucketize(s.condition).values[static_cast<size_t>(attr)]].push_back(&s);
        for (const auto& [label, group] : groups)
            cells[label] = evaluate_samples(group, iou_thresh, nullptr);
    }
    return rep;
}

namespace {

constexpr std::array<const char*, kNumAttributes> kAttrCodes = {"AL", "AN", "TI",
                                                                "WE", "IL", "SC"};

std::string fixed3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

} // namespace

std::string render_report(const EvalReport& rep) {
    std::string out;
    out += "per-class AP@0.5\n";
    for (const auto& [cls, ap] : rep.per_class_ap) {
        out += "  ";
        out += class_code(cls);
        out += "  " + fixed3(ap) + "\n";
    }
    out += "mAP@0.5  ";
    out += rep.defined ? fixed3(rep.map50) : std::string("n/a");
    out += "  (samples " + std::to_string(rep.sample_count) + ")\n\n";
    out += "condition breakdown\n";
    for (int attr = 0; attr < kNumAttributes; ++attr) {
        for (const auto& label : attribute_buckets(attr)) {
            const ApCell& c = rep.per_condition[static_cast<size_t>(attr)].at(label);
            out += "  ";
            out += kAttrCodes[static_cast<size_t>(attr)];
            out += "  ";
            out += label;
            const int pad = 18 - static_cast<int>(label.size());
            out.append(static_cast<size_t>(pad > 0 ? pad : 1), ' ');
            out += c.defined ? fixed3(c.map50) : std::string("n/a   ");
            out += "  (samples " + std::to_string(c.sample_count) +
                   ", gt " + std::to_string(c.gt_count) + ")\n";
        }
    }
    return out;
}

std::string serialize_report(const EvalReport& rep) {
    std::string out;
    out += "map50 ";
    out += rep.defined ? format_double(rep.map50) : std::string("n/a");
    out += " samples " + std::to_string(rep.sample_count) + "\n";
    for (const auto& [cls, ap] : rep.per_class_ap) {
        out += "class ";
        out += class_code(cls);
        out += " ap " + format_double(ap) + "\n";
    }
    for (int attr = 0; attr < kNumAttributes; ++attr) {
        for (const auto& label : attribute_buckets(attr)) {
            const ApCell& c = rep.per_condition[static_cast<size_t>(attr)].at(label);
            out += "cell ";
            out += kAttributeNames[static_cast<size_t>(attr)];
            out += " " + label + " map50 ";
            out += c.defined ? format_double(c.map50) : std::string("n/a");
            out += " samples " + std::to_string(c.sample_count) +
                   " gt " + std::to_string(c.gt_count) + "\n";
        }
    }
    return out;
}

} // namespace pcdf
