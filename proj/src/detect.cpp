#include "pcdf/detect.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace pcdf {

using nn::Graph;
using nn::Node;
using nn::Param;
using nn::ParamStore;
using nn::Tensor;

std::string_view to_string(Stage s) {
    return s == Stage::warmup ? "warmup" : "full";
}

StreamMode parse_stream_mode(std::string_view s) {
    if (s == "both") return StreamMode::both;
    if (s == "rgb_only") return StreamMode::rgb_only;
    if (s == "ir_only") return StreamMode::ir_only;
    throw ConfigError("unknown stream mode: " + std::string(s));
}

std::string_view to_string(StreamMode m) {
    switch (m) {
        case StreamMode::both: return "both";
        case StreamMode::rgb_only: return "rgb_only";
        default: return "ir_only";
    }
}

void DetectorConfig::validate() const {
    if (image_w < 8 || image_h < 8) throw ConfigError("image size too small");
    if (stride != 8) throw ConfigError("the backbone is fixed at stride 8");
    if (image_w % stride != 0 || image_h % stride != 0)
        throw ConfigError("image size must be a multiple of the stride");
    if (channels < 1) throw ConfigError("channels must be positive");
    if (classes < 1) throw ConfigError("classes must be positive");
    if (classes > kNumClasses) throw ConfigError("classes exceed the class table");
    if (text_dim < 1) throw ConfigError("text_dim must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (epochs_stage1 < 0 || epochs_stage2 < 0) throw ConfigError("epochs must be >= 0");
    if (!(opt.lr > 0)) throw ConfigError("learning rate must be positive");
    if (!(lr_decay > 0 && lr_decay <= 1)) throw ConfigError("lr_decay must be in (0,1]");
    if (cmd_order < 2) throw ConfigError("cmd_order must be >= 2");
    if (!(score_thresh >= 0 && score_thresh <= 1))
        throw ConfigError("score_thresh must be in [0,1]");
    if (!(nms_iou >= 0 && nms_iou <= 1)) throw ConfigError("nms_iou must be in [0,1]");
    if (lambdas.lambda1 < 0 || lambdas.lambda2 < 0 || lambdas.lambda3 < 0)
        throw ConfigError("loss weights must be >= 0");
    if (ablate.no_prompt && ablate.fusion != FusionMode::pcdf)
        throw ConfigError("no_prompt replaces the gate with channel attention; "
                          "it cannot combine with an explicit fusion ablation");
    if (ablate.no_prompt && ablate.ungated_prompt)
        throw ConfigError("no_prompt and ungated_prompt conflict");
    if (ablate.no_decouple && ablate.no_prompt)
        throw ConfigError("no_decouple needs the prompt path to drive the gate");
}

std::string DetectorConfig::serialize() const {
    std::ostringstream os;
    os << "image_w " << image_w << "\nimage_h " << image_h
       << "\nchannels " << channels << "\nclasses " << classes
       << "\nstride " << stride << "\ntext_dim " << text_dim
       << "\nbatch_size " << batch_size
       << "\nepochs_stage1 " << epochs_stage1
       << "\nepochs_stage2 " << epochs_stage2
       << "\nlr " << format_double(opt.lr)
       << "\nmomentum " << format_double(opt.momentum)
       << "\nweight_decay " << format_double(opt.weight_decay)
       << "\nlr_decay " << format_double(lr_decay)
       << "\nlambda1 " << format_double(lambdas.lambda1)
       << "\nlambda2 " << format_double(lambdas.lambda2)
       << "\nlambda3 " << format_double(lambdas.lambda3)
       << "\ncmd_order " << cmd_order
       << "\nscore_thresh " << format_double(score_thresh)
       << "\nnms_iou " << format_double(nms_iou)
       << "\nseed " << seed
       << "\nstream " << to_string(stream)
       << "\nfusion " << to_string(ablate.fusion)
       << "\nungated_prompt " << (ablate.ungated_prompt ? 1 : 0)
       << "\nno_prompt " << (ablate.no_prompt ? 1 : 0)
       << "\nno_distill " << (ablate.no_distill ? 1 : 0)
       << "\nno_irrelevance " << (ablate.no_irrelevance ? 1 : 0)
       << "\nno_discrimination " << (ablate.no_discrimination ? 1 : 0)
       << "\nno_decouple " << (ablate.no_decouple ? 1 : 0) << "\n";
    return os.str();
}

uint64_t DetectorConfig::digest() const { return fnv1a64(serialize()); }

// ---- samples -----------------------------------------------------------------

Sample to_sample(const PairRecord& rec, const std::string& root_dir) {
    namespace fs = std::filesystem;
    Sample s;
    s.rgb = load_raster(fs::path(root_dir) / rec.rgb_path);
    s.ir = load_raster(fs::path(root_dir) / rec.ir_path);
    if (s.rgb.channels != 3 || s.ir.channels != 1)
        throw ValidationError("pair " + std::to_string(rec.id) +
                              ": expected a 3-channel rgb and 1-channel ir raster");
    s.boxes = rec.rgb_boxes;
    s.condition = rec.condition;
    return s;
}

std::vector<Sample> load_samples(const std::string& annotation_path,
                                 std::string_view split) {
    const std::string root =
        std::filesystem::path(annotation_path).parent_path().string();
    std::vector<Sample> out;
    for (const PairRecord& rec : load_dataset(annotation_path, split))
        out.push_back(to_sample(rec, root));
    return out;
}

// ---- backbone ----------------------------------------------------------------

namespace {

constexpr int kBackboneStrides[4] = {2, 2, 2, 1};

Node* pp(Graph& g, const ParamStore& s, const std::string& name) {
    return nn::param(g, nn::require_param(s, name));
}

std::string stage_name(const std::string& prefix, int i, const char* leaf) {
    return prefix + "c" + std::to_string(i + 1) + "." + leaf;
}

} // namespace

void create_backbone_params(ParamStore& store, const std::string& prefix,
                            int in_channels, int channels, Rng& rng) {
    int cin = in_channels;
    for (int i = 0; i < 4; ++i) {
        Param* w = store.create(stage_name(prefix, i, "w"), {channels, cin, 3, 3});
        nn::fill_kaiming(rng, w->value, cin * 9);
        store.create(stage_name(prefix, i, "b"), {channels});
        cin = channels;
    }
}

Node* backbone_forward(Graph& g, const ParamStore& store, const std::string& prefix,
                       Node* x) {
    for (int i = 0; i < 4; ++i)
        x = nn::relu(g, nn::conv2d(g, x, pp(g, store, stage_name(prefix, i, "w")),
                                   pp(g, store, stage_name(prefix, i, "b")),
                                   kBackboneStrides[i]));
    return x;
}

// ---- targets -----------------------------------------------------------------

BatchTargets make_targets(const std::vector<const Sample*>& batch,
                          const DetectorConfig& cfg) {
    const int N = static_cast<int>(batch.size());
    const int gh = cfg.image_h / cfg.stride, gw = cfg.image_w / cfg.stride;
    const int K = cfg.classes;
    BatchTargets t;
    t.obj_t = Tensor({N, 1, gh, gw});
    t.obj_w = Tensor({N, 1, gh, gw});
    for (double& v : t.obj_w.data) v = 1.0;
    t.cls_t = Tensor({N, K, gh, gw});
    t.cls_w = Tensor({N, K, gh, gw});
    t.reg_t = Tensor({N, 4, gh, gw});
    t.reg_m = Tensor({N, 4, gh, gw});

    const auto cell = [gh, gw](int n, int c, int iy, int ix, int channels) {
        return ((static_cast<size_t>(n) * channels + c) * gh + iy) * gw + ix;
    };

    for (int n = 0; n < N; ++n) {
        std::vector<double> best(static_cast<size_t>(gh) * gw, -1.0);
        std::vector<const OrientedBox*> pick(static_cast<size_t>(gh) * gw, nullptr);
        for (const OrientedBox& b : batch[n]->boxes) {
            if (b.class_id < 0 || b.class_id >= K)
                throw ValidationError("box class " + std::to_string(b.class_id) +
                                      " outside the configured " + std::to_string(K) +
                                      " classes");
            if (!(b.w > 0) || !(b.h > 0))
                throw ValidationError("box extents must be positive");
            const int ix = std::clamp(static_cast<int>(b.cx / cfg.stride), 0, gw - 1);
            const int iy = std::clamp(static_cast<int>(b.cy / cfg.stride), 0, gh - 1);
            const double area = b.w * b.h;
            const size_t at = static_cast<size_t>(iy) * gw + ix;
            if (area > best[at]) {  // colliding centers: the larger object wins
                best[at] = area;
                pick[at] = &b;
            }
        }
        for (int iy = 0; iy < gh; ++iy)
            for (int ix = 0; ix < gw; ++ix) {
                const OrientedBox* b = pick[static_cast<size_t>(iy) * gw + ix];
                if (!b) continue;
                ++t.positives;
                t.obj_t.data[cell(n, 0, iy, ix, 1)] = 1.0;
                t.cls_t.data[cell(n, b->class_id, iy, ix, K)] = 1.0;
                for (int k = 0; k < K; ++k) t.cls_w.data[cell(n, k, iy, ix, K)] = 1.0;
                const double vals[4] = {b->cx / cfg.stride - ix, b->cy / cfg.stride - iy,
                                        std::log(b->w / cfg.stride),
                                        std::log(b->h / cfg.stride)};
                for (int c = 0; c < 4; ++c) {
                    t.reg_t.data[cell(n, c, iy, ix, 4)] = vals[c];
                    t.reg_m.data[cell(n, c, iy, ix, 4)] = 1.0;
                }
            }
    }
    return t;
}

// ---- decoding ----------------------------------------------------------------

namespace {

double sigmoid_v(double z) { return 1.0 / (1.0 + std::exp(-z)); }

} // namespace

std::vector<Detection> decode_head(const Tensor& head, int sample,
                                   const DetectorConfig& cfg) {
    if (head.ndim() != 4 || head.dim(1) != 5 + cfg.classes)
        throw ValidationError("head map must be [N," + std::to_string(5 + cfg.classes) +
                              ",gh,gw]");
    const int gh = head.dim(2), gw = head.dim(3);
    const int K = cfg.classes;
    const auto at = [&](int c, int iy, int ix) {
        return head.data[((static_cast<size_t>(sample) * (5 + K) + c) * gh + iy) * gw +
                         ix];
    };
    std::vector<Detection> out;
    for (int iy = 0; iy < gh; ++iy)
        for (int ix = 0; ix < gw; ++ix) {
            const double obj = sigmoid_v(at(4, iy, ix));
            int best_k = 0;
            double best_s = -1.0;
            for (int k = 0; k < K; ++k) {
                const double s = sigmoid_v(at(5 + k, iy, ix));
                if (s > best_s) {
                    best_s = s;
                    best_k = k;
                }
            }
            const double score = obj * best_s;
            if (!(score > cfg.score_thresh)) continue;
            Detection d;
            d.score = score;
            d.box.cx = (ix + sigmoid_v(at(0, iy, ix))) * cfg.stride;
            d.box.cy = (iy + sigmoid_v(at(1, iy, ix))) * cfg.stride;
            d.box.w = std::min(std::exp(std::min(at(2, iy, ix), 4.0)) * cfg.stride,
                               static_cast<double>(cfg.image_w));
            d.box.h = std::min(std::exp(std::min(at(3, iy, ix), 4.0)) * cfg.stride,
                               static_cast<double>(cfg.image_h));
            d.box.theta = 0.0;
            d.box.class_id = best_k;
            out.push_back(d);
        }
    return out;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    std::vector<int> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dets[static_cast<size_t>(a)].score > dets[static_cast<size_t>(b)].score;
    });
    std::vector<Detection> kept;
    for (int i : order) {
        const Detection& d = dets[static_cast<size_t>(i)];
        bool suppressed = false;
        for (const Detection& k : kept)
            if (k.box.class_id == d.box.class_id &&
                rotated_iou(k.box, d.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// ---- detector -----------------------------------------------------------------

namespace {

const DetectorConfig& validated(const DetectorConfig& cfg) {
    cfg.validate();
    return cfg;
}

} // namespace

Detector::Detector(const DetectorConfig& cfg)
    : cfg_(validated(cfg)),
      decouple_(cfg.channels, cfg.text_dim, mix_seed(cfg.seed, 0xdc01)),
      fusion_(cfg.channels, cfg.text_dim, mix_seed(cfg.seed, 0xf501)),
      prompt_(cfg.text_dim, cfg.channels, mix_seed(cfg.seed, 0x9601)) {}

FusionMode Detector::effective_fusion() const {
    return cfg_.ablate.no_prompt ? FusionMode::channel_attention : cfg_.ablate.fusion;
}

bool Detector::single_stage() const {
    return cfg_.stream != StreamMode::both || cfg_.ablate.no_decouple;
}

int Detector::head_in_channels() const {
    if (cfg_.stream != StreamMode::both) return 2 * cfg_.channels;
    return fusion_.out_channels(effective_fusion());
}

void Detector::create_params(ParamStore& store) const {
    Rng rng(mix_seed(cfg_.seed, 0xde70));
    create_backbone_params(store, "backbone.rgb.", 3, cfg_.channels, rng);
    create_backbone_params(store, "backbone.ir.", 1, cfg_.channels, rng);
    Param* hw = store.create("head.c1.w", {cfg_.channels, head_in_channels(), 3, 3});
    nn::fill_kaiming(rng, hw->value, head_in_channels() * 9);
    store.create("head.c1.b", {cfg_.channels});
    // zeroed output layer: every logit starts at 0, so a blank image scores
    // exactly 0.5 * 0.5 = score_thresh and is excluded by the strict cut
    store.create("head.out.w", {5 + cfg_.classes, cfg_.channels, 3, 3});
    store.create("head.out.b", {5 + cfg_.classes});
    prompt_.create_params(store);
    decouple_.create_params(store);
    fusion_.create_params(store);
}

nn::Node* Detector::head_forward(Graph& g, const ParamStore& store, Node* fused) const {
    Node* h = nn::relu(g, nn::conv2d(g, fused, pp(g, store, "head.c1.w"),
                                     pp(g, store, "head.c1.b"), 1));
    return nn::conv2d(g, h, pp(g, store, "head.out.w"), pp(g, store, "head.out.b"), 1);
}

nn::Node* Detector::fuse_self(Graph& g, Node* f) const {
    Node* half = nn::scale(g, f, 0.5);
    switch (cfg_.stream != StreamMode::both ? FusionMode::pcdf : effective_fusion()) {
        case FusionMode::add:
            return f;
        case FusionMode::concat:
            return nn::concat_channels(g, {half, half, nn::scale(g, f, 0.0)});
        default:
            return nn::concat_channels(g, {half, half});
    }
}

nn::Node* Detector::prompt_embeddings(Graph& g, ParamStore& store,
                                      const std::vector<const Sample*>& batch,
                                      Node* f_rgb, Node* f_ir) const {
    const int N = static_cast<int>(batch.size());
    if (cfg_.ablate.ungated_prompt) {
        Tensor e({N, cfg_.text_dim});
        for (int n = 0; n < N; ++n) {
            const auto v =
                prompt_.encoder().encode(build_initial_prompt(batch[n]->condition));
            std::copy(v.begin(), v.end(),
                      e.data.begin() + static_cast<long>(n) * cfg_.text_dim);
        }
        return nn::sigmoid(g, nn::input(g, std::move(e)));
    }
    std::vector<Node*> rows;
    rows.reserve(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        Node* fr = nn::slice_batch(g, f_rgb, n, n + 1);
        Node* fi = nn::slice_batch(g, f_ir, n, n + 1);
        rows.push_back(prompt_.run(g, store, fr, fi, batch[n]->condition).embedding);
    }
    return nn::sigmoid(g, nn::concat_rows(g, rows));
}

namespace {

Tensor batch_raster_tensor(const std::vector<const Sample*>& batch, bool rgb,
                           const DetectorConfig& cfg) {
    const int N = static_cast<int>(batch.size());
    const int C = rgb ? 3 : 1;
    Tensor t({N, C, cfg.image_h, cfg.image_w});
    const size_t plane = static_cast<size_t>(C) * cfg.image_h * cfg.image_w;
    for (int n = 0; n < N; ++n) {
        const Raster& r = rgb ? batch[n]->rgb : batch[n]->ir;
        if (r.width != cfg.image_w || r.height != cfg.image_h || r.channels != C)
            throw ValidationError("sample raster does not match the configured " +
                                  std::to_string(cfg.image_w) + "x" +
                                  std::to_string(cfg.image_h) + " geometry");
        std::copy(r.data.begin(), r.data.end(),
                  t.data.begin() + static_cast<long>(plane * n));
    }
    return t;
}

} // namespace

Detector::Forward Detector::fused_features(Graph& g, ParamStore& store,
                                           const std::vector<const Sample*>& batch,
                                           Stage stage) const {
    Forward fw;
    const int N = static_cast<int>(batch.size());
    if (cfg_.stream != StreamMode::both) {
        const bool rgb = cfg_.stream == StreamMode::rgb_only;
        Node* in = nn::input(g, batch_raster_tensor(batch, rgb, cfg_));
        Node* f = backbone_forward(g, store, rgb ? "backbone.rgb." : "backbone.ir.", in);
        fw.fused = fuse_self(g, f);
        return fw;
    }
    Node* f_rgb = backbone_forward(g, store, "backbone.rgb.",
                                   nn::input(g, batch_raster_tensor(batch, true, cfg_)));
    Node* f_ir = backbone_forward(g, store, "backbone.ir.",
                                  nn::input(g, batch_raster_tensor(batch, false, cfg_)));
    if (stage == Stage::warmup || cfg_.ablate.no_decouple) {
        Node* cond;
        if (cfg_.ablate.no_prompt) {
            cond = nn::input(g, Tensor({N, cfg_.text_dim}));  // ignored by the gate
        } else {
            fw.text = prompt_embeddings(g, store, batch, f_rgb, f_ir);
            cond = fw.text;
        }
        fw.fused = fusion_.fuse_variant(g, store, f_rgb, f_ir, cond, effective_fusion());
        return fw;
    }
    fw.bundle = decouple_.run(g, store, f_rgb, f_ir);
    if (!cfg_.ablate.no_prompt && !cfg_.ablate.no_distill)
        fw.text = prompt_embeddings(g, store, batch, f_rgb, f_ir);
    fw.fused = fusion_.fuse_variant(g, store, fw.bundle.f_inv_rgb, fw.bundle.f_inv_ir,
                                    fw.bundle.f_spec, effective_fusion());
    return fw;
}

namespace {

struct DetParts {
    Node* loss = nullptr;
    double obj = 0, cls = 0, reg = 0;
};

DetParts detection_loss(Graph& g, Node* head, const BatchTargets& t) {
    Node* reg_xy = nn::sigmoid(g, nn::slice_channels(g, head, 0, 2));
    Node* reg_wh = nn::slice_channels(g, head, 2, 4);
    Node* reg = nn::concat_channels(g, {reg_xy, reg_wh});
    Node* obj = nn::slice_channels(g, head, 4, 5);
    Node* cls = nn::slice_channels(g, head, 5, head->value.dim(1));

    Node* l_obj = nn::bce_logits(g, obj, t.obj_t, t.obj_w);
    Node* l_cls = nn::bce_logits(g, cls, t.cls_t, t.cls_w);
    Node* d = nn::mul(g, nn::sub(g, reg, nn::input(g, t.reg_t)),
                      nn::input(g, t.reg_m));
    const double numel = static_cast<double>(t.reg_t.numel());
    Node* l_reg = nn::scale(g, nn::mean_all(g, nn::pow_int(g, d, 2)),
                            numel / std::max(1, 4 * t.positives));
    DetParts out;
    out.loss = nn::add(g, nn::add(g, l_obj, l_cls), l_reg);
    out.obj = nn::scalar_of(l_obj);
    out.cls = nn::scalar_of(l_cls);
    out.reg = nn::scalar_of(l_reg);
    return out;
}

} // namespace

nn::Node* Detector::batch_loss(Graph& g, ParamStore& store,
                               const std::vector<const Sample*>& batch, Stage stage,
                               LossReport* report) const {
    if (batch.empty()) throw ValidationError("empty minibatch");
    const Stage eff = single_stage() ? Stage::warmup : stage;
    Forward fw = fused_features(g, store, batch, eff);
    const BatchTargets targets = make_targets(batch, cfg_);

    LossReport rep;
    DetParts det = detection_loss(g, head_forward(g, store, fw.fused), targets);
    rep.det = nn::scalar_of(det.loss);
    rep.obj = det.obj;
    rep.cls = det.cls;
    rep.reg = det.reg;

    Node* total = det.loss;
    if (eff == Stage::full && cfg_.stream == StreamMode::both) {
        Node* l_dt = nullptr;
        Node* l_irr = nullptr;
        Node* l_dc = nullptr;
        if (!cfg_.ablate.no_distill && fw.text)
            l_dt = distillation_loss(g, fw.bundle, fw.text, cfg_.cmd_order);
        if (!cfg_.ablate.no_irrelevance) l_irr = irrelevance_loss(g, store, fw.bundle);
        if (!cfg_.ablate.no_discrimination) {
            StreamLossFn per_stream = [&](Graph& gg, Node* f) {
                return detection_loss(gg, head_forward(gg, store, fuse_self(gg, f)),
                                      targets)
                    .loss;
            };
            l_dc = discrimination_loss(g, fw.bundle, per_stream);
        }
        total = combine_losses(g, {{det.loss, 1.0},
                                   {l_dt, cfg_.lambdas.lambda1},
                                   {l_irr, cfg_.lambdas.lambda2},
                                   {l_dc, cfg_.lambdas.lambda3}});
        rep.dt = l_dt ? nn::scalar_of(l_dt) : 0.0;
        rep.irr = l_irr ? nn::scalar_of(l_irr) : 0.0;
        rep.dc = l_dc ? nn::scalar_of(l_dc) : 0.0;
        rep.dec = decoupling_loss(rep.dt, rep.irr, rep.dc, cfg_.lambdas).l_dec;
    }
    rep.total = nn::scalar_of(total);
    if (report) *report = rep;
    return total;
}

std::vector<Detection> Detector::predict(ParamStore& store, const Sample& s) const {
    Graph g;
    const std::vector<const Sample*> batch{&s};
    Forward fw = fused_features(g, store, batch,
                                single_stage() ? Stage::warmup : Stage::full);
    Node* head = head_forward(g, store, fw.fused);
    return nms(decode_head(head->value, 0, cfg_), cfg_.nms_iou);
}

std::optional<GateStats> Detector::gate_stats(ParamStore& store,
                                              const Sample& s) const {
    if (cfg_.stream != StreamMode::both || effective_fusion() != FusionMode::pcdf)
        return std::nullopt;
    Graph g;
    const std::vector<const Sample*> batch{&s};
    Node* f_rgb = backbone_forward(g, store, "backbone.rgb.",
                                   nn::input(g, batch_raster_tensor(batch, true, cfg_)));
    Node* f_ir = backbone_forward(g, store, "backbone.ir.",
                                  nn::input(g, batch_raster_tensor(batch, false, cfg_)));
    Node* cond = cfg_.ablate.no_decouple
                     ? prompt_embeddings(g, store, batch, f_rgb, f_ir)
                     : decouple_.run(g, store, f_rgb, f_ir).f_spec;
    const auto gate = fusion_.gate_weights(g, store, cond);
    GateStats st;
    st.w_rgb = 0;
    st.w_ir = 0;
    for (double v : gate.w_rgb->value.data) st.w_rgb += v;
    for (double v : gate.w_ir->value.data) st.w_ir += v;
    st.w_rgb /= static_cast<double>(gate.w_rgb->value.numel());
    st.w_ir /= static_cast<double>(gate.w_ir->value.numel());
    return st;
}

std::vector<std::string> Detector::trainable_prefixes(Stage stage) const {
    if (cfg_.stream == StreamMode::rgb_only) return {"backbone.rgb.", "head."};
    if (cfg_.stream == StreamMode::ir_only) return {"backbone.ir.", "head."};
    std::vector<std::string> out = {"backbone.", "head."};
    switch (effective_fusion()) {
        case FusionMode::pcdf: out.push_back("fusion.gate."); break;
        case FusionMode::add: out.push_back("fusion.add."); break;
        case FusionMode::concat: out.push_back("fusion.cat."); break;
        case FusionMode::channel_attention: out.push_back("fusion.attn."); break;
    }
    const bool text_active =
        !cfg_.ablate.no_prompt &&
        (stage == Stage::warmup || cfg_.ablate.no_decouple || !cfg_.ablate.no_distill);
    if (text_active && !cfg_.ablate.ungated_prompt) out.push_back("prompt.gate.");
    if (stage == Stage::full && !single_stage()) out.push_back("decouple.");
    return out;
}

// ---- metric log ----------------------------------------------------------------

std::string MetricLog::text() const {
    std::string out;
    for (const std::string& l : lines) {
        out += l;
        out += '\n';
    }
    return out;
}

uint64_t MetricLog::digest() const { return fnv1a64(text()); }

void MetricLog::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write metric log: " + path);
    f << text();
    if (!f) throw IoError("short write on metric log: " + path);
}

// ---- trainer ---------------------------------------------------------------------

namespace {

struct Snapshot {
    std::vector<std::vector<double>> values;
    std::vector<std::vector<double>> momentum;
};

Snapshot take_snapshot(const ParamStore& store) {
    Snapshot s;
    for (const auto& p : store.all()) {
        s.values.push_back(p->value.data);
        s.momentum.push_back(p->momentum.data);
    }
    return s;
}

void restore_snapshot(ParamStore& store, const Snapshot& s) {
    size_t i = 0;
    for (const auto& p : store.all()) {
        p->value.data = s.values[i];
        p->momentum.data = s.momentum[i];
        ++i;
    }
    store.zero_grad();
}

/// Restricts training to the given name prefixes for one scope, preserving
/// flags that were already off (the permanently frozen projections).
class ScopedFreeze {
public:
    ScopedFreeze(ParamStore& store, const std::vector<std::string>& prefixes)
        : store_(store) {
        for (const auto& p : store.all()) {
            saved_.emplace_back(p.get(), p->trainable);
            bool active = false;
            for (const std::string& pre : prefixes)
                if (p->name.rfind(pre, 0) == 0) {
                    active = true;
                    break;
                }
            p->trainable = p->trainable && active;
        }
    }
    ~ScopedFreeze() {
        for (auto& [p, flag] : saved_) p->trainable = flag;
    }

private:
    ParamStore& store_;
    std::vector<std::pair<Param*, bool>> saved_;
};

} // namespace

Trainer::Trainer(const Detector& model, const std::vector<Sample>& data)
    : model_(model), data_(data) {
    if (data.empty()) throw ValidationError("training data is empty");
    // training consumes condition labels; malformed records fail here, not
    // mid-epoch
    for (const Sample& s : data) s.condition.validate();
}

TrainSummary Trainer::run_stage(ParamStore& store, Stage stage, MetricLog& log) const {
    if (model_.single_stage()) {
        if (stage == Stage::full)
            throw ConfigError("this configuration trains in a single pass; "
                              "there is no separate second stage");
        return run_loop(store, Stage::warmup,
                        model_.config().epochs_stage1 + model_.config().epochs_stage2,
                        log);
    }
    return run_loop(store, stage,
                    stage == Stage::warmup ? model_.config().epochs_stage1
                                           : model_.config().epochs_stage2,
                    log);
}

TrainSummary Trainer::run(ParamStore& store, MetricLog& log) const {
    if (model_.single_stage()) return run_stage(store, Stage::warmup, log);
    run_stage(store, Stage::warmup, log);
    return run_stage(store, Stage::full, log);
}

TrainSummary Trainer::run_loop(ParamStore& store, Stage stage, int epochs,
                               MetricLog& log) const {
    const DetectorConfig& cfg = model_.config();
    const int sn = static_cast<int>(stage);
    ScopedFreeze freeze(store, model_.trainable_prefixes(stage));
    Rng shuffle_rng(mix_seed(cfg.seed, 0x57a6e0 + static_cast<uint64_t>(sn)));

    std::vector<int> order(data_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    log.add("stage " + std::to_string(sn) + " begin epochs " + std::to_string(epochs) +
            " samples " + std::to_string(data_.size()));

    Snapshot good = take_snapshot(store);
    TrainSummary summary;
    summary.epochs = epochs;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        const double lr = cfg.opt.lr * std::pow(cfg.lr_decay, epoch);

        Detector::LossReport sum;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const size_t stop =
                std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            std::vector<const Sample*> batch;
            for (size_t i = start; i < stop; ++i)
                batch.push_back(&data_[static_cast<size_t>(order[i])]);

            Graph g;
            Detector::LossReport rep;
            Node* loss = model_.batch_loss(g, store, batch, stage, &rep);
            const auto abort = [&](const char* why) {
                restore_snapshot(store, good);
                throw Error(std::string(why) + " (stage " + std::to_string(sn) +
                            ", epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(start / cfg.batch_size) +
                            "); parameters restored to the last completed epoch");
            };
            if (!std::isfinite(rep.total)) abort("non-finite training loss");
            g.backward(loss);
            nn::SgdConfig step = cfg.opt;
            step.lr = lr;
            if (!nn::sgd_step(store, step)) abort("non-finite gradient");

            const double w = static_cast<double>(batch.size());
            sum.total += rep.total * w;
            sum.det += rep.det * w;
            sum.obj += rep.obj * w;
            sum.cls += rep.cls * w;
            sum.reg += rep.reg * w;
            sum.dt += rep.dt * w;
            sum.irr += rep.irr * w;
            sum.dc += rep.dc * w;
        }
        const double n = static_cast<double>(data_.size());
        log.add("stage " + std::to_string(sn) + " epoch " + std::to_string(epoch) +
                " lr " + format_double(lr) + " loss " + format_double(sum.total / n) +
                " det " + format_double(sum.det / n) + " obj " +
                format_double(sum.obj / n) + " cls " + format_double(sum.cls / n) +
                " reg " + format_double(sum.reg / n) + " dt " +
                format_double(sum.dt / n) + " irr " + format_double(sum.irr / n) +
                " dc " + format_double(sum.dc / n));
        if (epoch == 0) summary.first_epoch_loss = sum.total / n;
        summary.last_epoch_loss = sum.total / n;
        good = take_snapshot(store);
    }
    log.add("stage " + std::to_string(sn) + " end loss " +
            format_double(summary.last_epoch_loss));
    return summary;
}

// ---- checkpoints ------------------------------------------------------------------

void save_checkpoint(const std::string& path, const ParamStore& store, Stage stage,
                     uint64_t config_digest) {
    std::ostringstream os;
    os << "checkpoint 1\n";
    os << "stage " << static_cast<int>(stage) << "\n";
    os << "config " << config_digest << "\n";
    os << "params " << store.all().size() << "\n";
    for (const auto& p : store.all()) {
        os << "param " << p->name << " " << p->value.ndim();
        for (int d : p->value.shape) os << " " << d;
        os << "\n";
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            if (i) os << " ";
            os << format_double(p->value.data[i]);
        }
        os << "\n";
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint: " + path);
    f << os.str();
    if (!f) throw IoError("short write on checkpoint: " + path);
}

namespace {

std::vector<std::string> header_line(std::istream& in, const std::string& path,
                                     const std::string& key, size_t field_count) {
    std::string line;
    if (!std::getline(in, line))
        throw IoError("truncated checkpoint header in " + path);
    auto fields = split_ws(line);
    if (fields.size() != field_count || fields[0] != key)
        throw Error("checkpoint " + path + ": expected '" + key + "' line, got: " +
                    line);
    return fields;
}

CheckpointInfo parse_header(std::istream& in, const std::string& path) {
    auto ver = header_line(in, path, "checkpoint", 2);
    if (ver[1] != "1") throw Error("checkpoint " + path + ": unknown format version");
    auto stage = header_line(in, path, "stage", 2);
    bool ok = false;
    const long sv = parse_long(stage[1], ok);
    if (!ok || (sv != 1 && sv != 2))
        throw Error("checkpoint " + path + ": bad stage value");
    auto digest = header_line(in, path, "config", 2);
    CheckpointInfo info;
    info.stage = sv == 1 ? Stage::warmup : Stage::full;
    ok = false;
    uint64_t dv = 0;
    {
        const std::string& s = digest[1];
        auto res = std::from_chars(s.data(), s.data() + s.size(), dv);
        ok = res.ec == std::errc() && res.ptr == s.data() + s.size();
    }
    if (!ok) throw Error("checkpoint " + path + ": bad config digest");
    info.config_digest = dv;
    return info;
}

} // namespace

CheckpointInfo peek_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    return parse_header(f, path);
}

CheckpointInfo load_checkpoint(const std::string& path, ParamStore& store) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    CheckpointInfo info = parse_header(f, path);
    auto count_line = header_line(f, path, "params", 2);
    bool ok = false;
    const long count = parse_long(count_line[1], ok);
    if (!ok || count < 0) throw Error("checkpoint " + path + ": bad parameter count");
    if (static_cast<size_t>(count) != store.all().size())
        throw Error("checkpoint " + path + ": holds " + std::to_string(count) +
                    " parameters, the model has " + std::to_string(store.all().size()) +
                    " (config mismatch)");
    std::vector<bool> seen(store.all().size(), false);
    for (long i = 0; i < count; ++i) {
        std::string line;
        if (!std::getline(f, line))
            throw IoError("truncated checkpoint body in " + path);
        auto fields = split_ws(line);
        if (fields.size() < 3 || fields[0] != "param")
            throw Error("checkpoint " + path + ": malformed parameter line: " + line);
        const std::string& name = fields[1];
        Param* p = store.find(name);
        if (!p)
            throw Error("checkpoint " + path + ": parameter '" + name +
                        "' does not exist in the model (config mismatch)");
        ok = false;
        const long nd = parse_long(fields[2], ok);
        if (!ok || nd < 0 || fields.size() != 3 + static_cast<size_t>(nd))
            throw Error("checkpoint " + path + ": malformed shape for '" + name + "'");
        std::vector<int> shape;
        for (long d = 0; d < nd; ++d) {
            const long v = parse_long(fields[3 + static_cast<size_t>(d)], ok);
            if (!ok || v < 1)
                throw Error("checkpoint " + path + ": bad dimension for '" + name + "'");
            shape.push_back(static_cast<int>(v));
        }
        if (shape != p->value.shape)
            throw Error("checkpoint " + path + ": shape mismatch for '" + name +
                        "' (config mismatch)");
        if (!std::getline(f, line))
            throw IoError("truncated checkpoint values in " + path);
        auto vals = split_ws(line);
        if (vals.size() != p->value.data.size())
            throw Error("checkpoint " + path + ": value count mismatch for '" + name +
                        "'");
        for (size_t k = 0; k < vals.size(); ++k) {
            p->value.data[k] = parse_double(vals[k], ok);
            if (!ok)
                throw Error("checkpoint " + path + ": bad value for '" + name + "'");
        }
        size_t idx = 0;
        for (const auto& sp : store.all()) {
            if (sp.get() == p) break;
            ++idx;
        }
        if (seen[idx])
            throw Error("checkpoint " + path + ": duplicate parameter '" + name + "'");
        seen[idx] = true;
    }
    return info;
}

} // namespace pcdf
