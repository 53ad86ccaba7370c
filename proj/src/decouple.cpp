#include "pcdf/decouple.hpp"

#include <cmath>

namespace pcdf {

using nn::Graph;
using nn::Node;
using nn::Param;
using nn::ParamStore;
using nn::Tensor;

// ---- decoupler --------------------------------------------------------------

ConditionDecoupler::ConditionDecoupler(int channels, int text_dim, uint64_t seed)
    : channels_(channels), text_dim_(text_dim), seed_(seed) {
    if (channels < 1 || text_dim < 1)
        throw ValidationError("decoupler dimensions must be positive");
}

void ConditionDecoupler::create_params(ParamStore& store) const {
    const int c = channels_, d = text_dim_;
    Rng rng(mix_seed(seed_, 0xdec0));

    Param* sc1 = store.create("decouple.spec.c1.w", {c, 2 * c, 3, 3});
    store.create("decouple.spec.c1.b", {c});
    Param* sc2 = store.create("decouple.spec.c2.w", {c, c, 3, 3});
    store.create("decouple.spec.c2.b", {c});
    nn::fill_kaiming(rng, sc1->value, 2 * c * 9);
    nn::fill_kaiming(rng, sc2->value, c * 9);
    // zero-initialized projection puts the squashed f_spec at 0.5 exactly
    store.create("decouple.spec.proj.w", {d, c});
    store.create("decouple.spec.proj.b", {d});

    for (const char* m : {"rgb", "ir"})
        for (const char* blk : {"b1", "b2"}) {
            const std::string base = std::string("decouple.inv.") + m + "." + blk;
            Param* c1 = store.create(base + ".c1.w", {c, c, 3, 3});
            store.create(base + ".c1.b", {c});
            nn::fill_kaiming(rng, c1->value, c * 9);
            // zeroed second conv makes each residual block start as identity
            store.create(base + ".c2.w", {c, c, 3, 3});
            store.create(base + ".c2.b", {c});
        }

    // fixed projection used by the irrelevance loss; never trained
    Param* irr_w = store.create("decouple.irrproj.w", {c, d});
    Param* irr_b = store.create("decouple.irrproj.b", {c});
    nn::fill_normal(rng, irr_w->value, 1.0 / std::sqrt(static_cast<double>(d)));
    irr_w->trainable = false;
    irr_b->trainable = false;
}

namespace {

Node* pp(Graph& g, const ParamStore& s, const std::string& name) {
    return nn::param(g, nn::require_param(s, name));
}

Node* residual_block(Graph& g, const ParamStore& s, Node* x, const std::string& base) {
    Node* h = nn::relu(g, nn::conv2d(g, x, pp(g, s, base + ".c1.w"), pp(g, s, base + ".c1.b"), 1));
    Node* r = nn::conv2d(g, h, pp(g, s, base + ".c2.w"), pp(g, s, base + ".c2.b"), 1);
    return nn::add(g, x, r);
}

} // namespace

FeatureBundle ConditionDecoupler::run(Graph& g, ParamStore& store, Node* f_rgb,
                                      Node* f_ir) const {
    if (!f_rgb->value.same_shape(f_ir->value))
        throw ValidationError("decoupler: modality feature shapes differ");
    if (f_rgb->value.ndim() != 4 || f_rgb->value.dim(1) != channels_)
        throw ValidationError("decoupler: expected [N,C,H,W] features with C = " +
                              std::to_string(channels_));

    FeatureBundle out;
    out.f_rgb = f_rgb;
    out.f_ir = f_ir;

    Node* cat = nn::concat_channels(g, {f_rgb, f_ir});
    Node* s = nn::relu(g, nn::conv2d(g, cat, pp(g, store, "decouple.spec.c1.w"),
                                     pp(g, store, "decouple.spec.c1.b"), 1));
    s = nn::relu(g, nn::conv2d(g, s, pp(g, store, "decouple.spec.c2.w"),
                               pp(g, store, "decouple.spec.c2.b"), 1));
    Node* pooled = nn::global_avg_pool(g, s);
    Node* raw = nn::linear(g, pooled, pp(g, store, "decouple.spec.proj.w"),
                           pp(g, store, "decouple.spec.proj.b"));
    out.f_spec = nn::sigmoid(g, raw);

    Node* r = residual_block(g, store, f_rgb, "decouple.inv.rgb.b1");
    out.f_inv_rgb = residual_block(g, store, r, "decouple.inv.rgb.b2");
    Node* i = residual_block(g, store, f_ir, "decouple.inv.ir.b1");
    out.f_inv_ir = residual_block(g, store, i, "decouple.inv.ir.b2");
    return out;
}

// ---- CMD ---------------------------------------------------------------------

namespace {

void check_cmd_args(double lo, double hi, int order) {
    if (!(hi > lo)) throw ConfigError("cmd bounds must satisfy lo < hi");
    if (order < 2) throw ConfigError("cmd order must be at least 2");
}

void check_bounds(const Tensor& t, double lo, double hi, const char* which) {
    for (double v : t.data)
        if (!(v >= lo && v <= hi))
            throw ValidationError(std::string("cmd input ") + which +
                                  " leaves the declared bounds");
}

std::pair<int, int> batch_dims(const Tensor& t) {
    if (t.ndim() == 1) return {1, t.dim(0)};
    if (t.ndim() == 2) return {t.dim(0), t.dim(1)};
    throw ValidationError("cmd expects [N,D] or [D]");
}

} // namespace

double cmd_distance(const Tensor& x, const Tensor& y, double lo, double hi, int order) {
    check_cmd_args(lo, hi, order);
    const auto [nx, d] = batch_dims(x);
    const auto [ny, dy] = batch_dims(y);
    if (d != dy) throw ValidationError("cmd inputs have different widths");
    check_bounds(x, lo, hi, "x");
    check_bounds(y, lo, hi, "y");

    auto mean_of = [d](const Tensor& t, int n) {
        std::vector<double> m(static_cast<size_t>(d), 0.0);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c)
                m[static_cast<size_t>(c)] += t.data[static_cast<size_t>(r * d + c)];
        for (double& v : m) v /= n;
        return m;
    };
    auto moment_of = [d](const Tensor& t, int n, const std::vector<double>& m, int k) {
        std::vector<double> out(static_cast<size_t>(d), 0.0);
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < d; ++c)
                out[static_cast<size_t>(c)] +=
                    std::pow(t.data[static_cast<size_t>(r * d + c)] - m[static_cast<size_t>(c)],
                             k);
        for (double& v : out) v /= n;
        return out;
    };
    auto norm_diff = [d](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0;
        for (int c = 0; c < d; ++c) {
            const double e = a[static_cast<size_t>(c)] - b[static_cast<size_t>(c)];
            acc += e * e;
        }
        return std::sqrt(acc);
    };

    const auto mx = mean_of(x, nx), my = mean_of(y, ny);
    const double width = hi - lo;
    double total = norm_diff(mx, my) / width;
    for (int k = 2; k <= order; ++k)
        total += norm_diff(moment_of(x, nx, mx, k), moment_of(y, ny, my, k)) /
                 std::pow(width, k);
    return total;
}

Node* cmd_loss_node(Graph& g, Node* x, Node* y, double lo, double hi, int order) {
    check_cmd_args(lo, hi, order);
    const auto [nx, d] = batch_dims(x->value);
    const auto [ny, dy] = batch_dims(y->value);
    if (d != dy) throw ValidationError("cmd inputs have different widths");
    (void)nx;
    (void)ny;
    check_bounds(x->value, lo, hi, "x");
    check_bounds(y->value, lo, hi, "y");

    const double width = hi - lo;
    Node* mx = nn::batch_mean(g, x);
    Node* my = nn::batch_mean(g, y);
    Node* total = nn::scale(g, nn::l2_norm(g, nn::sub(g, mx, my)), 1.0 / width);
    Node* cx = nn::sub_rowbcast(g, x, mx);
    Node* cy = nn::sub_rowbcast(g, y, my);
    for (int k = 2; k <= order; ++k) {
        Node* mkx = nn::batch_mean(g, nn::pow_int(g, cx, k));
        Node* mky = nn::batch_mean(g, nn::pow_int(g, cy, k));
        Node* term = nn::scale(g, nn::l2_norm(g, nn::sub(g, mkx, mky)),
                               1.0 / std::pow(width, k));
        total = nn::add(g, total, term);
    }
    return total;
}

// ---- losses ------------------------------------------------------------------

Node* distillation_loss(Graph& g, const FeatureBundle& bundle, Node* text_embed,
                        int order) {
    if (bundle.f_spec->value.shape != text_embed->value.shape)
        throw ValidationError("distillation: f_spec and embedding batches differ");
    return cmd_loss_node(g, bundle.f_spec, text_embed, 0.0, 1.0, order);
}

Node* irrelevance_loss(Graph& g, const ParamStore& store, const FeatureBundle& bundle) {
    Node* proj = nn::linear(g, bundle.f_spec, pp(g, store, "decouple.irrproj.w"),
                            pp(g, store, "decouple.irrproj.b"));  // [N,C]
    const int c = bundle.f_inv_rgb->value.dim(1);
    auto stream = [&](Node* f_inv) {
        Node* scaled = nn::channel_scale(g, f_inv, proj);
        Node* dots = nn::sum_channels(g, scaled);      // [N,1,H,W]
        Node* sq = nn::mul(g, dots, dots);
        // mean_all covers N*H*W; dividing by C completes the element count
        return nn::scale(g, nn::mean_all(g, sq), 1.0 / c);
    };
    return nn::add(g, stream(bundle.f_inv_rgb), stream(bundle.f_inv_ir));
}

Node* discrimination_loss(Graph& g, const FeatureBundle& bundle,
                          const StreamLossFn& head_loss) {
    return nn::add(g, head_loss(g, bundle.f_inv_rgb), head_loss(g, bundle.f_inv_ir));
}

LossBreakdown decoupling_loss(double l_dt, double l_irr, double l_dc,
                              const DecoupleLambdas& lambdas) {
    if (lambdas.lambda1 < 0 || lambdas.lambda2 < 0 || lambdas.lambda3 < 0)
        throw ConfigError("loss weights must be non-negative");
    LossBreakdown out;
    out.l_dt = l_dt;
    out.l_irr = l_irr;
    out.l_dc = l_dc;
    out.lambda1 = lambdas.lambda1;
    out.lambda2 = lambdas.lambda2;
    out.lambda3 = lambdas.lambda3;
    out.l_dec = lambdas.lambda1 * l_dt + lambdas.lambda2 * l_irr + lambdas.lambda3 * l_dc;
    return out;
}

Node* combine_losses(Graph& g, const std::vector<std::pair<Node*, double>>& terms) {
    Node* total = nullptr;
    for (const auto& [node, weight] : terms) {
        if (node == nullptr || weight == 0.0) continue;
        Node* scaled = nn::scale(g, node, weight);
        total = total ? nn::add(g, total, scaled) : scaled;
    }
    return total ? total : nn::input(g, Tensor::scalar(0.0));
}

} // namespace pcdf
