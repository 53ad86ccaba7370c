#include "pcdf/fusion.hpp"

#include <cmath>

namespace pcdf {

using nn::Graph;
using nn::Node;
using nn::Param;
using nn::ParamStore;
using nn::Tensor;

FusionMode parse_fusion_mode(std::string_view s) {
    if (s == "pcdf") return FusionMode::pcdf;
    if (s == "add") return FusionMode::add;
    if (s == "concat") return FusionMode::concat;
    if (s == "channel_attention") return FusionMode::channel_attention;
    throw ConfigError("unknown fusion mode: " + std::string(s));
}

std::string_view to_string(FusionMode m) {
    switch (m) {
        case FusionMode::pcdf: return "pcdf";
        case FusionMode::add: return "add";
        case FusionMode::concat: return "concat";
        default: return "channel_attention";
    }
}

ConditionFusion::ConditionFusion(int channels, int cond_dim, uint64_t seed)
    : channels_(channels), cond_dim_(cond_dim), seed_(seed) {
    if (channels < 1 || cond_dim < 1)
        throw ValidationError("fusion dimensions must be positive");
}

void ConditionFusion::create_params(ParamStore& store) const {
    const int c = channels_, d = cond_dim_;
    Rng rng(mix_seed(seed_, 0xf05e));

    Param* g1 = store.create("fusion.gate.w1", {hidden_, d});
    store.create("fusion.gate.b1", {hidden_});
    nn::fill_kaiming(rng, g1->value, d);
    // zeroed output layer starts every channel at an even 0.5/0.5 split
    store.create("fusion.gate.w2", {2 * c, hidden_});
    store.create("fusion.gate.b2", {2 * c});

    Param* aw = store.create("fusion.add.w", {c, d});
    store.create("fusion.add.b", {c});
    nn::fill_kaiming(rng, aw->value, d);
    Param* cw = store.create("fusion.cat.w", {c, d});
    store.create("fusion.cat.b", {c});
    nn::fill_kaiming(rng, cw->value, d);

    Param* t1 = store.create("fusion.attn.w1", {hidden_, 2 * c});
    store.create("fusion.attn.b1", {hidden_});
    nn::fill_kaiming(rng, t1->value, 2 * c);
    store.create("fusion.attn.w2", {2 * c, hidden_});
    store.create("fusion.attn.b2", {2 * c});
}

namespace {

Node* pp(Graph& g, const ParamStore& s, const std::string& name) {
    return nn::param(g, nn::require_param(s, name));
}

void check_finite(const Tensor& t, const char* what) {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw Error(std::string("fusion: non-finite ") + what +
                        " (NaN or overflow upstream)");
}

} // namespace

ConditionFusion::Gate ConditionFusion::gate_weights(Graph& g, const ParamStore& store,
                                                    Node* cond) const {
    if (cond->value.ndim() != 2 || cond->value.dim(1) != cond_dim_)
        throw ValidationError("gate_weights expects [N," + std::to_string(cond_dim_) +
                              "] conditioning");
    check_finite(cond->value, "conditioning vector");
    Node* h = nn::relu(g, nn::linear(g, cond, pp(g, store, "fusion.gate.w1"),
                                     pp(g, store, "fusion.gate.b1")));
    Node* logits = nn::linear(g, h, pp(g, store, "fusion.gate.w2"),
                              pp(g, store, "fusion.gate.b2"));
    check_finite(logits->value, "gate logits");
    Node* w = nn::pair_softmax(g, logits);  // clamps to +-30 internally
    Gate gate;
    gate.w_rgb = nn::slice_cols(g, w, 0, channels_);
    gate.w_ir = nn::slice_cols(g, w, channels_, 2 * channels_);
    return gate;
}

Node* ConditionFusion::fuse(Graph& g, Node* f_inv_rgb, Node* f_inv_ir,
                            const Gate& gate) const {
    if (!f_inv_rgb->value.same_shape(f_inv_ir->value))
        throw ValidationError("fuse: modality map shapes differ");
    if (f_inv_rgb->value.ndim() != 4 || f_inv_rgb->value.dim(1) != channels_)
        throw ValidationError("fuse: channel count mismatch");
    Node* r = nn::channel_scale(g, f_inv_rgb, gate.w_rgb);
    Node* i = nn::channel_scale(g, f_inv_ir, gate.w_ir);
    return nn::concat_channels(g, {r, i});
}

Node* ConditionFusion::fuse_variant(Graph& g, const ParamStore& store, Node* f_inv_rgb,
                                    Node* f_inv_ir, Node* cond, FusionMode mode) const {
    if (f_inv_rgb->value.ndim() != 4)
        throw ValidationError("fuse_variant expects [N,C,H,W] feature maps");
    const int h = f_inv_rgb->value.dim(2), w = f_inv_rgb->value.dim(3);
    switch (mode) {
        case FusionMode::pcdf:
            return fuse(g, f_inv_rgb, f_inv_ir, gate_weights(g, store, cond));
        case FusionMode::add: {
            Node* p = nn::linear(g, cond, pp(g, store, "fusion.add.w"),
                                 pp(g, store, "fusion.add.b"));
            Node* sp = nn::broadcast_spatial(g, p, h, w);
            return nn::add(g, nn::add(g, f_inv_rgb, f_inv_ir), sp);
        }
        case FusionMode::concat: {
            Node* p = nn::linear(g, cond, pp(g, store, "fusion.cat.w"),
                                 pp(g, store, "fusion.cat.b"));
            Node* sp = nn::broadcast_spatial(g, p, h, w);
            return nn::concat_channels(g, {f_inv_rgb, f_inv_ir, sp});
        }
        case FusionMode::channel_attention: {
            Node* pooled = nn::global_avg_pool(
                g, nn::concat_channels(g, {f_inv_rgb, f_inv_ir}));  // [N,2C]
            Node* hh = nn::relu(g, nn::linear(g, pooled, pp(g, store, "fusion.attn.w1"),
                                              pp(g, store, "fusion.attn.b1")));
            Node* logits = nn::linear(g, hh, pp(g, store, "fusion.attn.w2"),
                                      pp(g, store, "fusion.attn.b2"));
            check_finite(logits->value, "attention logits");
            Node* weights = nn::pair_softmax(g, logits);
            Gate gate;
            gate.w_rgb = nn::slice_cols(g, weights, 0, channels_);
            gate.w_ir = nn::slice_cols(g, weights, channels_, 2 * channels_);
            return fuse(g, f_inv_rgb, f_inv_ir, gate);
        }
    }
    throw ConfigError("unknown fusion mode");
}

int ConditionFusion::out_channels(FusionMode mode) const {
    switch (mode) {
        case FusionMode::add: return channels_;
        case FusionMode::concat: return 3 * channels_;
        default: return 2 * channels_;
    }
}

double mean_weight_gap(const ConditionFusion::Gate& gate) {
    const auto& r = gate.w_rgb->value.data;
    const auto& i = gate.w_ir->value.data;
    double acc = 0;
    for (size_t k = 0; k < r.size(); ++k) acc += i[k] - r[k];
    return acc / static_cast<double>(r.size());
}

} // namespace pcdf
