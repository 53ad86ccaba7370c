#pragma once

#include "pcdf/nn.hpp"

#include <string_view>

namespace pcdf {

enum class FusionMode { pcdf, add, concat, channel_attention };

FusionMode parse_fusion_mode(std::string_view s);
std::string_view to_string(FusionMode m);

/// Condition-aware dynamic fusion. A nonlinear projection maps the
/// conditioning vector to 2C logits; a per-channel two-way softmax between
/// the rgb-half and the ir-half yields modality weights that sum to one per
/// channel. Fusion reweights only the condition-invariant maps and
/// concatenates them. Parameter prefix "fusion.".
class ConditionFusion {
public:
    /// cond_dim: width of the conditioning vector (the squashed
    /// condition-specific feature, or the prompt embedding in early training).
    ConditionFusion(int channels, int cond_dim, uint64_t seed);

    void create_params(nn::ParamStore& store) const;

    struct Gate {
        nn::Node* w_rgb = nullptr;  // [N,C], entries in [0,1]
        nn::Node* w_ir = nullptr;   // [N,C], w_rgb + w_ir = 1 per channel
    };

    /// cond: [N,cond_dim] finite conditioning vectors.
    Gate gate_weights(nn::Graph& g, const nn::ParamStore& store, nn::Node* cond) const;

    /// [N,C,H,W] x2 -> [N,2C,H,W]; first C channels carry w_rgb * f_inv_rgb.
    nn::Node* fuse(nn::Graph& g, nn::Node* f_inv_rgb, nn::Node* f_inv_ir,
                   const Gate& gate) const;

    /// Ablation variants. add/concat inject a C-channel projection of cond
    /// statically; channel_attention gates from pooled visual features alone
    /// and ignores cond entirely; pcdf = fuse(gate_weights(cond)).
    nn::Node* fuse_variant(nn::Graph& g, const nn::ParamStore& store,
                           nn::Node* f_inv_rgb, nn::Node* f_inv_ir, nn::Node* cond,
                           FusionMode mode) const;

    /// Fused channel count per mode: pcdf/channel_attention 2C, add C,
    /// concat 3C.
    int out_channels(FusionMode mode) const;

    int channels() const { return channels_; }
    int cond_dim() const { return cond_dim_; }

private:
    int channels_;
    int cond_dim_;
    int hidden_ = 32;
    uint64_t seed_;
};

/// Mean of (w_ir - w_rgb) over every batch row and channel; positive values
/// mean the gate favors the infrared stream.
double mean_weight_gap(const ConditionFusion::Gate& gate);

} // namespace pcdf
