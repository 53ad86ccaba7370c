#pragma once

#include "pcdf/nn.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace pcdf {

/// Outputs of the condition decoupling stage: the original feature maps, one
/// condition-specific vector, and two condition-invariant maps.
struct FeatureBundle {
    nn::Node* f_rgb = nullptr;      // [N,C,H,W], as given
    nn::Node* f_ir = nullptr;
    nn::Node* f_spec = nullptr;     // [N,D], squashed into [0,1]
    nn::Node* f_inv_rgb = nullptr;  // [N,C,H,W]
    nn::Node* f_inv_ir = nullptr;
};

struct DecoupleLambdas {
    double lambda1 = 0.01;   // distillation
    double lambda2 = 0.003;  // irrelevance
    double lambda3 = 0.01;   // discrimination
};

struct LossBreakdown {
    double l_dt = 0, l_irr = 0, l_dc = 0, l_dec = 0;
    double lambda1 = 0, lambda2 = 0, lambda3 = 0;
};

/// Splits fused multimodal features into one condition-specific vector
/// (shared encoder over the channel-concatenated pair, pooled, projected,
/// sigmoid-squashed) and per-modality condition-invariant maps (residual
/// blocks that start as the identity). Parameter prefix "decouple.".
class ConditionDecoupler {
public:
    ConditionDecoupler(int channels, int text_dim, uint64_t seed);

    void create_params(nn::ParamStore& store) const;

    /// f_rgb, f_ir: [N,C,H,W] with matching shapes.
    FeatureBundle run(nn::Graph& g, nn::ParamStore& store, nn::Node* f_rgb,
                      nn::Node* f_ir) const;

    int channels() const { return channels_; }
    int text_dim() const { return text_dim_; }

private:
    int channels_;
    int text_dim_;
    uint64_t seed_;
};

/// Central moment discrepancy between two batches ([N,D] or [D]): the mean
/// difference plus central-moment differences up to `order`, each scaled by
/// the bound width. Values outside [lo,hi] are rejected. Singleton batches
/// have zero central moments.
double cmd_distance(const nn::Tensor& x, const nn::Tensor& y, double lo, double hi,
                    int order);

/// Differentiable twin of cmd_distance over [N,D] nodes.
nn::Node* cmd_loss_node(nn::Graph& g, nn::Node* x, nn::Node* y, double lo, double hi,
                        int order);

/// CMD between the condition-specific batch and the (already squashed)
/// prompt-embedding batch, bounds [0,1].
nn::Node* distillation_loss(nn::Graph& g, const FeatureBundle& bundle,
                            nn::Node* text_embed, int order = 5);

/// Cross-product suppression between invariant maps and the projected
/// condition vector. Each stream is read as an (HW)xC matrix, multiplied by
/// the projection of f_spec to C channels (a frozen map, parameters
/// "decouple.irrproj.*"), and the squared Frobenius norm is normalized by the
/// stream's element count. Returns the sum over both streams.
nn::Node* irrelevance_loss(nn::Graph& g, const nn::ParamStore& store,
                           const FeatureBundle& bundle);

/// Detection loss of one single-modality feature stream, supplied by the
/// detector so this module stays head-agnostic.
using StreamLossFn = std::function<nn::Node*(nn::Graph&, nn::Node*)>;

/// Sum of the shared head's loss over the two invariant streams.
nn::Node* discrimination_loss(nn::Graph& g, const FeatureBundle& bundle,
                              const StreamLossFn& head_loss);

/// Plain-arithmetic composite for reporting: l_dec = l1*l_dt + l2*l_irr + l3*l_dc.
LossBreakdown decoupling_loss(double l_dt, double l_irr, double l_dc,
                              const DecoupleLambdas& lambdas);

/// Weighted sum of scalar loss nodes. Terms with zero weight or null node are
/// skipped entirely, so a disabled term leaves the graph (and every gradient)
/// bit-identical to a build without it. All terms skipped -> constant zero.
nn::Node* combine_losses(nn::Graph& g,
                         const std::vector<std::pair<nn::Node*, double>>& terms);

} // namespace pcdf
