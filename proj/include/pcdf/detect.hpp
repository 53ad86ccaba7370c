#pragma once

#include "pcdf/decouple.hpp"
#include "pcdf/eval.hpp"
#include "pcdf/fusion.hpp"
#include "pcdf/image.hpp"
#include "pcdf/nn.hpp"
#include "pcdf/prompt.hpp"
#include "pcdf/schema.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pcdf {

/// Training proceeds in two passes over the data. The warmup stage trains
/// the backbones, the prompt gate, the fusion gate, and the head, with the
/// squashed prompt embedding driving fusion; the decoupler is frozen and
/// never forwarded. The full stage trains everything, with the
/// condition-specific feature driving fusion and the decoupling losses
/// added to the detection loss.
enum class Stage { warmup = 1, full = 2 };

std::string_view to_string(Stage s);

/// both: dual-stream pipeline. rgb_only/ir_only: one backbone into the
/// shared head (its single stream split into even halves); no prompt,
/// decoupler, or fusion gate involved.
enum class StreamMode { both, rgb_only, ir_only };

StreamMode parse_stream_mode(std::string_view s);
std::string_view to_string(StreamMode m);

/// Pipeline pieces an experiment removes. Flags compose except where
/// validate() rejects a contradiction.
struct AblationFlags {
    bool ungated_prompt = false;   // full six-block prompt, learned gate skipped
    bool no_prompt = false;        // no text path at all; forces channel_attention
    bool no_distill = false;       // drop the condition-alignment loss
    bool no_irrelevance = false;   // drop the cross-stream suppression loss
    bool no_discrimination = false;  // drop the per-stream head loss
    bool no_decouple = false;      // bypass the decoupler; original features fuse,
                                   // the prompt embedding drives the gate even at eval
    FusionMode fusion = FusionMode::pcdf;
};

struct DetectorConfig {
    int image_w = 64, image_h = 64;
    int channels = 8;    // backbone width C
    int classes = 3;     // K (11 at full scale)
    int stride = 8;      // fixed by the backbone layout
    int text_dim = 32;   // prompt embedding width = condition feature width
    int batch_size = 16;
    int epochs_stage1 = 5;
    int epochs_stage2 = 10;
    nn::SgdConfig opt;        // lr 0.01, momentum 0.937, weight decay 5e-4
    double lr_decay = 0.95;   // exponential, per epoch, restarted each stage
    DecoupleLambdas lambdas;
    int cmd_order = 5;
    double score_thresh = 0.25;  // exclusive: a detection needs score > thresh
    double nms_iou = 0.45;
    uint64_t seed = 1;
    StreamMode stream = StreamMode::both;
    AblationFlags ablate;

    void validate() const;           // throws ConfigError
    std::string serialize() const;   // canonical key-value lines
    uint64_t digest() const;         // fnv1a64 of serialize()
};

/// One sample held in memory.
struct Sample {
    Raster rgb;  // 3 channels
    Raster ir;   // 1 channel
    std::vector<OrientedBox> boxes;
    ConditionRecord condition;
};

Sample to_sample(const PairRecord& rec, const std::string& root_dir);

/// Loads one split of a generated corpus; rasters are read relative to the
/// annotation file's directory.
std::vector<Sample> load_samples(const std::string& annotation_path,
                                 std::string_view split);

// ---- backbone ---------------------------------------------------------------

/// Four 3x3 conv stages with strides 2,2,2,1 (total stride 8), relu after
/// each. Parameters prefix.c1..c4.{w,b}.
void create_backbone_params(nn::ParamStore& store, const std::string& prefix,
                            int in_channels, int channels, Rng& rng);
nn::Node* backbone_forward(nn::Graph& g, const nn::ParamStore& store,
                           const std::string& prefix, nn::Node* x);

// ---- head targets and decoding ----------------------------------------------

/// Dense targets for the anchor-free grid head. A ground-truth box is
/// assigned to the cell containing its center; when two boxes share a cell
/// the larger area wins. Regression targets are (center fraction within the
/// cell, log extent over stride); theta is dropped by design.
struct BatchTargets {
    nn::Tensor obj_t, obj_w;  // [N,1,gh,gw], weights 1 everywhere
    nn::Tensor cls_t, cls_w;  // [N,K,gh,gw], weights 1 at positive cells
    nn::Tensor reg_t, reg_m;  // [N,4,gh,gw], mask 1 at positive cells
    int positives = 0;
};

BatchTargets make_targets(const std::vector<const Sample*>& batch,
                          const DetectorConfig& cfg);

/// Decodes one sample of a [N,4+1+K,gh,gw] head map: score = sigmoid(obj) *
/// max class sigmoid, kept when score > thresh; box center from the sigmoid
/// cell offset, extents exp-decoded (log-extent clamped at 4) and clamped to
/// the image; theta 0.
std::vector<Detection> decode_head(const nn::Tensor& head, int sample,
                                   const DetectorConfig& cfg);

/// Greedy class-aware suppression: detections sorted by descending score
/// (ties: earlier index first); a detection is dropped when it overlaps an
/// already-kept same-class detection with IoU > iou_thresh.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// ---- detector ----------------------------------------------------------------

struct GateStats {
    double w_rgb = 0.5;  // mean over channels of the inference-time gate
    double w_ir = 0.5;
};

/// The full pipeline: dual backbone, prompt gating, decoupler, fusion, and
/// grid head, with ablations and unimodal baselines folded in. Owns no
/// parameters; create_params lays them out in a fixed order in the store.
class Detector {
public:
    explicit Detector(const DetectorConfig& cfg);

    const DetectorConfig& config() const { return cfg_; }

    void create_params(nn::ParamStore& store) const;

    struct LossReport {
        double total = 0;
        double det = 0, obj = 0, cls = 0, reg = 0;  // detection components
        double dt = 0, irr = 0, dc = 0, dec = 0;    // decoupling components
    };

    /// Training-mode forward: total loss over a minibatch. The warmup stage
    /// fuses original backbone features with the gate driven by the squashed
    /// prompt embedding; the full stage decouples first and drives the gate
    /// with the condition-specific feature.
    nn::Node* batch_loss(nn::Graph& g, nn::ParamStore& store,
                         const std::vector<const Sample*>& batch, Stage stage,
                         LossReport* report = nullptr) const;

    /// Inference: backbone -> decoupler -> gate from the condition-specific
    /// feature -> fuse -> head -> decode + suppression. Never touches the
    /// prompt module, except under the no_decouple ablation where the
    /// sample's condition record is consumed by design.
    std::vector<Detection> predict(nn::ParamStore& store, const Sample& s) const;

    /// Mean inference-time modality weights of one sample; empty for fusion
    /// modes without a per-channel gate (add, concat).
    std::optional<GateStats> gate_stats(nn::ParamStore& store,
                                        const Sample& s) const;

    /// Fusion mode actually used (no_prompt forces channel_attention).
    FusionMode effective_fusion() const;

    /// Unimodal baselines and the no_decouple ablation train one combined
    /// pass instead of two stages.
    bool single_stage() const;

    int head_in_channels() const;

    /// Parameter-name prefixes the given stage updates; everything else is
    /// frozen for that stage.
    std::vector<std::string> trainable_prefixes(Stage stage) const;

    ScenePrompt& prompt() { return prompt_; }
    const ScenePrompt& prompt() const { return prompt_; }

private:
    struct Forward {
        nn::Node* fused = nullptr;
        nn::Node* text = nullptr;  // [N,text_dim] squashed embedding or null
        FeatureBundle bundle;      // populated on the decoupled path
    };
    Forward fused_features(nn::Graph& g, nn::ParamStore& store,
                           const std::vector<const Sample*>& batch,
                           Stage stage) const;
    nn::Node* head_forward(nn::Graph& g, const nn::ParamStore& store,
                           nn::Node* fused) const;
    nn::Node* fuse_self(nn::Graph& g, nn::Node* f) const;
    nn::Node* prompt_embeddings(nn::Graph& g, nn::ParamStore& store,
                                const std::vector<const Sample*>& batch,
                                nn::Node* f_rgb, nn::Node* f_ir) const;

    DetectorConfig cfg_;
    ConditionDecoupler decouple_;
    ConditionFusion fusion_;
    ScenePrompt prompt_;
};

// ---- training ----------------------------------------------------------------

/// Line-delimited, timestamp-free log; identical runs must produce identical
/// bytes, so every number goes through the canonical formatter.
struct MetricLog {
    std::vector<std::string> lines;

    void add(std::string line) { lines.push_back(std::move(line)); }
    std::string text() const;    // '\n'-joined with trailing newline
    uint64_t digest() const;     // fnv1a64 over text()
    void save(const std::string& path) const;
};

struct TrainSummary {
    int epochs = 0;
    double first_epoch_loss = 0;
    double last_epoch_loss = 0;
};

/// Minibatch SGD with per-stage parameter freezing. A non-finite loss or
/// gradient aborts the run: parameters and momentum are restored to the last
/// completed epoch and an Error is thrown.
class Trainer {
public:
    Trainer(const Detector& model, const std::vector<Sample>& data);

    /// One stage. Parameters must already exist in the store.
    TrainSummary run_stage(nn::ParamStore& store, Stage stage, MetricLog& log) const;

    /// The full schedule: warmup then full, or one combined pass for
    /// single-stage configurations.
    TrainSummary run(nn::ParamStore& store, MetricLog& log) const;

private:
    TrainSummary run_loop(nn::ParamStore& store, Stage stage, int epochs,
                          MetricLog& log) const;

    const Detector& model_;
    const std::vector<Sample>& data_;
};

// ---- checkpoints ---------------------------------------------------------------

struct CheckpointInfo {
    Stage stage = Stage::warmup;
    uint64_t config_digest = 0;
};

/// Text checkpoint: header (format version, stage, config digest) plus one
/// named shape line and one canonically-formatted value line per parameter.
void save_checkpoint(const std::string& path, const nn::ParamStore& store,
                     Stage stage, uint64_t config_digest);

/// Fills an existing store. Every checkpoint parameter must exist with the
/// same shape and every store parameter must be present in the file;
/// anything else throws Error naming the offender.
CheckpointInfo load_checkpoint(const std::string& path, nn::ParamStore& store);

/// Header only; for stage-order and config checks before a full load.
CheckpointInfo peek_checkpoint(const std::string& path);

} // namespace pcdf
