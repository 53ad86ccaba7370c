#pragma once

#include "pcdf/nn.hpp"
#include "pcdf/schema.hpp"

#include <array>
#include <string>
#include <string_view>
#include <vector>

namespace pcdf {

/// Gate threshold: an attribute block survives when its softmax probability
/// reaches this value. A uniform distribution over the six attributes
/// (1/6 each) keeps every block.
constexpr double kGateThreshold = 0.15;

constexpr std::string_view kPromptSubject = "An aerial image pair of vehicles captured";

/// Natural-language block for one condition attribute (index order matches
/// kAttributeNames). Numeric attributes render their bucket label.
std::string attribute_block(int attr, const ConditionRecord& cond);

/// Subject plus all six attribute blocks, single-space joined.
std::string build_initial_prompt(const ConditionRecord& cond);

/// Subject plus the blocks whose mask entry is nonzero. An all-ones mask
/// reproduces the initial prompt byte for byte.
std::string build_sample_prompt(const ConditionRecord& cond,
                                const std::array<int, kNumAttributes>& mask);

/// Deterministic hash-based sentence embedder. Whitespace tokens map to
/// seeded Gaussian vectors; a sentence is the token mean pushed through a
/// fixed orthogonal matrix. Not a language model, just a stable stand-in
/// whose output decomposes linearly over tokens.
class TextEncoder {
public:
    TextEncoder(int dim, uint64_t seed);

    /// Sentence embedding, [dim]. Empty or all-whitespace text gives zeros.
    /// Every call is counted so inference paths can prove they never encode.
    std::vector<double> encode(std::string_view text) const;

    /// Sum (not mean) of raw token vectors before the orthogonal map, and the
    /// token count. Backward-pass helper; does not count as an invocation.
    std::vector<double> token_sum(std::string_view text, int& count) const;

    int dim() const { return dim_; }
    const std::vector<double>& projection() const { return q_; }  // row-major dim x dim
    long invocations() const { return calls_; }
    void reset_invocations() { calls_ = 0; }

private:
    std::vector<double> token_vec(std::string_view token) const;

    int dim_;
    uint64_t seed_;
    std::vector<double> q_;
    mutable long calls_ = 0;
};

/// Scene-condition prompt gating. A two-layer MLP reads the max-pooled
/// modality features together with the initial prompt embedding, scores the
/// six attributes, and hard-selects the blocks above kGateThreshold. The
/// selected blocks are re-rendered and re-encoded; gradients flow to the
/// gate through a straight-through estimator on the mask and an analytic
/// sensitivity of the token mean on the embedding side.
class ScenePrompt {
public:
    ScenePrompt(int text_dim, int channels, uint64_t seed);

    /// Registers gate parameters (prefix "prompt.gate.").
    void create_params(nn::ParamStore& store) const;

    struct Forward {
        nn::Node* probs = nullptr;      // [1,6] softmax over attribute logits
        nn::Node* mask = nullptr;       // [1,6] hard gate in {0,1}
        nn::Node* embedding = nullptr;  // [1,dim] gated prompt embedding
        std::string prompt;             // the exact string that was encoded
    };

    /// f_rgb, f_ir: [1,C,H,W] backbone features for one sample.
    Forward run(nn::Graph& g, nn::ParamStore& store, nn::Node* f_rgb,
                nn::Node* f_ir, const ConditionRecord& cond) const;

    const TextEncoder& encoder() const { return encoder_; }
    TextEncoder& encoder() { return encoder_; }
    int text_dim() const { return text_dim_; }

private:
    int text_dim_;
    int channels_;
    int hidden_ = 32;
    uint64_t seed_;
    TextEncoder encoder_;
};

} // namespace pcdf
