#include "pcdf/prompt.hpp"

#include <Eigen/Dense>

#include <cmath>

namespace pcdf {

using nn::Graph;
using nn::Node;
using nn::Param;
using nn::ParamStore;
using nn::Tensor;

// ---- prompt templates ------------------------------------------------------

std::string attribute_block(int attr, const ConditionRecord& cond) {
    switch (attr) {
        case 0: return "at an altitude of " + altitude_bucket(cond.altitude_m) + " meters";
        case 1: return "at a pitch angle of " + angle_bucket(cond.angle_deg) + " degrees";
        case 2: return "during " + std::string(to_string(cond.time));
        case 3: return "in " + std::string(to_string(cond.weather)) + " weather";
        case 4: return "under " + std::string(to_string(cond.illumination)) + " illumination";
        case 5: return "over a " + std::string(to_string(cond.scenario)) + " scene";
        default: throw ValidationError("attribute index out of range");
    }
}

std::string build_initial_prompt(const ConditionRecord& cond) {
    std::array<int, kNumAttributes> all;
    all.fill(1);
    return build_sample_prompt(cond, all);
}

std::string build_sample_prompt(const ConditionRecord& cond,
                                const std::array<int, kNumAttributes>& mask) {
    std::string out(kPromptSubject);
    for (int n = 0; n < kNumAttributes; ++n)
        if (mask[static_cast<size_t>(n)]) {
            out += ' ';
            out += attribute_block(n, cond);
        }
    return out;
}

// ---- text encoder ----------------------------------------------------------

TextEncoder::TextEncoder(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 1) throw ValidationError("text encoder dimension must be positive");
    // fixed orthogonal map: QR of a seeded Gaussian matrix
    Rng rng(mix_seed(seed, 0x7e87));
    Eigen::MatrixXd a(dim, dim);
    for (int r = 0; r < dim; ++r)
        for (int c = 0; c < dim; ++c) a(r, c) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int c = 0; c < dim; ++c)
        if (r(c, c) < 0) q.col(c) *= -1.0;  // sign convention, keeps Q unique
    q_.resize(static_cast<size_t>(dim) * dim);
    for (int rr = 0; rr < dim; ++rr)
        for (int cc = 0; cc < dim; ++cc)
            q_[static_cast<size_t>(rr * dim + cc)] = q(rr, cc);
}

std::vector<double> TextEncoder::token_vec(std::string_view token) const {
    Rng rng(mix_seed(seed_, fnv1a64(token)));
    std::vector<double> v(static_cast<size_t>(dim_));
    for (double& x : v) x = rng.normal();
    return v;
}

std::vector<double> TextEncoder::token_sum(std::string_view text, int& count) const {
    std::vector<double> sum(static_cast<size_t>(dim_), 0.0);
    count = 0;
    for (const auto& tok : split_ws(text)) {
        const auto v = token_vec(tok);
        for (int i = 0; i < dim_; ++i) sum[static_cast<size_t>(i)] += v[static_cast<size_t>(i)];
        ++count;
    }
    return sum;
}

std::vector<double> TextEncoder::encode(std::string_view text) const {
    ++calls_;
    int count = 0;
    const auto sum = token_sum(text, count);
    std::vector<double> out(static_cast<size_t>(dim_), 0.0);
    if (count == 0) return out;
    std::vector<double> mean(static_cast<size_t>(dim_));
    for (int i = 0; i < dim_; ++i)
        mean[static_cast<size_t>(i)] = sum[static_cast<size_t>(i)] / count;
    for (int r = 0; r < dim_; ++r) {
        double acc = 0;
        for (int c = 0; c < dim_; ++c)
            acc += q_[static_cast<size_t>(r * dim_ + c)] * mean[static_cast<size_t>(c)];
        out[static_cast<size_t>(r)] = acc;
    }
    return out;
}

// ---- gated prompt module ---------------------------------------------------

ScenePrompt::ScenePrompt(int text_dim, int channels, uint64_t seed)
    : text_dim_(text_dim), channels_(channels), seed_(seed),
      encoder_(text_dim, mix_seed(seed, 0x7e47)) {}

void ScenePrompt::create_params(ParamStore& store) const {
    const int in = 2 * channels_ + text_dim_;
    Rng rng(mix_seed(seed_, 0x9a7e));
    Param* w1 = store.create("prompt.gate.w1", {hidden_, in});
    store.create("prompt.gate.b1", {hidden_});
    Param* w2 = store.create("prompt.gate.w2", {kNumAttributes, hidden_});
    store.create("prompt.gate.b2", {kNumAttributes});
    nn::fill_kaiming(rng, w1->value, in);
    nn::fill_kaiming(rng, w2->value, hidden_);
}

ScenePrompt::Forward ScenePrompt::run(Graph& g, ParamStore& store, Node* f_rgb,
                                      Node* f_ir, const ConditionRecord& cond) const {
    const int d = text_dim_;
    const auto init = encoder_.encode(build_initial_prompt(cond));
    Node* init_node = nn::input(g, Tensor({1, d}, init));

    Node* pooled = nn::concat_cols(
        g, nn::concat_cols(g, nn::global_max_pool(g, f_rgb), nn::global_max_pool(g, f_ir)),
        init_node);
    Node* h = nn::relu(g, nn::linear(g, pooled, nn::param(g, nn::require_param(store, "prompt.gate.w1")),
                                     nn::param(g, nn::require_param(store, "prompt.gate.b1"))));
    Node* logits = nn::linear(g, h, nn::param(g, nn::require_param(store, "prompt.gate.w2")),
                              nn::param(g, nn::require_param(store, "prompt.gate.b2")));

    Forward out;
    out.probs = nn::softmax_rows(g, logits);
    out.mask = nn::st_hard_gate(g, out.probs, kGateThreshold);

    // forward: re-render the surviving blocks and encode the literal string.
    // backward: the token mean M(gates) = (S0 + sum g_n T_n) / (c0 + sum g_n c_n)
    // has dM/dg_n = (T_n - M * c_n) / c_total; project through Q.
    std::array<int, kNumAttributes> m{};
    for (int n = 0; n < kNumAttributes; ++n)
        m[static_cast<size_t>(n)] = out.mask->value.data[static_cast<size_t>(n)] > 0.5 ? 1 : 0;
    out.prompt = build_sample_prompt(cond, m);
    const auto embedded = encoder_.encode(out.prompt);

    int c0 = 0;
    const auto s0 = encoder_.token_sum(kPromptSubject, c0);
    std::vector<double> total = s0;
    double c_total = c0;
    std::array<std::vector<double>, kNumAttributes> block_sum;
    std::array<int, kNumAttributes> block_count{};
    for (int n = 0; n < kNumAttributes; ++n) {
        block_sum[static_cast<size_t>(n)] =
            encoder_.token_sum(attribute_block(n, cond), block_count[static_cast<size_t>(n)]);
        if (m[static_cast<size_t>(n)]) {
            for (int i = 0; i < d; ++i)
                total[static_cast<size_t>(i)] += block_sum[static_cast<size_t>(n)][static_cast<size_t>(i)];
            c_total += block_count[static_cast<size_t>(n)];
        }
    }
    // sensitivity rows: w[n] = Q * (T_n - mean * c_n) / c_total
    std::vector<double> sens(static_cast<size_t>(kNumAttributes) * d, 0.0);
    const auto& q = encoder_.projection();
    for (int n = 0; n < kNumAttributes; ++n) {
        for (int r = 0; r < d; ++r) {
            double acc = 0;
            for (int c = 0; c < d; ++c) {
                const double mean_c = total[static_cast<size_t>(c)] / c_total;
                const double v = (block_sum[static_cast<size_t>(n)][static_cast<size_t>(c)] -
                                  mean_c * block_count[static_cast<size_t>(n)]) /
                                 c_total;
                acc += q[static_cast<size_t>(r * d + c)] * v;
            }
            sens[static_cast<size_t>(n * d + r)] = acc;
        }
    }

    Node* mask_node = out.mask;
    Node* emb = g.alloc(Tensor({1, d}, embedded), mask_node->requires_grad);
    if (emb->requires_grad) {
        emb->backprop = [mask_node, sens, d](Node& self) {
            mask_node->ensure_grad();
            for (int n = 0; n < kNumAttributes; ++n) {
                double acc = 0;
                for (int r = 0; r < d; ++r)
                    acc += self.grad.data[static_cast<size_t>(r)] *
                           sens[static_cast<size_t>(n * d + r)];
                mask_node->grad.data[static_cast<size_t>(n)] += acc;
            }
        };
    }
    out.embedding = emb;
    return out;
}

} // namespace pcdf
