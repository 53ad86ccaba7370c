#include "pcdf/prompt.hpp"

#include <doctest.h>

#include <cmath>

using namespace pcdf;
using nn::Graph;
using nn::Node;
using nn::ParamStore;
using nn::Tensor;

namespace {

ConditionRecord night_cond() {
    ConditionRecord c;
    c.altitude_m = 100;
    c.angle_deg = 45;
    c.time = TimeOfDay::Night;
    c.weather = Weather::Night;
    c.illumination = Illumination::Night;
    c.scenario = Scenario::Road;
    return c;
}

} // namespace

TEST_CASE("attribute blocks render bucket labels and enum names") {
    const auto c = night_cond();
    CHECK(attribute_block(0, c) == "at an altitude of [0,120] meters");
    CHECK(attribute_block(1, c) == "at a pitch angle of (30,75] degrees");
    CHECK(attribute_block(2, c) == "during Night");
    CHECK(attribute_block(3, c) == "in Night weather");
    CHECK(attribute_block(4, c) == "under Night illumination");
    CHECK(attribute_block(5, c) == "over a Road scene");
}

TEST_CASE("an all-ones mask reproduces the initial prompt byte for byte") {
    const auto c = night_cond();
    std::array<int, kNumAttributes> all;
    all.fill(1);
    CHECK(build_initial_prompt(c) == build_sample_prompt(c, all));
    CHECK(build_initial_prompt(c) ==
          "An aerial image pair of vehicles captured "
          "at an altitude of [0,120] meters "
          "at a pitch angle of (30,75] degrees "
          "during Night in Night weather under Night illumination "
          "over a Road scene");
}

TEST_CASE("masked blocks vanish and spacing stays single") {
    const auto c = night_cond();
    const std::array<int, kNumAttributes> m = {1, 0, 0, 0, 0, 1};
    const std::string s = build_sample_prompt(c, m);
    CHECK(s == "An aerial image pair of vehicles captured "
               "at an altitude of [0,120] meters over a Road scene");
    CHECK(s.find("  ") == std::string::npos);
    const std::array<int, kNumAttributes> none{};
    CHECK(build_sample_prompt(c, none) == std::string(kPromptSubject));
}

TEST_CASE("encoder is deterministic, seed-sensitive, and orthogonal") {
    TextEncoder a(16, 7), b(16, 7), other(16, 8);
    const auto ea = a.encode("during Night");
    CHECK(ea == b.encode("during Night"));
    CHECK(ea != other.encode("during Night"));
    CHECK(a.encode("") == std::vector<double>(16, 0.0));

    const auto& q = a.projection();
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            double dot = 0;
            for (int r = 0; r < 16; ++r)
                dot += q[static_cast<size_t>(r * 16 + i)] * q[static_cast<size_t>(r * 16 + j)];
            CHECK(dot == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
        }
}

TEST_CASE("encoding distributes over token sums") {
    TextEncoder enc(12, 3);
    int ca = 0, cb = 0, cab = 0;
    const auto sa = enc.token_sum("during Night", ca);
    const auto sb = enc.token_sum("over a Road scene", cb);
    const auto sab = enc.token_sum("during Night over a Road scene", cab);
    CHECK(ca == 2);
    CHECK(cb == 4);
    CHECK(cab == 6);
    for (int i = 0; i < 12; ++i)
        CHECK(sab[static_cast<size_t>(i)] ==
              doctest::Approx(sa[static_cast<size_t>(i)] + sb[static_cast<size_t>(i)])
                  .epsilon(1e-12));
}

TEST_CASE("invocation counter tracks encode calls only") {
    TextEncoder enc(8, 1);
    CHECK(enc.invocations() == 0);
    enc.encode("a b c");
    enc.encode("");
    CHECK(enc.invocations() == 2);
    int n = 0;
    enc.token_sum("a b", n);
    CHECK(enc.invocations() == 2);
    enc.reset_invocations();
    CHECK(enc.invocations() == 0);
}

namespace {

struct GateFixture {
    static constexpr int kC = 4, kD = 16;
    ScenePrompt prompt{kD, kC, 99};
    ParamStore store;
    GateFixture() { prompt.create_params(store); }

    ScenePrompt::Forward forward(Graph& g, const ConditionRecord& cond) {
        Rng rng(5);
        Tensor fr({1, kC, 3, 3}), fi({1, kC, 3, 3});
        for (double& v : fr.data) v = rng.normal();
        for (double& v : fi.data) v = rng.normal();
        return prompt.run(g, store, nn::input(g, fr), nn::input(g, fi), cond);
    }
};

} // namespace

TEST_CASE("uniform gate logits keep all six blocks") {
    GateFixture fx;
    // zeroed output layer makes every logit equal, so probabilities are 1/6
    auto& w2 = nn::require_param(fx.store, "prompt.gate.w2");
    std::fill(w2.value.data.begin(), w2.value.data.end(), 0.0);

    Graph g;
    const auto c = night_cond();
    const auto fw = fx.forward(g, c);
    double sum = 0;
    for (int n = 0; n < kNumAttributes; ++n) {
        CHECK(fw.probs->value.data[static_cast<size_t>(n)] ==
              doctest::Approx(1.0 / 6).epsilon(1e-12));
        CHECK(fw.mask->value.data[static_cast<size_t>(n)] == 1.0);
        sum += fw.probs->value.data[static_cast<size_t>(n)];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fw.prompt == build_initial_prompt(c));

    const auto direct = fx.prompt.encoder().encode(fw.prompt);
    for (int i = 0; i < GateFixture::kD; ++i)
        CHECK(fw.embedding->value.data[static_cast<size_t>(i)] == direct[static_cast<size_t>(i)]);
}

TEST_CASE("gate probabilities always sum to one and mask is binary") {
    GateFixture fx;
    Graph g;
    const auto fw = fx.forward(g, night_cond());
    double sum = 0;
    for (int n = 0; n < kNumAttributes; ++n) {
        const double p = fw.probs->value.data[static_cast<size_t>(n)];
        const double m = fw.mask->value.data[static_cast<size_t>(n)];
        CHECK(p >= 0.0);
        CHECK((m == 0.0 || m == 1.0));
        CHECK(m == (p >= kGateThreshold ? 1.0 : 0.0));
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mask gradient matches the relaxed token-mean sensitivity") {
    GateFixture fx;
    Graph g;
    const auto cond = night_cond();
    const auto fw = fx.forward(g, cond);
    Node* loss = nn::mean_all(g, fw.embedding);
    g.backward(loss);

    // independent relaxation: phi(g) = mean_r [Q (S0 + sum g_n T_n) / (c0 + sum g_n c_n)]_r
    const auto& enc = fx.prompt.encoder();
    const int d = GateFixture::kD;
    int c0 = 0;
    const auto s0 = enc.token_sum(kPromptSubject, c0);
    std::array<std::vector<double>, kNumAttributes> ts;
    std::array<int, kNumAttributes> tc{};
    for (int n = 0; n < kNumAttributes; ++n)
        ts[static_cast<size_t>(n)] = enc.token_sum(attribute_block(n, cond), tc[static_cast<size_t>(n)]);

    auto phi = [&](const std::array<double, kNumAttributes>& gates) {
        std::vector<double> total = s0;
        double ct = c0;
        for (int n = 0; n < kNumAttributes; ++n) {
            for (int i = 0; i < d; ++i)
                total[static_cast<size_t>(i)] += gates[static_cast<size_t>(n)] *
                                                 ts[static_cast<size_t>(n)][static_cast<size_t>(i)];
            ct += gates[static_cast<size_t>(n)] * tc[static_cast<size_t>(n)];
        }
        const auto& q = enc.projection();
        double mean_out = 0;
        for (int r = 0; r < d; ++r) {
            double acc = 0;
            for (int c = 0; c < d; ++c)
                acc += q[static_cast<size_t>(r * d + c)] * total[static_cast<size_t>(c)] / ct;
            mean_out += acc;
        }
        return mean_out / d;
    };

    std::array<double, kNumAttributes> base{};
    for (int n = 0; n < kNumAttributes; ++n)
        base[static_cast<size_t>(n)] = fw.mask->value.data[static_cast<size_t>(n)];
    for (int n = 0; n < kNumAttributes; ++n) {
        auto hi = base, lo = base;
        const double eps = 1e-6;
        hi[static_cast<size_t>(n)] += eps;
        lo[static_cast<size_t>(n)] -= eps;
        const double fd = (phi(hi) - phi(lo)) / (2 * eps);
        // straight-through: the probability node receives the mask gradient as is
        CHECK(fw.probs->grad.data[static_cast<size_t>(n)] ==
              doctest::Approx(fd).epsilon(1e-6));
    }

    // gradient reaches the gate parameters
    double w2_abs = 0;
    for (double v : nn::require_param(fx.store, "prompt.gate.w2").grad.data)
        w2_abs += std::abs(v);
    CHECK(w2_abs > 0.0);
}

TEST_CASE("each forward costs exactly two encoder invocations") {
    GateFixture fx;
    fx.prompt.encoder().reset_invocations();
    Graph g;
    fx.forward(g, night_cond());
    CHECK(fx.prompt.encoder().invocations() == 2);
    Graph g2;
    fx.forward(g2, night_cond());
    CHECK(fx.prompt.encoder().invocations() == 4);
}
