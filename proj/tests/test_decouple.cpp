#include "pcdf/decouple.hpp"

#include "fd_check.hpp"

#include <doctest.h>

#include <cmath>

using namespace pcdf;
using nn::Graph;
using nn::Node;
using nn::ParamStore;
using nn::Tensor;
using fdcheck::BuildFn;
using fdcheck::max_fd_rel_err;
using fdcheck::mk;
using fdcheck::random_tensor;

namespace {

Tensor bounded_tensor(Rng& r, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = r.uniform();
    return t;
}

} // namespace

TEST_CASE("decoupler output shapes and initial values") {
    ConditionDecoupler dec(3, 5, 17);
    ParamStore store;
    dec.create_params(store);

    Graph g;
    Node* zr = nn::input(g, Tensor({2, 3, 4, 4}));
    Node* zi = nn::input(g, Tensor({2, 3, 4, 4}));
    const auto bundle = dec.run(g, store, zr, zi);
    REQUIRE(bundle.f_spec->value.shape == std::vector<int>({2, 5}));
    REQUIRE(bundle.f_inv_rgb->value.shape == std::vector<int>({2, 3, 4, 4}));
    REQUIRE(bundle.f_inv_ir->value.shape == std::vector<int>({2, 3, 4, 4}));
    // zero-initialized projection squashes to exactly one half
    for (double v : bundle.f_spec->value.data) CHECK(v == 0.5);

    // residual blocks start as the identity, for any input
    Graph g2;
    Rng r(3);
    Tensor xr = random_tensor(r, {1, 3, 5, 5});
    Tensor xi = random_tensor(r, {1, 3, 5, 5});
    const auto b2 = dec.run(g2, store, nn::input(g2, xr), nn::input(g2, xi));
    CHECK(b2.f_inv_rgb->value.data == xr.data);
    CHECK(b2.f_inv_ir->value.data == xi.data);
    for (double v : b2.f_spec->value.data) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("invariant branches are modality-separated") {
    ConditionDecoupler dec(2, 3, 5);
    ParamStore store;
    dec.create_params(store);
    // make the residual blocks and the projection non-trivial so the check has teeth
    Rng r(7);
    for (const auto& p : store.all())
        if (p->name.find(".c2.w") != std::string::npos ||
            p->name == "decouple.spec.proj.w")
            nn::fill_normal(r, p->value, 0.3);

    Tensor fr1 = random_tensor(r, {1, 2, 4, 4});
    Tensor fr2 = random_tensor(r, {1, 2, 4, 4});
    Tensor fi = random_tensor(r, {1, 2, 4, 4});

    Graph g1, g2;
    const auto a = dec.run(g1, store, nn::input(g1, fr1), nn::input(g1, fi));
    const auto b = dec.run(g2, store, nn::input(g2, fr2), nn::input(g2, fi));
    CHECK(a.f_inv_ir->value.data == b.f_inv_ir->value.data);
    CHECK(a.f_inv_rgb->value.data != b.f_inv_rgb->value.data);
    // the condition-specific vector sees both modalities
    CHECK(a.f_spec->value.data != b.f_spec->value.data);
}

TEST_CASE("decoupler rejects mismatched shapes") {
    ConditionDecoupler dec(2, 3, 5);
    ParamStore store;
    dec.create_params(store);
    Graph g;
    Node* a = nn::input(g, Tensor({1, 2, 4, 4}));
    Node* b = nn::input(g, Tensor({1, 2, 4, 5}));
    CHECK_THROWS_AS(dec.run(g, store, a, b), ValidationError);
    Node* c = nn::input(g, Tensor({1, 3, 4, 4}));
    CHECK_THROWS_AS(dec.run(g, store, c, c), ValidationError);
}

TEST_CASE("cmd axioms: identity, symmetry, non-negativity") {
    Rng r(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = bounded_tensor(r, {4, 3});
        Tensor y = bounded_tensor(r, {6, 3});
        CHECK(cmd_distance(x, x, 0, 1, 5) == 0.0);
        CHECK(cmd_distance(y, y, 0, 1, 5) == 0.0);
        const double xy = cmd_distance(x, y, 0, 1, 5);
        CHECK(xy == cmd_distance(y, x, 0, 1, 5));
        CHECK(xy >= 0.0);
    }
}

TEST_CASE("cmd hand values") {
    // opposite singleton vectors: mean term only, distance 1
    Tensor zero({1, 1}, {0.0});
    Tensor one({1, 1}, {1.0});
    CHECK(cmd_distance(zero, one, 0, 1, 5) == 1.0);
    // singleton central moments vanish, so only means matter
    Tensor a({1, 1}, {0.2});
    Tensor b({1, 1}, {0.8});
    CHECK(cmd_distance(a, b, 0, 1, 5) == doctest::Approx(0.6).epsilon(1e-12));
    // doubling the bound width halves the mean term
    CHECK(cmd_distance(a, b, 0, 2, 5) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("cmd argument validation") {
    Tensor ok({2, 2}, {0.1, 0.2, 0.3, 0.4});
    Tensor bad({2, 2}, {0.1, 1.2, 0.3, 0.4});
    CHECK_THROWS_AS(cmd_distance(ok, bad, 0, 1, 5), ValidationError);
    CHECK_THROWS_AS(cmd_distance(bad, ok, 0, 1, 5), ValidationError);
    CHECK_THROWS_AS(cmd_distance(ok, ok, 0, 1, 1), ConfigError);
    CHECK_THROWS_AS(cmd_distance(ok, ok, 1, 1, 5), ConfigError);
    Tensor narrow({2, 1}, {0.1, 0.2});
    CHECK_THROWS_AS(cmd_distance(ok, narrow, 0, 1, 5), ValidationError);
}

TEST_CASE("cmd node agrees with the plain computation") {
    Rng r(13);
    Tensor x = bounded_tensor(r, {5, 4});
    Tensor y = bounded_tensor(r, {3, 4});
    Graph g;
    Node* n = cmd_loss_node(g, nn::input(g, x), nn::input(g, y), 0, 1, 5);
    CHECK(n->value.item() == doctest::Approx(cmd_distance(x, y, 0, 1, 5)).epsilon(1e-12));
}

TEST_CASE("distillation loss is zero on identical batches and checks shapes") {
    ConditionDecoupler dec(2, 4, 23);
    ParamStore store;
    dec.create_params(store);
    Graph g;
    Rng r(5);
    Tensor fr = random_tensor(r, {3, 2, 4, 4});
    Tensor fi = random_tensor(r, {3, 2, 4, 4});
    const auto bundle = dec.run(g, store, nn::input(g, fr), nn::input(g, fi));
    Node* same = nn::input(g, bundle.f_spec->value);
    CHECK(distillation_loss(g, bundle, same)->value.item() == 0.0);

    Node* wrong = nn::input(g, Tensor({2, 4}, {0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1}));
    CHECK_THROWS_AS(distillation_loss(g, bundle, wrong), ValidationError);
}

TEST_CASE("irrelevance loss hand cases") {
    // single element: invariant value 2, projected condition value 3 -> 36
    ConditionDecoupler dec(1, 1, 31);
    ParamStore store;
    dec.create_params(store);
    nn::require_param(store, "decouple.irrproj.w").value.data[0] = 3.0;
    nn::require_param(store, "decouple.irrproj.b").value.data[0] = 0.0;

    Graph g;
    FeatureBundle bundle;
    bundle.f_spec = nn::input(g, Tensor({1, 1}, {1.0}));
    bundle.f_inv_rgb = nn::input(g, Tensor({1, 1, 1, 1}, {2.0}));
    bundle.f_inv_ir = nn::input(g, Tensor({1, 1, 1, 1}, {0.0}));
    CHECK(irrelevance_loss(g, store, bundle)->value.item() == doctest::Approx(36.0));

    // channels orthogonal to the projected vector produce exactly zero
    ConditionDecoupler dec2(2, 1, 31);
    ParamStore store2;
    dec2.create_params(store2);
    auto& w = nn::require_param(store2, "decouple.irrproj.w");
    w.value.data = {1.0, 1.0};
    nn::require_param(store2, "decouple.irrproj.b").value.data.assign(2, 0.0);

    Graph g2;
    FeatureBundle b2;
    b2.f_spec = nn::input(g2, Tensor({1, 1}, {1.0}));
    Tensor inv({1, 2, 2, 2});
    for (size_t i = 0; i < 4; ++i) inv.data[i] = 1.0;       // channel 0
    for (size_t i = 4; i < 8; ++i) inv.data[i] = -1.0;      // channel 1
    b2.f_inv_rgb = nn::input(g2, inv);
    b2.f_inv_ir = nn::input(g2, Tensor({1, 2, 2, 2}));
    CHECK(irrelevance_loss(g2, store2, b2)->value.item() == 0.0);
}

TEST_CASE("irrelevance projection stays frozen under sgd") {
    ConditionDecoupler dec(2, 3, 37);
    ParamStore store;
    dec.create_params(store);
    auto& w = nn::require_param(store, "decouple.irrproj.w");
    const auto before = w.value.data;
    for (const auto& p : store.all())
        for (double& gv : p->grad.data) gv = 1.0;
    // grads are unused for frozen params even when populated
    for (auto& gv : w.grad.data) gv = 100.0;
    nn::SgdConfig cfg;
    REQUIRE(nn::sgd_step(store, cfg));
    CHECK(w.value.data == before);
}

TEST_CASE("discrimination loss sums the two streams through a shared head") {
    Graph g;
    FeatureBundle bundle;
    Rng r(41);
    Tensor f = random_tensor(r, {1, 2, 3, 3});
    bundle.f_inv_rgb = nn::input(g, f);
    bundle.f_inv_ir = bundle.f_inv_rgb;  // cloned streams
    StreamLossFn head = [](Graph& gg, Node* x) { return nn::mean_all(gg, x); };
    Node* both = discrimination_loss(g, bundle, head);
    Node* single = head(g, bundle.f_inv_rgb);
    CHECK(both->value.item() == doctest::Approx(2.0 * single->value.item()).epsilon(1e-15));

    // distinct streams: plain additivity
    Graph g2;
    FeatureBundle b2;
    b2.f_inv_rgb = nn::input(g2, random_tensor(r, {1, 2, 3, 3}));
    b2.f_inv_ir = nn::input(g2, random_tensor(r, {1, 2, 3, 3}));
    Node* sum = discrimination_loss(g2, b2, head);
    CHECK(sum->value.item() ==
          doctest::Approx(head(g2, b2.f_inv_rgb)->value.item() +
                          head(g2, b2.f_inv_ir)->value.item())
              .epsilon(1e-15));
}

TEST_CASE("composite loss arithmetic") {
    DecoupleLambdas l;
    const auto r = decoupling_loss(1, 1, 1, l);
    CHECK(r.l_dec == doctest::Approx(0.023).epsilon(1e-12));
    CHECK(decoupling_loss(0, 0, 0, l).l_dec == 0.0);

    Rng rng(53);
    for (int t = 0; t < 10; ++t) {
        const double a = rng.uniform(), b = rng.uniform(), c = rng.uniform();
        const auto base = decoupling_loss(a, b, c, l);
        CHECK(base.l_dec == l.lambda1 * a + l.lambda2 * b + l.lambda3 * c);
        DecoupleLambdas dbl = l;
        dbl.lambda2 *= 2;
        CHECK(decoupling_loss(a, b, c, dbl).l_dec ==
              doctest::Approx(base.l_dec + l.lambda2 * b).epsilon(1e-12));
    }
    DecoupleLambdas bad;
    bad.lambda2 = -0.1;
    CHECK_THROWS_AS(decoupling_loss(1, 1, 1, bad), ConfigError);
}

namespace {

/// Bundle assembled from trainable feature inputs (sigmoid keeps f_spec in
/// bounds); the mock head keeps the discrimination term differentiable but
/// cheap. Exercises gradients of the losses w.r.t. their feature inputs.
struct DecFixture {
    ParamStore store;
    Tensor text;
    DecFixture() {
        Rng r(67);
        mk(store, r, "spec.raw", {4, 3}, 0.8);
        mk(store, r, "inv.rgb", {4, 2, 3, 3}, 0.6);
        mk(store, r, "inv.ir", {4, 2, 3, 3}, 0.6);
        auto* w = store.create("decouple.irrproj.w", {2, 3});
        nn::fill_normal(r, w->value, 0.5);
        store.create("decouple.irrproj.b", {2});
        text = Tensor({4, 3});
        for (double& v : text.data) v = r.uniform(0.05, 0.95);
    }

    Node* loss(Graph& g, double l1, double l2, double l3, bool build_all) {
        FeatureBundle bundle;
        bundle.f_spec = nn::sigmoid(g, nn::param(g, nn::require_param(store, "spec.raw")));
        bundle.f_inv_rgb = nn::param(g, nn::require_param(store, "inv.rgb"));
        bundle.f_inv_ir = nn::param(g, nn::require_param(store, "inv.ir"));
        StreamLossFn head = [](Graph& gg, Node* x) {
            Node* m = nn::mean_all(gg, x);
            return nn::mul(gg, m, m);
        };
        Node* dt = (build_all || l1 != 0)
                       ? distillation_loss(g, bundle, nn::input(g, text))
                       : nullptr;
        Node* irr = (build_all || l2 != 0) ? irrelevance_loss(g, store, bundle) : nullptr;
        Node* dc = (build_all || l3 != 0) ? discrimination_loss(g, bundle, head) : nullptr;
        return combine_losses(g, {{dt, l1}, {irr, l2}, {dc, l3}});
    }
};

} // namespace

TEST_CASE("loss gradients w.r.t. feature inputs match finite differences") {
    DecFixture fx;
    BuildFn build = [&](Graph& g) { return fx.loss(g, 0.01, 0.003, 0.01, true); };
    CHECK(max_fd_rel_err(fx.store, build) < 1e-4);
}

TEST_CASE("zeroing a lambda equals never building the term") {
    DecFixture fx;

    auto grads_for = [&](bool build_all) {
        fx.store.zero_grad();
        Graph g;
        Node* loss = fx.loss(g, 0.01, 0.0, 0.01, build_all);
        g.backward(loss);
        std::vector<std::vector<double>> out;
        for (const auto& p : fx.store.all()) out.push_back(p->grad.data);
        return out;
    };

    const auto with_dead_term = grads_for(true);    // term built, weight 0
    const auto without_term = grads_for(false);     // term never constructed
    REQUIRE(with_dead_term.size() == without_term.size());
    for (size_t i = 0; i < with_dead_term.size(); ++i)
        CHECK(with_dead_term[i] == without_term[i]);

    // and the term actually matters when enabled
    fx.store.zero_grad();
    Graph g;
    g.backward(fx.loss(g, 0.01, 0.003, 0.01, true));
    bool any_diff = false;
    size_t idx = 0;
    for (const auto& p : fx.store.all()) {
        if (p->grad.data != without_term[idx++]) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("combine_losses with nothing enabled is a non-grad zero") {
    Graph g;
    Node* z = combine_losses(g, {{nullptr, 1.0}});
    CHECK(z->value.item() == 0.0);
    CHECK_FALSE(z->requires_grad);
}
