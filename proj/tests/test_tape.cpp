#include <catch2/catch_amalgamated.hpp>

#include "cbench/rng.hpp"
#include "cbench/tape.hpp"
#include "cbench/tape_io.hpp"

using namespace cbench;

namespace {

Tensor random_tensor(std::vector<size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

// Gradient of a scalar tape output w.r.t. one leaf, checked against central
// differences. Relative error uses a mixed tolerance so near-zero entries
// don't blow up the ratio.
double grad_check(const Tape& tape, int out,
                  const std::map<std::string, const Tensor*>& inputs,
                  const std::string& leaf, int leaf_id) {
    auto vals = evaluate(tape, inputs);
    auto grads = backward(tape, vals, out);
    const Tensor& analytic = grads[static_cast<size_t>(leaf_id)];

    Tensor point = *inputs.at(leaf);
    auto fn = [&](const Tensor& x) {
        auto in2 = inputs;
        in2[leaf] = &x;
        return evaluate(tape, in2)[static_cast<size_t>(out)].item();
    };
    Tensor numeric = finite_difference(fn, point, 1e-6);
    double worst = 0.0;
    for (size_t i = 0; i < numeric.numel(); ++i) {
        double denom = std::max(std::fabs(numeric[i]), 1.0);
        worst = std::max(worst,
                         std::fabs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("square function forward and gradient") {
    Tape t;
    int x = t.leaf("x", {1, 1});
    int y = t.sum(t.mul(x, x));
    Tensor xv({1, 1}, {3.0});
    std::map<std::string, const Tensor*> in{{"x", &xv}};
    auto vals = evaluate(t, in);
    REQUIRE(vals[static_cast<size_t>(y)].item() == Catch::Approx(9.0));
    auto grads = backward(t, vals, y);
    REQUIRE(grads[static_cast<size_t>(x)][0] == Catch::Approx(6.0));
}

TEST_CASE("softmax of equal logits is uniform") {
    Tape t;
    int x = t.leaf("x", {1, 2});
    int s = t.softmax(x);
    Tensor xv({1, 2}, {0.0, 0.0});
    std::map<std::string, const Tensor*> in{{"x", &xv}};
    auto vals = evaluate(t, in);
    REQUIRE(vals[static_cast<size_t>(s)][0] == Catch::Approx(0.5));
    REQUIRE(vals[static_cast<size_t>(s)][1] == Catch::Approx(0.5));
}

TEST_CASE("backward rejects non-scalar outputs") {
    Tape t;
    int x = t.leaf("x", {2, 2});
    int y = t.softmax(x);
    Tensor xv({2, 2}, {1.0, 2.0, 3.0, 4.0});
    std::map<std::string, const Tensor*> in{{"x", &xv}};
    auto vals = evaluate(t, in);
    REQUIRE_THROWS_AS(backward(t, vals, y), Error);
}

TEST_CASE("shape mismatch names the operation") {
    Tape t;
    int a = t.leaf("a", {2, 3});
    int b = t.leaf("b", {3, 3});
    REQUIRE_THROWS_WITH(t.add(a, b), Catch::Matchers::ContainsSubstring("add"));
}

TEST_CASE("non-finite value reports the node index") {
    Tape t;
    int x = t.leaf("x", {1, 1});
    // exp of a huge value via gelu overflow is awkward; use matmul blowup
    int big = t.scale(x, 1e308);
    int boom = t.mul(big, big);
    (void)boom;
    Tensor xv({1, 1}, {1e5});
    std::map<std::string, const Tensor*> in{{"x", &xv}};
    REQUIRE_THROWS_WITH(evaluate(t, in),
                        Catch::Matchers::ContainsSubstring("node"));
}

TEST_CASE("layernorm gradient is orthogonal to the ones direction") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        Tape t;
        int x = t.leaf("x", {1, 16});
        int y = t.sum(t.layer_norm(x, 1e-5));
        Tensor xv = random_tensor({1, 16}, rng, 2.0);
        std::map<std::string, const Tensor*> in{{"x", &xv}};
        auto vals = evaluate(t, in);
        auto grads = backward(t, vals, y);
        double s = 0.0;
        for (size_t i = 0; i < 16; ++i) s += grads[static_cast<size_t>(x)][i];
        REQUIRE(std::fabs(s) < 1e-10);
    }
}

TEST_CASE("finite differences: basics") {
    auto square = [](const Tensor& x) { return x[0] * x[0]; };
    Tensor p({1}, {3.0});
    Tensor g = finite_difference(square, p, 1e-5);
    REQUIRE(g[0] == Catch::Approx(6.0).margin(1e-6));

    auto constant = [](const Tensor&) { return 4.2; };
    Tensor gz = finite_difference(constant, p, 1e-5);
    REQUIRE(gz[0] == 0.0);

    REQUIRE_THROWS_AS(finite_difference(square, p, 0.0), Error);
}

TEST_CASE("property: every op matches finite differences") {
    Rng rng(42);
    int trials_per_op = 12;  // 12 trials x 9 op groups > 100 total
    for (int trial = 0; trial < trials_per_op; ++trial) {
        // matmul (all transpose layouts) with a nonlinear squash on top
        for (int layout = 0; layout < 4; ++layout) {
            bool ta = layout & 1, tb = layout & 2;
            Tape t;
            int a = t.leaf("a", ta ? std::vector<size_t>{4, 3}
                                   : std::vector<size_t>{3, 4});
            int b = t.leaf("b", tb ? std::vector<size_t>{5, 4}
                                   : std::vector<size_t>{4, 5});
            int out = t.sq_sum(t.matmul(a, b, ta, tb));
            Tensor av = random_tensor(t.shape_of(a), rng);
            Tensor bv = random_tensor(t.shape_of(b), rng);
            std::map<std::string, const Tensor*> in{{"a", &av}, {"b", &bv}};
            REQUIRE(grad_check(t, out, in, "a", a) < 1e-4);
            REQUIRE(grad_check(t, out, in, "b", b) < 1e-4);
        }
        // elementwise chain: gelu(relu(x) * y + y), sigmoid
        {
            Tape t;
            int x = t.leaf("x", {3, 5});
            int y = t.leaf("y", {3, 5});
            int z = t.sum(t.gelu(t.add(t.mul(t.relu(x), y), y)));
            Tensor xv = random_tensor({3, 5}, rng);
            Tensor yv = random_tensor({3, 5}, rng);
            std::map<std::string, const Tensor*> in{{"x", &xv}, {"y", &yv}};
            REQUIRE(grad_check(t, z, in, "x", x) < 1e-4);
            REQUIRE(grad_check(t, z, in, "y", y) < 1e-4);

            Tape t2;
            int x2 = t2.leaf("x", {2, 4});
            int z2 = t2.sum(t2.sigmoid(x2));
            Tensor x2v = random_tensor({2, 4}, rng);
            std::map<std::string, const Tensor*> in2{{"x", &x2v}};
            REQUIRE(grad_check(t2, z2, in2, "x", x2) < 1e-4);
        }
        // row broadcast add/sub/mul
        {
            Tape t;
            int x = t.leaf("x", {4, 3});
            int b = t.leaf("b", {1, 3});
            int z = t.sq_sum(t.mul(t.sub(t.add(x, b), b), b));
            Tensor xv = random_tensor({4, 3}, rng);
            Tensor bv = random_tensor({1, 3}, rng);
            std::map<std::string, const Tensor*> in{{"x", &xv}, {"b", &bv}};
            REQUIRE(grad_check(t, z, in, "x", x) < 1e-4);
            REQUIRE(grad_check(t, z, in, "b", b) < 1e-4);
        }
        // layernorm and softmax
        {
            Tape t;
            int x = t.leaf("x", {3, 8});
            int z = t.sq_sum(t.softmax(t.layer_norm(x, 1e-5)));
            Tensor xv = random_tensor({3, 8}, rng, 1.5);
            std::map<std::string, const Tensor*> in{{"x", &xv}};
            REQUIRE(grad_check(t, z, in, "x", x) < 1e-4);
        }
        // embedding gather + pick + scale
        {
            Tape t;
            int tab = t.leaf("tab", {6, 4});
            int e = t.embed_rows(tab, {2, 0, 5, 2});
            int z = t.sum(t.scale(t.pick(e, {1, 7, 14}), 0.5));
            Tensor tv = random_tensor({6, 4}, rng);
            std::map<std::string, const Tensor*> in{{"tab", &tv}};
            REQUIRE(grad_check(t, z, in, "tab", tab) < 1e-4);
        }
        // row get/set, concat, slice
        {
            Tape t;
            int x = t.leaf("x", {3, 4});
            int v = t.leaf("v", {1, 4});
            int r = t.row_get(x, 1);
            int cat = t.concat_cols(r, v);
            int sl = t.slice_cols(cat, 2, 4);
            int set = t.row_set(x, 2, sl);
            int z = t.sq_sum(set);
            Tensor xv = random_tensor({3, 4}, rng);
            Tensor vv = random_tensor({1, 4}, rng);
            std::map<std::string, const Tensor*> in{{"x", &xv}, {"v", &vv}};
            REQUIRE(grad_check(t, z, in, "x", x) < 1e-4);
            REQUIRE(grad_check(t, z, in, "v", v) < 1e-4);
        }
        // cross-entropy losses
        {
            Tape t;
            int l = t.leaf("l", {3, 6});
            int z = t.softmax_xent(l, {0, 2, 2, 5});
            Tensor lv = random_tensor({3, 6}, rng);
            std::map<std::string, const Tensor*> in{{"l", &lv}};
            REQUIRE(grad_check(t, z, in, "l", l) < 1e-4);

            Tape t2;
            int l2 = t2.leaf("l", {1, 5});
            std::vector<double> probs{0.1, 0.2, 0.3, 0.25, 0.15};
            int z2 = t2.xent_soft(l2, probs);
            Tensor l2v = random_tensor({1, 5}, rng);
            std::map<std::string, const Tensor*> in2{{"l", &l2v}};
            REQUIRE(grad_check(t2, z2, in2, "l", l2) < 1e-4);
        }
        // identity marker keeps its own gradient slot
        {
            Tape t;
            int x = t.leaf("x", {2, 3});
            int id1 = t.identity(x);
            int id2 = t.identity(x);
            int z = t.sum(t.add(t.scale(id1, 2.0), id2));
            Tensor xv = random_tensor({2, 3}, rng);
            std::map<std::string, const Tensor*> in{{"x", &xv}};
            auto vals = evaluate(t, in);
            auto grads = backward(t, vals, z);
            REQUIRE(grads[static_cast<size_t>(id1)][0] == Catch::Approx(2.0));
            REQUIRE(grads[static_cast<size_t>(id2)][0] == Catch::Approx(1.0));
            REQUIRE(grads[static_cast<size_t>(x)][0] == Catch::Approx(3.0));
        }
    }
}

TEST_CASE("evaluate is deterministic bit for bit") {
    Rng rng(3);
    Tape t;
    int x = t.leaf("x", {4, 4});
    int y = t.leaf("y", {4, 4});
    int z = t.softmax(t.matmul(t.gelu(x), y));
    Tensor xv = random_tensor({4, 4}, rng);
    Tensor yv = random_tensor({4, 4}, rng);
    std::map<std::string, const Tensor*> in{{"x", &xv}, {"y", &yv}};
    auto v1 = evaluate(t, in);
    auto v2 = evaluate(t, in);
    REQUIRE(v1[static_cast<size_t>(z)].vec() == v2[static_cast<size_t>(z)].vec());
}

TEST_CASE("tape serialization round-trip replays forward exactly") {
    Rng rng(11);
    Tape t;
    int x = t.leaf("x", {3, 4});
    int w = t.constant(random_tensor({4, 2}, rng));
    int z = t.softmax(t.matmul(t.layer_norm(x, 1e-5), w));
    t.label("out", z);
    Tensor xv = random_tensor({3, 4}, rng);
    std::map<std::string, const Tensor*> in{{"x", &xv}};
    auto v1 = evaluate(t, in);

    Tape t2 = tape_from_json(tape_to_json(t));
    auto v2 = evaluate(t2, in);
    REQUIRE(t2.named.at("out") == z);
    REQUIRE(v1[static_cast<size_t>(z)].vec() ==
            v2[static_cast<size_t>(z)].vec());
}
