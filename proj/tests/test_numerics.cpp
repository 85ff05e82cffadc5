// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "elastic/nn_ops.hpp"
#include "support/gradcheck.hpp"

using namespace elastic;
using elastic::testing::gradient_check;
using elastic::testing::random_values;
using elastic::testing::Shape2;
using Catch::Approx;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<Shape2> random_shapes(std::mt19937_64& rng, int count) {
    std::uniform_int_distribution<std::size_t> d(1, 6);
    std::vector<Shape2> out;
    for (int i = 0; i < count; ++i) out.push_back({d(rng), d(rng)});
    return out;
}

}  // namespace

TEST_CASE("matmul of identities and a hand-computed product", "[numerics]") {
    Tape<double> t;
    auto i2 = t.constant(2, 2, {1, 0, 0, 1});
    CHECK(matmul(i2, i2).to_vector() == std::vector<double>{1, 0, 0, 1});
    auto a = t.constant(2, 2, {1, 2, 3, 4});
    auto b = t.constant(2, 1, {0, 1});
    CHECK(matmul(a, b).to_vector() == std::vector<double>{2, 4});
}

TEST_CASE("matmul reports both shapes on mismatch", "[numerics]") {
    Tape<double> t;
    auto a = t.constant(2, 3, std::vector<double>(6, 1.0));
    auto b = t.constant(2, 3, std::vector<double>(6, 1.0));
    try {
        matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3 * 2x3") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences", "[numerics][grad]") {
    std::mt19937_64 rng(1);
    auto r = gradient_check({{5, 7}, {7, 3}}, {random_values(35, rng), random_values(21, rng)},
                            [](auto&, const auto& v) { return matmul(v[0], v[1]); });
    CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("elementwise ops: values at reference points", "[numerics]") {
    Tape<double> t;
    CHECK(gelu(t.scalar(0.0)).item() == 0.0);
    CHECK(sigmoid(t.scalar(0.0)).item() == 0.5);
    CHECK(sigmoid(t.scalar(-800.0)).item() == Approx(0.0).margin(1e-300));
    auto x = t.constant(1, 3, {1, 2, 3});
    CHECK(scale(x, 2.0).to_vector() == std::vector<double>{2, 4, 6});
    CHECK(add(x, t.scalar(1.0)).to_vector() == std::vector<double>{2, 3, 4});
    CHECK(mul(t.scalar(2.0), x).to_vector() == std::vector<double>{2, 4, 6});
    CHECK_THROWS_AS(add(x, t.constant(3, 1, {1, 2, 3})), DimensionError);
}

TEST_CASE("gelu derivative at integer points matches finite differences", "[numerics][grad]") {
    for (double x0 : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
        auto r = gradient_check({{1, 1}}, {{x0}}, [](auto&, const auto& v) { return gelu(v[0]); });
        CHECK(r.max_rel_error < 1e-5);
    }
}

TEST_CASE("every differentiable op passes gradient checks on random shapes", "[numerics][grad]") {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 3; ++trial) {
        auto s = random_shapes(rng, 2);
        const auto n0 = s[0].rows * s[0].cols;
        auto x = random_values(n0, rng);
        auto y = random_values(n0, rng);
        using V = std::vector<Var<double>>;
        auto unary = [&](auto f) {
            return gradient_check({s[0]}, {x}, [f](auto&, const V& v) { return f(v[0]); }).max_rel_error;
        };
        auto binary = [&](auto f) {
            return gradient_check({s[0], s[0]}, {x, y}, [f](auto&, const V& v) { return f(v[0], v[1]); })
                .max_rel_error;
        };
        CHECK(binary([](auto a, auto b) { return add(a, b); }) < kGradTol);
        CHECK(binary([](auto a, auto b) { return sub(a, b); }) < kGradTol);
        CHECK(binary([](auto a, auto b) { return mul(a, b); }) < kGradTol);
        CHECK(unary([](auto a) { return scale(a, -1.7); }) < kGradTol);
        CHECK(unary([](auto a) { return gelu(a); }) < kGradTol);
        CHECK(unary([](auto a) { return sigmoid(a); }) < kGradTol);
        CHECK(unary([](auto a) { return transpose(a); }) < kGradTol);
        CHECK(unary([](auto a) { return reshape(a, 1, a.rows() * a.cols()); }) < kGradTol);
        CHECK(unary([](auto a) { return softmax_rows(a); }) < kGradTol);
        CHECK(unary([](auto a) { return slice_cols(a, 0, (a.cols() + 1) / 2); }) < kGradTol);
        CHECK(unary([](auto a) { return slice_rows(a, a.rows() / 2, a.rows()); }) < kGradTol);
        CHECK(unary([](auto a) { return concat_rows<double>({a, scale(a, 2.0)}); }) < kGradTol);
        CHECK(unary([](auto a) { return concat_cols<double>({a, gelu(a)}); }) < kGradTol);
        CHECK(unary([](auto a) { return sum(a); }) < kGradTol);
        // scalar broadcast on either side
        CHECK(gradient_check({s[0], {1, 1}}, {x, {0.3}},
                             [](auto&, const V& v) { return mul(v[0], v[1]); })
                  .max_rel_error < kGradTol);
        auto bias = random_values(s[0].cols, rng);
        CHECK(gradient_check({s[0], {1, s[0].cols}}, {x, bias},
                             [](auto&, const V& v) { return add_row(v[0], v[1]); })
                  .max_rel_error < kGradTol);

        const std::size_t e = s[0].cols + 1;
        auto lx = random_values(s[0].rows * e, rng);
        auto g = random_values(e, rng);
        auto b = random_values(e, rng);
        CHECK(gradient_check({{s[0].rows, e}, {1, e}, {1, e}}, {lx, g, b},
                             [](auto&, const V& v) { return layernorm(v[0], v[1], v[2], 1e-6); })
                  .max_rel_error < kGradTol);

        std::vector<int> labels(s[0].rows);
        std::uniform_int_distribution<int> cls(0, static_cast<int>(s[0].cols) - 1);
        for (auto& l : labels) l = cls(rng);
        CHECK(gradient_check({s[0]}, {x}, [&](auto&, const V& v) { return cross_entropy(v[0], labels); })
                  .max_rel_error < kGradTol);
    }
}

TEST_CASE("layernorm edge cases", "[numerics]") {
    Tape<double> t;
    auto g = t.constant(1, 2, {1, 1});
    auto b = t.constant(1, 2, {0.25, -0.5});
    auto constant_row = layernorm(t.constant(1, 2, {3, 3}), g, b, 1e-6);
    CHECK(constant_row.to_vector() == std::vector<double>{0.25, -0.5});
    auto standardized = layernorm(t.constant(1, 2, {1, -1}), g, t.constant(1, 2, {0, 0}), 1e-12);
    CHECK(standardized.value(0, 0) == Approx(1.0).epsilon(1e-9));
    CHECK(standardized.value(0, 1) == Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("softmax rows: symmetry, stability and normalization", "[numerics]") {
    Tape<double> t;
    auto u = softmax_rows(t.constant(1, 3, {0, 0, 0})).to_vector();
    for (double p : u) CHECK(p == Approx(1.0 / 3.0));
    auto big = softmax_rows(t.constant(1, 2, {1000, 0})).to_vector();
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == Approx(1.0));
    CHECK(big[1] == Approx(0.0).margin(1e-300));

    std::mt19937_64 rng(3);
    auto x = random_values(24, rng, 3.0);
    auto s = softmax_rows(t.constant(4, 6, x));
    for (std::size_t r = 0; r < 4; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 6; ++c) total += s.value(r, c);
        CHECK(std::abs(total - 1.0) < 1e-6);
    }
    auto r = gradient_check({{4, 6}}, {x}, [](auto&, const auto& v) { return softmax_rows(v[0]); });
    CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("attention gradient matches finite differences", "[numerics][grad]") {
    std::mt19937_64 rng(11);
    const std::size_t batch = 2, tokens = 3, heads = 2, d = 2, w = heads * d;
    auto r = gradient_check({{batch * tokens, w}, {batch * tokens, w}, {batch * tokens, w}},
                            {random_values(24, rng), random_values(24, rng), random_values(24, rng)},
                            [&](auto&, const auto& v) { return attention(v[0], v[1], v[2], batch, tokens, heads, d); });
    CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("scale_column_groups gradient matches finite differences", "[numerics][grad]") {
    std::mt19937_64 rng(5);
    std::vector<int> groups{0, 0, -1, 2, 2, 1};
    auto r = gradient_check({{3, 6}, {1, 3}}, {random_values(18, rng), random_values(3, rng)},
                            [&](auto&, const auto& v) { return scale_column_groups(v[0], v[1], groups); });
    CHECK(r.max_rel_error < kGradTol);
}

TEST_CASE("views accumulate gradient into the parent at sliced offsets", "[numerics]") {
    Tensor<double> parent({3, 4}, std::vector<double>(12, 1.0), true);
    Tape<double> t;
    auto v = t.view(parent, 2, 3);
    auto x = t.constant(1, 2, {1.0, 2.0});
    t.backward(sum(matmul(x, v)));
    const std::vector<double> expected{1, 1, 1, 0, 2, 2, 2, 0, 0, 0, 0, 0};
    CHECK(std::vector<double>(parent.grad().begin(), parent.grad().end()) == expected);
}

TEST_CASE("operations never mutate their inputs", "[numerics]") {
    std::mt19937_64 rng(9);
    auto xs = random_values(12, rng);
    Tensor<double> param({3, 4}, xs, true);
    Tape<double> t;
    auto v = t.view(param);
    auto y = sum(softmax_rows(layernorm(gelu(v), t.constant(1, 4, {1, 1, 1, 1}), t.constant(1, 4, {0, 0, 0, 0}), 1e-6)));
    t.backward(y);
    CHECK(std::vector<double>(param.data().begin(), param.data().end()) == xs);
}

TEST_CASE("backward is deterministic for identical tapes", "[numerics]") {
    std::mt19937_64 rng(13);
    auto a = random_values(20, rng), b = random_values(20, rng);
    auto run = [&] {
        Tape<double> t;
        auto va = t.variable(4, 5, a);
        auto vb = t.variable(5, 4, b);
        t.backward(sum(gelu(matmul(va, vb))));
        return va.grad_vector();
    };
    CHECK(run() == run());
}

TEST_CASE("straight-through value is hard, gradient is the soft gradient", "[numerics]") {
    Tape<double> t;
    auto soft = t.variable(1, 3, {0.2, 0.6, 0.9});
    auto st = straight_through(soft, std::vector<double>{0, 1, 1});
    CHECK(st.to_vector() == std::vector<double>{0, 1, 1});
    t.backward(sum(mul(st, t.constant(1, 3, {1, 2, 3}))));
    CHECK(soft.grad_vector() == std::vector<double>{1, 2, 3});
}

TEST_CASE("float tapes compute the same expression", "[numerics]") {
    Tape<float> t;
    auto a = t.constant(2, 2, {1, 2, 3, 4});
    auto b = t.constant(2, 1, {0, 1});
    CHECK(matmul(a, b).to_vector() == std::vector<float>{2, 4});
}
