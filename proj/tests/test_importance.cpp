// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <sstream>

#include "elastic/importance.hpp"
#include "support/random_config.hpp"
#include "support/reference_model.hpp"

using namespace elastic;
using namespace elastic::testing;
using Catch::Approx;

namespace {

std::vector<double> maximal_logits(ElasticParams<double>& p, const TokenBatch<double>& x) {
    auto view = build_submodel(p, SubmodelConfig::maximal(p.spec));
    Tape<double> t;
    ForwardOptions<double> o;
    o.track_grad = false;
    return forward(t, view, x, o).to_vector();
}

bool bitwise_equal(const ElasticParams<double>& a, const ElasticParams<double>& b) {
    std::vector<std::vector<double>> da, db;
    a.for_each([&](const std::string&, const Tensor<double>& t) { da.emplace_back(t.data().begin(), t.data().end()); });
    b.for_each([&](const std::string&, const Tensor<double>& t) { db.emplace_back(t.data().begin(), t.data().end()); });
    return da == db;
}

void check_non_increasing(const std::vector<double>& s, double tol) {
    for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] <= s[i - 1] * (1 + tol) + 1e-12);
}

}  // namespace

TEST_CASE("importance scores match a brute-force activation recount", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 21);
    std::mt19937_64 rng(22);
    auto x = random_batch<double>(spec, 8, rng);
    auto report = score_importance(params, x, 8, 3);
    CHECK(report.sample_count == 8);

    auto view = build_submodel(params, SubmodelConfig::maximal(spec));
    auto dense = DenseModel::copy_of(view);
    DenseActivations acts;
    for (std::size_t b = 0; b < 8; ++b) dense.logits(sample_tokens(x, b), &acts);

    const std::size_t d = static_cast<std::size_t>(spec.d_head);
    for (std::size_t i = 0; i < report.emb_scores.size(); ++i) {
        double want = 0;
        for (const auto& m : acts.final_tokens)
            for (std::size_t r = 0; r < m.rows; ++r) want += std::abs(m(r, i));
        CHECK(report.emb_scores[i] == Approx(want).epsilon(1e-9));
    }
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t j = 0; j < report.mlp_scores[l].size(); ++j) {
            double want = 0;
            for (const auto& per : acts.mlp_hidden)
                for (std::size_t r = 0; r < per[l].rows; ++r) want += std::abs(per[l](r, j));
            CHECK(report.mlp_scores[l][j] == Approx(want).epsilon(1e-9));
        }
        for (std::size_t m = 0; m < report.head_scores[l].size(); ++m) {
            double want = 0;
            for (const auto& per : acts.head_outputs)
                for (std::size_t r = 0; r < per[l].rows; ++r)
                    for (std::size_t c = 0; c < d; ++c) want += std::abs(per[l](r, m * d + c));
            CHECK(report.head_scores[l][m] == Approx(want).epsilon(1e-9));
        }
    }
}

TEST_CASE("importance is additive over duplicated samples", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 23);
    std::mt19937_64 rng(24);
    auto one = random_batch<double>(spec, 1, rng);
    auto two = one;
    two.batch = 2;
    two.data.insert(two.data.end(), one.data.begin(), one.data.end());
    auto r1 = score_importance(params, one, 1);
    auto r2 = score_importance(params, two, 2);
    for (std::size_t i = 0; i < r1.emb_scores.size(); ++i) CHECK(r2.emb_scores[i] == 2 * r1.emb_scores[i]);
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t j = 0; j < r1.mlp_scores[l].size(); ++j) CHECK(r2.mlp_scores[l][j] == 2 * r1.mlp_scores[l][j]);
        for (std::size_t m = 0; m < r1.head_scores[l].size(); ++m)
            CHECK(r2.head_scores[l][m] == 2 * r1.head_scores[l][m]);
    }
    for (double s : r1.emb_scores) CHECK(s >= 0);
}

TEST_CASE("a dead hidden unit scores near zero", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 25);
    for (std::size_t r = 0; r < params.layers[1].w1.rows(); ++r) params.layers[1].w1.at(r, 7) = 0;
    params.layers[1].b1[7] = -20;
    std::mt19937_64 rng(26);
    auto report = score_importance(params, random_batch<double>(spec, 4, rng), 4);
    CHECK(report.mlp_scores[1][7] < 1e-12);
}

TEST_CASE("empty sample streams are rejected", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 1);
    TokenBatch<double> empty{0, 4, 6, {}, {}};
    CHECK_THROWS_AS(score_importance(params, empty, 4), FormatError);
}

TEST_CASE("rearrangement preserves full-model logits and sorts importance", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 27);
    std::mt19937_64 rng(28);
    auto data = random_batch<double>(spec, 32, rng);
    auto probe = random_batch<double>(spec, 16, rng);
    auto before = maximal_logits(params, probe);
    auto original = params;

    auto rec = rearrange(params, score_importance(params, data, 32));
    auto after = maximal_logits(params, probe);
    for (std::size_t i = 0; i < before.size(); ++i)
        CHECK(std::abs(after[i] - before[i]) <= 1e-4 * std::max(1.0, std::abs(before[i])));

    auto rescored = score_importance(params, data, 32);
    check_non_increasing(rescored.emb_scores, 1e-9);
    for (std::size_t l = 0; l < 4; ++l) {
        check_non_increasing(rescored.mlp_scores[l], 1e-9);
        check_non_increasing(rescored.head_scores[l], 1e-9);
    }

    apply_permutations(params, rec.inverse());
    CHECK(bitwise_equal(params, original));
}

TEST_CASE("an already sorted report leaves parameters unchanged", "[importance]") {
    auto spec = toy_spec();
    auto params = ElasticParams<double>::random(spec, 29);
    auto original = params;
    ImportanceReport r;
    auto desc = [](std::size_t n) {
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(n - i);
        return v;
    };
    r.emb_scores = desc(64);
    r.mlp_scores.assign(4, desc(256));
    r.head_scores.assign(4, desc(8));
    rearrange(params, r);
    CHECK(bitwise_equal(params, original));

    ImportanceReport bad = r;
    bad.emb_scores.pop_back();
    CHECK_THROWS_AS(rearrange(params, bad), ConfigError);
}

TEST_CASE("ties sort by original index", "[importance]") {
    CHECK(descending_order({1, 3, 3, 0, 1}) == std::vector<std::size_t>{1, 2, 0, 4, 3});
}

TEST_CASE("permutation audit lists every axis", "[importance]") {
    PermutationRecord rec{{1, 0}, {{2, 0, 1}}, {{0, 1}}};
    std::ostringstream os;
    write_permutation_audit(os, rec);
    CHECK(os.str() == "embedding 1 0\nlayer0.mlp 2 0 1\nlayer0.heads 0 1\n");
    auto inv = rec.inverse();
    CHECK(inv.mlp[0] == std::vector<std::size_t>{1, 2, 0});
}
