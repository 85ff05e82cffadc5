// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <boost/math/distributions/chi_squared.hpp>
#include <map>
#include <random>

#include "elastic/curriculum.hpp"
#include "elastic/metrics.hpp"
#include "support/random_config.hpp"

using namespace elastic;
using namespace elastic::testing;

namespace {

// Upper-tail p-value of Pearson's statistic against a uniform law.
double uniform_p_value(const std::map<int, long>& counts, int categories, long total) {
    const double expected = static_cast<double>(total) / categories;
    double stat = 0;
    for (const auto& [k, c] : counts) stat += (c - expected) * (c - expected) / expected;
    stat += expected * (categories - static_cast<int>(counts.size()));  // empty categories
    boost::math::chi_squared dist(categories - 1);
    return boost::math::cdf(boost::math::complement(dist, stat));
}

// Toy spec whose floors a six-step schedule reaches exactly.
BackboneSpec schedule_spec() {
    auto s = toy_spec();
    s.heads_min = 2;
    s.embed_min = 16;
    return s;
}

CurriculumSchedule toy_schedule(long total) {
    const long q = total / 8;
    return {total, {q, 2 * q, 3 * q, 4 * q, 5 * q, 6 * q}, {1, 1, 0.5, 0.5, 0.5, 0}, 1, 8, {1, 1, 0, 0, 0, 0}};
}

bool within(const SubmodelConfig& c, const CurriculumState& s, const BackboneSpec& spec) {
    if (c.embed < s.e_min || c.embed > spec.embed_max || c.embed % spec.d_head) return false;
    int skipped = 0;
    for (std::size_t l = 0; l < c.ratio.size(); ++l) {
        if (c.ratio[l] < s.r_min - 1e-12 || c.ratio[l] > spec.ratio_max) return false;
        if (c.heads[l] < s.h_min || c.heads[l] > spec.heads_max) return false;
        if (c.mha_on[l] != c.mlp_on[l]) return false;
        skipped += c.mha_on[l] ? 0 : 1;
    }
    return skipped <= s.n_max;
}

}  // namespace

TEST_CASE("ViT-Base schedule reaches the documented floors", "[curriculum]") {
    auto spec = BackboneSpec::vit_base();
    auto sched = CurriculumSchedule::vit_base(40, {10, 15, 20, 25, 30, 35});
    REQUIRE_NOTHROW(sched.validate(spec));
    auto s = CurriculumState::initial(spec);
    std::vector<CurriculumState> trail{s};
    while (s.t < sched.total_steps) trail.push_back(s = advance(s, sched, spec));
    CHECK(s.r_min == 0.5);
    CHECK(s.h_min == 6);
    CHECK(s.e_min == 384);
    CHECK(s.n_max == 2);
    for (std::size_t i = 1; i < trail.size(); ++i) {
        CHECK(trail[i].r_min <= trail[i - 1].r_min);
        CHECK(trail[i].h_min <= trail[i - 1].h_min);
        CHECK(trail[i].e_min <= trail[i - 1].e_min);
        CHECK(trail[i].n_max >= trail[i - 1].n_max);
    }
    // Between expansions nothing moves.
    CHECK(trail[11].e_min == trail[14].e_min);
    CHECK(trail[9].e_min == 768);
    CHECK(trail[10].e_min == 704);
}

TEST_CASE("schedules that miss the floors are rejected", "[curriculum]") {
    auto spec = BackboneSpec::vit_base();
    auto sched = CurriculumSchedule::vit_base(40, {10, 15, 20, 25, 30, 35});
    auto bad = sched;
    bad.delta_r = {1, 1, 0.5, 0.5, 0, 0};
    CHECK_THROWS_AS(bad.validate(spec), ConfigError);
    bad = sched;
    bad.delta_e = 32;
    CHECK_THROWS_AS(bad.validate(spec), ConfigError);
    bad = sched;
    bad.delta_n = {1, 1, 0};
    CHECK_THROWS_AS(bad.validate(spec), ConfigError);
    bad = sched;
    bad.expansion_steps = {10, 10, 20, 25, 30, 35};
    CHECK_THROWS_AS(bad.validate(spec), ConfigError);
    bad = sched;
    bad.expansion_steps.back() = 41;
    CHECK_THROWS_AS(bad.validate(spec), ConfigError);
}

TEST_CASE("fresh state always samples the maximal config", "[curriculum]") {
    auto spec = schedule_spec();
    std::mt19937_64 rng(41);
    auto s = CurriculumState::initial(spec);
    for (int i = 0; i < 100; ++i) CHECK(sample_config(s, spec, rng) == SubmodelConfig::maximal(spec));
}

TEST_CASE("sampled configs respect the instantaneous bounds", "[curriculum]") {
    auto spec = schedule_spec();
    std::mt19937_64 rng(42);
    std::mt19937_64 sched_rng(43);
    long checked = 0;
    for (int trial = 0; trial < 10; ++trial) {
        // Random expansion steps over a 1000-step horizon.
        std::vector<long> steps(6);
        std::uniform_int_distribution<long> pick(1, 1000);
        do {
            for (auto& st : steps) st = pick(sched_rng);
            std::sort(steps.begin(), steps.end());
        } while (std::adjacent_find(steps.begin(), steps.end()) != steps.end());
        CurriculumSchedule sched{1000, steps, {1, 1, 0.5, 0.5, 0.5, 0}, 1, 8, {1, 1, 0, 0, 0, 0}};
        sched.validate(spec);
        auto s = CurriculumState::initial(spec);
        while (s.t < sched.total_steps) {
            s = advance(s, sched, spec);
            for (int k = 0; k < 10; ++k) {
                auto c = sample_config(s, spec, rng);
                ++checked;
                if (!within(c, s, spec)) FAIL("config " << c.summary() << " violates " << s.summary());
            }
        }
    }
    CHECK(checked == 100000);
}

TEST_CASE("final-bound marginals are uniform", "[curriculum]") {
    auto spec = schedule_spec();
    auto sched = toy_schedule(80);
    auto s = CurriculumState::initial(spec);
    while (s.t < sched.total_steps) s = advance(s, sched, spec);
    std::mt19937_64 rng(44);
    std::map<int, long> e, units, heads, skips;
    const long n = 10000;
    for (long i = 0; i < n; ++i) {
        auto c = sample_config(s, spec, rng);
        ++e[c.embed];
        ++units[static_cast<int>(std::llround(c.ratio[0] / spec.ratio_step))];
        ++heads[c.heads[2]];
        ++skips[static_cast<int>(std::count(c.mha_on.begin(), c.mha_on.end(), false))];
    }
    CHECK(e.size() == 7);  // 16..64 step 8
    CHECK(uniform_p_value(e, 7, n) > 0.01);
    CHECK(uniform_p_value(units, 8, n) > 0.01);
    CHECK(uniform_p_value(heads, 7, n) > 0.01);
    CHECK(uniform_p_value(skips, 3, n) > 0.01);

    auto zero = s;
    zero.n_max = 0;
    for (int i = 0; i < 100; ++i) {
        auto c = sample_config(zero, spec, rng);
        CHECK(std::count(c.mha_on.begin(), c.mha_on.end(), false) == 0);
    }
}

TEST_CASE("zero-step training leaves parameters untouched", "[curriculum]") {
    auto spec = schedule_spec();
    auto params = ElasticParams<double>::random(spec, 45);
    auto before = params;
    std::mt19937_64 rng(46);
    auto data = random_batch<double>(spec, 8, rng);
    CurriculumSchedule sched{0, {}, {}, 0, 0, {}};
    // Zero steps with no expansions only validates when the spec is rigid.
    auto rigid = spec;
    rigid.ratio_min = rigid.ratio_max;
    rigid.heads_min = rigid.heads_max;
    rigid.embed_min = rigid.embed_max;
    params.spec = rigid;
    stage1_train(params, sched, data, TrainSettings{}, 1);
    std::vector<double> a, b;
    params.for_each([&](const std::string&, Tensor<double>& t) { a.insert(a.end(), t.data().begin(), t.data().end()); });
    before.for_each([&](const std::string&, Tensor<double>& t) { b.insert(b.end(), t.data().begin(), t.data().end()); });
    CHECK(a == b);
}

TEST_CASE("each step's gradient stays inside the sampled slices", "[curriculum]") {
    auto spec = schedule_spec();
    auto params = ElasticParams<double>::random(spec, 47);
    std::mt19937_64 rng(48);
    auto data = random_batch<double>(spec, 64, rng);
    TrainSettings ts;
    ts.batch_size = 8;
    long steps = 0;
    stage1_train(params, toy_schedule(40), data, ts, 49, nullptr, [&](const SubmodelConfig& cfg) {
        auto view = build_submodel(params, cfg);
        std::map<const Tensor<double>*, WeightSlice<double>> used;
        view.for_each_slice([&](const std::string&, const WeightSlice<double>& s) { used[s.tensor] = s; });
        params.for_each([&](const std::string& name, Tensor<double>& t) {
            const auto it = used.find(&t);
            for (std::size_t r = 0; r < t.rows(); ++r)
                for (std::size_t c = 0; c < t.cols(); ++c) {
                    const bool inside = it != used.end() && r < it->second.rows && c < it->second.cols;
                    if (!inside && t.grad()[r * t.cols() + c] != 0.0) FAIL(name << " has gradient outside the slice");
                }
        });
        ++steps;
    });
    CHECK(steps == 40);
}

TEST_CASE("stage-1 training is reproducible and learns the toy task", "[curriculum][slow]") {
    auto spec = schedule_spec();
    BlobSpec bs;
    bs.tokens = spec.patch_tokens();
    bs.features = spec.input_dim;
    bs.train_samples = 1024;
    bs.val_samples = 512;
    auto data = generate_blobs<double>(bs);
    TrainSettings ts;
    ts.batch_size = 32;
    ts.optimizer.lr = 2e-3;
    ts.optimizer.warmup_steps = 50;

    auto untrained = ElasticParams<double>::random(spec, 50);
    const double base = evaluate(build_submodel(untrained, SubmodelConfig::maximal(spec)), data.val).accuracy;

    auto a = untrained, b = untrained;
    stage1_train(a, toy_schedule(600), data.train, ts, 51);
    stage1_train(b, toy_schedule(600), data.train, ts, 51);
    std::vector<double> va, vb;
    a.for_each([&](const std::string&, Tensor<double>& t) { va.insert(va.end(), t.data().begin(), t.data().end()); });
    b.for_each([&](const std::string&, Tensor<double>& t) { vb.insert(vb.end(), t.data().begin(), t.data().end()); });
    CHECK(va == vb);

    const double acc = evaluate(build_submodel(a, SubmodelConfig::maximal(spec)), data.val).accuracy;
    INFO("untrained " << base << ", trained " << acc);
    CHECK(acc >= base + 0.30);
}
