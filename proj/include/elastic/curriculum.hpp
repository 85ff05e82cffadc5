// SPDX-License-Identifier: Apache-2.0
//
// Stage-1 curriculum: training starts from the maximal submodel and the
// lower sampling bounds drop at scheduled expansion steps.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/dataset.hpp"
#include "elastic/optimizer.hpp"

namespace elastic {

struct CurriculumSchedule {
    long total_steps = 0;
    std::vector<long> expansion_steps;  ///< ascending, within 1..total_steps
    std::vector<double> delta_r;        ///< one per expansion
    int delta_h = 1;
    int delta_e = 0;
    std::vector<int> delta_n;  ///< one per expansion

    /// Checks shapes and that the deltas land exactly on the spec floors.
    void validate(const BackboneSpec& spec) const {
        if (total_steps < 0) throw ConfigError("curriculum.total_steps must be non-negative");
        const std::size_t k = expansion_steps.size();
        if (delta_r.size() != k || delta_n.size() != k)
            throw ConfigError("curriculum: delta_r and delta_n need one entry per expansion step (" +
                              std::to_string(k) + ")");
        for (std::size_t i = 0; i < k; ++i) {
            if (expansion_steps[i] < 1 || expansion_steps[i] > total_steps)
                throw ConfigError("curriculum: expansion step " + std::to_string(expansion_steps[i]) +
                                  " outside 1.." + std::to_string(total_steps));
            if (i > 0 && expansion_steps[i] <= expansion_steps[i - 1])
                throw ConfigError("curriculum: expansion steps must be strictly ascending");
            if (delta_r[i] < 0 || delta_n[i] < 0) throw ConfigError("curriculum: deltas must be non-negative");
        }
        if (delta_h < 0 || delta_e < 0) throw ConfigError("curriculum: deltas must be non-negative");
        if (delta_e % spec.d_head != 0) throw ConfigError("curriculum.delta_e must be a multiple of d_head");
        const double r_end = spec.ratio_max - std::accumulate(delta_r.begin(), delta_r.end(), 0.0);
        if (std::abs(r_end - spec.ratio_min) > 1e-9)
            throw ConfigError("curriculum: ratio deltas end at " + std::to_string(r_end) + ", floor is " +
                              std::to_string(spec.ratio_min));
        for (double dr : delta_r)
            if (std::abs(dr / spec.ratio_step - std::round(dr / spec.ratio_step)) > 1e-9)
                throw ConfigError("curriculum: ratio deltas must be multiples of ratio_step");
        const long ki = static_cast<long>(k);
        if (spec.heads_max - ki * delta_h != spec.heads_min)
            throw ConfigError("curriculum: head deltas end at " + std::to_string(spec.heads_max - ki * delta_h) +
                              ", floor is " + std::to_string(spec.heads_min));
        if (spec.embed_max - ki * delta_e != spec.embed_min)
            throw ConfigError("curriculum: embedding deltas end at " + std::to_string(spec.embed_max - ki * delta_e) +
                              ", floor is " + std::to_string(spec.embed_min));
        if (std::accumulate(delta_n.begin(), delta_n.end(), 0) > spec.layers)
            throw ConfigError("curriculum: skip-count deltas exceed the layer count");
    }

    int n_max_final() const { return std::accumulate(delta_n.begin(), delta_n.end(), 0); }

    /// The ViT-Base schedule: six expansions of one head and 64 channels,
    /// ratio floor 4 -> 0.5, up to two skipped layers.
    static CurriculumSchedule vit_base(long total_steps, std::vector<long> steps) {
        return {total_steps, std::move(steps), {1, 1, 0.5, 0.5, 0.5, 0}, 1, 64, {1, 1, 0, 0, 0, 0}};
    }
};

struct CurriculumState {
    long t = 0;
    double r_min = 0;
    int h_min = 0;
    int e_min = 0;
    int n_max = 0;

    static CurriculumState initial(const BackboneSpec& spec) {
        return {0, spec.ratio_max, spec.heads_max, spec.embed_max, 0};
    }

    std::string summary() const {
        std::ostringstream os;
        os << "t=" << t << " R>=" << r_min << " H>=" << h_min << " E>=" << e_min << " skip<=" << n_max;
        return os.str();
    }
};

/// Moves to step t+1, expanding the bounds if t+1 is an expansion step.
inline CurriculumState advance(CurriculumState s, const CurriculumSchedule& sched, const BackboneSpec& spec) {
    ++s.t;
    const auto it = std::find(sched.expansion_steps.begin(), sched.expansion_steps.end(), s.t);
    if (it != sched.expansion_steps.end()) {
        const auto i = static_cast<std::size_t>(it - sched.expansion_steps.begin());
        s.r_min = std::max(spec.ratio_min, s.r_min - sched.delta_r[i]);
        s.h_min = std::max(spec.heads_min, s.h_min - sched.delta_h);
        s.e_min = std::max(spec.embed_min, s.e_min - sched.delta_e);
        s.n_max = std::min(spec.layers, s.n_max + sched.delta_n[i]);
    }
    return s;
}

/// Draws a configuration uniformly within the current bounds. Skipped
/// layers drop both blocks.
inline SubmodelConfig sample_config(const CurriculumState& s, const BackboneSpec& spec, std::mt19937_64& rng) {
    const auto units_min = static_cast<int>(std::llround(s.r_min / spec.ratio_step));
    std::uniform_int_distribution<int> units(units_min, spec.ratio_units_max());
    std::uniform_int_distribution<int> heads(s.h_min, spec.heads_max);
    std::uniform_int_distribution<int> k(s.e_min / spec.d_head, spec.k_max());
    std::uniform_int_distribution<int> skips(0, s.n_max);
    SubmodelConfig c;
    c.embed = k(rng) * spec.d_head;
    for (int l = 0; l < spec.layers; ++l) {
        c.ratio.push_back(units(rng) * spec.ratio_step);
        c.heads.push_back(heads(rng));
    }
    c.mha_on.assign(static_cast<std::size_t>(spec.layers), true);
    c.mlp_on.assign(static_cast<std::size_t>(spec.layers), true);
    const int s_count = skips(rng);
    std::vector<int> layers(static_cast<std::size_t>(spec.layers));
    std::iota(layers.begin(), layers.end(), 0);
    std::vector<int> chosen;
    std::sample(layers.begin(), layers.end(), std::back_inserter(chosen), s_count, rng);
    for (int l : chosen) c.mha_on[static_cast<std::size_t>(l)] = c.mlp_on[static_cast<std::size_t>(l)] = false;
    return c;
}

struct TrainSettings {
    OptimizerSettings optimizer;
    std::size_t batch_size = 32;
    long log_every = 100;
};

/// Per-step log record.
struct StepLog {
    long step;
    std::string config;
    double loss;
};

/// Trains sampled submodels on the shared weights, one optimizer step per
/// sample. `seed` drives both configuration sampling and batch order.
template <typename T>
void stage1_train(ElasticParams<T>& params, const CurriculumSchedule& sched, const TokenBatch<T>& train,
                  const TrainSettings& ts, std::uint64_t seed,
                  const std::function<void(const StepLog&)>& log = nullptr,
                  const std::function<void(const SubmodelConfig&)>& after_step = nullptr) {
    const auto& spec = params.spec;
    sched.validate(spec);
    if (sched.total_steps == 0) return;
    params.set_requires_grad(true);
    std::vector<Tensor<T>*> tensors;
    params.for_each([&](const std::string&, Tensor<T>& t) { tensors.push_back(&t); });
    AdamW<T> opt(tensors, ts.optimizer);
    std::mt19937_64 rng(seed);
    BatchSampler sampler(train.batch, seed ^ 0x9e3779b97f4a7c15ULL);
    auto state = CurriculumState::initial(spec);
    for (long step = 0; step < sched.total_steps; ++step) {
        state = advance(state, sched, spec);
        const auto cfg = sample_config(state, spec, rng);
        auto view = build_submodel(params, cfg);
        auto batch = take(train, sampler.next(ts.batch_size));
        opt.zero_grad();
        Tape<T> tape;
        auto loss = cross_entropy(forward(tape, view, batch), batch.labels);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value))
            throw NumericalError("stage 1 step " + std::to_string(state.t) + " config " + cfg.summary() +
                                 ": non-finite loss " + std::to_string(value));
        tape.backward(loss);
        if (after_step) after_step(cfg);
        opt.step(cosine_lr(ts.optimizer.lr, step, ts.optimizer.warmup_steps, sched.total_steps));
        if (log && (state.t % ts.log_every == 0 || state.t == sched.total_steps))
            log({state.t, cfg.summary(), value});
    }
}

/// Trains the maximal submodel only (stage-0 warm-up and the separately
/// trained reference model).
template <typename T>
void train_maximal(ElasticParams<T>& params, const TokenBatch<T>& train, long steps, const TrainSettings& ts,
                   std::uint64_t seed, const std::function<void(const StepLog&)>& log = nullptr) {
    if (steps <= 0) return;
    params.set_requires_grad(true);
    std::vector<Tensor<T>*> tensors;
    params.for_each([&](const std::string&, Tensor<T>& t) { tensors.push_back(&t); });
    AdamW<T> opt(tensors, ts.optimizer);
    BatchSampler sampler(train.batch, seed);
    const auto cfg = SubmodelConfig::maximal(params.spec);
    auto view = build_submodel(params, cfg);
    for (long step = 0; step < steps; ++step) {
        auto batch = take(train, sampler.next(ts.batch_size));
        opt.zero_grad();
        Tape<T> tape;
        auto loss = cross_entropy(forward(tape, view, batch), batch.labels);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value))
            throw NumericalError("full-model step " + std::to_string(step + 1) + ": non-finite loss " +
                                 std::to_string(value));
        tape.backward(loss);
        opt.step(cosine_lr(ts.optimizer.lr, step, ts.optimizer.warmup_steps, steps));
        if (log && ((step + 1) % ts.log_every == 0 || step + 1 == steps)) log({step + 1, cfg.summary(), value});
    }
}

}  // namespace elastic
