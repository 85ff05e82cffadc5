// SPDX-License-Identifier: Apache-2.0
//
// Budget-conditioned router: a two-layer perceptron from a normalized MACs
// target to architecture gates, relaxed with Gumbel-Sigmoid noise and a
// straight-through estimator, and trained jointly with the backbone.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/curriculum.hpp"
#include "elastic/dataset.hpp"
#include "elastic/nn_ops.hpp"
#include "elastic/optimizer.hpp"
#include "elastic/pareto.hpp"

namespace elastic {

template <typename T>
struct RouterParams {
    Tensor<T> w_in, b_in, w_out, b_out;

    RouterParams() = default;
    RouterParams(std::size_t hidden, std::size_t gates)
        : w_in({1, hidden}), b_in({1, hidden}), w_out({hidden, gates}), b_out({1, gates}) {}

    std::size_t hidden() const { return w_in.cols(); }
    std::size_t gates() const { return w_out.cols(); }

    /// Hidden kinks spread over the unit budget interval; small output weights.
    static RouterParams random(std::size_t hidden, std::size_t gates, std::uint64_t seed) {
        if (hidden == 0 || gates == 0) throw ConfigError("router: hidden width and gate count must be positive");
        RouterParams r(hidden, gates);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> slope(0.0, 3.0), out(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
        std::uniform_real_distribution<double> knot(0.0, 1.0);
        for (std::size_t j = 0; j < hidden; ++j) {
            const double w = slope(rng);
            r.w_in.data()[j] = static_cast<T>(w);
            r.b_in.data()[j] = static_cast<T>(-w * knot(rng));
        }
        for (auto& v : r.w_out.data()) v = static_cast<T>(out(rng));
        return r;
    }

    template <typename F>
    void for_each(F&& f) {
        f("router.w_in", w_in);
        f("router.b_in", b_in);
        f("router.w_out", w_out);
        f("router.b_out", b_out);
    }
    template <typename F>
    void for_each(F&& f) const {
        f("router.w_in", w_in);
        f("router.b_in", b_in);
        f("router.w_out", w_out);
        f("router.b_out", b_out);
    }

    void set_requires_grad(bool on) {
        for_each([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
    }
};

/// Difference G1 - G2 of two independent standard Gumbel draws per gate.
inline std::vector<double> gumbel_difference(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
    auto gumbel = [&] { return -std::log(-std::log(u(rng))); };
    std::vector<double> d(n);
    for (auto& x : d) {
        const double g1 = gumbel();
        x = g1 - gumbel();
    }
    return d;
}

template <typename T>
struct GateVector {
    Var<T> logits;  ///< 1 x G
    Var<T> soft;    ///< 1 x G, sigmoid((logits + noise) / tau)
    Var<T> st;      ///< 1 x G, hard values with the soft gradient
    std::vector<bool> hard;
    double tau = 1.0, delta = 0.5;
    double budget = 0.0;  ///< M_t after clamping
    std::string warning;  ///< set when M_t was clamped
};

/// Relaxed gates for budget `m_t`. `noise` holds G1 - G2 per gate; pass
/// nullptr for deterministic routing.
template <typename T>
GateVector<T> route(Tape<T>& tape, RouterParams<T>& router, double m_t, const std::vector<double>* noise,
                    double tau, double delta) {
    if (!(tau > 0)) throw ConfigError("route: temperature must be positive, got " + std::to_string(tau));
    if (!(delta > 0 && delta < 1)) throw ConfigError("route: threshold must lie in (0,1), got " + std::to_string(delta));
    GateVector<T> g;
    g.tau = tau;
    g.delta = delta;
    if (!std::isfinite(m_t)) throw NumericalError("route: non-finite budget");
    g.budget = std::clamp(m_t, 0.0, 1.0);
    if (g.budget != m_t) g.warning = "budget " + std::to_string(m_t) + " clamped to " + std::to_string(g.budget);
    const std::size_t n = router.gates();
    auto x = tape.constant(1, 1, {static_cast<T>(g.budget)});
    auto h = gelu(add_row(matmul(x, tape.view(router.w_in)), tape.view(router.b_in)));
    g.logits = add_row(matmul(h, tape.view(router.w_out)), tape.view(router.b_out));
    auto z = g.logits;
    if (noise) {
        if (noise->size() != n)
            throw DimensionError("route: " + std::to_string(noise->size()) + " noise values for " +
                                 std::to_string(n) + " gates");
        std::vector<T> nv(noise->begin(), noise->end());
        z = add(z, tape.constant(1, n, std::move(nv)));
    }
    g.soft = sigmoid(scale(z, static_cast<T>(1.0 / tau)));
    std::vector<T> hard_values(n);
    g.hard.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        g.hard[i] = static_cast<double>(g.soft.value(0, i)) > delta;
        hard_values[i] = g.hard[i] ? T{1} : T{0};
    }
    g.st = straight_through(g.soft, hard_values);
    return g;
}

/// Same popcount law as the genome codec.
template <typename T>
SubmodelConfig gates_to_config(const GateVector<T>& g, const GateLayout& layout) {
    return layout.decode(g.hard);
}

inline std::vector<bool> encode_gates(const SubmodelConfig& cfg, const GateLayout& layout) {
    return layout.encode(cfg);
}

/// Differentiable MACs surrogate. Widths come from sums of `soft` gates,
/// clamped like the decoder; the block flags come from `st`.
template <typename T>
Var<T> soft_macs(Var<T> soft, Var<T> st, const GateLayout& layout) {
    const auto& spec = layout.spec();
    auto& tape = soft.tape();
    const std::size_t n = layout.size();
    if (soft.rows() != 1 || soft.cols() != n || st.rows() != 1 || st.cols() != n)
        throw DimensionError("soft_macs: gates are " + detail::dims(soft) + " and " + detail::dims(st) +
                             ", expected 1x" + std::to_string(n));
    const std::size_t layers = layout.layers();
    const double tok = spec.tokens, d = spec.d_head;
    const T* sv = tape.value_ptr(soft);
    const T* tv = tape.value_ptr(st);

    auto field_sum = [&](std::size_t first, std::size_t count) {
        double s = 0;
        for (std::size_t i = 0; i < count; ++i) s += static_cast<double>(sv[first + i]);
        return s;
    };
    // Clamped value and whether the derivative passes. The floor is
    // straight-through: a field whose soft sum fell below its minimum must
    // still feel the budget, or it can never grow back.
    struct Clamped {
        double v;
        bool pass;
    };
    auto clamp = [](double x, double lo, double hi) {
        return Clamped{std::clamp(x, lo, hi), x <= hi};
    };

    const auto e = clamp(d * field_sum(layout.emb(0), layout.emb_bits()), spec.embed_min, spec.embed_max);
    std::vector<Clamped> r(layers), h(layers);
    std::vector<double> a(layers), b(layers);
    double total = 0;
    for (std::size_t l = 0; l < layers; ++l) {
        const double lo = std::max(spec.ratio_step, spec.ratio_min);
        r[l] = clamp(spec.ratio_step * field_sum(layout.ratio(l, 0), layout.ratio_bits()), lo, spec.ratio_max);
        h[l] = clamp(field_sum(layout.head(l, 0), layout.head_bits()), spec.heads_min, spec.heads_max);
        a[l] = static_cast<double>(tv[layout.mlp_depth(l)]);
        b[l] = static_cast<double>(tv[layout.mha_depth(l)]);
        total += a[l] * 2 * tok * r[l].v * e.v * e.v + b[l] * tok * d * h[l].v * (4 * e.v + 2 * tok);
    }
    auto out = tape.make(1, 1, soft.needs_grad() || st.needs_grad());
    tape.out_ptr(out)[0] = static_cast<T>(total);
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const double g = static_cast<double>(tape.grad_ptr(out)[0]);
            T* gs = soft.needs_grad() ? tape.grad_ptr(soft) : nullptr;
            T* gt = st.needs_grad() ? tape.grad_ptr(st) : nullptr;
            double d_e = 0;
            for (std::size_t l = 0; l < layers; ++l) {
                d_e += a[l] * 4 * tok * r[l].v * e.v + b[l] * tok * d * h[l].v * 4;
                if (gs) {
                    const double d_r = r[l].pass ? a[l] * 2 * tok * e.v * e.v * spec.ratio_step : 0.0;
                    const double d_h = h[l].pass ? b[l] * tok * d * (4 * e.v + 2 * tok) : 0.0;
                    for (std::size_t j = 0; j < layout.ratio_bits(); ++j)
                        gs[layout.ratio(l, j)] += static_cast<T>(g * d_r);
                    for (std::size_t m = 0; m < layout.head_bits(); ++m)
                        gs[layout.head(l, m)] += static_cast<T>(g * d_h);
                }
                if (gt) {
                    gt[layout.mlp_depth(l)] += static_cast<T>(g * 2 * tok * r[l].v * e.v * e.v);
                    gt[layout.mha_depth(l)] += static_cast<T>(g * tok * d * h[l].v * (4 * e.v + 2 * tok));
                }
            }
            if (gs && e.pass)
                for (std::size_t i = 0; i < layout.emb_bits(); ++i) gs[layout.emb(i)] += static_cast<T>(g * d_e * d);
        });
    }
    return out;
}

/// Penalty terms of the stage-2 objective, kept apart for logging.
template <typename T>
struct Stage2Loss {
    Var<T> total, budget_term, imitation_term;
};

/// CE + lambda1 (soft_macs/M0 - M_t)^2 + lambda2 ||st - encode(target)||^2.
template <typename T>
Stage2Loss<T> stage2_loss(Var<T> ce, const GateVector<T>& g, const SubmodelConfig& target, double lambda1,
                          double lambda2, double m0, const GateLayout& layout) {
    auto& tape = ce.tape();
    const auto bits = encode_gates(target, layout);
    std::vector<T> tv(bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) tv[i] = bits[i] ? T{1} : T{0};
    auto gap = add(scale(soft_macs(g.soft, g.st, layout), static_cast<T>(1.0 / m0)), tape.scalar(static_cast<T>(-g.budget)));
    Stage2Loss<T> out;
    out.budget_term = scale(mul(gap, gap), static_cast<T>(lambda1));
    auto diff = sub(g.st, tape.constant(1, bits.size(), std::move(tv)));
    out.imitation_term = scale(sum(mul(diff, diff)), static_cast<T>(lambda2));
    out.total = add(add(ce, out.budget_term), out.imitation_term);
    return out;
}

struct RouterSettings {
    std::size_t hidden = 64;
    double tau_start = 1.0, tau_end = 0.2;
    double delta = 0.5;
    double lambda1 = 5.0, lambda2 = 10.0;
    long phase_a_steps = 1000;
    long phase_b_steps = 1000;
    double lr_multiplier = 1000.0;  ///< router lr relative to the backbone
    OptimizerSettings backbone{1e-5, 0.9, 0.999, 1e-8, 0.01, 0};
    std::size_t batch_size = 32;
    long log_every = 100;

    void validate() const {
        if (hidden == 0) throw ConfigError("router.hidden must be positive");
        if (!(tau_start > 0) || !(tau_end > 0)) throw ConfigError("router temperatures must be positive");
        if (tau_end > tau_start) throw ConfigError("router.tau_end must not exceed router.tau_start");
        if (!(delta > 0 && delta < 1)) throw ConfigError("router.delta must lie in (0,1)");
        if (lambda1 < 0 || lambda2 < 0) throw ConfigError("router lambdas must be non-negative");
        if (phase_a_steps < 0 || phase_b_steps < 0) throw ConfigError("router phase lengths must be non-negative");
        if (!(lr_multiplier > 0)) throw ConfigError("router.lr_multiplier must be positive");
        if (batch_size == 0) throw ConfigError("router.batch_size must be positive");
        backbone.validate();
    }
};

/// Exponential decay from tau_start at step 0 to tau_end at the last step.
inline double tau_at(const RouterSettings& s, long step, long steps) {
    if (steps <= 1) return s.tau_end;
    const double f = static_cast<double>(step) / static_cast<double>(steps - 1);
    return s.tau_start * std::pow(s.tau_end / s.tau_start, f);
}

/// lambda2 falls linearly from its start value to 0 at the phase-B midpoint.
inline double lambda2_at(const RouterSettings& s, long step, long steps) {
    const double half = static_cast<double>(steps) / 2.0;
    if (half <= 0) return 0.0;
    return s.lambda2 * std::max(0.0, 1.0 - static_cast<double>(step) / half);
}

struct RouterStepLog {
    char phase;
    long step;
    double budget, ce, budget_term, imitation_term, tau;
    std::string config;
};

/// Deterministic routing at inference: noise off, final temperature.
template <typename T>
SubmodelConfig route_config(RouterParams<T>& router, const GateLayout& layout, double m_t, const RouterSettings& s,
                            std::vector<bool>* bits = nullptr) {
    Tape<T> tape;
    auto g = route(tape, router, m_t, nullptr, s.tau_end, s.delta);
    if (bits) *bits = g.hard;
    return gates_to_config(g, layout);
}

/// Phase A trains the router alone to imitate the nearest front member;
/// phase B trains router and backbone on the full objective with gated
/// forwards.
template <typename T>
void stage2_train(ElasticParams<T>& params, RouterParams<T>& router, const std::vector<Individual>& front,
                  const TokenBatch<T>& train, const RouterSettings& s, std::uint64_t seed,
                  const std::function<void(const RouterStepLog&)>& log = nullptr) {
    s.validate();
    if (front.empty()) throw SearchError("stage 2: empty Pareto front");
    const GateLayout layout(params.spec);
    if (router.gates() != layout.size())
        throw DimensionError("stage 2: router emits " + std::to_string(router.gates()) + " gates, layout has " +
                             std::to_string(layout.size()));
    const double m0 = static_cast<double>(macs(SubmodelConfig::maximal(params.spec), params.spec));
    std::vector<SubmodelConfig> targets;
    for (const auto& ind : front) targets.push_back(layout.decode(ind.genome));

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> budget(0.0, 1.0);
    auto fail = [](char phase, long step, double m_t, double value) {
        throw NumericalError(std::string("stage 2 phase ") + phase + " step " + std::to_string(step) + " budget " +
                             std::to_string(m_t) + ": non-finite loss " + std::to_string(value));
    };

    router.set_requires_grad(true);
    std::vector<Tensor<T>*> router_tensors;
    router.for_each([&](const std::string&, Tensor<T>& t) { router_tensors.push_back(&t); });
    auto router_opt = s.backbone;
    router_opt.lr = s.backbone.lr * s.lr_multiplier;

    // Phase A: the backbone is not on the tape at all.
    {
        AdamW<T> opt(router_tensors, router_opt);
        for (long step = 0; step < s.phase_a_steps; ++step) {
            const double m_t = budget(rng);
            const auto noise = gumbel_difference(layout.size(), rng);
            const auto& target = targets[static_cast<std::size_t>(&nearest_pareto(front, m_t) - front.data())];
            opt.zero_grad();
            Tape<T> tape;
            auto g = route(tape, router, m_t, &noise, s.tau_start, s.delta);
            auto loss = stage2_loss(tape.scalar(T{0}), g, target, 0.0, s.lambda2, m0, layout);
            const double value = static_cast<double>(loss.total.item());
            if (!std::isfinite(value)) fail('A', step + 1, m_t, value);
            tape.backward(loss.total);
            opt.step(router_opt.lr * cosine_lr(1.0, step, s.backbone.warmup_steps, s.phase_a_steps));
            if (log && ((step + 1) % s.log_every == 0 || step + 1 == s.phase_a_steps))
                log({'A', step + 1, m_t, 0.0, 0.0, value, s.tau_start, target.summary()});
        }
    }

    if (s.phase_b_steps == 0) return;
    params.set_requires_grad(true);
    std::vector<Tensor<T>*> backbone_tensors;
    params.for_each([&](const std::string&, Tensor<T>& t) { backbone_tensors.push_back(&t); });
    AdamW<T> ropt(router_tensors, router_opt);
    AdamW<T> bopt(backbone_tensors, s.backbone);
    BatchSampler sampler(train.batch, seed ^ 0x9e3779b97f4a7c15ULL);
    for (long step = 0; step < s.phase_b_steps; ++step) {
        const double m_t = budget(rng);
        const auto noise = gumbel_difference(layout.size(), rng);
        const double tau = tau_at(s, step, s.phase_b_steps);
        const double l2 = lambda2_at(s, step, s.phase_b_steps);
        const auto& target = targets[static_cast<std::size_t>(&nearest_pareto(front, m_t) - front.data())];
        auto batch = take(train, sampler.next(s.batch_size));
        ropt.zero_grad();
        bopt.zero_grad();
        Tape<T> tape;
        auto g = route(tape, router, m_t, &noise, tau, s.delta);
        const auto cfg = gates_to_config(g, layout);
        auto view = build_submodel(params, cfg);
        GateBinding<T> binding{g.st, g.hard, &layout};
        ForwardOptions<T> opts;
        opts.gates = &binding;
        auto ce = cross_entropy(forward(tape, view, batch, opts), batch.labels);
        auto loss = stage2_loss(ce, g, target, s.lambda1, l2, m0, layout);
        const double value = static_cast<double>(loss.total.item());
        if (!std::isfinite(value)) fail('B', step + 1, m_t, value);
        tape.backward(loss.total);
        const double frac_lr = cosine_lr(1.0, step, s.backbone.warmup_steps, s.phase_b_steps);
        ropt.step(router_opt.lr * frac_lr);
        bopt.step(s.backbone.lr * frac_lr);
        if (log && ((step + 1) % s.log_every == 0 || step + 1 == s.phase_b_steps))
            log({'B', step + 1, m_t, static_cast<double>(ce.item()), static_cast<double>(loss.budget_term.item()),
                 static_cast<double>(loss.imitation_term.item()), tau, cfg.summary()});
    }
}

}  // namespace elastic
