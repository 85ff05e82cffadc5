// SPDX-License-Identifier: Apache-2.0
//
// Nested elastic transformer: the shared parameter store, prefix-slice
// submodel views and the pre-norm forward pass.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "elastic/autodiff.hpp"
#include "elastic/config_space.hpp"
#include "elastic/gate_layout.hpp"
#include "elastic/nn_ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
struct LayerParams {
    Tensor<T> w_q, w_k, w_v, w_o;  // E_max x H_max*d_head (w_o transposed shape)
    Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
    Tensor<T> w1, b1, w2, b2;
};

/// Full supernet weights. Along every elastic axis lower indices are the
/// more important units, and a submodel of width w uses indices [0, w).
template <typename T>
struct ElasticParams {
    BackboneSpec spec;
    Tensor<T> embed;  // input_dim x E_max
    Tensor<T> cls;    // 1 x E_max
    Tensor<T> pos;    // N x E_max
    std::vector<LayerParams<T>> layers;
    Tensor<T> lnf_gamma, lnf_beta;  // 1 x E_max
    Tensor<T> head;                 // E_max x num_classes
    Tensor<T> head_bias;            // 1 x num_classes

    ElasticParams() = default;

    /// Zero weights, unit LayerNorm scales.
    explicit ElasticParams(const BackboneSpec& s) : spec(s) {
        spec.validate();
        const auto e = static_cast<std::size_t>(s.embed_max);
        const auto hd = static_cast<std::size_t>(s.heads_max * s.d_head);
        const auto hid = static_cast<std::size_t>(s.hidden_max());
        embed = Tensor<T>({static_cast<std::size_t>(s.input_dim), e});
        cls = Tensor<T>({1, e});
        pos = Tensor<T>({static_cast<std::size_t>(s.tokens), e});
        layers.resize(static_cast<std::size_t>(s.layers));
        for (auto& l : layers) {
            l.w_q = Tensor<T>({e, hd});
            l.w_k = Tensor<T>({e, hd});
            l.w_v = Tensor<T>({e, hd});
            l.w_o = Tensor<T>({hd, e});
            l.ln1_gamma = ones(e);
            l.ln1_beta = Tensor<T>({1, e});
            l.ln2_gamma = ones(e);
            l.ln2_beta = Tensor<T>({1, e});
            l.w1 = Tensor<T>({e, hid});
            l.b1 = Tensor<T>({1, hid});
            l.w2 = Tensor<T>({hid, e});
            l.b2 = Tensor<T>({1, e});
        }
        lnf_gamma = ones(e);
        lnf_beta = Tensor<T>({1, e});
        head = Tensor<T>({e, static_cast<std::size_t>(s.num_classes)});
        head_bias = Tensor<T>({1, static_cast<std::size_t>(s.num_classes)});
    }

    /// Gaussian initialization scaled by fan-in.
    static ElasticParams random(const BackboneSpec& s, std::uint64_t seed) {
        ElasticParams p(s);
        std::mt19937_64 rng(seed);
        auto fill = [&rng](Tensor<T>& t, double stddev) {
            std::normal_distribution<double> dist(0.0, stddev);
            for (auto& x : t.data()) x = static_cast<T>(dist(rng));
        };
        const double e = s.embed_max;
        fill(p.embed, 1.0 / std::sqrt(static_cast<double>(s.input_dim)));
        fill(p.cls, 0.1);
        fill(p.pos, 0.1);
        for (auto& l : p.layers) {
            fill(l.w_q, 1.0 / std::sqrt(e));
            fill(l.w_k, 1.0 / std::sqrt(e));
            fill(l.w_v, 1.0 / std::sqrt(e));
            fill(l.w_o, 1.0 / std::sqrt(static_cast<double>(s.heads_max * s.d_head)));
            fill(l.w1, 1.0 / std::sqrt(e));
            fill(l.w2, 1.0 / std::sqrt(static_cast<double>(s.hidden_max())));
        }
        fill(p.head, 1.0 / std::sqrt(e));
        return p;
    }

    /// Visits every tensor with a stable dotted name, in declaration order.
    template <typename F>
    void for_each(F&& f) {
        visit(*this, f);
    }
    template <typename F>
    void for_each(F&& f) const {
        visit(*this, f);
    }

    void set_requires_grad(bool on) {
        for_each([on](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
    }
    void zero_grad() {
        for_each([](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    template <typename U>
    ElasticParams<U> cast() const {
        ElasticParams<U> out(spec);
        std::vector<const Tensor<T>*> src;
        for_each([&src](const std::string&, const Tensor<T>& t) { src.push_back(&t); });
        std::size_t i = 0;
        out.for_each([&](const std::string&, Tensor<U>& t) {
            auto d = src[i++]->data();
            std::copy(d.begin(), d.end(), t.data().begin());
        });
        return out;
    }

   private:
    static Tensor<T> ones(std::size_t n) { return Tensor<T>({1, n}, std::vector<T>(n, T{1})); }

    template <typename Self, typename F>
    static void visit(Self& self, F& f) {
        f("embed", self.embed);
        f("cls", self.cls);
        f("pos", self.pos);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            auto& l = self.layers[i];
            const std::string p = "layer" + std::to_string(i) + ".";
            f(p + "w_q", l.w_q);
            f(p + "w_k", l.w_k);
            f(p + "w_v", l.w_v);
            f(p + "w_o", l.w_o);
            f(p + "ln1_gamma", l.ln1_gamma);
            f(p + "ln1_beta", l.ln1_beta);
            f(p + "ln2_gamma", l.ln2_gamma);
            f(p + "ln2_beta", l.ln2_beta);
            f(p + "w1", l.w1);
            f(p + "b1", l.b1);
            f(p + "w2", l.w2);
            f(p + "b2", l.b2);
        }
        f("lnf_gamma", self.lnf_gamma);
        f("lnf_beta", self.lnf_beta);
        f("head", self.head);
        f("head_bias", self.head_bias);
    }
};

/// Top-left block of a supernet tensor.
template <typename T>
struct WeightSlice {
    Tensor<T>* tensor = nullptr;
    std::size_t rows = 0, cols = 0;
};

/// A submodel as a set of prefix slices into the shared parameters. No
/// weights are copied; gradients taken through a view land in the
/// supernet tensors.
template <typename T>
class SubmodelView {
   public:
    SubmodelView(ElasticParams<T>& params, SubmodelConfig cfg) : params_(&params), cfg_(std::move(cfg)) {}

    const SubmodelConfig& config() const { return cfg_; }
    const BackboneSpec& spec() const { return params_->spec; }
    ElasticParams<T>& params() const { return *params_; }

    std::size_t embed_width() const { return static_cast<std::size_t>(cfg_.embed); }
    std::size_t attn_width(std::size_t l) const {
        return static_cast<std::size_t>(cfg_.heads[l] * spec().d_head);
    }
    std::size_t hidden(std::size_t l) const { return static_cast<std::size_t>(cfg_.hidden(l)); }

    WeightSlice<T> embed() const {
        return {&params_->embed, static_cast<std::size_t>(spec().input_dim), embed_width()};
    }
    WeightSlice<T> cls() const { return {&params_->cls, 1, embed_width()}; }
    WeightSlice<T> pos() const {
        return {&params_->pos, static_cast<std::size_t>(spec().tokens), embed_width()};
    }
    WeightSlice<T> w_q(std::size_t l) const { return {&layer(l).w_q, embed_width(), attn_width(l)}; }
    WeightSlice<T> w_k(std::size_t l) const { return {&layer(l).w_k, embed_width(), attn_width(l)}; }
    WeightSlice<T> w_v(std::size_t l) const { return {&layer(l).w_v, embed_width(), attn_width(l)}; }
    WeightSlice<T> w_o(std::size_t l) const { return {&layer(l).w_o, attn_width(l), embed_width()}; }
    WeightSlice<T> ln1_gamma(std::size_t l) const { return {&layer(l).ln1_gamma, 1, embed_width()}; }
    WeightSlice<T> ln1_beta(std::size_t l) const { return {&layer(l).ln1_beta, 1, embed_width()}; }
    WeightSlice<T> ln2_gamma(std::size_t l) const { return {&layer(l).ln2_gamma, 1, embed_width()}; }
    WeightSlice<T> ln2_beta(std::size_t l) const { return {&layer(l).ln2_beta, 1, embed_width()}; }
    WeightSlice<T> w1(std::size_t l) const { return {&layer(l).w1, embed_width(), hidden(l)}; }
    WeightSlice<T> b1(std::size_t l) const { return {&layer(l).b1, 1, hidden(l)}; }
    WeightSlice<T> w2(std::size_t l) const { return {&layer(l).w2, hidden(l), embed_width()}; }
    WeightSlice<T> b2(std::size_t l) const { return {&layer(l).b2, 1, embed_width()}; }
    WeightSlice<T> lnf_gamma() const { return {&params_->lnf_gamma, 1, embed_width()}; }
    WeightSlice<T> lnf_beta() const { return {&params_->lnf_beta, 1, embed_width()}; }
    WeightSlice<T> head() const {
        return {&params_->head, embed_width(), static_cast<std::size_t>(spec().num_classes)};
    }
    WeightSlice<T> head_bias() const {
        return {&params_->head_bias, 1, static_cast<std::size_t>(spec().num_classes)};
    }

    /// Visits the slices actually used by the forward pass. Deactivated
    /// blocks contribute nothing.
    template <typename F>
    void for_each_slice(F&& f) const {
        f("embed", embed());
        f("cls", cls());
        f("pos", pos());
        for (std::size_t l = 0; l < cfg_.ratio.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            if (cfg_.mha_on[l]) {
                f(p + "w_q", w_q(l));
                f(p + "w_k", w_k(l));
                f(p + "w_v", w_v(l));
                f(p + "w_o", w_o(l));
                f(p + "ln1_gamma", ln1_gamma(l));
                f(p + "ln1_beta", ln1_beta(l));
            }
            if (cfg_.mlp_on[l]) {
                f(p + "ln2_gamma", ln2_gamma(l));
                f(p + "ln2_beta", ln2_beta(l));
                f(p + "w1", w1(l));
                f(p + "b1", b1(l));
                f(p + "w2", w2(l));
                f(p + "b2", b2(l));
            }
        }
        f("lnf_gamma", lnf_gamma());
        f("lnf_beta", lnf_beta());
        f("head", head());
        f("head_bias", head_bias());
    }

   private:
    LayerParams<T>& layer(std::size_t l) const { return params_->layers[l]; }

    ElasticParams<T>* params_;
    SubmodelConfig cfg_;
};

/// Validates `cfg` against the supernet bounds and returns its view.
template <typename T>
SubmodelView<T> build_submodel(ElasticParams<T>& params, const SubmodelConfig& cfg) {
    cfg.validate(params.spec);
    return SubmodelView<T>(params, cfg);
}

/// A batch of token sequences without the class token:
/// `batch` x `tokens` rows of `features` values, plus optional labels.
template <typename T>
struct TokenBatch {
    std::size_t batch = 0, tokens = 0, features = 0;
    std::vector<T> data;
    std::vector<int> labels;
};

/// Straight-through gate values bound to a forward pass. `values` is the
/// 1 x G tape variable; `hard` are the thresholded bits the view's config
/// was decoded from.
template <typename T>
struct GateBinding {
    Var<T> values;
    std::vector<bool> hard;
    const GateLayout* layout = nullptr;
};

/// Intermediate activations captured for importance scoring.
template <typename T>
struct ForwardProbe {
    Var<T> final_tokens;             // (B*N) x E, output of the last block
    std::vector<Var<T>> mlp_hidden;  // per layer, post-activation (invalid if skipped)
    std::vector<Var<T>> head_outputs;  // per layer, concatenated head outputs before W_O
};

template <typename T>
struct ForwardOptions {
    bool track_grad = true;
    const GateBinding<T>* gates = nullptr;
    ForwardProbe<T>* probe = nullptr;
};

namespace detail {

/// [cls; emb_b] + pos for every sample b.
template <typename T>
Var<T> assemble_tokens(Var<T> emb, Var<T> cls, Var<T> pos, std::size_t batch) {
    auto& tape = emb.tape();
    const std::size_t n = pos.rows(), e = emb.cols(), p = n - 1;
    if (emb.rows() != batch * p || cls.cols() != e || pos.cols() != e)
        throw DimensionError("assemble_tokens: width mismatch between " + dims(emb) + ", " +
                             dims(cls) + " and " + dims(pos));
    const bool needs = emb.needs_grad() || cls.needs_grad() || pos.needs_grad();
    auto out = tape.make(batch * n, e, needs);
    const std::size_t lde = tape.ld(emb), ldp = tape.ld(pos);
    const T* ev = tape.value_ptr(emb);
    const T* cv = tape.value_ptr(cls);
    const T* pv = tape.value_ptr(pos);
    T* ov = tape.out_ptr(out);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < n; ++t) {
            const T* src = t == 0 ? cv : ev + (b * p + t - 1) * lde;
            for (std::size_t c = 0; c < e; ++c) ov[(b * n + t) * e + c] = src[c] + pv[t * ldp + c];
        }
    if (needs) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            T* ge = emb.needs_grad() ? tape.grad_ptr(emb) : nullptr;
            T* gc = cls.needs_grad() ? tape.grad_ptr(cls) : nullptr;
            T* gp = pos.needs_grad() ? tape.grad_ptr(pos) : nullptr;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t t = 0; t < n; ++t)
                    for (std::size_t c = 0; c < e; ++c) {
                        const T go = g[(b * n + t) * e + c];
                        if (gp) gp[t * ldp + c] += go;
                        if (t == 0) {
                            if (gc) gc[c] += go;
                        } else if (ge) {
                            ge[(b * p + t - 1) * lde + c] += go;
                        }
                    }
        });
    }
    return out;
}

// Maps `groups` column groups to the ascending active gates of a field;
// group j takes the j-th active gate, surplus groups are unscaled.
inline std::vector<int> group_map(const std::vector<std::size_t>& active,
                                  const std::vector<std::pair<std::size_t, std::size_t>>& groups,
                                  std::size_t width) {
    std::vector<int> map(width, -1);
    for (std::size_t j = 0; j < groups.size() && j < active.size(); ++j)
        for (std::size_t c = groups[j].first; c < groups[j].second; ++c)
            map[c] = static_cast<int>(active[j]);
    return map;
}

inline std::vector<std::pair<std::size_t, std::size_t>> even_groups(std::size_t n, std::size_t width) {
    std::vector<std::pair<std::size_t, std::size_t>> g;
    for (std::size_t j = 0; j < n; ++j) g.emplace_back(j * width, (j + 1) * width);
    return g;
}

}  // namespace detail

/// Pre-norm forward pass of a submodel; returns batch x num_classes logits.
template <typename T>
Var<T> forward(Tape<T>& tape, const SubmodelView<T>& view, const TokenBatch<T>& x,
               const ForwardOptions<T>& opts = {}) {
    const auto& spec = view.spec();
    const auto& cfg = view.config();
    const std::size_t n = static_cast<std::size_t>(spec.tokens);
    const std::size_t e = view.embed_width();
    const std::size_t d = static_cast<std::size_t>(spec.d_head);
    if (x.tokens != n - 1 || x.features != static_cast<std::size_t>(spec.input_dim) ||
        x.data.size() != x.batch * x.tokens * x.features)
        throw DimensionError("forward: batch of " + std::to_string(x.tokens) + " tokens x " +
                             std::to_string(x.features) + " features, model expects " +
                             std::to_string(n - 1) + " x " + std::to_string(spec.input_dim));
    const std::size_t batch = x.batch;

    auto w = [&](const WeightSlice<T>& s) {
        if (opts.track_grad) return tape.view(*s.tensor, s.rows, s.cols);
        return tape.view(std::as_const(*s.tensor), s.rows, s.cols);
    };
    const auto* gates = opts.gates;
    const GateLayout* layout = gates ? gates->layout : nullptr;
    auto gate_all = [&](Var<T> v, std::size_t gate) {
        return scale_column_groups(v, gates->values, std::vector<int>(v.cols(), static_cast<int>(gate)));
    };
    if (opts.probe) {
        opts.probe->mlp_hidden.assign(cfg.ratio.size(), Var<T>{});
        opts.probe->head_outputs.assign(cfg.ratio.size(), Var<T>{});
    }

    auto input = tape.constant(batch * x.tokens, x.features, x.data);
    auto h = detail::assemble_tokens(matmul(input, w(view.embed())), w(view.cls()), w(view.pos()), batch);
    if (gates) {
        auto active = layout->active(gates->hard, layout->emb(0), layout->emb_bits());
        h = scale_column_groups(h, gates->values, detail::group_map(active, detail::even_groups(e / d, d), e));
    }
    const T eps = static_cast<T>(kLayerNormEps);
    for (std::size_t l = 0; l < cfg.ratio.size(); ++l) {
        if (cfg.mha_on[l]) {
            auto z = layernorm(h, w(view.ln1_gamma(l)), w(view.ln1_beta(l)), eps);
            auto q = matmul(z, w(view.w_q(l)), true);
            auto k = matmul(z, w(view.w_k(l)), true);
            auto v = matmul(z, w(view.w_v(l)), true);
            const auto heads = static_cast<std::size_t>(cfg.heads[l]);
            auto a = attention(q, k, v, batch, n, heads, d);
            if (opts.probe) opts.probe->head_outputs[l] = a;
            if (gates) {
                auto active = layout->active(gates->hard, layout->head(l, 0), layout->head_bits());
                a = scale_column_groups(a, gates->values,
                                        detail::group_map(active, detail::even_groups(heads, d), heads * d));
            }
            auto o = matmul(a, w(view.w_o(l)), true);
            if (gates) o = gate_all(o, layout->mha_depth(l));
            h = add(h, o);
        }
        if (cfg.mlp_on[l]) {
            auto z = layernorm(h, w(view.ln2_gamma(l)), w(view.ln2_beta(l)), eps);
            auto u = gelu(add_row(matmul(z, w(view.w1(l)), true), w(view.b1(l))));
            if (opts.probe) opts.probe->mlp_hidden[l] = u;
            if (gates) {
                const auto units = static_cast<std::size_t>(std::llround(cfg.ratio[l] / spec.ratio_step));
                std::vector<std::pair<std::size_t, std::size_t>> groups;
                for (std::size_t j = 0; j < units; ++j)
                    groups.emplace_back(
                        static_cast<std::size_t>(hidden_width(static_cast<double>(j) * spec.ratio_step, cfg.embed)),
                        static_cast<std::size_t>(hidden_width(static_cast<double>(j + 1) * spec.ratio_step, cfg.embed)));
                auto active = layout->active(gates->hard, layout->ratio(l, 0), layout->ratio_bits());
                u = scale_column_groups(u, gates->values, detail::group_map(active, groups, u.cols()));
            }
            auto m = add_row(matmul(u, w(view.w2(l)), true), w(view.b2(l)));
            if (gates) m = gate_all(m, layout->mlp_depth(l));
            h = add(h, m);
        }
    }
    if (opts.probe) opts.probe->final_tokens = h;
    auto y = layernorm(h, w(view.lnf_gamma()), w(view.lnf_beta()), eps);
    std::vector<std::size_t> cls_rows(batch);
    for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * n;
    return add_row(matmul(gather_rows(y, cls_rows), w(view.head())), w(view.head_bias()));
}

/// Multiply-accumulates executed by the forward pass, per sample, counting
/// only the attention projections, QK^T, PV and the two MLP products.
template <typename T>
std::uint64_t macs_instrumented(const SubmodelView<T>& view, const TokenBatch<T>& x) {
    if (x.batch == 0) throw DimensionError("macs_instrumented: empty batch");
    Tape<T> tape;
    tape.set_mac_counting(true);
    ForwardOptions<T> opts;
    opts.track_grad = false;
    forward(tape, view, x, opts);
    return tape.macs() / x.batch;
}

}  // namespace elastic
