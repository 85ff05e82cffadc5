// SPDX-License-Identifier: Apache-2.0
//
// Activation-magnitude importance for embedding channels, MLP hidden units
// and attention heads, and the permutation that sorts every elastic axis
// by descending importance.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/errors.hpp"

namespace elastic {

struct ImportanceReport {
    std::vector<double> emb_scores;                // E_max
    std::vector<std::vector<double>> mlp_scores;   // per layer, hidden_max
    std::vector<std::vector<double>> head_scores;  // per layer, H_max
    std::size_t sample_count = 0;
};

/// Sums activation L1 norms of the maximal submodel over the first `n`
/// samples of `data`, evaluated in chunks of `chunk` samples.
template <typename T>
ImportanceReport score_importance(ElasticParams<T>& params, const TokenBatch<T>& data, std::size_t n,
                                  std::size_t chunk = 64) {
    if (n == 0 || data.batch == 0) throw FormatError("score_importance: empty sample stream");
    n = std::min(n, data.batch);
    const auto& spec = params.spec;
    const auto layers = static_cast<std::size_t>(spec.layers);
    const auto e = static_cast<std::size_t>(spec.embed_max);
    const auto d = static_cast<std::size_t>(spec.d_head);
    ImportanceReport r;
    r.emb_scores.assign(e, 0.0);
    r.mlp_scores.assign(layers, std::vector<double>(static_cast<std::size_t>(spec.hidden_max()), 0.0));
    r.head_scores.assign(layers, std::vector<double>(static_cast<std::size_t>(spec.heads_max), 0.0));

    auto view = build_submodel(params, SubmodelConfig::maximal(spec));
    const std::size_t per = data.tokens * data.features;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        TokenBatch<T> part{count, data.tokens, data.features,
                           std::vector<T>(data.data.begin() + static_cast<std::ptrdiff_t>(start * per),
                                          data.data.begin() + static_cast<std::ptrdiff_t>((start + count) * per)),
                           {}};
        Tape<T> tape;
        ForwardProbe<T> probe;
        ForwardOptions<T> opts;
        opts.track_grad = false;
        opts.probe = &probe;
        forward(tape, view, part, opts);

        // Per-sample partial sums keep the total independent of chunking.
        const std::size_t rows_per = static_cast<std::size_t>(spec.tokens);
        auto accumulate = [&](const Var<T>& v, std::vector<double>& out, std::size_t group) {
            std::vector<double> part(out.size());
            for (std::size_t s = 0; s < count; ++s) {
                std::fill(part.begin(), part.end(), 0.0);
                for (std::size_t row = s * rows_per; row < (s + 1) * rows_per; ++row)
                    for (std::size_t c = 0; c < v.cols(); ++c)
                        part[c / group] += std::abs(static_cast<double>(v.value(row, c)));
                for (std::size_t i = 0; i < out.size(); ++i) out[i] += part[i];
            }
        };
        accumulate(probe.final_tokens, r.emb_scores, 1);
        for (std::size_t l = 0; l < layers; ++l) {
            accumulate(probe.mlp_hidden[l], r.mlp_scores[l], 1);
            accumulate(probe.head_outputs[l], r.head_scores[l], d);
        }
    }
    r.sample_count = n;
    return r;
}

/// Permutations applied by `rearrange`: new unit i is old unit perm[i].
struct PermutationRecord {
    std::vector<std::size_t> emb;
    std::vector<std::vector<std::size_t>> mlp;
    std::vector<std::vector<std::size_t>> heads;

    PermutationRecord inverse() const {
        auto inv = [](const std::vector<std::size_t>& p) {
            std::vector<std::size_t> q(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) q[p[i]] = i;
            return q;
        };
        PermutationRecord out;
        out.emb = inv(emb);
        for (const auto& p : mlp) out.mlp.push_back(inv(p));
        for (const auto& p : heads) out.heads.push_back(inv(p));
        return out;
    }
};

/// Indices sorted by descending score, ties by ascending index.
inline std::vector<std::size_t> descending_order(const std::vector<double>& scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

namespace detail {

// Reorders column blocks of width `block`: new block i = old block perm[i].
template <typename T>
void permute_cols(Tensor<T>& t, const std::vector<std::size_t>& perm, std::size_t block = 1) {
    const std::size_t rows = t.rows(), cols = t.cols();
    std::vector<T> src(t.data().begin(), t.data().end());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < perm.size(); ++i)
            for (std::size_t c = 0; c < block; ++c)
                t.at(r, i * block + c) = src[r * cols + perm[i] * block + c];
}

template <typename T>
void permute_rows(Tensor<T>& t, const std::vector<std::size_t>& perm, std::size_t block = 1) {
    const std::size_t cols = t.cols();
    std::vector<T> src(t.data().begin(), t.data().end());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t r = 0; r < block; ++r)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((perm[i] * block + r) * cols), cols,
                        t.data().begin() + static_cast<std::ptrdiff_t>((i * block + r) * cols));
}

inline void check_perm(const std::vector<std::size_t>& p, std::size_t n, const std::string& what) {
    if (p.size() != n) throw ConfigError(what + ": permutation of length " + std::to_string(p.size()) +
                                         ", expected " + std::to_string(n));
    std::vector<bool> seen(n, false);
    for (auto i : p) {
        if (i >= n || seen[i]) throw ConfigError(what + ": not a permutation");
        seen[i] = true;
    }
}

}  // namespace detail

/// Applies a permutation record to every tensor axis it indexes.
template <typename T>
void apply_permutations(ElasticParams<T>& p, const PermutationRecord& rec) {
    const auto& spec = p.spec;
    const auto layers = static_cast<std::size_t>(spec.layers);
    const auto d = static_cast<std::size_t>(spec.d_head);
    detail::check_perm(rec.emb, static_cast<std::size_t>(spec.embed_max), "embedding");
    if (rec.mlp.size() != layers || rec.heads.size() != layers)
        throw ConfigError("permutation record has " + std::to_string(rec.mlp.size()) + " layers, expected " +
                          std::to_string(layers));
    for (std::size_t l = 0; l < layers; ++l) {
        detail::check_perm(rec.mlp[l], static_cast<std::size_t>(spec.hidden_max()),
                           "layer " + std::to_string(l) + " mlp");
        detail::check_perm(rec.heads[l], static_cast<std::size_t>(spec.heads_max),
                           "layer " + std::to_string(l) + " heads");
    }

    const auto& pe = rec.emb;
    detail::permute_cols(p.embed, pe);
    detail::permute_cols(p.cls, pe);
    detail::permute_cols(p.pos, pe);
    for (std::size_t l = 0; l < layers; ++l) {
        auto& L = p.layers[l];
        for (auto* w : {&L.w_q, &L.w_k, &L.w_v}) {
            detail::permute_rows(*w, pe);
            detail::permute_cols(*w, rec.heads[l], d);
        }
        detail::permute_rows(L.w_o, rec.heads[l], d);
        detail::permute_cols(L.w_o, pe);
        for (auto* v : {&L.ln1_gamma, &L.ln1_beta, &L.ln2_gamma, &L.ln2_beta, &L.b2}) detail::permute_cols(*v, pe);
        detail::permute_rows(L.w1, pe);
        detail::permute_cols(L.w1, rec.mlp[l]);
        detail::permute_cols(L.b1, rec.mlp[l]);
        detail::permute_rows(L.w2, rec.mlp[l]);
        detail::permute_cols(L.w2, pe);
    }
    detail::permute_cols(p.lnf_gamma, pe);
    detail::permute_cols(p.lnf_beta, pe);
    detail::permute_rows(p.head, pe);
}

/// Sorts every elastic axis by descending importance. Returns the applied
/// permutations.
template <typename T>
PermutationRecord rearrange(ElasticParams<T>& p, const ImportanceReport& report) {
    const auto& spec = p.spec;
    const auto layers = static_cast<std::size_t>(spec.layers);
    if (report.emb_scores.size() != static_cast<std::size_t>(spec.embed_max) || report.mlp_scores.size() != layers ||
        report.head_scores.size() != layers)
        throw ConfigError("importance report shape does not match the supernet");
    PermutationRecord rec;
    rec.emb = descending_order(report.emb_scores);
    for (std::size_t l = 0; l < layers; ++l) {
        rec.mlp.push_back(descending_order(report.mlp_scores[l]));
        rec.heads.push_back(descending_order(report.head_scores[l]));
    }
    apply_permutations(p, rec);
    return rec;
}

/// Plain-text audit listing: one line per permutation, old indices in new order.
inline void write_permutation_audit(std::ostream& os, const PermutationRecord& rec) {
    auto line = [&os](const std::string& key, const std::vector<std::size_t>& p) {
        os << key;
        for (auto i : p) os << ' ' << i;
        os << '\n';
    };
    line("embedding", rec.emb);
    for (std::size_t l = 0; l < rec.mlp.size(); ++l) line("layer" + std::to_string(l) + ".mlp", rec.mlp[l]);
    for (std::size_t l = 0; l < rec.heads.size(); ++l) line("layer" + std::to_string(l) + ".heads", rec.heads[l]);
}

}  // namespace elastic
