// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "elastic/autodiff.hpp"

namespace elastic {

/// Per-row normalization followed by the affine map gamma * xhat + beta.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), e = x.cols(), ldx = tape.ld(x);
    if (e == 0) throw DimensionError("layernorm: empty rows");
    if (gamma.rows() != 1 || gamma.cols() != e || beta.rows() != 1 || beta.cols() != e)
        throw DimensionError("layernorm: affine params " + detail::dims(gamma) + "/" +
                             detail::dims(beta) + " for input " + detail::dims(x));
    const bool needs = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
    auto out = tape.make(rows, e, needs);
    std::vector<T> xhat(rows * e), rstd(rows);
    const T* xv = tape.value_ptr(x);
    const T* gv = tape.value_ptr(gamma);
    const T* bv = tape.value_ptr(beta);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv + r * ldx;
        T mean{0};
        for (std::size_t c = 0; c < e; ++c) mean += xr[c];
        mean /= static_cast<T>(e);
        T var{0};
        for (std::size_t c = 0; c < e; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<T>(e);
        rstd[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t c = 0; c < e; ++c) {
            const T h = (xr[c] - mean) * rstd[r];
            xhat[r * e + c] = h;
            ov[r * e + c] = h * gv[c] + bv[c];
        }
    }
    if (needs) {
        tape.record([=, &tape, xhat = std::move(xhat), rstd = std::move(rstd)] {
            const T* g = tape.grad_ptr(out);
            const T* gv = tape.value_ptr(gamma);
            if (gamma.needs_grad() || beta.needs_grad()) {
                T* gg = gamma.needs_grad() ? tape.grad_ptr(gamma) : nullptr;
                T* gb = beta.needs_grad() ? tape.grad_ptr(beta) : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < e; ++c) {
                        if (gg) gg[c] += g[r * e + c] * xhat[r * e + c];
                        if (gb) gb[c] += g[r * e + c];
                    }
            }
            if (x.needs_grad()) {
                T* gx = tape.grad_ptr(x);
                const T n = static_cast<T>(e);
                for (std::size_t r = 0; r < rows; ++r) {
                    T sum_d{0}, sum_dh{0};
                    for (std::size_t c = 0; c < e; ++c) {
                        const T d = g[r * e + c] * gv[c];
                        sum_d += d;
                        sum_dh += d * xhat[r * e + c];
                    }
                    for (std::size_t c = 0; c < e; ++c) {
                        const T d = g[r * e + c] * gv[c];
                        gx[r * ldx + c] +=
                            rstd[r] / n * (n * d - sum_d - xhat[r * e + c] * sum_dh);
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

template <typename T>
void softmax_inplace(T* row, std::size_t n) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, row[i]);
    T total{0};
    for (std::size_t i = 0; i < n; ++i) {
        row[i] = std::exp(row[i] - mx);
        total += row[i];
    }
    for (std::size_t i = 0; i < n; ++i) row[i] /= total;
}

}  // namespace detail

/// Row-wise softmax with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols(), ldx = tape.ld(x);
    auto out = tape.make(rows, cols, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(xv + r * ldx, cols, ov + r * cols);
        detail::softmax_inplace(ov + r * cols, cols);
    }
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            const T* y = tape.value_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < rows; ++r) {
                T dot{0};
                for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c)
                    gx[r * ldx + c] += y[r * cols + c] * (g[r * cols + c] - dot);
            }
        });
    }
    return out;
}

/// Mean softmax cross-entropy of `logits` (batch x classes) against labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    auto& tape = logits.tape();
    const std::size_t rows = logits.rows(), cols = logits.cols(), ldx = tape.ld(logits);
    if (labels.size() != rows)
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             detail::dims(logits));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= cols)
            throw DimensionError("cross_entropy: label " + std::to_string(y) + " out of range");
    auto out = tape.make(1, 1, logits.needs_grad());
    std::vector<T> probs(rows * cols);
    const T* xv = tape.value_ptr(logits);
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        T* p = probs.data() + r * cols;
        std::copy_n(xv + r * ldx, cols, p);
        T mx = *std::max_element(p, p + cols);
        T z{0};
        for (std::size_t c = 0; c < cols; ++c) z += std::exp(p[c] - mx);
        const T logz = mx + std::log(z);
        total += logz - p[labels[r]];
        for (std::size_t c = 0; c < cols; ++c) p[c] = std::exp(p[c] - logz);
    }
    tape.out_ptr(out)[0] = total / static_cast<T>(rows);
    if (out.needs_grad()) {
        tape.record([=, &tape, probs = std::move(probs)] {
            const T g = tape.grad_ptr(out)[0] / static_cast<T>(rows);
            T* gx = tape.grad_ptr(logits);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const T onehot = static_cast<std::size_t>(labels[r]) == c ? T{1} : T{0};
                    gx[r * ldx + c] += g * (probs[r * cols + c] - onehot);
                }
        });
    }
    return out;
}

/// Scaled dot-product attention for `batch` independent sequences of
/// `tokens` rows and `heads` heads of width `d_head`.
///
/// q, k, v are (batch*tokens) x (heads*d_head); the result has the same
/// shape and holds the per-head outputs concatenated along columns. The
/// QK^T and PV products contribute 2*tokens^2*d_head MACs per head.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t batch, std::size_t tokens,
                 std::size_t heads, std::size_t d_head) {
    auto& tape = q.tape();
    const std::size_t rows = batch * tokens, width = heads * d_head;
    for (auto x : {q, k, v})
        if (x.rows() != rows || x.cols() != width)
            throw DimensionError("attention: expected " + std::to_string(rows) + "x" +
                                 std::to_string(width) + ", got " + detail::dims(x));
    const bool needs = q.needs_grad() || k.needs_grad() || v.needs_grad();
    auto out = tape.make(rows, width, needs);
    const T sc = T{1} / std::sqrt(static_cast<T>(d_head));
    const std::size_t ldq = tape.ld(q), ldk = tape.ld(k), ldv = tape.ld(v);
    std::vector<T> probs(batch * heads * tokens * tokens);
    {
        const T* qv = tape.value_ptr(q);
        const T* kv = tape.value_ptr(k);
        const T* vv = tape.value_ptr(v);
        T* ov = tape.out_ptr(out);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h) {
                T* p = probs.data() + (b * heads + h) * tokens * tokens;
                const std::size_t r0 = b * tokens, c0 = h * d_head;
                detail::gemm_nt(tokens, d_head, tokens, qv + r0 * ldq + c0, ldq,
                                kv + r0 * ldk + c0, ldk, p, tokens);
                for (std::size_t i = 0; i < tokens * tokens; ++i) p[i] *= sc;
                for (std::size_t i = 0; i < tokens; ++i) detail::softmax_inplace(p + i * tokens, tokens);
                detail::gemm_nn(tokens, tokens, d_head, p, tokens, vv + r0 * ldv + c0, ldv,
                                ov + r0 * width + c0, width);
            }
    }
    tape.add_macs(static_cast<std::uint64_t>(2) * batch * heads * tokens * tokens * d_head);
    if (needs) {
        tape.record([=, &tape, probs = std::move(probs)] {
            const T* g = tape.grad_ptr(out);
            const T* qv = tape.value_ptr(q);
            const T* kv = tape.value_ptr(k);
            const T* vv = tape.value_ptr(v);
            T* gq = q.needs_grad() ? tape.grad_ptr(q) : nullptr;
            T* gk = k.needs_grad() ? tape.grad_ptr(k) : nullptr;
            T* gv = v.needs_grad() ? tape.grad_ptr(v) : nullptr;
            std::vector<T> dp(tokens * tokens);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + (b * heads + h) * tokens * tokens;
                    const std::size_t r0 = b * tokens, c0 = h * d_head;
                    const T* go = g + r0 * width + c0;
                    if (gv)
                        detail::gemm_tn(tokens, tokens, d_head, p, tokens, go, width,
                                        gv + r0 * ldv + c0, ldv);
                    if (!gq && !gk) continue;
                    std::fill(dp.begin(), dp.end(), T{0});
                    detail::gemm_nt(tokens, d_head, tokens, go, width, vv + r0 * ldv + c0, ldv,
                                    dp.data(), tokens);
                    // dp <- d(scores) = p * (dp - rowsum(dp * p)) * scale
                    for (std::size_t i = 0; i < tokens; ++i) {
                        T dot{0};
                        for (std::size_t j = 0; j < tokens; ++j)
                            dot += dp[i * tokens + j] * p[i * tokens + j];
                        for (std::size_t j = 0; j < tokens; ++j)
                            dp[i * tokens + j] = p[i * tokens + j] * (dp[i * tokens + j] - dot) * sc;
                    }
                    if (gq)
                        detail::gemm_nn(tokens, tokens, d_head, dp.data(), tokens,
                                        kv + r0 * ldk + c0, ldk, gq + r0 * ldq + c0, ldq);
                    if (gk)
                        detail::gemm_tn(tokens, tokens, d_head, dp.data(), tokens,
                                        qv + r0 * ldq + c0, ldq, gk + r0 * ldk + c0, ldk);
                }
        });
    }
    return out;
}

/// Multiplies column c of `x` by gates[0, group[c]]; columns mapped to -1
/// pass through unscaled.
template <typename T>
Var<T> scale_column_groups(Var<T> x, Var<T> gates, const std::vector<int>& group) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols(), ldx = tape.ld(x);
    if (group.size() != cols)
        throw DimensionError("scale_column_groups: " + std::to_string(group.size()) +
                             " group ids for " + detail::dims(x));
    for (int gi : group)
        if (gi >= 0 && (gates.rows() != 1 || static_cast<std::size_t>(gi) >= gates.cols()))
            throw DimensionError("scale_column_groups: gate index " + std::to_string(gi) +
                                 " out of " + detail::dims(gates));
    auto out = tape.make(rows, cols, x.needs_grad() || gates.needs_grad());
    const T* xv = tape.value_ptr(x);
    const T* gv = tape.value_ptr(gates);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            ov[r * cols + c] = group[c] < 0 ? xv[r * ldx + c] : xv[r * ldx + c] * gv[group[c]];
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            const T* xv = tape.value_ptr(x);
            const T* gv = tape.value_ptr(gates);
            T* gx = x.needs_grad() ? tape.grad_ptr(x) : nullptr;
            T* gg = gates.needs_grad() ? tape.grad_ptr(gates) : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const T go = g[r * cols + c];
                    if (group[c] < 0) {
                        if (gx) gx[r * ldx + c] += go;
                        continue;
                    }
                    if (gx) gx[r * ldx + c] += go * gv[group[c]];
                    if (gg) gg[group[c]] += go * xv[r * ldx + c];
                }
        });
    }
    return out;
}

/// Straight-through estimator: the value is `hard` exactly, the gradient is
/// routed unchanged to `soft`.
template <typename T>
Var<T> straight_through(Var<T> soft, const std::vector<T>& hard) {
    auto& tape = soft.tape();
    const std::size_t rows = soft.rows(), cols = soft.cols(), lds = tape.ld(soft);
    if (hard.size() != rows * cols)
        throw DimensionError("straight_through: hard values do not match " + detail::dims(soft));
    auto out = tape.make(rows, cols, soft.needs_grad());
    std::copy(hard.begin(), hard.end(), tape.out_ptr(out));
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            T* gs = tape.grad_ptr(soft);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gs[r * lds + c] += g[r * cols + c];
        });
    }
    return out;
}

}  // namespace elastic
