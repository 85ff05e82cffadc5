// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over row-major matrices.
//
// A Tape owns every intermediate value produced while building an
// expression. Leaves either own their data (constants, free variables) or
// are strided views into a caller-owned Tensor; gradients of view leaves
// are accumulated straight into the parent tensor's grad buffer at the
// viewed offsets, so sliced submodels train the shared parameters.
#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "elastic/tensor.hpp"

namespace elastic {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
   public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    std::size_t rows() const;
    std::size_t cols() const;
    std::size_t size() const { return rows() * cols(); }
    T value(std::size_t r, std::size_t c) const;
    T item() const { return value(0, 0); }
    std::vector<T> to_vector() const;
    bool needs_grad() const;
    /// Gradient of an owned (non-view) node after backward().
    std::vector<T> grad_vector() const;

   private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

template <typename T>
class Tape {
   public:
    struct Node {
        std::size_t rows = 0, cols = 0, ld = 0;
        std::vector<T> value;
        std::vector<T> grad;
        const T* ext_value = nullptr;
        T* ext_grad = nullptr;
        bool needs_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Owned constant (never receives gradient).
    Var<T> constant(std::size_t rows, std::size_t cols, std::vector<T> values) {
        if (values.size() != rows * cols)
            throw DimensionError("constant: " + std::to_string(values.size()) + " values for " +
                                 std::to_string(rows) + "x" + std::to_string(cols));
        auto v = make(rows, cols, false);
        nodes_[v.id()].value = std::move(values);
        return v;
    }
    Var<T> constant(const Tensor<T>& t) {
        return constant(t.rows(), t.cols(), std::vector<T>(t.data().begin(), t.data().end()));
    }
    Var<T> scalar(T x) { return constant(1, 1, {x}); }

    /// Owned leaf whose gradient can be read back with Var::grad_vector().
    Var<T> variable(std::size_t rows, std::size_t cols, std::vector<T> values) {
        auto v = constant(rows, cols, std::move(values));
        auto& n = nodes_[v.id()];
        n.needs_grad = true;
        n.grad.assign(rows * cols, T{0});
        return v;
    }

    /// Top-left `rows x cols` view of a tensor's matrix layout. Gradients flow
    /// into `t.grad()` when the tensor requires grad.
    Var<T> view(Tensor<T>& t, std::size_t rows, std::size_t cols) {
        check_view(t, rows, cols);
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.ld = t.cols();
        n.ext_value = t.data().data();
        if (t.requires_grad()) {
            n.ext_grad = t.grad().data();
            n.needs_grad = true;
        }
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }
    Var<T> view(Tensor<T>& t) { return view(t, t.rows(), t.cols()); }

    /// Read-only view; never accumulates gradient.
    Var<T> view(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
        check_view(t, rows, cols);
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.ld = t.cols();
        n.ext_value = t.data().data();
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    /// Fresh owned output node; gradient storage is allocated iff needs_grad.
    Var<T> make(std::size_t rows, std::size_t cols, bool needs_grad) {
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.ld = cols;
        n.value.assign(rows * cols, T{0});
        n.needs_grad = needs_grad;
        if (needs_grad) n.grad.assign(rows * cols, T{0});
        nodes_.push_back(std::move(n));
        return Var<T>(this, nodes_.size() - 1);
    }

    /// Registers a backward rule; rules run in reverse registration order.
    void record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

    void backward(Var<T> loss) {
        auto& n = node(loss);
        if (n.rows != 1 || n.cols != 1)
            throw DimensionError("backward: loss must be 1x1, got " + std::to_string(n.rows) + "x" +
                                 std::to_string(n.cols));
        if (!n.needs_grad) return;
        *grad_ptr(loss) += T{1};
        for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    }

    Node& node(Var<T> v) { return nodes_[v.id()]; }
    const Node& node(Var<T> v) const { return nodes_[v.id()]; }

    const T* value_ptr(Var<T> v) const {
        const auto& n = nodes_[v.id()];
        return n.ext_value ? n.ext_value : n.value.data();
    }
    /// Output buffer of an owned node.
    T* out_ptr(Var<T> v) { return nodes_[v.id()].value.data(); }
    T* grad_ptr(Var<T> v) {
        auto& n = nodes_[v.id()];
        return n.ext_value ? n.ext_grad : n.grad.data();
    }
    std::size_t ld(Var<T> v) const { return nodes_[v.id()].ld; }
    bool needs_grad(Var<T> v) const { return nodes_[v.id()].needs_grad; }

    // Multiply-accumulate instrumentation, toggled by the caller.
    void set_mac_counting(bool on) { counting_ = on; }
    bool mac_counting() const { return counting_; }
    void add_macs(std::uint64_t n) {
        if (counting_) macs_ += n;
    }
    std::uint64_t macs() const { return macs_; }

    std::size_t node_count() const { return nodes_.size(); }

   private:
    static void check_view(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
        if (rows > t.rows() || cols > t.cols())
            throw DimensionError("view " + std::to_string(rows) + "x" + std::to_string(cols) +
                                 " exceeds tensor " + shape_str(t.shape()));
    }

    std::deque<Node> nodes_;
    std::vector<std::function<void()>> rules_;
    bool counting_ = false;
    std::uint64_t macs_ = 0;
};

template <typename T>
std::size_t Var<T>::rows() const {
    return tape_->node(*this).rows;
}
template <typename T>
std::size_t Var<T>::cols() const {
    return tape_->node(*this).cols;
}
template <typename T>
T Var<T>::value(std::size_t r, std::size_t c) const {
    return tape_->value_ptr(*this)[r * tape_->ld(*this) + c];
}
template <typename T>
std::vector<T> Var<T>::to_vector() const {
    std::vector<T> out;
    out.reserve(rows() * cols());
    for (std::size_t r = 0; r < rows(); ++r)
        for (std::size_t c = 0; c < cols(); ++c) out.push_back(value(r, c));
    return out;
}
template <typename T>
bool Var<T>::needs_grad() const {
    return tape_->needs_grad(*this);
}
template <typename T>
std::vector<T> Var<T>::grad_vector() const {
    const auto& n = tape_->node(*this);
    if (!n.needs_grad) return std::vector<T>(rows() * cols(), T{0});
    std::vector<T> out;
    const T* g = tape_->grad_ptr(*this);
    for (std::size_t r = 0; r < n.rows; ++r)
        for (std::size_t c = 0; c < n.cols; ++c) out.push_back(g[r * n.ld + c]);
    return out;
}

namespace detail {

template <typename T>
std::string dims(Var<T> v) {
    return std::to_string(v.rows()) + "x" + std::to_string(v.cols());
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
    assert(&a.tape() == &b.tape());
    (void)a;
    (void)b;
}

// C[m x n] += A[m x k] * B[k x n]. The reduction is taken four terms at a
// time so each pass over a row of C does four multiply-adds; the grouping
// depends only on k, never on m, so rows stay independent of batch size.
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc) {
    const std::size_t k4 = k - k % 4;
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c + i * ldc;
        const T* ai = a + i * lda;
        for (std::size_t p = 0; p < k4; p += 4) {
            const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const T *b0 = b + p * ldb, *b1 = b0 + ldb, *b2 = b1 + ldb, *b3 = b2 + ldb;
            for (std::size_t j = 0; j < n; ++j) ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (std::size_t p = k4; p < k; ++p) {
            const T aip = ai[p];
            const T* bp = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m x n] += A[m x k] * B[n x k]^T, via a transposed copy of B.
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc) {
    std::vector<T> bt(k * n);
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
    gemm_nn(m, k, n, a, lda, bt.data(), n, c, ldc);
}

// C[m x n] += A[k x m]^T * B[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, std::size_t lda, const T* b,
             std::size_t ldb, T* c, std::size_t ldc) {
    const std::size_t k4 = k - k % 4;
    for (std::size_t p = 0; p < k4; p += 4) {
        const T *a0 = a + p * lda, *a1 = a0 + lda, *a2 = a1 + lda, *a3 = a2 + lda;
        const T *b0 = b + p * ldb, *b1 = b0 + ldb, *b2 = b1 + ldb, *b3 = b2 + ldb;
        for (std::size_t i = 0; i < m; ++i) {
            const T x0 = a0[i], x1 = a1[i], x2 = a2[i], x3 = a3[i];
            T* ci = c + i * ldc;
            for (std::size_t j = 0; j < n; ++j) ci[j] += x0 * b0[j] + x1 * b1[j] + x2 * b2[j] + x3 * b3[j];
        }
    }
    for (std::size_t p = k4; p < k; ++p) {
        const T* ap = a + p * lda;
        const T* bp = b + p * ldb;
        for (std::size_t i = 0; i < m; ++i) {
            const T api = ap[i];
            T* ci = c + i * ldc;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// Matrix product. When `counted` is set and the tape is counting, the
/// product contributes m*k*n multiply-accumulates.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool counted = false) {
    detail::same_tape(a, b);
    auto& tape = a.tape();
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw DimensionError("matmul: inner dimensions disagree: " + detail::dims(a) + " * " +
                             detail::dims(b));
    auto out = tape.make(m, n, a.needs_grad() || b.needs_grad());
    detail::gemm_nn(m, k, n, tape.value_ptr(a), tape.ld(a), tape.value_ptr(b), tape.ld(b),
                    tape.out_ptr(out), n);
    if (counted) tape.add_macs(static_cast<std::uint64_t>(m) * k * n);
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            if (a.needs_grad())
                detail::gemm_nt(m, n, k, g, n, tape.value_ptr(b), tape.ld(b), tape.grad_ptr(a),
                                tape.ld(a));
            if (b.needs_grad())
                detail::gemm_tn(k, m, n, tape.value_ptr(a), tape.ld(a), g, n, tape.grad_ptr(b),
                                tape.ld(b));
        });
    }
    return out;
}

namespace detail {

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, Binary op, const char* name) {
    same_tape(a, b);
    auto& tape = a.tape();
    const bool a_scalar = a.rows() == 1 && a.cols() == 1;
    const bool b_scalar = b.rows() == 1 && b.cols() == 1;
    const bool same = a.rows() == b.rows() && a.cols() == b.cols();
    if (!same && !a_scalar && !b_scalar)
        throw DimensionError(std::string(name) + ": incompatible shapes " + dims(a) + " and " +
                             dims(b));
    const std::size_t rows = same || b_scalar ? a.rows() : b.rows();
    const std::size_t cols = same || b_scalar ? a.cols() : b.cols();
    auto out = tape.make(rows, cols, a.needs_grad() || b.needs_grad());
    const std::size_t lda = tape.ld(a), ldb = tape.ld(b);
    auto ai = [=](std::size_t r, std::size_t c) { return (same || !a_scalar) ? r * lda + c : 0; };
    auto bi = [=](std::size_t r, std::size_t c) { return (same || !b_scalar) ? r * ldb + c : 0; };
    {
        const T* av = tape.value_ptr(a);
        const T* bv = tape.value_ptr(b);
        T* ov = tape.out_ptr(out);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const T x = av[ai(r, c)], y = bv[bi(r, c)];
                ov[r * cols + c] = op == Binary::kAdd ? x + y : op == Binary::kSub ? x - y : x * y;
            }
    }
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            const T* av = tape.value_ptr(a);
            const T* bv = tape.value_ptr(b);
            T* ga = a.needs_grad() ? tape.grad_ptr(a) : nullptr;
            T* gb = b.needs_grad() ? tape.grad_ptr(b) : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const T go = g[r * cols + c];
                    switch (op) {
                        case Binary::kAdd:
                            if (ga) ga[ai(r, c)] += go;
                            if (gb) gb[bi(r, c)] += go;
                            break;
                        case Binary::kSub:
                            if (ga) ga[ai(r, c)] += go;
                            if (gb) gb[bi(r, c)] -= go;
                            break;
                        case Binary::kMul:
                            if (ga) ga[ai(r, c)] += go * bv[bi(r, c)];
                            if (gb) gb[bi(r, c)] += go * av[ai(r, c)];
                            break;
                    }
                }
        });
    }
    return out;
}

template <typename T, typename F, typename D>
Var<T> unary(Var<T> x, F&& f, D&& df) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols(), ldx = tape.ld(x);
    auto out = tape.make(rows, cols, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = f(xv[r * ldx + c]);
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            const T* xv = tape.value_ptr(x);
            const T* yv = tape.value_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    gx[r * ldx + c] += g[r * cols + c] * df(xv[r * ldx + c], yv[r * cols + c]);
        });
    }
    return out;
}

}  // namespace detail

/// Elementwise sum; same shapes or one operand 1x1.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return detail::binary(a, b, detail::Binary::kAdd, "add");
}
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return detail::binary(a, b, detail::Binary::kSub, "sub");
}
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return detail::binary(a, b, detail::Binary::kMul, "mul");
}

template <typename T>
Var<T> scale(Var<T> x, T s) {
    return detail::unary(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::unary(
        x,
        [](T v) {
            if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
            const T e = std::exp(v);
            return e / (T{1} + e);
        },
        [](T, T y) { return y * (T{1} - y); });
}

/// Exact (erf-based) GELU.
template <typename T>
T gelu_value(T x) {
    return T{0.5} * x * (T{1} + std::erf(x / std::sqrt(T{2})));
}
template <typename T>
T gelu_derivative(T x) {
    const T cdf = T{0.5} * (T{1} + std::erf(x / std::sqrt(T{2})));
    const T pdf = std::exp(T{-0.5} * x * x) / std::sqrt(T{2} * T{3.14159265358979323846});
    return cdf + x * pdf;
}

template <typename T>
Var<T> gelu(Var<T> x) {
    return detail::unary(x, [](T v) { return gelu_value(v); },
                         [](T v, T) { return gelu_derivative(v); });
}

/// x[r, c] + bias[0, c] for every row.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> bias) {
    detail::same_tape(x, bias);
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols();
    if (bias.rows() != 1 || bias.cols() != cols)
        throw DimensionError("add_row: bias " + detail::dims(bias) + " for input " +
                             detail::dims(x));
    auto out = tape.make(rows, cols, x.needs_grad() || bias.needs_grad());
    const std::size_t ldx = tape.ld(x);
    const T* xv = tape.value_ptr(x);
    const T* bv = tape.value_ptr(bias);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * ldx + c] + bv[c];
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            if (x.needs_grad()) {
                T* gx = tape.grad_ptr(x);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gx[r * ldx + c] += g[r * cols + c];
            }
            if (bias.needs_grad()) {
                T* gb = tape.grad_ptr(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
            }
        });
    }
    return out;
}

template <typename T>
Var<T> transpose(Var<T> x) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols(), ldx = tape.ld(x);
    auto out = tape.make(cols, rows, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[c * rows + r] = xv[r * ldx + c];
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[r * ldx + c] += g[c * rows + r];
        });
    }
    return out;
}

/// Row-major reinterpretation with the same element count.
template <typename T>
Var<T> reshape(Var<T> x, std::size_t rows, std::size_t cols) {
    auto& tape = x.tape();
    const std::size_t xr = x.rows(), xc = x.cols(), ldx = tape.ld(x);
    if (rows * cols != xr * xc)
        throw DimensionError("reshape: " + detail::dims(x) + " to " + std::to_string(rows) + "x" +
                             std::to_string(cols));
    auto out = tape.make(rows, cols, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < xr; ++r)
        for (std::size_t c = 0; c < xc; ++c) ov[r * xc + c] = xv[r * ldx + c];
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < xr; ++r)
                for (std::size_t c = 0; c < xc; ++c) gx[r * ldx + c] += g[r * xc + c];
        });
    }
    return out;
}

/// Rows selected by index (may repeat); gradients scatter-add back.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::size_t> index) {
    auto& tape = x.tape();
    const std::size_t cols = x.cols(), ldx = tape.ld(x);
    for (auto i : index)
        if (i >= x.rows())
            throw DimensionError("gather_rows: row " + std::to_string(i) + " out of " +
                                 detail::dims(x));
    auto out = tape.make(index.size(), cols, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < index.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[index[r] * ldx + c];
    if (out.needs_grad()) {
        tape.record([=, &tape, index = std::move(index)] {
            const T* g = tape.grad_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < index.size(); ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[index[r] * ldx + c] += g[r * cols + c];
        });
    }
    return out;
}

template <typename T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    if (begin > end || end > x.rows())
        throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") of " + detail::dims(x));
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return gather_rows(x, std::move(idx));
}

template <typename T>
Var<T> slice_cols(Var<T> x, std::size_t begin, std::size_t end) {
    auto& tape = x.tape();
    if (begin > end || end > x.cols())
        throw DimensionError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") of " + detail::dims(x));
    const std::size_t rows = x.rows(), cols = end - begin, ldx = tape.ld(x);
    auto out = tape.make(rows, cols, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T* ov = tape.out_ptr(out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) ov[r * cols + c] = xv[r * ldx + begin + c];
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[r * ldx + begin + c] += g[r * cols + c];
        });
    }
    return out;
}

namespace detail {

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, bool along_rows) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    auto& tape = parts.front().tape();
    std::size_t rows = along_rows ? 0 : parts.front().rows();
    std::size_t cols = along_rows ? parts.front().cols() : 0;
    bool needs = false;
    for (const auto& p : parts) {
        if (along_rows ? p.cols() != cols : p.rows() != rows)
            throw DimensionError(std::string(along_rows ? "concat_rows" : "concat_cols") +
                                 ": mismatched part " + dims(p));
        (along_rows ? rows : cols) += along_rows ? p.rows() : p.cols();
        needs = needs || p.needs_grad();
    }
    auto out = tape.make(rows, cols, needs);
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    T* ov = tape.out_ptr(out);
    for (const auto& p : parts) {
        offsets.push_back(off);
        const T* pv = tape.value_ptr(p);
        const std::size_t ldp = tape.ld(p);
        for (std::size_t r = 0; r < p.rows(); ++r)
            for (std::size_t c = 0; c < p.cols(); ++c) {
                const std::size_t orow = along_rows ? off + r : r;
                const std::size_t ocol = along_rows ? c : off + c;
                ov[orow * cols + ocol] = pv[r * ldp + c];
            }
        off += along_rows ? p.rows() : p.cols();
    }
    if (needs) {
        tape.record([=, &tape] {
            const T* g = tape.grad_ptr(out);
            for (std::size_t i = 0; i < parts.size(); ++i) {
                const auto& p = parts[i];
                if (!p.needs_grad()) continue;
                T* gp = tape.grad_ptr(p);
                const std::size_t ldp = tape.ld(p);
                for (std::size_t r = 0; r < p.rows(); ++r)
                    for (std::size_t c = 0; c < p.cols(); ++c) {
                        const std::size_t orow = along_rows ? offsets[i] + r : r;
                        const std::size_t ocol = along_rows ? c : offsets[i] + c;
                        gp[r * ldp + c] += g[orow * cols + ocol];
                    }
            }
        });
    }
    return out;
}

}  // namespace detail

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    return detail::concat(parts, true);
}
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    return detail::concat(parts, false);
}

/// Sum of all entries as a 1x1 value.
template <typename T>
Var<T> sum(Var<T> x) {
    auto& tape = x.tape();
    const std::size_t rows = x.rows(), cols = x.cols(), ldx = tape.ld(x);
    auto out = tape.make(1, 1, x.needs_grad());
    const T* xv = tape.value_ptr(x);
    T acc{0};
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) acc += xv[r * ldx + c];
    tape.out_ptr(out)[0] = acc;
    if (out.needs_grad()) {
        tape.record([=, &tape] {
            const T g = tape.grad_ptr(out)[0];
            T* gx = tape.grad_ptr(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) gx[r * ldx + c] += g;
        });
    }
    return out;
}

/// Value copy cut off from the gradient path.
template <typename T>
Var<T> detach(Var<T> x) {
    return x.tape().constant(x.rows(), x.cols(), x.to_vector());
}

}  // namespace elastic
