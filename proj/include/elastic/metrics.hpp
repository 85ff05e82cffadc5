// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/dataset.hpp"

namespace elastic {

struct EvalMetrics {
    double accuracy = 0;
    double mean_ce = 0;
    std::uint64_t macs = 0;
    std::vector<int> predictions;
};

/// Index of the largest value; the first one wins ties.
inline int argmax(const double* v, std::size_t n) {
    return static_cast<int>(std::max_element(v, v + n) - v);
}

/// Top-1 accuracy and mean cross-entropy of `view` on a labelled split.
template <typename T>
EvalMetrics evaluate(const SubmodelView<T>& view, const TokenBatch<T>& split, std::size_t chunk = 256) {
    if (split.labels.size() != split.batch) throw FormatError("evaluate: split has no labels");
    EvalMetrics m;
    m.macs = macs(view.config(), view.spec());
    if (split.batch == 0) return m;
    std::size_t correct = 0;
    double ce = 0;
    const auto classes = static_cast<std::size_t>(view.spec().num_classes);
    for (std::size_t start = 0; start < split.batch; start += chunk) {
        std::vector<std::size_t> idx(std::min(chunk, split.batch - start));
        std::iota(idx.begin(), idx.end(), start);
        auto part = take(split, idx);
        Tape<T> tape;
        ForwardOptions<T> opts;
        opts.track_grad = false;
        auto logits = forward(tape, view, part, opts).to_vector();
        std::vector<double> row(classes);
        for (std::size_t b = 0; b < part.batch; ++b) {
            for (std::size_t c = 0; c < classes; ++c) row[c] = static_cast<double>(logits[b * classes + c]);
            const int pred = argmax(row.data(), classes);
            m.predictions.push_back(pred);
            correct += pred == part.labels[b] ? 1 : 0;
            const double mx = *std::max_element(row.begin(), row.end());
            double z = 0;
            for (double v : row) z += std::exp(v - mx);
            ce += std::log(z) + mx - row[static_cast<std::size_t>(part.labels[b])];
        }
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(split.batch);
    m.mean_ce = ce / static_cast<double>(split.batch);
    return m;
}

/// Validation accuracy of multinomial logistic regression on the mean
/// token, trained by full-batch gradient descent. Used to show that a
/// synthetic task is neither trivial nor hopeless.
template <typename T>
double mean_token_baseline(const Dataset<T>& d, int epochs = 300, double lr = 0.5) {
    const std::size_t f = d.train.features, c = static_cast<std::size_t>(d.num_classes);
    auto means = [&](const TokenBatch<T>& b) {
        std::vector<double> out(b.batch * f, 0.0);
        for (std::size_t i = 0; i < b.batch; ++i)
            for (std::size_t t = 0; t < b.tokens; ++t)
                for (std::size_t j = 0; j < f; ++j)
                    out[i * f + j] += static_cast<double>(b.data[(i * b.tokens + t) * f + j]) / static_cast<double>(b.tokens);
        return out;
    };
    const auto xtr = means(d.train), xva = means(d.val);
    std::vector<double> w(f * c, 0.0), bias(c, 0.0);
    auto scores = [&](const std::vector<double>& x, std::size_t i, std::vector<double>& p) {
        for (std::size_t k = 0; k < c; ++k) {
            p[k] = bias[k];
            for (std::size_t j = 0; j < f; ++j) p[k] += x[i * f + j] * w[j * c + k];
        }
    };
    std::vector<double> p(c), gw(f * c), gb(c);
    const double n = static_cast<double>(d.train.batch);
    for (int e = 0; e < epochs; ++e) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < d.train.batch; ++i) {
            scores(xtr, i, p);
            const double mx = *std::max_element(p.begin(), p.end());
            double z = 0;
            for (auto& v : p) z += (v = std::exp(v - mx));
            for (std::size_t k = 0; k < c; ++k) {
                const double g = p[k] / z - (static_cast<int>(k) == d.train.labels[i] ? 1.0 : 0.0);
                gb[k] += g / n;
                for (std::size_t j = 0; j < f; ++j) gw[j * c + k] += g * xtr[i * f + j] / n;
            }
        }
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * gw[k];
        for (std::size_t k = 0; k < c; ++k) bias[k] -= lr * gb[k];
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.val.batch; ++i) {
        scores(xva, i, p);
        correct += argmax(p.data(), c) == d.val.labels[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(d.val.batch);
}

}  // namespace elastic
