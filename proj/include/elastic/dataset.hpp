// SPDX-License-Identifier: Apache-2.0
//
// Token-sequence datasets: seeded Gaussian blobs and IDX image files cut
// into flattened patches. The class token is not stored; the model
// prepends it.
#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/errors.hpp"

namespace elastic {

struct BlobSpec {
    int classes = 4;
    int clusters = 1;  ///< centroids per class; above 1 the classes are not linearly separable
    int train_samples = 2048;
    int val_samples = 512;
    int tokens = 4;    ///< tokens per sample, class token excluded
    int features = 8;  ///< values per token
    double noise = 1.0;
    double separation = 1.0;  ///< scale of the class centroids
    std::uint64_t seed = 7;

    void validate() const {
        if (classes < 2) throw ConfigError("data.classes must be at least 2");
        if (clusters < 1) throw ConfigError("data.clusters must be at least 1");
        if (train_samples <= 0 || val_samples <= 0) throw ConfigError("data sample counts must be positive");
        if (tokens <= 0 || features <= 0) throw ConfigError("data.tokens and data.features must be positive");
        if (noise < 0 || separation < 0) throw ConfigError("data.noise and data.separation must be non-negative");
    }
};

template <typename T>
struct Dataset {
    TokenBatch<T> train, val;
    int num_classes = 0;
};

/// Rows `idx` of a batch, in the given order.
template <typename T>
TokenBatch<T> take(const TokenBatch<T>& src, const std::vector<std::size_t>& idx) {
    TokenBatch<T> out{idx.size(), src.tokens, src.features, {}, {}};
    const std::size_t per = src.tokens * src.features;
    out.data.reserve(idx.size() * per);
    for (auto i : idx) {
        out.data.insert(out.data.end(), src.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                        src.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        if (!src.labels.empty()) out.labels.push_back(src.labels[i]);
    }
    return out;
}

/// The first `n` samples (or all, if fewer).
template <typename T>
TokenBatch<T> first_n(const TokenBatch<T>& src, std::size_t n) {
    std::vector<std::size_t> idx(std::min(n, src.batch));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return take(src, idx);
}

/// Epoch-shuffled mini-batches without replacement.
class BatchSampler {
   public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        if (n == 0) throw FormatError("cannot sample batches from an empty split");
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
    }

    std::vector<std::size_t> next(std::size_t size) {
        std::vector<std::size_t> out;
        while (out.size() < size) {
            if (pos_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

   private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    std::mt19937_64 rng_;
};

/// Seeded Gaussian clusters: each class owns `clusters` centroid sequences
/// of `tokens` x `features` values; a sample picks one of its class's
/// centroids uniformly and adds isotropic noise. Labels cycle through the
/// classes, then each split is shuffled.
template <typename T>
Dataset<T> generate_blobs(const BlobSpec& s) {
    s.validate();
    std::mt19937_64 rng(s.seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    const std::size_t per = static_cast<std::size_t>(s.tokens * s.features);
    std::vector<std::vector<double>> centroid(static_cast<std::size_t>(s.classes * s.clusters),
                                              std::vector<double>(per));
    std::uniform_int_distribution<int> pick(0, s.clusters - 1);
    for (auto& c : centroid)
        for (auto& v : c) v = s.separation * unit(rng);

    auto make = [&](int count) {
        TokenBatch<T> b{static_cast<std::size_t>(count), static_cast<std::size_t>(s.tokens),
                        static_cast<std::size_t>(s.features), {}, {}};
        std::vector<int> labels(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) labels[static_cast<std::size_t>(i)] = i % s.classes;
        std::shuffle(labels.begin(), labels.end(), rng);
        b.data.reserve(b.batch * per);
        for (int label : labels) {
            const int k = s.clusters > 1 ? label * s.clusters + pick(rng) : label;
            const auto& c = centroid[static_cast<std::size_t>(k)];
            for (std::size_t j = 0; j < per; ++j) b.data.push_back(static_cast<T>(c[j] + s.noise * unit(rng)));
        }
        b.labels = std::move(labels);
        return b;
    };
    Dataset<T> d;
    d.train = make(s.train_samples);
    d.val = make(s.val_samples);
    d.num_classes = s.classes;
    return d;
}

struct IdxArray {
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> bytes;
};

/// Reads an unsigned-byte IDX file (big-endian header).
inline IdxArray read_idx(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open IDX file: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), {});
    auto fail = [&](const std::string& msg, std::size_t offset) {
        throw FormatError("IDX " + path + " at byte " + std::to_string(offset) + ": " + msg);
    };
    if (raw.size() < 4) fail("file shorter than the magic number", raw.size());
    if (raw[0] != 0 || raw[1] != 0) fail("magic must start with two zero bytes", 0);
    if (raw[2] != 0x08) fail("only unsigned-byte data (type 0x08) is supported", 2);
    const std::size_t ndims = raw[3];
    if (ndims == 0) fail("zero dimensions", 3);
    if (raw.size() < 4 + 4 * ndims) fail("truncated dimension table", raw.size());
    IdxArray a;
    std::size_t total = 1;
    for (std::size_t i = 0; i < ndims; ++i) {
        const std::size_t o = 4 + 4 * i;
        const std::size_t d = (std::size_t{raw[o]} << 24) | (std::size_t{raw[o + 1]} << 16) |
                              (std::size_t{raw[o + 2]} << 8) | std::size_t{raw[o + 3]};
        a.dims.push_back(d);
        total *= d;
    }
    const std::size_t start = 4 + 4 * ndims;
    if (raw.size() - start != total)
        fail("payload has " + std::to_string(raw.size() - start) + " bytes, dimensions require " +
                 std::to_string(total),
             start);
    a.bytes.assign(raw.begin() + static_cast<std::ptrdiff_t>(start), raw.end());
    return a;
}

struct IdxSpec {
    std::string images, labels;
    int patch = 7;
    double val_fraction = 0.2;
};

/// Loads square images as (side/patch)^2 tokens of patch*patch values in
/// [0, 1]. The trailing `val_fraction` of samples forms the validation split.
template <typename T>
Dataset<T> load_idx(const IdxSpec& s) {
    auto img = read_idx(s.images);
    auto lab = read_idx(s.labels);
    if (img.dims.size() != 3) throw FormatError("IDX " + s.images + ": expected 3 dimensions (n, rows, cols)");
    if (lab.dims.size() != 1) throw FormatError("IDX " + s.labels + ": expected 1 dimension");
    const std::size_t n = img.dims[0], side = img.dims[1];
    if (img.dims[2] != side) throw FormatError("IDX " + s.images + ": images must be square");
    if (lab.dims[0] != n) throw FormatError("IDX label count does not match image count");
    if (s.patch <= 0 || side % static_cast<std::size_t>(s.patch) != 0)
        throw ConfigError("patch size " + std::to_string(s.patch) + " does not divide image side " +
                          std::to_string(side));
    if (!(s.val_fraction > 0 && s.val_fraction < 1)) throw ConfigError("data.val_fraction must lie in (0, 1)");
    const auto p = static_cast<std::size_t>(s.patch);
    const std::size_t grid = side / p;

    TokenBatch<T> all{n, grid * grid, p * p, {}, {}};
    all.data.reserve(n * side * side);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* im = img.bytes.data() + i * side * side;
        for (std::size_t gy = 0; gy < grid; ++gy)
            for (std::size_t gx = 0; gx < grid; ++gx)
                for (std::size_t y = 0; y < p; ++y)
                    for (std::size_t x = 0; x < p; ++x)
                        all.data.push_back(static_cast<T>(im[(gy * p + y) * side + gx * p + x] / 255.0));
        all.labels.push_back(lab.bytes[i]);
        max_label = std::max(max_label, static_cast<int>(lab.bytes[i]));
    }
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * s.val_fraction));
    if (n_val == 0 || n_val >= n) throw ConfigError("IDX split leaves an empty train or validation set");
    std::vector<std::size_t> tr(n - n_val), va(n_val);
    std::iota(tr.begin(), tr.end(), std::size_t{0});
    std::iota(va.begin(), va.end(), n - n_val);
    Dataset<T> d;
    d.train = take(all, tr);
    d.val = take(all, va);
    d.num_classes = max_label + 1;
    return d;
}

}  // namespace elastic
