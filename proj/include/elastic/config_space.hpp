// SPDX-License-Identifier: Apache-2.0
//
// The elastic configuration space: backbone bounds, submodel
// configurations, the analytic MAC cost model and design-space counting.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "elastic/errors.hpp"

namespace elastic {

/// Shape and elastic bounds of a supernet.
struct BackboneSpec {
    int layers = 4;
    int embed_max = 64;
    int d_head = 8;
    int heads_max = 8;
    double ratio_max = 4.0;
    double ratio_step = 0.5;
    int tokens = 9;  ///< sequence length including the class token
    int num_classes = 4;
    int embed_min = 32;
    int heads_min = 4;
    double ratio_min = 0.5;
    int input_dim = 16;  ///< raw feature width of each non-class token

    int k_max() const { return embed_max / d_head; }
    int k_min() const { return embed_min / d_head; }
    int ratio_units_max() const { return static_cast<int>(std::llround(ratio_max / ratio_step)); }
    int ratio_units_min() const { return static_cast<int>(std::llround(ratio_min / ratio_step)); }
    int hidden_max() const { return static_cast<int>(std::ceil(ratio_max * embed_max)); }
    int patch_tokens() const { return tokens - 1; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("backbone spec: " + m); };
        auto integral = [](double x) { return std::abs(x - std::round(x)) < 1e-9; };
        if (layers < 1) fail("layers must be >= 1");
        if (d_head < 1) fail("d_head must be >= 1");
        if (embed_max % d_head != 0) fail("embed_max must be a multiple of d_head");
        if (embed_min % d_head != 0 || embed_min < d_head) fail("embed_min must be k*d_head, k >= 1");
        if (embed_min > embed_max) fail("embed_min exceeds embed_max");
        if (!(ratio_step > 0)) fail("ratio_step must be positive");
        if (!(ratio_min > 0) || ratio_min > ratio_max) fail("need 0 < ratio_min <= ratio_max");
        if (!integral(ratio_max / ratio_step) || !integral(ratio_min / ratio_step))
            fail("ratio bounds must be multiples of ratio_step");
        if (heads_min < 1 || heads_min > heads_max) fail("need 1 <= heads_min <= heads_max");
        if (tokens < 2) fail("tokens must include the class token and at least one input token");
        if (num_classes < 2) fail("num_classes must be >= 2");
        if (input_dim < 1) fail("input_dim must be >= 1");
    }

    /// ViT-Base shaped bounds (ImageNet resolution, 16x16 patches).
    static BackboneSpec vit_base() {
        BackboneSpec s;
        s.layers = 12;
        s.embed_max = 768;
        s.d_head = 64;
        s.heads_max = 12;
        s.ratio_max = 4.0;
        s.ratio_step = 0.5;
        s.tokens = 197;
        s.num_classes = 1000;
        s.embed_min = 384;
        s.heads_min = 6;
        s.ratio_min = 0.5;
        s.input_dim = 768;
        return s;
    }

    bool operator==(const BackboneSpec&) const = default;
};

/// Hidden MLP width for ratio r at embedding width e, rounded half-to-even.
inline int hidden_width(double ratio, int embed) {
    return static_cast<int>(std::nearbyint(ratio * embed));
}

/// One point of the configuration space: per-layer MLP ratio and head
/// count, a global embedding width and per-block activation flags.
struct SubmodelConfig {
    std::vector<double> ratio;
    std::vector<int> heads;
    int embed = 0;
    std::vector<bool> mlp_on;
    std::vector<bool> mha_on;

    static SubmodelConfig maximal(const BackboneSpec& spec) {
        SubmodelConfig c;
        const auto l = static_cast<std::size_t>(spec.layers);
        c.ratio.assign(l, spec.ratio_max);
        c.heads.assign(l, spec.heads_max);
        c.embed = spec.embed_max;
        c.mlp_on.assign(l, true);
        c.mha_on.assign(l, true);
        return c;
    }

    int hidden(std::size_t layer) const { return hidden_width(ratio[layer], embed); }

    /// Throws ConfigError naming the offending axis and layer.
    void validate(const BackboneSpec& spec) const {
        const auto l = static_cast<std::size_t>(spec.layers);
        if (ratio.size() != l || heads.size() != l || mlp_on.size() != l || mha_on.size() != l)
            throw ConfigError("submodel config: per-layer fields must have " +
                              std::to_string(l) + " entries");
        if (embed < spec.embed_min || embed > spec.embed_max || embed % spec.d_head != 0)
            throw ConfigError("submodel config: embed " + std::to_string(embed) +
                              " outside [" + std::to_string(spec.embed_min) + ", " +
                              std::to_string(spec.embed_max) + "] or not a multiple of d_head");
        for (std::size_t i = 0; i < l; ++i) {
            const double units = ratio[i] / spec.ratio_step;
            if (ratio[i] < spec.ratio_min - 1e-12 || ratio[i] > spec.ratio_max + 1e-12 ||
                std::abs(units - std::round(units)) > 1e-9) {
                std::ostringstream os;
                os << "submodel config: ratio " << ratio[i] << " at layer " << i
                   << " outside the ratio grid";
                throw ConfigError(os.str());
            }
            if (heads[i] < spec.heads_min || heads[i] > spec.heads_max)
                throw ConfigError("submodel config: heads " + std::to_string(heads[i]) +
                                  " at layer " + std::to_string(i) + " outside [" +
                                  std::to_string(spec.heads_min) + ", " +
                                  std::to_string(spec.heads_max) + "]");
        }
    }

    std::string summary() const {
        std::ostringstream os;
        os << "E=" << embed << " R=";
        for (std::size_t i = 0; i < ratio.size(); ++i) os << (i ? "," : "") << ratio[i];
        os << " H=";
        for (std::size_t i = 0; i < heads.size(); ++i) os << (i ? "," : "") << heads[i];
        os << " D=";
        for (std::size_t i = 0; i < mha_on.size(); ++i)
            os << (mha_on[i] ? '1' : '0') << (mlp_on[i] ? '1' : '0') << (i + 1 < mha_on.size() ? "," : "");
        return os.str();
    }

    bool operator==(const SubmodelConfig&) const = default;
};

/// Analytic multiply-accumulate count of a submodel:
///   sum_l  D_mlp * 2*N*E*hid(l)  +  D_mha * N*d_head*H(l)*(4E + 2N)
/// with hid(l) = round(R(l) * E). Input adapter and classifier are excluded.
inline std::uint64_t macs(const SubmodelConfig& cfg, const BackboneSpec& spec) {
    const std::uint64_t n = static_cast<std::uint64_t>(spec.tokens);
    const std::uint64_t e = static_cast<std::uint64_t>(cfg.embed);
    const std::uint64_t d = static_cast<std::uint64_t>(spec.d_head);
    std::uint64_t total = 0;
    for (std::size_t l = 0; l < cfg.ratio.size(); ++l) {
        if (cfg.mlp_on[l]) total += 2 * n * e * static_cast<std::uint64_t>(cfg.hidden(l));
        if (cfg.mha_on[l])
            total += n * d * static_cast<std::uint64_t>(cfg.heads[l]) * (4 * e + 2 * n);
    }
    return total;
}

/// Exact number of distinct configurations:
///   |E| * prod_l (|R| * |H|) * 2^(2L)
inline boost::multiprecision::cpp_int design_space_size(const BackboneSpec& spec) {
    using boost::multiprecision::cpp_int;
    const cpp_int e_choices = spec.k_max() - spec.k_min() + 1;
    const cpp_int r_choices = spec.ratio_units_max() - spec.ratio_units_min() + 1;
    const cpp_int h_choices = spec.heads_max - spec.heads_min + 1;
    cpp_int total = e_choices;
    for (int l = 0; l < spec.layers; ++l) total *= r_choices * h_choices * 4;
    return total;
}

}  // namespace elastic
