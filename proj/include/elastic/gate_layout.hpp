// SPDX-License-Identifier: Apache-2.0
//
// Bit layout shared by search genomes and router gates:
//
//   [k_max embedding] | per layer: [ratio units | H_max heads] | [L mha] | [L mlp]
//
// Fields decode by popcount, so any permutation of bits inside a field
// yields the same configuration. The canonical encoding of a
// configuration sets the lowest-index bits of each field.
#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "elastic/config_space.hpp"

namespace elastic {

class GateLayout {
   public:
    explicit GateLayout(const BackboneSpec& spec)
        : spec_(spec),
          layers_(static_cast<std::size_t>(spec.layers)),
          emb_bits_(static_cast<std::size_t>(spec.k_max())),
          ratio_bits_(static_cast<std::size_t>(spec.ratio_units_max())),
          head_bits_(static_cast<std::size_t>(spec.heads_max)) {}

    const BackboneSpec& spec() const { return spec_; }
    std::size_t size() const { return emb_bits_ + layers_ * (ratio_bits_ + head_bits_) + 2 * layers_; }
    std::size_t layers() const { return layers_; }
    std::size_t emb_bits() const { return emb_bits_; }
    std::size_t ratio_bits() const { return ratio_bits_; }
    std::size_t head_bits() const { return head_bits_; }

    std::size_t emb(std::size_t i) const { return i; }
    std::size_t ratio(std::size_t layer, std::size_t j) const {
        return emb_bits_ + layer * (ratio_bits_ + head_bits_) + j;
    }
    std::size_t head(std::size_t layer, std::size_t m) const {
        return emb_bits_ + layer * (ratio_bits_ + head_bits_) + ratio_bits_ + m;
    }
    std::size_t mha_depth(std::size_t layer) const {
        return emb_bits_ + layers_ * (ratio_bits_ + head_bits_) + layer;
    }
    std::size_t mlp_depth(std::size_t layer) const { return mha_depth(0) + layers_ + layer; }

    /// Indices of the set bits of a field, ascending.
    template <typename Bits>
    std::vector<std::size_t> active(const Bits& bits, std::size_t first, std::size_t count) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < count; ++i)
            if (bits[first + i]) out.push_back(first + i);
        return out;
    }

    /// Popcount decoding with clamping to the backbone's final bounds.
    template <typename Bits>
    SubmodelConfig decode(const Bits& bits) const {
        if (bits.size() != size())
            throw ConfigError("gate vector of length " + std::to_string(bits.size()) +
                              ", expected " + std::to_string(size()));
        SubmodelConfig cfg;
        const int k = count(bits, emb(0), emb_bits_);
        cfg.embed = std::clamp(k, spec_.k_min(), spec_.k_max()) * spec_.d_head;
        for (std::size_t l = 0; l < layers_; ++l) {
            const int units = std::clamp(std::max(count(bits, ratio(l, 0), ratio_bits_), 1),
                                         spec_.ratio_units_min(), spec_.ratio_units_max());
            cfg.ratio.push_back(units * spec_.ratio_step);
            cfg.heads.push_back(
                std::clamp(count(bits, head(l, 0), head_bits_), spec_.heads_min, spec_.heads_max));
            cfg.mha_on.push_back(static_cast<bool>(bits[mha_depth(l)]));
            cfg.mlp_on.push_back(static_cast<bool>(bits[mlp_depth(l)]));
        }
        return cfg;
    }

    /// Canonical nested encoding: a prefix of ones per field.
    std::vector<bool> encode(const SubmodelConfig& cfg) const {
        cfg.validate(spec_);
        std::vector<bool> bits(size(), false);
        const auto k = static_cast<std::size_t>(cfg.embed / spec_.d_head);
        for (std::size_t i = 0; i < k; ++i) bits[emb(i)] = true;
        for (std::size_t l = 0; l < layers_; ++l) {
            const auto units = static_cast<std::size_t>(std::llround(cfg.ratio[l] / spec_.ratio_step));
            for (std::size_t j = 0; j < units; ++j) bits[ratio(l, j)] = true;
            for (std::size_t m = 0; m < static_cast<std::size_t>(cfg.heads[l]); ++m)
                bits[head(l, m)] = true;
            bits[mha_depth(l)] = cfg.mha_on[l];
            bits[mlp_depth(l)] = cfg.mlp_on[l];
        }
        return bits;
    }

   private:
    template <typename Bits>
    static int count(const Bits& bits, std::size_t first, std::size_t n) {
        int c = 0;
        for (std::size_t i = 0; i < n; ++i) c += bits[first + i] ? 1 : 0;
        return c;
    }

    BackboneSpec spec_;
    std::size_t layers_, emb_bits_, ratio_bits_, head_bits_;
};

/// Hex rendering of a bit string: four bits per digit, most significant
/// bit first, zero padded at the end.
inline std::string bits_to_hex(const std::vector<bool>& bits) {
    static constexpr char kDigits[] = "0123456789abcdef";
    std::string out;
    for (std::size_t i = 0; i < bits.size(); i += 4) {
        int v = 0;
        for (std::size_t j = 0; j < 4; ++j) v = (v << 1) | ((i + j < bits.size() && bits[i + j]) ? 1 : 0);
        out.push_back(kDigits[v]);
    }
    return out;
}

inline std::vector<bool> hex_to_bits(const std::string& hex, std::size_t length) {
    if (hex.size() != (length + 3) / 4)
        throw FormatError("genome hex '" + hex + "' does not encode " + std::to_string(length) + " bits");
    std::vector<bool> bits(length, false);
    for (std::size_t i = 0; i < hex.size(); ++i) {
        const char ch = hex[i];
        int v;
        if (ch >= '0' && ch <= '9')
            v = ch - '0';
        else if (ch >= 'a' && ch <= 'f')
            v = ch - 'a' + 10;
        else if (ch >= 'A' && ch <= 'F')
            v = ch - 'A' + 10;
        else
            throw FormatError("genome hex '" + hex + "' has a non-hex digit");
        for (std::size_t j = 0; j < 4; ++j)
            if (4 * i + j < length) bits[4 * i + j] = (v >> (3 - j)) & 1;
    }
    return bits;
}

}  // namespace elastic
