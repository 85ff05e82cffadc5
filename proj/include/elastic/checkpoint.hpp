// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint layout:
//
//   EAVT1\n
//   spec.<field> <value>\n            (one line per BackboneSpec field)
//   meta.<key> <value>\n              (optional free-form entries)
//   tensor <name> shape=<r>,<c> offset=<bytes> bytes=<n>\n
//   ...
//   end\n
//   <little-endian float32 payload, tensors in declaration order>
//
// Offsets are relative to the first payload byte.
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "elastic/backbone.hpp"
#include "elastic/errors.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

inline constexpr const char* kCheckpointMagic = "EAVT1";

struct Checkpoint {
    BackboneSpec spec;
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor<float>>> tensors;

    const Tensor<float>* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
};

namespace detail {

inline void write_spec(std::ostream& os, const BackboneSpec& s) {
    os.precision(17);
    os << "spec.layers " << s.layers << '\n'
       << "spec.embed_max " << s.embed_max << '\n'
       << "spec.d_head " << s.d_head << '\n'
       << "spec.heads_max " << s.heads_max << '\n'
       << "spec.ratio_max " << s.ratio_max << '\n'
       << "spec.ratio_step " << s.ratio_step << '\n'
       << "spec.tokens " << s.tokens << '\n'
       << "spec.num_classes " << s.num_classes << '\n'
       << "spec.embed_min " << s.embed_min << '\n'
       << "spec.heads_min " << s.heads_min << '\n'
       << "spec.ratio_min " << s.ratio_min << '\n'
       << "spec.input_dim " << s.input_dim << '\n';
}

inline void read_spec_field(BackboneSpec& s, const std::string& key, const std::string& value) {
    std::map<std::string, int*> ints{{"layers", &s.layers},       {"embed_max", &s.embed_max},
                                     {"d_head", &s.d_head},       {"heads_max", &s.heads_max},
                                     {"tokens", &s.tokens},       {"num_classes", &s.num_classes},
                                     {"embed_min", &s.embed_min}, {"heads_min", &s.heads_min},
                                     {"input_dim", &s.input_dim}};
    std::map<std::string, double*> reals{
        {"ratio_max", &s.ratio_max}, {"ratio_step", &s.ratio_step}, {"ratio_min", &s.ratio_min}};
    try {
        if (auto it = ints.find(key); it != ints.end())
            *it->second = std::stoi(value);
        else if (auto jt = reals.find(key); jt != reals.end())
            *jt->second = std::stod(value);
        else
            throw FormatError("checkpoint: unknown spec field '" + key + "'");
    } catch (const std::logic_error&) {
        throw FormatError("checkpoint: bad value '" + value + "' for spec." + key);
    }
}

}  // namespace detail

/// Writes tensors (converted to float32) under the given names.
template <typename T>
void save_checkpoint(const std::string& path, const BackboneSpec& spec,
                     const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors,
                     const std::map<std::string, std::string>& meta = {}) {
    std::ostringstream header;
    header << kCheckpointMagic << '\n';
    detail::write_spec(header, spec);
    for (const auto& [k, v] : meta) {
        if (k.find_first_of(" \n") != std::string::npos || v.find('\n') != std::string::npos)
            throw ConfigError("checkpoint meta entries must be single-line, key without spaces");
        header << "meta." << k << ' ' << v << '\n';
    }
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        header << "tensor " << name << " shape=" << t->rows() << ',' << t->cols() << " offset=" << offset
               << " bytes=" << 4 * t->size() << '\n';
        offset += 4 * t->size();
    }
    header << "end\n";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
    const std::string h = header.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<char> buf;
    for (const auto& [name, t] : tensors) {
        buf.resize(4 * t->size());
        for (std::size_t i = 0; i < t->size(); ++i) {
            std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>((*t)[i]));
            for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        }
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    }
    if (!out) throw FormatError("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic)
        throw FormatError("checkpoint " + path + ": missing magic " + kCheckpointMagic);
    Checkpoint ck;
    struct Entry {
        std::string name;
        std::size_t rows, cols, offset, bytes;
    };
    std::vector<Entry> entries;
    bool ended = false;
    while (std::getline(in, line)) {
        if (line == "end") {
            ended = true;
            break;
        }
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key.rfind("spec.", 0) == 0) {
            std::string value;
            ls >> value;
            detail::read_spec_field(ck.spec, key.substr(5), value);
        } else if (key.rfind("meta.", 0) == 0) {
            std::string value;
            std::getline(ls >> std::ws, value);
            ck.meta[key.substr(5)] = value;
        } else if (key == "tensor") {
            Entry e{};
            std::string shape, off, bytes;
            ls >> e.name >> shape >> off >> bytes;
            if (std::sscanf(shape.c_str(), "shape=%zu,%zu", &e.rows, &e.cols) != 2 ||
                std::sscanf(off.c_str(), "offset=%zu", &e.offset) != 1 ||
                std::sscanf(bytes.c_str(), "bytes=%zu", &e.bytes) != 1 || e.bytes != 4 * e.rows * e.cols)
                throw FormatError("checkpoint " + path + ": malformed tensor line '" + line + "'");
            entries.push_back(e);
        } else {
            throw FormatError("checkpoint " + path + ": unexpected header line '" + line + "'");
        }
    }
    if (!ended) throw FormatError("checkpoint " + path + ": header has no end marker");
    const auto payload_start = static_cast<std::size_t>(in.tellg());
    std::vector<char> buf;
    for (const auto& e : entries) {
        buf.resize(e.bytes);
        in.seekg(static_cast<std::streamoff>(payload_start + e.offset));
        in.read(buf.data(), static_cast<std::streamsize>(e.bytes));
        if (static_cast<std::size_t>(in.gcount()) != e.bytes)
            throw FormatError("checkpoint " + path + ": truncated payload for tensor " + e.name + " at byte " +
                              std::to_string(payload_start + e.offset));
        std::vector<float> vals(e.rows * e.cols);
        for (std::size_t i = 0; i < vals.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[4 * i + b])) << (8 * b);
            vals[i] = std::bit_cast<float>(bits);
        }
        ck.tensors.emplace_back(e.name, Tensor<float>({e.rows, e.cols}, std::move(vals)));
    }
    return ck;
}

/// Named tensor list of a supernet, with an optional name prefix.
template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> named_tensors(const ElasticParams<T>& p,
                                                                    const std::string& prefix = "") {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    p.for_each([&](const std::string& n, const Tensor<T>& t) { out.emplace_back(prefix + n, &t); });
    return out;
}

/// Copies tensor `prefix + name` from the checkpoint into `t`, checking shape.
template <typename T>
void restore_tensor(const Checkpoint& ck, const std::string& name, Tensor<T>& t) {
    const auto* src = ck.find(name);
    if (!src) throw FormatError("checkpoint has no tensor '" + name + "'");
    if (src->rows() != t.rows() || src->cols() != t.cols())
        throw FormatError("checkpoint tensor '" + name + "' has shape " + std::to_string(src->rows()) + "x" +
                          std::to_string(src->cols()) + ", expected " + std::to_string(t.rows()) + "x" +
                          std::to_string(t.cols()));
    std::copy(src->data().begin(), src->data().end(), t.data().begin());
}

template <typename T>
ElasticParams<T> params_from_checkpoint(const Checkpoint& ck) {
    ElasticParams<T> p(ck.spec);
    p.for_each([&](const std::string& n, Tensor<T>& t) { restore_tensor(ck, n, t); });
    return p;
}

template <typename T>
void save_params(const std::string& path, const ElasticParams<T>& p,
                 const std::map<std::string, std::string>& meta = {}) {
    save_checkpoint(path, p.spec, named_tensors(p), meta);
}

}  // namespace elastic
