// SPDX-License-Identifier: Apache-2.0
//
// Small CSV reader/writer for result artifacts, plus SHA-256 file digests
// for the run manifest.
#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/errors.hpp"

namespace elastic {

/// Shortest text that round-trips a double.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

inline std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    return out + "\"";
}

class CsvWriter {
   public:
    CsvWriter(const std::string& path, std::vector<std::string> header)
        : out_(path), path_(path), columns_(header.size()) {
        if (!out_) throw FormatError("cannot write " + path);
        row(header);
    }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != columns_)
            throw FormatError(path_ + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                              std::to_string(columns_));
        for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << csv_escape(fields[i]);
        out_ << '\n';
        if (!out_) throw FormatError("write failed: " + path_);
    }

   private:
    std::ofstream out_;
    std::string path_;
    std::size_t columns_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw FormatError("CSV has no column '" + name + "'");
    }
    const std::string& at(std::size_t row, const std::string& name) const { return rows.at(row)[column(name)]; }
    double number(std::size_t row, const std::string& name) const {
        const auto& s = at(row, name);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw FormatError("CSV row " + std::to_string(row + 1) + " column " + name + ": '" + s +
                              "' is not a number");
        }
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
    std::vector<std::string> out(1);
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                out.back().push_back('"');
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                out.back().push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.emplace_back();
        } else {
            out.back().push_back(c);
        }
    }
    if (quoted) throw FormatError("CSV line " + std::to_string(lineno) + ": unterminated quote");
    return out;
}

}  // namespace detail

inline CsvTable parse_csv(std::istream& in, const std::string& name = "CSV") {
    CsvTable t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = detail::split_csv_line(line, lineno);
        if (t.header.empty()) {
            t.header = std::move(fields);
        } else {
            if (fields.size() != t.header.size())
                throw FormatError(name + " line " + std::to_string(lineno) + ": " + std::to_string(fields.size()) +
                                  " fields, header has " + std::to_string(t.header.size()));
            t.rows.push_back(std::move(fields));
        }
    }
    if (t.header.empty()) throw FormatError(name + ": empty file");
    return t;
}

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);
    return parse_csv(in, path);
}

/// Lower-case hex SHA-256 of a file's bytes.
inline std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path + " for hashing");
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
        throw FormatError("SHA-256 initialisation failed");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 15]);
    }
    return out;
}

}  // namespace elastic
