#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "curemark/errors.hpp"

namespace curemark::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(std::string_view name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    }

    int require_column(std::string_view name, const std::string& file) const {
        const int j = column(name);
        if (j < 0)
            throw DataError("missing column '" + std::string(name) + "' in " + file);
        return j;
    }
};

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline Table read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    Table t;
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty file " + path);
    t.header = split_line(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split_line(line);
        if (fields.size() != t.header.size())
            throw DataError(path + ":" + std::to_string(lineno) + ": expected " +
                            std::to_string(t.header.size()) + " fields, got " +
                            std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
    }
    return t;
}

inline double parse_double(const std::string& s, const std::string& context) {
    double v{};
    const char* first = s.data();
    const char* last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last)
        throw DataError("non-numeric field '" + s + "' in " + context);
    return v;
}

// Floating-point formatting for all CSV/JSON output: round-trippable
// (17 significant digits).
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class Writer {
  public:
    explicit Writer(const std::string& path) : out_(path) {
        if (!out_) throw DataError("cannot open " + path + " for writing");
    }

    void raw_row(const std::string& line) { out_ << line << '\n'; }

    template <typename... Fields>
    void row(const Fields&... fields) {
        bool first = true;
        ((write_field(fields, first), first = false), ...);
        out_ << '\n';
    }

  private:
    void write_field(const std::string& s, bool first) {
        if (!first) out_ << ',';
        out_ << s;
    }
    void write_field(const char* s, bool first) {
        if (!first) out_ << ',';
        out_ << s;
    }
    void write_field(double v, bool first) {
        if (!first) out_ << ',';
        out_ << format_double(v);
    }
    void write_field(int v, bool first) {
        if (!first) out_ << ',';
        out_ << v;
    }
    void write_field(std::size_t v, bool first) {
        if (!first) out_ << ',';
        out_ << v;
    }

    std::ofstream out_;
};

} // namespace curemark::csv
