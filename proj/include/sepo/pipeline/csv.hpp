#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "sepo/core/error.hpp"
#include "sepo/scoring/io.hpp"

namespace sepo::pipeline {

template <class V>
std::string fmt(V v) {
    if constexpr (std::is_floating_point_v<V>) return scoring::format_real(static_cast<double>(v));
    else return std::to_string(v);
}

/// A CSV table; `str` appends the run's config hash as the last column.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    static std::string quote(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string q = "\"";
        for (char ch : s) {
            if (ch == '"') q += '"';
            q += ch;
        }
        return q + '"';
    }

    std::string str(const std::string& config_hash) const {
        std::ostringstream os;
        for (const auto& h : header) os << quote(h) << ',';
        os << "config_hash\n";
        for (const auto& r : rows) {
            if (r.size() != header.size())
                throw DimensionError("csv row has " + std::to_string(r.size()) + " cells, header has " +
                                     std::to_string(header.size()));
            for (const auto& c : r) os << quote(c) << ',';
            os << config_hash << '\n';
        }
        return os.str();
    }
};

} // namespace sepo::pipeline
