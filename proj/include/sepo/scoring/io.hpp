#pragma once

// Mask/score JSONL, one line per response:
//   {"id","side","scores","selected","k","config_hash"}
// Curves and histograms are CSV with a header row.

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sepo/core/error.hpp"
#include "sepo/scoring/selection.hpp"

namespace sepo::scoring {

struct ScoredResponse {
    TokenScoreTable table;
    SelectionMask mask;
};

inline std::string mask_line(const ScoredResponse& r, const std::string& config_hash) {
    nlohmann::json j{{"id", r.table.id},
                     {"side", to_string(r.table.side)},
                     {"scores", r.table.scores},
                     {"selected", r.mask.indices()},
                     {"k", r.mask.k},
                     {"config_hash", config_hash}};
    return j.dump();
}

inline void write_mask_file(const std::string& path, const std::vector<ScoredResponse>& rows,
                            const std::string& config_hash) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path + "'");
    for (const auto& r : rows) out << mask_line(r, config_hash) << '\n';
}

/// Masks keyed by pair id, in file order.
struct MaskFile {
    std::vector<std::string> ids;
    std::map<std::string, std::pair<ScoredResponse, ScoredResponse>> by_id;  ///< (chosen, rejected)
    std::string config_hash;

    bool contains(const std::string& id) const { return by_id.count(id) != 0; }
};

inline MaskFile read_mask_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open mask file '" + path + "'");
    MaskFile mf;
    std::map<std::string, int> seen;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        ScoredResponse r;
        try {
            const auto j = nlohmann::json::parse(line);
            r.table.id = j.at("id").get<std::string>();
            r.table.side = side_from_string(j.at("side").get<std::string>());
            r.table.scores = j.at("scores").get<std::vector<double>>();
            r.mask.id = r.table.id;
            r.mask.side = r.table.side;
            r.mask.k = j.at("k").get<double>();
            r.mask.selected.assign(r.table.scores.size(), 0);
            for (std::size_t idx : j.at("selected").get<std::vector<std::size_t>>()) {
                if (idx >= r.mask.selected.size())
                    throw ValidationError("selected index " + std::to_string(idx) + " beyond response length");
                r.mask.selected[idx] = 1;
            }
            if (j.contains("config_hash")) mf.config_hash = j["config_hash"].get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("mask file line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError("mask file line " + std::to_string(lineno) + ": " + e.what());
        }
        auto& slot = mf.by_id[r.table.id];
        if (!seen.count(r.table.id)) mf.ids.push_back(r.table.id);
        seen[r.table.id] |= r.table.side == Side::chosen ? 1 : 2;
        (r.table.side == Side::chosen ? slot.first : slot.second) = std::move(r);
    }
    for (const auto& [id, bits] : seen)
        if (bits != 3) throw ValidationError("mask file: pair '" + id + "' lacks a " + (bits == 1 ? "rejected" : "chosen") + " line");
    return mf;
}

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

/// Resampled at whole percents 1..100, one block per labelled curve.
inline std::string curve_csv(const std::vector<std::pair<std::string, AccumulationCurve>>& curves,
                             const std::string& config_hash) {
    std::ostringstream os;
    os << "side,top_percent,fraction,shift,config_hash\n";
    for (const auto& [side, c] : curves)
        for (int p = 1; p <= 100; ++p)
            os << side << ',' << p << ',' << format_real(c.at(p)) << ',' << format_real(c.shift) << ','
               << config_hash << '\n';
    return os.str();
}

inline std::string histogram_csv(const std::vector<std::pair<std::string, Histogram>>& hists,
                                 const std::string& config_hash) {
    std::ostringstream os;
    os << "label,bin,lo,hi,count,config_hash\n";
    for (const auto& [label, h] : hists)
        for (std::size_t b = 0; b < h.counts.size(); ++b)
            os << label << ',' << b << ',' << format_real(h.lo + h.bin_width() * double(b)) << ','
               << format_real(h.lo + h.bin_width() * double(b + 1)) << ',' << h.counts[b] << ',' << config_hash
               << '\n';
    return os.str();
}

} // namespace sepo::scoring
