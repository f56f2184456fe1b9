#pragma once

// JSONL dataset files, one pair per line:
// {"id","prompt","chosen","rejected","gt_chosen_rewards","gt_rejected_rewards",
//  "meta":{"ood","spec_hash"[,"config_hash"]}}

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/data/synthetic.hpp"
#include "sepo/lm/vocab.hpp"

namespace sepo::data {

inline nlohmann::json to_json(const Example& ex, const DatasetMeta& meta, bool with_config_hash = true) {
    nlohmann::json m{{"ood", meta.ood}, {"spec_hash", meta.spec_hash}};
    if (with_config_hash && !meta.config_hash.empty()) m["config_hash"] = meta.config_hash;
    return nlohmann::json{{"id", ex.pair.id},
                          {"prompt", ex.pair.prompt},
                          {"chosen", ex.pair.chosen},
                          {"rejected", ex.pair.rejected},
                          {"gt_chosen_rewards", ex.gt.chosen},
                          {"gt_rejected_rewards", ex.gt.rejected},
                          {"meta", std::move(m)}};
}

/// Checks the per-pair invariants; throws ValidationError.
inline void validate_example(const Example& ex) {
    const auto& p = ex.pair;
    if (p.id.empty()) throw ValidationError("pair with empty id");
    if (p.prompt.empty()) throw ValidationError("pair " + p.id + ": empty prompt");
    if (p.chosen.empty() || p.rejected.empty()) throw ValidationError("pair " + p.id + ": empty response");
    if (p.chosen.back() != lm::kEos || p.rejected.back() != lm::kEos)
        throw ValidationError("pair " + p.id + ": response does not end with EOS");
    if (!ex.gt.chosen.empty() && ex.gt.chosen.size() != p.chosen.size())
        throw ValidationError("pair " + p.id + ": gt_chosen_rewards length differs from chosen");
    if (!ex.gt.rejected.empty() && ex.gt.rejected.size() != p.rejected.size())
        throw ValidationError("pair " + p.id + ": gt_rejected_rewards length differs from rejected");
}

inline std::string dataset_to_jsonl(const Dataset& ds, bool with_config_hash = true) {
    std::string out;
    for (const Example& ex : ds.examples) {
        out += to_json(ex, ds.meta, with_config_hash).dump();
        out += '\n';
    }
    return out;
}

inline Dataset dataset_from_jsonl(std::istream& in) {
    Dataset ds;
    std::string line;
    std::size_t lineno = 0;
    bool meta_seen = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto where = [&] {
            return "dataset line " + std::to_string(lineno) + " (last good line " + std::to_string(lineno - 1) + ")";
        };
        Example ex;
        try {
            const nlohmann::json j = nlohmann::json::parse(line);
            ex.pair.id = j.at("id").get<std::string>();
            ex.pair.prompt = j.at("prompt").get<std::vector<int>>();
            ex.pair.chosen = j.at("chosen").get<std::vector<int>>();
            ex.pair.rejected = j.at("rejected").get<std::vector<int>>();
            if (j.contains("gt_chosen_rewards")) ex.gt.chosen = j["gt_chosen_rewards"].get<std::vector<double>>();
            if (j.contains("gt_rejected_rewards"))
                ex.gt.rejected = j["gt_rejected_rewards"].get<std::vector<double>>();
            if (j.contains("meta")) {
                DatasetMeta m;
                m.ood = j["meta"].value("ood", false);
                m.spec_hash = j["meta"].value("spec_hash", std::string{});
                m.config_hash = j["meta"].value("config_hash", std::string{});
                if (!meta_seen) {
                    ds.meta = m;
                    meta_seen = true;
                }
            }
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(where() + ": malformed record: " + e.what());
        }
        try {
            validate_example(ex);
        } catch (const ValidationError& e) {
            throw ValidationError(where() + ": " + e.what());
        }
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write dataset '" + path + "'");
    out << dataset_to_jsonl(ds);
    if (!out) throw ValidationError("short write to '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset '" + path + "'");
    return dataset_from_jsonl(in);
}

/// Content hash of the canonical JSONL rendering, ignoring which run wrote it.
inline std::string dataset_hash(const Dataset& ds) { return hash_hex(dataset_to_jsonl(ds, false)); }

} // namespace sepo::data
