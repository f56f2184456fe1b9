#pragma once

// Output directories, run configs, and the hash verifier.
//
// A run writes into `<out>.partial` and renames it to `<out>` only after
// every file is complete, so a crashed run never leaves a half-populated
// output directory behind. `run_config.txt` holds the canonical config text;
// its hash is embedded in every other file of the run.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/lm/checkpoint.hpp"
#include "sepo/pipeline/csv.hpp"
#include "sepo/pipeline/stages.hpp"

namespace sepo::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kRunConfigFile = "run_config.txt";

/// Canonical `key=value` lines, sorted by key; the config hash is the hash
/// of exactly this text.
class RunConfig {
public:
    void set(const std::string& key, const std::string& value) {
        if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
            throw ValidationError("run config entries must be single-line key=value, got key '" + key + "'");
        kv_[key] = value;
    }

    /// Multi-line `k=v` blocks (such as a config's canonical form) under a prefix.
    void set_block(const std::string& prefix, const std::string& block) {
        std::istringstream in(block);
        std::string line, section;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            if (line.front() == '[' && line.back() == ']') {
                section = line.substr(1, line.size() - 2) + ".";
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ValidationError("malformed config line '" + line + "'");
            set(prefix + section + line.substr(0, eq), line.substr(eq + 1));
        }
    }

    /// Records an input file by content hash; its path is not part of the config.
    void add_input(const std::string& name, const std::string& path) { set("input." + name, lm::file_hash(path)); }

    std::string text() const {
        std::string out;
        for (const auto& [k, v] : kv_) out += k + "=" + v + "\n";
        return out;
    }

    std::string hash() const { return hash_hex(text()); }

    const std::map<std::string, std::string>& entries() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

/// Staging directory that becomes the output directory on `commit`.
class OutputDir {
public:
    OutputDir(fs::path final_dir, bool overwrite) : final_(std::move(final_dir)), overwrite_(overwrite) {
        if (final_.empty()) throw ValidationError("output directory is required");
        if (fs::exists(final_) && !overwrite_)
            throw ValidationError("output directory '" + final_.string() + "' already exists (use --force)");
        staging_ = final_;
        staging_ += ".partial";
        fs::remove_all(staging_);
        fs::create_directories(staging_);
    }

    OutputDir(const OutputDir&) = delete;
    OutputDir& operator=(const OutputDir&) = delete;

    ~OutputDir() {
        if (!committed_) {
            std::error_code ec;
            fs::remove_all(staging_, ec);
        }
    }

    fs::path path(const std::string& name) const { return staging_ / name; }

    void write(const std::string& name, const std::string& content) const {
        const fs::path p = path(name);
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write '" + p.string() + "'");
        out << content;
        if (!out) throw ValidationError("short write to '" + p.string() + "'");
    }

    void commit() {
        if (fs::exists(final_)) fs::remove_all(final_);
        if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
        fs::rename(staging_, final_);
        committed_ = true;
    }

    const fs::path& final_path() const { return final_; }

private:
    fs::path final_;
    fs::path staging_;
    bool overwrite_ = false;
    bool committed_ = false;
};

inline CsvTable train_log_table(const std::vector<TrainLogRow>& log) {
    CsvTable t;
    t.header = {"step", "loss", "margin", "grad_norm", "wall_ms"};
    for (const auto& r : log) t.rows.push_back({fmt(r.step), fmt(r.loss), fmt(r.margin), fmt(r.grad_norm), fmt(r.wall_ms)});
    return t;
}

inline nlohmann::json report_json(const EvalReport& r) {
    return nlohmann::json{{"n", r.n},
                          {"wins", r.wins},
                          {"ties", r.ties},
                          {"losses", r.losses},
                          {"win_rate", r.win_rate},
                          {"ci_low", r.ci_low},
                          {"ci_high", r.ci_high},
                          {"significant_win", r.significant_win()},
                          {"mean_reward_policy", r.mean_reward_policy},
                          {"mean_reward_base", r.mean_reward_base},
                          {"mean_len_policy", r.mean_len_policy},
                          {"mean_len_base", r.mean_len_base},
                          {"temperature", r.temperature},
                          {"seed", r.seed},
                          {"config_hash", r.config_hash}};
}

/// Written next to a mask file so the policy stage can check that it is fed
/// masks from the oracle/reference pair it names.
struct MaskMeta {
    std::string oracle_hash;
    std::string ref_hash;
    std::string dataset_hash;
    double k_w = 0.0;
    double k_l = 0.0;
    std::string config_hash;

    std::string dump() const {
        return nlohmann::json{{"oracle_checkpoint_hash", oracle_hash},
                              {"ref_checkpoint_hash", ref_hash},
                              {"dataset_hash", dataset_hash},
                              {"k_w", k_w},
                              {"k_l", k_l},
                              {"config_hash", config_hash}}
                   .dump(2) +
               "\n";
    }

    static MaskMeta load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ValidationError("cannot open mask metadata '" + path + "'");
        try {
            const nlohmann::json j = nlohmann::json::parse(in);
            MaskMeta m;
            m.oracle_hash = j.at("oracle_checkpoint_hash").get<std::string>();
            m.ref_hash = j.at("ref_checkpoint_hash").get<std::string>();
            m.dataset_hash = j.at("dataset_hash").get<std::string>();
            m.k_w = j.at("k_w").get<double>();
            m.k_l = j.at("k_l").get<double>();
            m.config_hash = j.at("config_hash").get<std::string>();
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("malformed mask metadata '" + path + "': " + e.what());
        }
    }
};

inline std::string mask_meta_path(const std::string& mask_path) { return mask_path + ".meta.json"; }

struct VerifyResult {
    std::string expected_hash;
    std::size_t files_checked = 0;
    std::vector<std::string> problems;

    bool ok() const { return problems.empty(); }
};

/// Recomputes the config hash from run_config.txt and checks that every
/// CSV row, JSONL line, JSON report and checkpoint in `dir` carries it.
inline VerifyResult verify_output_dir(const fs::path& dir) {
    VerifyResult v;
    const fs::path cfg = dir / kRunConfigFile;
    std::ifstream in(cfg, std::ios::binary);
    if (!in) throw ValidationError("no " + std::string(kRunConfigFile) + " in '" + dir.string() + "'");
    std::ostringstream text;
    text << in.rdbuf();
    v.expected_hash = hash_hex(text.str());
    auto problem = [&](const fs::path& p, const std::string& what) {
        v.problems.push_back(fs::relative(p, dir).string() + ": " + what);
    };
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != kRunConfigFile) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const fs::path& p : files) {
        const std::string ext = p.extension().string();
        if (ext == ".csv") {
            ++v.files_checked;
            std::ifstream f(p);
            std::string line;
            std::size_t n = 0;
            while (std::getline(f, line)) {
                if (n++ == 0) {
                    if (line.size() < 11 || line.substr(line.size() - 11) != "config_hash")
                        problem(p, "header lacks a trailing config_hash column");
                    continue;
                }
                const auto comma = line.rfind(',');
                if (comma == std::string::npos || line.substr(comma + 1) != v.expected_hash) {
                    problem(p, "line " + std::to_string(n) + " has a different config hash");
                    break;
                }
            }
        } else if (ext == ".jsonl") {
            ++v.files_checked;
            std::ifstream f(p);
            std::string line;
            std::size_t n = 0;
            while (std::getline(f, line)) {
                ++n;
                if (line.empty()) continue;
                std::string h;
                try {
                    const auto j = nlohmann::json::parse(line);
                    if (j.contains("config_hash")) h = j["config_hash"].get<std::string>();
                    else if (j.contains("meta")) h = j["meta"].value("config_hash", std::string{});
                } catch (const nlohmann::json::exception&) {
                    problem(p, "line " + std::to_string(n) + " is not JSON");
                    break;
                }
                if (h != v.expected_hash) {
                    problem(p, "line " + std::to_string(n) + " has a different config hash");
                    break;
                }
            }
        } else if (ext == ".json") {
            ++v.files_checked;
            std::ifstream f(p);
            try {
                const auto j = nlohmann::json::parse(f);
                if (j.value("config_hash", std::string{}) != v.expected_hash) problem(p, "different config hash");
            } catch (const nlohmann::json::exception&) {
                problem(p, "not JSON");
            }
        } else if (ext == ".ckpt") {
            ++v.files_checked;
            try {
                const std::uint32_t width = lm::checkpoint_scalar_bytes(p.string());
                const std::string h = width == 4 ? lm::load_checkpoint<float>(p.string()).provenance.config_hash
                                                 : lm::load_checkpoint<double>(p.string()).provenance.config_hash;
                if (h != v.expected_hash) problem(p, "checkpoint provenance has a different config hash");
            } catch (const Error& e) {
                problem(p, e.what());
            }
        }
    }
    return v;
}

} // namespace sepo::pipeline
