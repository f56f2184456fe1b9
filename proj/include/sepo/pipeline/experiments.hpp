#pragma once

// End-to-end experiment drivers: the main three-step pipeline and the four
// sweeps. Every random choice comes from the root seed through named
// substreams, so any single cell can be rerun on its own.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/core/rng.hpp"
#include "sepo/data/synthetic.hpp"
#include "sepo/lm/model.hpp"
#include "sepo/pipeline/csv.hpp"
#include "sepo/pipeline/stages.hpp"
#include "sepo/scoring/selection.hpp"

namespace sepo::pipeline {

inline LMConfig make_arch(std::size_t layers, std::size_t heads, std::size_t d_model) {
    LMConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d_model;
    return c;
}

struct ExperimentConfig {
    data::SyntheticTaskSpec task;
    std::size_t n_target = 10000;
    std::size_t n_oracle = 2000;
    LMConfig oracle_arch = make_arch(1, 2, 32);
    LMConfig policy_arch = make_arch(4, 4, 128);
    TrainConfig ref_train = [] {
        TrainConfig t;
        t.lr = 3e-3;
        t.epochs = 2;
        return t;
    }();
    TrainConfig oracle_train = [] {
        TrainConfig t;
        t.beta = 1.0;
        t.lr = 1e-3;
        t.epochs = 3;
        return t;
    }();
    TrainConfig init_train = [] {
        TrainConfig t;
        t.lr = 3e-3;
        return t;
    }();
    TrainConfig sepo_train = [] {
        TrainConfig t;
        t.lr = 1e-4;
        return t;
    }();
    EvalOptions eval;
    std::size_t jobs = 1;  ///< worker threads for sweep cells

    /// Context long enough for training pairs and for sampled continuations.
    std::size_t context_needed() const {
        return std::max(task.max_sequence(), 1 + task.prompt_len_max + eval.max_new);
    }

    /// Fills the vocabulary and context of both architectures from the task.
    void sync_archs() {
        for (LMConfig* a : {&oracle_arch, &policy_arch}) {
            a->vocab_size = task.vocab_size();
            a->max_context = context_needed();
        }
    }

    void validate() const {
        task.validate();
        oracle_arch.validate();
        policy_arch.validate();
        for (const TrainConfig* t : {&ref_train, &oracle_train, &init_train, &sepo_train}) t->validate();
        if (n_target == 0 || n_oracle == 0) throw ValidationError("dataset sizes must be positive");
        if (eval.n_prompts == 0) throw ValidationError("eval needs at least one prompt");
        if (!(eval.temperature > 0.0)) throw ValidationError("eval temperature must be positive");
        if (jobs == 0) throw ValidationError("jobs must be positive");
        for (const LMConfig* a : {&oracle_arch, &policy_arch})
            if (a->vocab_size != task.vocab_size() || a->max_context < context_needed())
                throw ValidationError("architecture does not cover the task vocabulary/context");
    }

    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "[task]\n" << task.canonical() << "[sizes]\nn_target=" << n_target << "\nn_oracle=" << n_oracle
           << "\n[oracle_arch]\n" << oracle_arch.canonical() << "[policy_arch]\n" << policy_arch.canonical()
           << "[ref_train]\n" << ref_train.canonical() << "[oracle_train]\n" << oracle_train.canonical()
           << "[init_train]\n" << init_train.canonical() << "[sepo_train]\n" << sepo_train.canonical()
           << "[eval]\nn_prompts=" << eval.n_prompts << "\ntemperature=" << eval.temperature
           << "\nmax_new=" << eval.max_new << "\n";
        return os.str();
    }
};

/// Data shared by every cell of one seed.
struct SeedData {
    std::uint64_t seed = 0;
    Dataset target;
    Dataset oracle_set;
    std::vector<std::vector<int>> prompts;
};

inline SeedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedData d;
    d.seed = seed;
    d.target = data::generate_dataset(cfg.task, cfg.n_target, derive_seed(seed, "target"));
    const double frac = std::min(1.0, static_cast<double>(cfg.n_oracle) / static_cast<double>(cfg.n_target));
    d.oracle_set = data::random_subsample(d.target, frac, derive_seed(seed, "oracle-subset"));
    d.prompts = data::generate_prompts(cfg.task, cfg.eval.n_prompts, derive_seed(seed, "eval-prompts"));
    return d;
}

template <class T>
struct OraclePair {
    TrainResult<T> ref;
    TrainResult<T> oracle;
};

template <class T>
OraclePair<T> train_oracle(const LMConfig& arch, const ExperimentConfig& cfg, const Dataset& oracle_set,
                           std::uint64_t seed, const std::string& config_hash = {}) {
    OraclePair<T> p;
    p.ref = run_sft<T>(oracle_set, arch, cfg.ref_train, derive_seed(seed, "ref"), lm::Role::base_ref, config_hash);
    p.oracle = run_dpo_oracle<T>(p.ref.checkpoint.model, oracle_set, cfg.oracle_train, derive_seed(seed, "oracle"),
                                 config_hash);
    return p;
}

template <class T>
TrainResult<T> train_policy_init(const ExperimentConfig& cfg, const Dataset& target, std::uint64_t seed,
                                 const std::string& config_hash = {}) {
    return run_sft<T>(target, cfg.policy_arch, cfg.init_train, derive_seed(seed, "policy-init"), lm::Role::policy,
                      config_hash);
}

struct ArmResult {
    double k_w = 0.0;
    double k_l = 0.0;
    EvalReport report;
    double first_loss = 0.0;
    double final_loss = 0.0;
    std::size_t steps = 0;
};

/// SePO from `init` on `train` with the given masks, then eval vs `init`.
/// Arms of one seed share the training order and the eval samples.
template <class T>
ArmResult run_arm(const ExperimentConfig& cfg, const Model<T>& init, const Dataset& train, const MaskSet& masks,
                  double k_w, double k_l, const std::vector<std::vector<int>>& prompts, std::uint64_t seed,
                  TrainResult<T>* keep = nullptr) {
    TrainConfig tc = cfg.sepo_train;
    tc.k_w = k_w;
    tc.k_l = k_l;
    TrainResult<T> tr = run_sepo<T>(init, train, masks, tc, derive_seed(seed, "sepo"));
    ArmResult a;
    a.k_w = k_w;
    a.k_l = k_l;
    a.first_loss = tr.first_loss();
    a.final_loss = tr.final_loss();
    a.steps = tr.log.size();
    a.report = run_eval(tr.checkpoint.model, init, prompts, cfg.task, cfg.eval, derive_seed(seed, "eval"));
    if (keep) *keep = std::move(tr);
    return a;
}

/// Runs fn(0..n-1) on up to `jobs` threads. The first exception is rethrown
/// after all workers finish.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(jobs, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first) first = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first) std::rethrow_exception(first);
}

inline std::string describe(const std::exception& e) { return e.what(); }

// ------------------------------------------------------------ main pipeline

template <class T>
struct PipelineResult {
    std::uint64_t seed = 0;
    double recall = 0.0;
    double random_recall = 0.0;
    std::size_t oracle_params = 0;
    std::size_t policy_params = 0;
    ArmResult selective;  ///< k_w = k_l from sepo_train
    ArmResult full;       ///< k = 100
    ScoreSelectResult selection;
};

template <class T>
PipelineResult<T> run_pipeline(const ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PipelineResult<T> r;
    r.seed = seed;
    const SeedData d = prepare_data(cfg, seed);
    const OraclePair<T> op = train_oracle<T>(cfg.oracle_arch, cfg, d.oracle_set, seed);
    const auto scores = score_dataset(op.oracle.checkpoint.model, op.ref.checkpoint.model, d.target);
    r.selection = select_from_scores(scores, d.target, cfg.sepo_train.k_w, cfg.sepo_train.k_l);
    r.recall = r.selection.recall.recall().value_or(0.0);
    r.random_recall = r.selection.recall.random_baseline().value_or(0.0);
    const TrainResult<T> init = train_policy_init<T>(cfg, d.target, seed);
    r.oracle_params = lm::param_count(op.oracle.checkpoint.model);
    r.policy_params = lm::param_count(init.checkpoint.model);
    r.selective = run_arm<T>(cfg, init.checkpoint.model, d.target, r.selection.masks(), cfg.sepo_train.k_w,
                             cfg.sepo_train.k_l, d.prompts, seed);
    r.full = run_arm<T>(cfg, init.checkpoint.model, d.target, full_masks(d.target), 100.0, 100.0, d.prompts, seed);
    return r;
}

// ------------------------------------------------------------------ sweeps

inline std::vector<std::string> report_header() {
    return {"win_rate", "ci_low", "ci_high", "n", "wins", "ties", "losses", "mean_reward", "base_mean_reward",
            "mean_len", "base_mean_len", "temperature"};
}

inline std::vector<std::string> report_cells(const EvalReport& r) {
    return {fmt(r.win_rate), fmt(r.ci_low), fmt(r.ci_high), fmt(r.n), fmt(r.wins), fmt(r.ties), fmt(r.losses),
            fmt(r.mean_reward_policy), fmt(r.mean_reward_base), fmt(r.mean_len_policy), fmt(r.mean_len_base),
            fmt(r.temperature)};
}

inline std::vector<std::string> blank_report_cells() { return std::vector<std::string>(report_header().size()); }

struct SelectionCell {
    std::uint64_t seed = 0;
    double k_w = 0.0;
    double k_l = 0.0;
    std::optional<ArmResult> arm;
    std::string error;
};

struct SelectionSweep {
    std::vector<SelectionCell> cells;

    const SelectionCell* find(std::uint64_t seed, double k_w, double k_l) const {
        for (const auto& c : cells)
            if (c.seed == seed && c.k_w == k_w && c.k_l == k_l) return &c;
        return nullptr;
    }

    CsvTable table() const {
        CsvTable t;
        t.header = {"seed", "k_w", "k_l"};
        for (auto& h : report_header()) t.header.push_back(h);
        t.header.push_back("final_loss");
        t.header.push_back("error");
        for (const auto& c : cells) {
            std::vector<std::string> row{fmt(c.seed), fmt(c.k_w), fmt(c.k_l)};
            auto rep = c.arm ? report_cells(c.arm->report) : blank_report_cells();
            row.insert(row.end(), rep.begin(), rep.end());
            row.push_back(c.arm ? fmt(c.arm->final_loss) : "");
            row.push_back(c.error);
            t.rows.push_back(std::move(row));
        }
        return t;
    }
};

inline const std::vector<double>& default_selection_grid() {
    static const std::vector<double> g{10, 30, 50, 70, 90};
    return g;
}

/// Score once per seed, then one SePO run per (k_w, k_l) cell. A failing
/// cell records its error and the sweep moves on.
template <class T>
SelectionSweep sweep_selection(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                               const std::vector<std::pair<double, double>>& cells) {
    cfg.validate();
    SelectionSweep out;
    for (std::uint64_t seed : seeds) {
        const SeedData d = prepare_data(cfg, seed);
        const OraclePair<T> op = train_oracle<T>(cfg.oracle_arch, cfg, d.oracle_set, seed);
        const auto scores = score_dataset(op.oracle.checkpoint.model, op.ref.checkpoint.model, d.target);
        const TrainResult<T> init = train_policy_init<T>(cfg, d.target, seed);
        std::vector<SelectionCell> row(cells.size());
        parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
            SelectionCell& c = row[i];
            c.seed = seed;
            c.k_w = cells[i].first;
            c.k_l = cells[i].second;
            try {
                const auto sel = select_from_scores(scores, d.target, c.k_w, c.k_l);
                c.arm = run_arm<T>(cfg, init.checkpoint.model, d.target, sel.masks(), c.k_w, c.k_l, d.prompts, seed);
            } catch (const std::exception& e) {
                c.error = describe(e);
            }
        });
        out.cells.insert(out.cells.end(), row.begin(), row.end());
    }
    return out;
}

inline std::vector<std::pair<double, double>> full_grid(const std::vector<double>& ks) {
    std::vector<std::pair<double, double>> g;
    for (double kw : ks)
        for (double kl : ks) g.emplace_back(kw, kl);
    return g;
}

struct DataScaleCell {
    std::uint64_t seed = 0;
    double fraction = 0.0;
    std::size_t n_pairs = 0;
    double recall = 0.0;
    std::optional<ArmResult> arm;
    std::string error;
};

struct DataScaleSummary {
    double fraction = 0.0;
    std::size_t n = 0;
    double mean = 0.0;
    double sd = 0.0;
};

struct DataScaleSweep {
    std::vector<DataScaleCell> cells;

    std::vector<DataScaleSummary> summary() const {
        std::vector<double> fr;
        for (const auto& c : cells)
            if (std::find(fr.begin(), fr.end(), c.fraction) == fr.end()) fr.push_back(c.fraction);
        std::sort(fr.begin(), fr.end());
        std::vector<DataScaleSummary> out;
        for (double f : fr) {
            DataScaleSummary s;
            s.fraction = f;
            std::vector<double> v;
            for (const auto& c : cells)
                if (c.fraction == f && c.arm) v.push_back(c.arm->report.win_rate);
            s.n = v.size();
            if (!v.empty()) {
                for (double x : v) s.mean += x;
                s.mean /= double(v.size());
                for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
                s.sd = v.size() > 1 ? std::sqrt(s.sd / double(v.size() - 1)) : 0.0;
            }
            out.push_back(s);
        }
        return out;
    }

    /// Mean win rate never decreases with the oracle data fraction.
    bool monotone() const {
        const auto s = summary();
        for (std::size_t i = 1; i < s.size(); ++i)
            if (s[i].mean < s[i - 1].mean) return false;
        return true;
    }

    CsvTable table() const {
        CsvTable t;
        t.header = {"seed", "fraction", "n_oracle_pairs", "recall"};
        for (auto& h : report_header()) t.header.push_back(h);
        t.header.push_back("error");
        for (const auto& c : cells) {
            std::vector<std::string> row{fmt(c.seed), fmt(c.fraction), fmt(c.n_pairs), c.arm ? fmt(c.recall) : ""};
            auto rep = c.arm ? report_cells(c.arm->report) : blank_report_cells();
            row.insert(row.end(), rep.begin(), rep.end());
            row.push_back(c.error);
            t.rows.push_back(std::move(row));
        }
        return t;
    }

    CsvTable summary_table() const {
        CsvTable t;
        t.header = {"fraction", "n_seeds", "mean_win_rate", "sd_win_rate", "monotone_trend"};
        const bool mono = monotone();
        for (const auto& s : summary())
            t.rows.push_back({fmt(s.fraction), fmt(s.n), fmt(s.mean), fmt(s.sd), mono ? "true" : "false"});
        return t;
    }
};

inline std::vector<double> default_fractions() {
    std::vector<double> f;
    for (int i = 1; i <= 10; ++i) f.push_back(i / 10.0);
    return f;
}

/// The reference stays fixed per seed; each cell trains a fresh DPO oracle
/// on a random fraction of the oracle subset.
template <class T>
DataScaleSweep sweep_datascale(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                               const std::vector<double>& fractions) {
    cfg.validate();
    DataScaleSweep out;
    for (std::uint64_t seed : seeds) {
        const SeedData d = prepare_data(cfg, seed);
        const TrainResult<T> ref = run_sft<T>(d.oracle_set, cfg.oracle_arch, cfg.ref_train, derive_seed(seed, "ref"));
        const TrainResult<T> init = train_policy_init<T>(cfg, d.target, seed);
        std::vector<DataScaleCell> row(fractions.size());
        parallel_for(fractions.size(), cfg.jobs, [&](std::size_t i) {
            DataScaleCell& c = row[i];
            c.seed = seed;
            c.fraction = fractions[i];
            try {
                const Dataset sub = data::random_subsample(d.oracle_set, c.fraction, derive_seed(seed, "fraction", i));
                c.n_pairs = sub.size();
                const auto oracle = run_dpo_oracle<T>(ref.checkpoint.model, sub, cfg.oracle_train,
                                                      derive_seed(seed, "oracle"));
                const auto scores = score_dataset(oracle.checkpoint.model, ref.checkpoint.model, d.target);
                const auto sel = select_from_scores(scores, d.target, cfg.sepo_train.k_w, cfg.sepo_train.k_l);
                c.recall = sel.recall.recall().value_or(0.0);
                c.arm = run_arm<T>(cfg, init.checkpoint.model, d.target, sel.masks(), cfg.sepo_train.k_w,
                                   cfg.sepo_train.k_l, d.prompts, seed);
            } catch (const std::exception& e) {
                c.error = describe(e);
            }
        });
        out.cells.insert(out.cells.end(), row.begin(), row.end());
    }
    return out;
}

struct OracleSize {
    std::string label;
    LMConfig arch;
};

struct W2SCell {
    std::uint64_t seed = 0;
    std::string label;
    std::size_t oracle_params = 0;
    std::size_t policy_params = 0;
    double recall = 0.0;
    double score_sd = 0.0;
    std::optional<ArmResult> arm;
    std::string warning;
    std::string error;
    scoring::Histogram chosen_hist;
    scoring::Histogram rejected_hist;

    double ratio() const { return oracle_params ? double(policy_params) / double(oracle_params) : 0.0; }
};

struct W2SSweep {
    std::vector<W2SCell> cells;

    CsvTable table() const {
        CsvTable t;
        t.header = {"seed", "oracle", "oracle_params", "policy_params", "param_ratio", "recall", "score_sd"};
        for (auto& h : report_header()) t.header.push_back(h);
        t.header.push_back("warning");
        t.header.push_back("error");
        for (const auto& c : cells) {
            std::vector<std::string> row{fmt(c.seed),          c.label,        fmt(c.oracle_params),
                                         fmt(c.policy_params), fmt(c.ratio()), c.arm ? fmt(c.recall) : "",
                                         c.arm ? fmt(c.score_sd) : ""};
            auto rep = c.arm ? report_cells(c.arm->report) : blank_report_cells();
            row.insert(row.end(), rep.begin(), rep.end());
            row.push_back(c.warning);
            row.push_back(c.error);
            t.rows.push_back(std::move(row));
        }
        return t;
    }
};

/// One full pipeline per oracle size against a shared policy init.
template <class T>
W2SSweep sweep_w2s(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                   const std::vector<OracleSize>& oracles) {
    cfg.validate();
    if (oracles.empty()) throw ValidationError("weak-to-strong sweep needs at least one oracle size");
    W2SSweep out;
    for (std::uint64_t seed : seeds) {
        const SeedData d = prepare_data(cfg, seed);
        const TrainResult<T> init = train_policy_init<T>(cfg, d.target, seed);
        std::vector<W2SCell> row(oracles.size());
        parallel_for(oracles.size(), cfg.jobs, [&](std::size_t i) {
            W2SCell& c = row[i];
            c.seed = seed;
            c.label = oracles[i].label;
            c.policy_params = lm::param_count(init.checkpoint.model);
            try {
                LMConfig arch = oracles[i].arch;
                arch.vocab_size = cfg.policy_arch.vocab_size;
                arch.max_context = cfg.policy_arch.max_context;
                arch.validate();
                c.oracle_params = lm::param_count(arch);
                if (c.oracle_params >= c.policy_params)
                    c.warning = "oracle is not smaller than the policy";
                const OraclePair<T> op = train_oracle<T>(arch, cfg, d.oracle_set, seed);
                const auto scores = score_dataset(op.oracle.checkpoint.model, op.ref.checkpoint.model, d.target);
                const auto sel = select_from_scores(scores, d.target, cfg.sepo_train.k_w, cfg.sepo_train.k_l);
                c.recall = sel.recall.recall().value_or(0.0);
                c.chosen_hist = sel.chosen_hist;
                c.rejected_hist = sel.rejected_hist;
                const double n = double(sel.chosen_hist.total() + sel.rejected_hist.total());
                const double mean = (sel.chosen_hist.mean * double(sel.chosen_hist.total()) +
                                     sel.rejected_hist.mean * double(sel.rejected_hist.total())) / n;
                double sq = 0.0;
                for (const auto* h : {&sel.chosen_hist, &sel.rejected_hist})
                    sq += double(h->total()) * (h->stddev * h->stddev + (h->mean - mean) * (h->mean - mean));
                c.score_sd = std::sqrt(sq / n);
                c.arm = run_arm<T>(cfg, init.checkpoint.model, d.target, sel.masks(), cfg.sepo_train.k_w,
                                   cfg.sepo_train.k_l, d.prompts, seed);
            } catch (const std::exception& e) {
                c.error = describe(e);
            }
        });
        out.cells.insert(out.cells.end(), row.begin(), row.end());
    }
    return out;
}

struct WeakDataCell {
    std::uint64_t seed = 0;
    std::string arm_name;
    double k = 0.0;
    std::optional<ArmResult> arm;
    std::string error;

    double delta() const { return arm ? arm->report.win_rate - 0.5 : 0.0; }
};

struct WeakDataRun {
    std::vector<WeakDataCell> cells;
    double ood_label_flip_rate = 0.0;  ///< measured against the clean regeneration

    const WeakDataCell* find(std::uint64_t seed, const std::string& arm) const {
        for (const auto& c : cells)
            if (c.seed == seed && c.arm_name == arm) return &c;
        return nullptr;
    }

    CsvTable table() const {
        CsvTable t;
        t.header = {"seed", "arm", "k"};
        for (auto& h : report_header()) t.header.push_back(h);
        t.header.insert(t.header.end(), {"delta", "delta_sign", "error"});
        for (const auto& c : cells) {
            std::vector<std::string> row{fmt(c.seed), c.arm_name, fmt(c.k)};
            auto rep = c.arm ? report_cells(c.arm->report) : blank_report_cells();
            row.insert(row.end(), rep.begin(), rep.end());
            const double dl = c.delta();
            row.push_back(c.arm ? fmt(dl) : "");
            row.push_back(c.arm ? (dl > 0 ? "+" : dl < 0 ? "-" : "0") : "");
            row.push_back(c.error);
            t.rows.push_back(std::move(row));
        }
        return t;
    }
};

/// Both arms train from the same pre-update policy on the shifted set; the
/// oracle is fit on a subset of that shifted set.
template <class T>
WeakDataRun run_weak_data(const ExperimentConfig& cfg, const data::ShiftDescriptor& shift,
                          const std::vector<std::uint64_t>& seeds, double selective_k = 30.0) {
    cfg.validate();
    if (shift.empty()) throw ValidationError("weak-data run needs a non-empty distribution shift");
    WeakDataRun out;
    std::size_t flips = 0, total = 0;
    for (std::uint64_t seed : seeds) {
        const SeedData d = prepare_data(cfg, seed);
        const TrainResult<T> init = train_policy_init<T>(cfg, d.target, seed);
        const Dataset ood = data::make_ood_dataset(cfg.task, shift, cfg.n_target, derive_seed(seed, "ood"));
        data::ShiftDescriptor clean_shift = shift;
        clean_shift.noise.reset();
        const Dataset clean = data::generate_dataset(clean_shift.apply(cfg.task), cfg.n_target, derive_seed(seed, "ood"));
        for (std::size_t i = 0; i < ood.size(); ++i, ++total)
            flips += ood.examples[i].pair.chosen != clean.examples[i].pair.chosen ? 1 : 0;
        std::vector<WeakDataCell> row(2);
        row[0].arm_name = "selective";
        row[0].k = selective_k;
        row[1].arm_name = "full";
        row[1].k = 100.0;
        for (auto& c : row) c.seed = seed;
        try {
            const double frac = std::min(1.0, double(cfg.n_oracle) / double(ood.size()));
            const Dataset ood_oracle = data::random_subsample(ood, frac, derive_seed(seed, "oracle-subset"));
            const OraclePair<T> op = train_oracle<T>(cfg.oracle_arch, cfg, ood_oracle, seed);
            const auto scores = score_dataset(op.oracle.checkpoint.model, op.ref.checkpoint.model, ood);
            const auto sel = select_from_scores(scores, ood, selective_k, selective_k);
            const MaskSet masks[2] = {sel.masks(), full_masks(ood)};
            parallel_for(2, cfg.jobs, [&](std::size_t i) {
                try {
                    row[i].arm = run_arm<T>(cfg, init.checkpoint.model, ood, masks[i], row[i].k, row[i].k, d.prompts, seed);
                } catch (const std::exception& e) {
                    row[i].error = describe(e);
                }
            });
        } catch (const std::exception& e) {
            for (auto& c : row) c.error = describe(e);
        }
        out.cells.insert(out.cells.end(), row.begin(), row.end());
    }
    out.ood_label_flip_rate = total ? double(flips) / double(total) : 0.0;
    return out;
}

} // namespace sepo::pipeline
