#pragma once

// In-memory pipeline stages: SFT reference, DPO oracle, token scoring and
// selection, selective policy training, and synthetic-judge evaluation.
// File handling lives in the CLI; these functions only compute.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sepo/autodiff/optim.hpp"
#include "sepo/core/error.hpp"
#include "sepo/core/rng.hpp"
#include "sepo/data/dataset_io.hpp"
#include "sepo/data/synthetic.hpp"
#include "sepo/lm/checkpoint.hpp"
#include "sepo/lm/model.hpp"
#include "sepo/objectives/losses.hpp"
#include "sepo/scoring/io.hpp"
#include "sepo/scoring/selection.hpp"

namespace sepo::pipeline {

using data::Dataset;
using lm::LMConfig;
using lm::Model;
using lm::ModelCheckpoint;
using obj::TrainConfig;

struct TrainLogRow {
    std::size_t step = 0;
    double loss = 0.0;
    double margin = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
};

template <class T>
struct TrainResult {
    ModelCheckpoint<T> checkpoint;
    std::vector<TrainLogRow> log;

    double first_loss() const { return log.empty() ? 0.0 : log.front().loss; }
    /// Mean of the last `n` logged losses.
    double final_loss(std::size_t n = 10) const {
        if (log.empty()) return 0.0;
        n = std::min(n, log.size());
        double s = 0.0;
        for (std::size_t i = log.size() - n; i < log.size(); ++i) s += log[i].loss;
        return s / static_cast<double>(n);
    }
};

inline std::size_t steps_for(const TrainConfig& tc, std::size_t n_examples) {
    if (tc.steps > 0) return tc.steps;
    return tc.epochs * ((n_examples + tc.batch_size - 1) / tc.batch_size);
}

/// Batch loss callback: records the loss for the given example indices on
/// the tape and appends one margin per example.
template <class T>
using BatchLoss = std::function<ad::Var<T>(ad::Tape<T>&, std::span<const std::size_t>, std::vector<double>&)>;

/// Adam over shuffled epochs. Each epoch's order comes from the (seed,
/// epoch) substream, so a run is reproducible from its seed alone.
template <class T>
std::vector<TrainLogRow> fit(Model<T>& model, std::size_t n_examples, const TrainConfig& tc, std::uint64_t seed,
                             const BatchLoss<T>& loss_fn) {
    tc.validate();
    if (n_examples == 0) throw ValidationError("training set is empty");
    const std::size_t steps = steps_for(tc, n_examples);
    auto params = model.parameters();
    ad::Adam<T> opt(ad::AdamOptions{tc.lr});
    std::vector<std::size_t> order(n_examples);
    std::size_t cursor = n_examples, epoch = 0;
    std::vector<TrainLogRow> log;
    log.reserve(steps);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> batch;
    std::vector<double> margins;
    for (std::size_t step = 1; step <= steps; ++step) {
        batch.clear();
        while (batch.size() < std::min(tc.batch_size, n_examples)) {
            if (cursor == n_examples) {
                std::iota(order.begin(), order.end(), std::size_t{0});
                Rng rng(derive_seed(seed, "epoch", epoch++));
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        margins.clear();
        ad::zero_grads<T>(params);
        ad::Tape<T> tape;
        const ad::Var<T> loss = loss_fn(tape, batch, margins);
        const double loss_value = static_cast<double>(loss.item());
        if (!std::isfinite(loss_value))
            throw DivergenceError("non-finite loss at step " + std::to_string(step) +
                                  (log.empty() ? std::string{} : ", previous loss " + std::to_string(log.back().loss)));
        tape.backward(loss);
        const double gnorm = ad::clip_grad_norm<T>(params, tc.grad_clip);
        if (!std::isfinite(gnorm))
            throw DivergenceError("non-finite gradient norm at step " + std::to_string(step) + ", loss " +
                                  std::to_string(loss_value));
        opt.step(params);
        TrainLogRow row;
        row.step = step;
        row.loss = loss_value;
        row.margin = margins.empty() ? 0.0
                                     : std::accumulate(margins.begin(), margins.end(), 0.0) /
                                           static_cast<double>(margins.size());
        row.grad_norm = gnorm;
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        log.push_back(row);
    }
    model.drop_grads();
    return log;
}

inline void require_fits(const Dataset& ds, const LMConfig& cfg) {
    for (const auto& ex : ds.examples) {
        const std::size_t need = ex.pair.prompt.size() + std::max(ex.pair.chosen.size(), ex.pair.rejected.size());
        if (need > cfg.max_context)
            throw ValidationError("pair " + ex.pair.id + " needs " + std::to_string(need) +
                                  " positions, model max_context is " + std::to_string(cfg.max_context));
        for (const auto* seq : {&ex.pair.prompt, &ex.pair.chosen, &ex.pair.rejected})
            for (int tok : *seq)
                if (tok < 0 || static_cast<std::size_t>(tok) >= cfg.vocab_size)
                    throw ValidationError("pair " + ex.pair.id + " has token " + std::to_string(tok) +
                                          " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
}

/// Supervised fine-tuning from random init on the chosen responses.
template <class T>
TrainResult<T> run_sft(const Dataset& ds, const LMConfig& arch, const TrainConfig& tc, std::uint64_t seed,
                       lm::Role role = lm::Role::base_ref, const std::string& config_hash = {}) {
    require_fits(ds, arch);
    TrainResult<T> r;
    r.checkpoint.model = Model<T>(arch, derive_seed(seed, "init"));
    r.checkpoint.role = role;
    std::vector<obj::BatchItem> items;
    for (const auto& ex : ds.examples) items.push_back({ex.pair.prompt, ex.pair.chosen, ex.pair.rejected});
    Model<T>& model = r.checkpoint.model;
    r.log = fit<T>(model, ds.size(), tc, derive_seed(seed, "order"),
                   [&](ad::Tape<T>& tape, std::span<const std::size_t> idx, std::vector<double>&) {
                       std::vector<obj::BatchItem> b;
                       for (std::size_t i : idx) b.push_back(items[i]);
                       return obj::sft_loss(tape, model, std::span<const obj::BatchItem>(b));
                   });
    r.checkpoint.provenance = {config_hash, data::dataset_hash(ds), r.log.size()};
    return r;
}

/// DPO from the reference checkpoint; the reference stays frozen.
template <class T>
TrainResult<T> run_dpo_oracle(const Model<T>& ref, const Dataset& ds, const TrainConfig& tc, std::uint64_t seed,
                              const std::string& config_hash = {}) {
    require_fits(ds, ref.config());
    TrainResult<T> r;
    r.checkpoint.model = ref;
    r.checkpoint.role = lm::Role::oracle;
    std::vector<obj::BatchItem> items;
    std::vector<obj::PairLogProbs> ref_lp;
    for (const auto& ex : ds.examples) {
        items.push_back({ex.pair.prompt, ex.pair.chosen, ex.pair.rejected});
        ref_lp.push_back(obj::reference_logprobs(ref, items.back()));
    }
    Model<T>& model = r.checkpoint.model;
    r.log = fit<T>(model, ds.size(), tc, derive_seed(seed, "order"),
                   [&](ad::Tape<T>& tape, std::span<const std::size_t> idx, std::vector<double>& margins) {
                       std::vector<obj::BatchItem> b;
                       std::vector<obj::PairLogProbs> rl;
                       for (std::size_t i : idx) {
                           b.push_back(items[i]);
                           rl.push_back(ref_lp[i]);
                       }
                       return obj::dpo_loss(tape, model, std::span<const obj::BatchItem>(b),
                                            std::span<const obj::PairLogProbs>(rl), tc.beta, &margins);
                   });
    r.checkpoint.provenance = {config_hash, data::dataset_hash(ds), r.log.size()};
    return r;
}

/// Token scores for every pair, in dataset order.
struct ScoredPair {
    scoring::TokenScoreTable chosen;
    scoring::TokenScoreTable rejected;
};

template <class T>
std::vector<ScoredPair> score_dataset(const Model<T>& oracle, const Model<T>& ref, const Dataset& ds) {
    obj::detail::require_shared_vocab(oracle, ref, "score_dataset");
    std::vector<ScoredPair> out;
    out.reserve(ds.size());
    for (const auto& ex : ds.examples) {
        auto [c, r] = scoring::score_tokens(oracle, ref, ex.pair);
        out.push_back({std::move(c), std::move(r)});
    }
    return out;
}

/// Selection masks keyed by pair id.
struct MaskSet {
    std::map<std::string, std::pair<std::vector<std::uint8_t>, std::vector<std::uint8_t>>> by_id;

    static MaskSet from(const scoring::MaskFile& mf) {
        MaskSet m;
        for (const auto& [id, rows] : mf.by_id) m.by_id[id] = {rows.first.mask.selected, rows.second.mask.selected};
        return m;
    }
};

struct ScoreSelectResult {
    std::vector<scoring::ScoredResponse> rows;  ///< chosen then rejected, per pair
    scoring::AccumulationCurve chosen_curve;    ///< descending
    scoring::AccumulationCurve rejected_curve;  ///< ascending
    scoring::Histogram chosen_hist;
    scoring::Histogram rejected_hist;
    scoring::RecallTally recall;  ///< against planted rewards, when present
    double recall_threshold = 0.0;

    MaskSet masks() const {
        MaskSet m;
        for (std::size_t i = 0; i + 1 < rows.size(); i += 2)
            m.by_id[rows[i].table.id] = {rows[i].mask.selected, rows[i + 1].mask.selected};
        return m;
    }
};

inline ScoreSelectResult select_from_scores(const std::vector<ScoredPair>& scored, const Dataset& ds, double k_w,
                                            double k_l, std::size_t bins = 40, double recall_threshold = 1e-9) {
    ScoreSelectResult r;
    r.recall_threshold = recall_threshold;
    std::vector<scoring::TokenScoreTable> chosen, rejected;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        const auto& sp = scored[i];
        auto mw = scoring::select_tokens(sp.chosen, k_w, scoring::Side::chosen);
        auto ml = scoring::select_tokens(sp.rejected, k_l, scoring::Side::rejected);
        if (i < ds.size()) {
            const auto& gt = ds.examples[i].gt;
            if (gt.chosen.size() == mw.selected.size()) r.recall.add(mw, gt.chosen, recall_threshold);
            if (gt.rejected.size() == ml.selected.size()) r.recall.add(ml, gt.rejected, recall_threshold);
        }
        r.rows.push_back({sp.chosen, std::move(mw)});
        r.rows.push_back({sp.rejected, std::move(ml)});
        chosen.push_back(sp.chosen);
        rejected.push_back(sp.rejected);
    }
    r.chosen_curve = scoring::accumulation_curve(chosen, scoring::Order::descending);
    r.rejected_curve = scoring::accumulation_curve(rejected, scoring::Order::ascending);
    r.chosen_hist = scoring::score_histogram(chosen, bins);
    r.rejected_hist = scoring::score_histogram(rejected, bins);
    return r;
}

template <class T>
ScoreSelectResult run_score_select(const Model<T>& oracle, const Model<T>& ref, const Dataset& ds, double k_w,
                                   double k_l, std::size_t bins = 40) {
    return select_from_scores(score_dataset(oracle, ref, ds), ds, k_w, k_l, bins);
}

/// Contrastive training on selected tokens, starting from `init`.
template <class T>
TrainResult<T> run_sepo(const Model<T>& init, const Dataset& ds, const MaskSet& masks, const TrainConfig& tc,
                        std::uint64_t seed, const std::string& config_hash = {}) {
    require_fits(ds, init.config());
    std::vector<obj::BatchItem> items;
    std::vector<obj::PairMasks> pm;
    for (const auto& ex : ds.examples) {
        const auto it = masks.by_id.find(ex.pair.id);
        if (it == masks.by_id.end())
            throw ValidationError("mask set has no entry for pair '" + ex.pair.id + "' (first missing id)");
        if (it->second.first.size() != ex.pair.chosen.size() || it->second.second.size() != ex.pair.rejected.size())
            throw ValidationError("mask length does not match responses for pair '" + ex.pair.id + "'");
        items.push_back({ex.pair.prompt, ex.pair.chosen, ex.pair.rejected});
        pm.push_back({it->second.first, it->second.second});
    }
    TrainResult<T> r;
    r.checkpoint.model = init;
    r.checkpoint.role = lm::Role::policy;
    Model<T>& model = r.checkpoint.model;
    r.log = fit<T>(model, ds.size(), tc, derive_seed(seed, "order"),
                   [&](ad::Tape<T>& tape, std::span<const std::size_t> idx, std::vector<double>& margins) {
                       std::vector<obj::BatchItem> b;
                       std::vector<obj::PairMasks> m;
                       for (std::size_t i : idx) {
                           b.push_back(items[i]);
                           m.push_back(pm[i]);
                       }
                       return obj::sepo_loss(tape, model, std::span<const obj::BatchItem>(b),
                                             std::span<const obj::PairMasks>(m), tc.gamma, &margins);
                   });
    r.checkpoint.provenance = {config_hash, data::dataset_hash(ds), r.log.size()};
    return r;
}

/// Masks that select every token, the full-token contrastive baseline.
inline MaskSet full_masks(const Dataset& ds) {
    MaskSet m;
    for (const auto& ex : ds.examples)
        m.by_id[ex.pair.id] = {std::vector<std::uint8_t>(ex.pair.chosen.size(), 1),
                               std::vector<std::uint8_t>(ex.pair.rejected.size(), 1)};
    return m;
}

// ------------------------------------------------------------------ eval

struct EvalOptions {
    std::size_t n_prompts = 500;
    double temperature = 0.8;
    std::size_t max_new = 16;
};

struct EvalReport {
    std::size_t n = 0;
    std::size_t wins = 0;
    std::size_t ties = 0;
    std::size_t losses = 0;
    double win_rate = 0.5;
    double ci_low = 0.0;
    double ci_high = 1.0;
    double mean_reward_policy = 0.0;
    double mean_reward_base = 0.0;
    double mean_len_policy = 0.0;
    double mean_len_base = 0.0;
    double temperature = 0.0;
    std::uint64_t seed = 0;
    std::string config_hash;

    /// Lower confidence bound above one half.
    bool significant_win() const { return ci_low > 0.5; }
};

/// Wilson score interval at z (1.96 for 95%).
inline std::pair<double, double> wilson_interval(double p, std::size_t n, double z = 1.959963984540054) {
    if (n == 0) return {0.0, 1.0};
    const double nn = static_cast<double>(n);
    const double denom = 1.0 + z * z / nn;
    const double centre = (p + z * z / (2.0 * nn)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z * z / (4.0 * nn * nn)) / denom;
    return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

/// Samples one response per prompt from each model with the same per-prompt
/// seed and compares their planted rewards; ties count one half.
template <class T>
EvalReport run_eval(const Model<T>& policy, const Model<T>& base, const std::vector<std::vector<int>>& prompts,
                    const data::SyntheticTaskSpec& spec, const EvalOptions& opts, std::uint64_t seed) {
    if (prompts.empty()) throw ValidationError("run_eval: no prompts");
    EvalReport rep;
    rep.temperature = opts.temperature;
    rep.seed = seed;
    lm::SampleOptions so{opts.max_new, opts.temperature, false};
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const std::uint64_t s = derive_seed(seed, "eval", i);
        const auto yp = lm::sample(policy, prompts[i], so, s);
        const auto yb = lm::sample(base, prompts[i], so, s);
        const double rp = data::ground_truth_judge(prompts[i], yp, spec);
        const double rb = data::ground_truth_judge(prompts[i], yb, spec);
        if (rp > rb) ++rep.wins;
        else if (rp < rb) ++rep.losses;
        else ++rep.ties;
        rep.mean_reward_policy += rp;
        rep.mean_reward_base += rb;
        rep.mean_len_policy += static_cast<double>(yp.size());
        rep.mean_len_base += static_cast<double>(yb.size());
    }
    rep.n = prompts.size();
    const double n = static_cast<double>(rep.n);
    rep.win_rate = (static_cast<double>(rep.wins) + 0.5 * static_cast<double>(rep.ties)) / n;
    std::tie(rep.ci_low, rep.ci_high) = wilson_interval(rep.win_rate, rep.n);
    rep.mean_reward_policy /= n;
    rep.mean_reward_base /= n;
    rep.mean_len_policy /= n;
    rep.mean_len_base /= n;
    return rep;
}

} // namespace sepo::pipeline
