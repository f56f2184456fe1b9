#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sepo/autodiff/ops.hpp"
#include "sepo/autodiff/tape.hpp"
#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/data/synthetic.hpp"
#include "sepo/lm/model.hpp"

namespace sepo::obj {

using ad::Tape;
using ad::Var;
using lm::Model;

/// Hyperparameters shared by the three training objectives.
struct TrainConfig {
    double beta = 0.1;   ///< DPO KL coefficient
    double gamma = 1.0;  ///< SePO reward scale
    double k_w = 30.0;   ///< chosen-side selection percentage
    double k_l = 30.0;   ///< rejected-side selection percentage
    double lr = 1e-3;
    std::size_t steps = 0;   ///< optimizer steps; 0 means `epochs` passes over the data
    std::size_t epochs = 1;
    std::size_t batch_size = 16;
    double grad_clip = 0.0;  ///< max global grad norm, 0 disables
    std::uint64_t seed = 0;
    int precision = 64;

    void validate() const {
        if (!(beta > 0.0)) throw ValidationError("beta must be positive");
        if (!(gamma > 0.0)) throw ValidationError("gamma must be positive");
        if (!(k_w > 0.0 && k_w <= 100.0) || !(k_l > 0.0 && k_l <= 100.0))
            throw ValidationError("selection percentages must be in (0, 100]");
        if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
        if (batch_size == 0) throw ValidationError("batch_size must be positive");
        if (epochs == 0) throw ValidationError("epochs must be positive");
        if (precision != 64 && precision != 32) throw ValidationError("precision must be 64 or 32");
    }

    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "beta=" << beta << "\ngamma=" << gamma << "\nk_w=" << k_w << "\nk_l=" << k_l << "\nlr=" << lr
           << "\nsteps=" << steps << "\nepochs=" << epochs << "\nbatch_size=" << batch_size << "\ngrad_clip=" << grad_clip << "\nseed=" << seed
           << "\nprecision=" << precision << "\n";
        return os.str();
    }
};

/// One pair as exact-length token views. Padding is stripped before a pair
/// reaches a loss, so pad tokens never enter a probability.
struct BatchItem {
    std::span<const int> prompt;
    std::span<const int> chosen;
    std::span<const int> rejected;
};

inline std::vector<BatchItem> make_batch(std::span<const data::PreferencePair> pairs) {
    std::vector<BatchItem> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back({p.prompt, p.chosen, p.rejected});
    return out;
}

/// Right-padded storage with explicit response lengths.
struct PaddedBatch {
    std::vector<std::vector<int>> prompts, chosen, rejected;
    std::vector<std::size_t> chosen_len, rejected_len;

    static PaddedBatch from(std::span<const data::PreferencePair> pairs, std::size_t pad_to) {
        PaddedBatch b;
        for (const auto& p : pairs) {
            b.prompts.push_back(p.prompt);
            auto padded = [pad_to](std::vector<int> v) {
                if (v.size() < pad_to) v.resize(pad_to, lm::kPad);
                return v;
            };
            b.chosen.push_back(padded(p.chosen));
            b.rejected.push_back(padded(p.rejected));
            b.chosen_len.push_back(p.chosen.size());
            b.rejected_len.push_back(p.rejected.size());
        }
        return b;
    }

    std::vector<BatchItem> items() const {
        std::vector<BatchItem> out;
        for (std::size_t i = 0; i < prompts.size(); ++i)
            out.push_back({prompts[i], std::span<const int>(chosen[i]).first(chosen_len[i]),
                           std::span<const int>(rejected[i]).first(rejected_len[i])});
        return out;
    }
};

/// Joint log-probabilities log pi(y|q) of chosen and rejected responses.
struct PairLogProbs {
    double chosen = 0.0;
    double rejected = 0.0;
};

namespace detail {

inline void require_nonempty(std::span<const BatchItem> batch, const char* what) {
    if (batch.empty()) throw ValidationError(std::string(what) + ": empty batch");
}

template <class T>
void require_shared_vocab(const Model<T>& a, const Model<T>& b, const char* what) {
    if (a.config().vocab_size != b.config().vocab_size)
        throw ValidationError(std::string(what) + ": vocabulary mismatch (" + std::to_string(a.config().vocab_size) +
                              " vs " + std::to_string(b.config().vocab_size) + ")");
}

template <class T>
Var<T> joint_logprob(Tape<T>& tape, Model<T>& model, std::span<const int> prompt, std::span<const int> response) {
    Var<T> lp = lm::response_logprob_vars(tape, model, prompt, response);
    const std::vector<T> ones(response.size(), T{1});
    return ad::weighted_sum(lp, std::span<const T>(ones));
}

template <class T>
Var<T> batch_mean(std::vector<Var<T>> terms, T sign) {
    const std::vector<T> coeffs(terms.size(), sign / static_cast<T>(terms.size()));
    return ad::linear_combination<T>(terms, coeffs);
}

} // namespace detail

/// Mean over the batch of -sum_i log pi(y_w^i | q, y_w^<i).
template <class T>
Var<T> sft_loss(Tape<T>& tape, Model<T>& model, std::span<const BatchItem> batch) {
    detail::require_nonempty(batch, "sft_loss");
    std::vector<Var<T>> terms;
    for (const BatchItem& item : batch) terms.push_back(detail::joint_logprob(tape, model, item.prompt, item.chosen));
    return detail::batch_mean(std::move(terms), T{-1});
}

/// Reference joint log-probs, computed without gradient tracking.
template <class T>
PairLogProbs reference_logprobs(const Model<T>& ref, const BatchItem& item) {
    return {static_cast<double>(lm::response_logprobs(ref, item.prompt, item.chosen).sum()),
            static_cast<double>(lm::response_logprobs(ref, item.prompt, item.rejected).sum())};
}

/// DPO with precomputed reference terms:
/// mean of -log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l))).
template <class T>
Var<T> dpo_loss(Tape<T>& tape, Model<T>& policy, std::span<const BatchItem> batch, std::span<const PairLogProbs> ref,
                double beta, std::vector<double>* margins = nullptr) {
    detail::require_nonempty(batch, "dpo_loss");
    if (ref.size() != batch.size()) throw DimensionError("dpo_loss: reference terms do not match batch size");
    std::vector<Var<T>> terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Var<T> w = detail::joint_logprob(tape, policy, batch[i].prompt, batch[i].chosen);
        const Var<T> l = detail::joint_logprob(tape, policy, batch[i].prompt, batch[i].rejected);
        const Var<T> parts[] = {w, l};
        const T coeffs[] = {static_cast<T>(beta), static_cast<T>(-beta)};
        const T offset = static_cast<T>(-beta * (ref[i].chosen - ref[i].rejected));
        const Var<T> z = ad::linear_combination<T>(parts, coeffs, offset);
        if (margins) margins->push_back(static_cast<double>(z.item()));
        terms.push_back(ad::logsigmoid(z));
    }
    return detail::batch_mean(std::move(terms), T{-1});
}

template <class T>
Var<T> dpo_loss(Tape<T>& tape, Model<T>& policy, const Model<T>& ref, std::span<const BatchItem> batch, double beta) {
    detail::require_shared_vocab(policy, ref, "dpo_loss");
    std::vector<PairLogProbs> r;
    for (const BatchItem& item : batch) r.push_back(reference_logprobs(ref, item));
    return dpo_loss(tape, policy, batch, std::span<const PairLogProbs>(r), beta);
}

/// Selection masks for one pair, one flag per response token.
struct PairMasks {
    std::span<const std::uint8_t> chosen;
    std::span<const std::uint8_t> rejected;
};

namespace detail {

template <class T>
Var<T> selected_mean(Tape<T>& tape, Model<T>& model, std::span<const int> prompt, std::span<const int> response,
                     std::span<const std::uint8_t> mask, double gamma) {
    if (mask.size() != response.size())
        throw DimensionError("sepo_loss: mask length " + std::to_string(mask.size()) + " vs response length " +
                             std::to_string(response.size()));
    std::size_t n_sel = 0;
    for (auto m : mask) n_sel += m ? 1 : 0;
    if (n_sel == 0) throw UsageError("sepo_loss: selection mask is empty; every response needs a selected token");
    std::vector<T> w(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i)
        w[i] = mask[i] ? static_cast<T>(gamma / static_cast<double>(n_sel)) : T{0};
    return ad::weighted_sum(lm::response_logprob_vars(tape, model, prompt, response), std::span<const T>(w));
}

} // namespace detail

/// Reference-free contrastive loss on selected tokens only:
/// mean of -log sigmoid(u_w - u_l), u = gamma/n_sel * sum_i mask_i log pi(y_i|...).
template <class T>
Var<T> sepo_loss(Tape<T>& tape, Model<T>& policy, std::span<const BatchItem> batch, std::span<const PairMasks> masks,
                 double gamma, std::vector<double>* margins = nullptr) {
    detail::require_nonempty(batch, "sepo_loss");
    if (masks.size() != batch.size()) throw DimensionError("sepo_loss: one mask pair per batch item required");
    std::vector<Var<T>> terms;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Var<T> uw = detail::selected_mean(tape, policy, batch[i].prompt, batch[i].chosen, masks[i].chosen, gamma);
        const Var<T> ul =
            detail::selected_mean(tape, policy, batch[i].prompt, batch[i].rejected, masks[i].rejected, gamma);
        const Var<T> z = ad::sub(uw, ul);
        if (margins) margins->push_back(static_cast<double>(z.item()));
        terms.push_back(ad::logsigmoid(z));
    }
    return detail::batch_mean(std::move(terms), T{-1});
}

/// Scalar loss values for evaluation, no gradient tracking.
template <class T>
double sft_loss_value(const Model<T>& model, std::span<const BatchItem> batch) {
    Tape<T> tape(false);
    return static_cast<double>(sft_loss(tape, const_cast<Model<T>&>(model), batch).item());
}

template <class T>
double dpo_loss_value(const Model<T>& policy, const Model<T>& ref, std::span<const BatchItem> batch, double beta) {
    Tape<T> tape(false);
    return static_cast<double>(dpo_loss(tape, const_cast<Model<T>&>(policy), ref, batch, beta).item());
}

template <class T>
double sepo_loss_value(const Model<T>& policy, std::span<const BatchItem> batch, std::span<const PairMasks> masks,
                       double gamma) {
    Tape<T> tape(false);
    return static_cast<double>(sepo_loss(tape, const_cast<Model<T>&>(policy), batch, masks, gamma).item());
}

/// beta * (log pi_oracle(y_i|...) - log pi_ref(y_i|...)) per response token.
template <class T>
std::vector<double> implicit_token_rewards(const Model<T>& oracle, const Model<T>& ref, std::span<const int> prompt,
                                           std::span<const int> response, double beta) {
    detail::require_shared_vocab(oracle, ref, "implicit_token_rewards");
    const auto lo = lm::response_logprobs(oracle, prompt, response);
    const auto lr = lm::response_logprobs(ref, prompt, response);
    std::vector<double> out(response.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = beta * (static_cast<double>(lo.values[i]) - static_cast<double>(lr.values[i]));
    return out;
}

/// beta * u per pair, the quantity inside the DPO sigmoid.
template <class T>
std::vector<double> zero_one_reward_margin(const Model<T>& policy, const Model<T>& ref,
                                           std::span<const BatchItem> batch, double beta) {
    detail::require_shared_vocab(policy, ref, "zero_one_reward_margin");
    std::vector<double> out;
    for (const BatchItem& item : batch) {
        const PairLogProbs p = reference_logprobs(policy, item);
        const PairLogProbs r = reference_logprobs(ref, item);
        out.push_back(beta * ((p.chosen - r.chosen) - (p.rejected - r.rejected)));
    }
    return out;
}

} // namespace sepo::obj
