#pragma once

// Synthetic preference data with planted token-level rewards.
//
// Every response is filler text with a few planted key tokens. Under the
// after_marker rule a key is the token right after a marker symbol; under the
// anywhere rule every good- or bad-set token is a key. A good key earns
// +reward_gap/2, a bad key -reward_gap/2. Nothing else is rewarded, so
// a response's reward is exactly the sum of its token rewards. Each response
// has a latent style (good with probability p_good) that all its keys follow.
// Pair labels are sampled from a Bradley-Terry model over the two sums, then
// optionally swapped with probability `noise`.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sepo/autodiff/ops.hpp"
#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/core/rng.hpp"
#include "sepo/lm/vocab.hpp"

namespace sepo::data {

enum class KeyRule { after_marker, anywhere };

inline std::string to_string(KeyRule r) { return r == KeyRule::after_marker ? "after_marker" : "anywhere"; }

inline KeyRule key_rule_from_string(const std::string& s) {
    if (s == "after_marker") return KeyRule::after_marker;
    if (s == "anywhere") return KeyRule::anywhere;
    throw ValidationError("key rule must be 'after_marker' or 'anywhere', got '" + s + "'");
}

struct SyntheticTaskSpec {
    KeyRule key_rule = KeyRule::anywhere;
    std::size_t alphabet_size = 16;
    std::size_t prompt_len_min = 3;  ///< content tokens after BOS
    std::size_t prompt_len_max = 5;
    std::size_t response_len_min = 9;  ///< content tokens before EOS
    std::size_t response_len_max = 9;
    std::size_t good_set_size = 2;
    std::size_t bad_set_size = 2;
    std::size_t n_markers = 1;
    std::size_t marker_offset = 0;  ///< markers start this many ids after the bad set
    double key_density = 0.2;       ///< reward-bearing fraction of response positions (EOS included)
    double reward_gap = 8.0;        ///< good key minus bad key reward
    double p_good = 0.5;
    double noise = 0.0;

    std::size_t vocab_size() const { return lm::vocab_size_for(alphabet_size); }

    int good_token(std::size_t i) const { return lm::kFirstContent + static_cast<int>(i); }
    int bad_token(std::size_t i) const { return lm::kFirstContent + static_cast<int>(good_set_size + i); }
    int marker_token(std::size_t i) const {
        return lm::kFirstContent + static_cast<int>(good_set_size + bad_set_size + marker_offset + i);
    }

    bool is_good(int tok) const { return tok >= good_token(0) && tok < good_token(0) + int(good_set_size); }
    bool is_bad(int tok) const { return tok >= bad_token(0) && tok < bad_token(0) + int(bad_set_size); }
    bool is_marker(int tok) const { return tok >= marker_token(0) && tok < marker_token(0) + int(n_markers); }

    std::vector<int> filler_tokens() const {
        std::vector<int> out;
        for (std::size_t j = good_set_size + bad_set_size; j < alphabet_size; ++j) {
            const int tok = lm::kFirstContent + static_cast<int>(j);
            if (!is_marker(tok)) out.push_back(tok);
        }
        return out;
    }

    /// Keys planted in a response with `len` content tokens.
    std::size_t keys_for(std::size_t len) const {
        const auto n = static_cast<std::size_t>(std::llround(key_density * static_cast<double>(len + 1)));
        return std::max<std::size_t>(1, n);
    }

    /// Longest prompt+response in tokens (BOS and EOS included).
    std::size_t max_sequence() const { return 1 + prompt_len_max + response_len_max + 1; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("infeasible task spec: " + m); };
        if (alphabet_size > lm::kMaxVocab - lm::kFirstContent)
            fail("alphabet_size " + std::to_string(alphabet_size) + " exceeds vocabulary limit");
        if (good_set_size == 0 || bad_set_size == 0 || n_markers == 0) fail("good, bad and marker sets must be nonempty");
        if (good_set_size + bad_set_size + marker_offset + n_markers >= alphabet_size)
            fail("alphabet too small for key, marker and filler symbols");
        if (prompt_len_min > prompt_len_max || response_len_min > response_len_max) fail("empty length range");
        if (!(key_density > 0.0 && key_density <= 1.0)) fail("key_density must be in (0, 1]");
        if (!(noise >= 0.0 && noise < 0.5)) fail("noise must be in [0, 0.5)");
        if (!(p_good >= 0.0 && p_good <= 1.0)) fail("p_good must be in [0, 1]");
        if (!(reward_gap >= 0.0)) fail("reward_gap must be nonnegative");
        const std::size_t slot = key_rule == KeyRule::after_marker ? 2 : 1;
        for (std::size_t len = response_len_min; len <= response_len_max; ++len)
            if (slot * keys_for(len) > len)
                fail("response length " + std::to_string(len) + " cannot hold " + std::to_string(keys_for(len)) +
                     " planted keys");
    }

    std::string canonical() const {
        std::ostringstream os;
        os.precision(17);
        os << "key_rule=" << to_string(key_rule) << "\nalphabet_size=" << alphabet_size << "\nprompt_len=" << prompt_len_min << ".." << prompt_len_max
           << "\nresponse_len=" << response_len_min << ".." << response_len_max << "\ngood_set_size=" << good_set_size
           << "\nbad_set_size=" << bad_set_size << "\nn_markers=" << n_markers << "\nmarker_offset=" << marker_offset
           << "\nkey_density=" << key_density << "\nreward_gap=" << reward_gap << "\np_good=" << p_good
           << "\nnoise=" << noise << "\n";
        return os.str();
    }

    std::string hash() const { return hash_hex(canonical()); }
};

/// The (q, y_w, y_l) triple.
struct PreferencePair {
    std::string id;
    std::vector<int> prompt;
    std::vector<int> chosen;
    std::vector<int> rejected;

    bool operator==(const PreferencePair&) const = default;
};

/// Planted per-token rewards for both responses of a pair.
struct GroundTruthTokenReward {
    std::vector<double> chosen;
    std::vector<double> rejected;

    static double total(const std::vector<double>& r) {
        double s = 0.0;
        for (double v : r) s += v;
        return s;
    }
    double chosen_total() const { return total(chosen); }
    double rejected_total() const { return total(rejected); }

    bool operator==(const GroundTruthTokenReward&) const = default;
};

struct Example {
    PreferencePair pair;
    GroundTruthTokenReward gt;

    bool operator==(const Example&) const = default;
};

struct DatasetMeta {
    bool ood = false;
    std::string spec_hash;
    std::string config_hash;  ///< run that wrote the file, empty if none

    bool operator==(const DatasetMeta&) const = default;
};

struct Dataset {
    std::vector<Example> examples;
    DatasetMeta meta;

    std::size_t size() const noexcept { return examples.size(); }
    bool empty() const noexcept { return examples.empty(); }
    bool operator==(const Dataset&) const = default;
};

/// Planted reward of every response token under `spec`'s rules. Tokens
/// outside the spec's key/marker sets score 0.
inline std::vector<double> token_rewards(const std::vector<int>& response, const SyntheticTaskSpec& spec) {
    std::vector<double> r(response.size(), 0.0);
    const bool anywhere = spec.key_rule == KeyRule::anywhere;
    for (std::size_t i = anywhere ? 0 : 1; i < response.size(); ++i) {
        if (!anywhere && !spec.is_marker(response[i - 1])) continue;
        if (spec.is_good(response[i])) r[i] = spec.reward_gap / 2.0;
        else if (spec.is_bad(response[i])) r[i] = -spec.reward_gap / 2.0;
    }
    return r;
}

/// Response-level planted reward: the sum of token rewards. The prompt does
/// not enter the reward in this task family.
inline double ground_truth_judge(const std::vector<int>& /*prompt*/, const std::vector<int>& response,
                                 const SyntheticTaskSpec& spec) {
    return GroundTruthTokenReward::total(token_rewards(response, spec));
}

namespace detail {

inline std::vector<int> make_prompt(const SyntheticTaskSpec& spec, Rng& rng) {
    const std::vector<int> filler = spec.filler_tokens();
    const std::size_t len = rng.uniform_int(spec.prompt_len_min, spec.prompt_len_max);
    std::vector<int> q{lm::kBos};
    for (std::size_t i = 0; i < len; ++i) q.push_back(filler[rng.uniform_int(0, filler.size() - 1)]);
    return q;
}

struct PlantedResponse {
    std::vector<int> tokens;
    std::vector<double> rewards;
};

inline PlantedResponse make_response(const SyntheticTaskSpec& spec, Rng& rng) {
    const std::vector<int> filler = spec.filler_tokens();
    const std::size_t len = rng.uniform_int(spec.response_len_min, spec.response_len_max);
    const std::size_t keys = spec.keys_for(len);
    const bool good_style = rng.bernoulli(spec.p_good);

    PlantedResponse out;
    out.tokens.resize(len + 1);
    out.rewards.assign(len + 1, 0.0);
    for (std::size_t i = 0; i < len; ++i) out.tokens[i] = filler[rng.uniform_int(0, filler.size() - 1)];
    out.tokens[len] = lm::kEos;

    // Uniform non-overlapping placement of `keys` slots of width w: pick
    // distinct starts among len - keys*(w-1) cells, then spread them apart.
    const bool marked = spec.key_rule == KeyRule::after_marker;
    const std::size_t w = marked ? 2 : 1;
    std::vector<std::size_t> cells(len - keys * (w - 1));
    for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
    rng.shuffle(cells);
    cells.resize(keys);
    std::sort(cells.begin(), cells.end());
    for (std::size_t k = 0; k < keys; ++k) {
        std::size_t m = cells[k] + k * (w - 1);
        if (marked) out.tokens[m++] = spec.marker_token(rng.uniform_int(0, spec.n_markers - 1));
        if (good_style) {
            out.tokens[m] = spec.good_token(rng.uniform_int(0, spec.good_set_size - 1));
            out.rewards[m] = spec.reward_gap / 2.0;
        } else {
            out.tokens[m] = spec.bad_token(rng.uniform_int(0, spec.bad_set_size - 1));
            out.rewards[m] = -spec.reward_gap / 2.0;
        }
    }
    return out;
}

inline std::string pair_id(const std::string& prefix, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", index);
    return prefix + "-" + buf;
}

} // namespace detail

/// Deterministic per seed; pair i depends only on (seed, i).
inline Dataset generate_dataset(const SyntheticTaskSpec& spec, std::size_t n, std::uint64_t seed,
                                const std::string& id_prefix = "pair") {
    spec.validate();
    if (n == 0) throw ValidationError("generate_dataset: n must be at least 1");
    Dataset ds;
    ds.meta.spec_hash = spec.hash();
    ds.examples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "pair", i));
        Example ex;
        ex.pair.id = detail::pair_id(id_prefix, i);
        ex.pair.prompt = detail::make_prompt(spec, rng);
        detail::PlantedResponse a = detail::make_response(spec, rng);
        detail::PlantedResponse b = detail::make_response(spec, rng);
        const double ra = GroundTruthTokenReward::total(a.rewards);
        const double rb = GroundTruthTokenReward::total(b.rewards);
        bool a_wins = rng.bernoulli(ad::sigmoid(ra - rb));
        Rng noise_rng(derive_seed(seed, "noise", i));
        if (spec.noise > 0.0 && noise_rng.bernoulli(spec.noise)) a_wins = !a_wins;
        detail::PlantedResponse& w = a_wins ? a : b;
        detail::PlantedResponse& l = a_wins ? b : a;
        ex.pair.chosen = std::move(w.tokens);
        ex.pair.rejected = std::move(l.tokens);
        ex.gt.chosen = std::move(w.rewards);
        ex.gt.rejected = std::move(l.rewards);
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

/// Evaluation prompts drawn from the task's prompt distribution.
inline std::vector<std::vector<int>> generate_prompts(const SyntheticTaskSpec& spec, std::size_t n,
                                                      std::uint64_t seed) {
    spec.validate();
    std::vector<std::vector<int>> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "prompt", i));
        out.push_back(detail::make_prompt(spec, rng));
    }
    return out;
}

/// Distribution shift for weak/out-of-distribution data. Empty means no shift.
struct ShiftDescriptor {
    std::optional<double> noise;
    bool relocate_markers = false;  ///< use a disjoint marker vocabulary
    std::optional<std::size_t> response_len_min;
    std::optional<std::size_t> response_len_max;

    bool empty() const {
        return !noise && !relocate_markers && !response_len_min && !response_len_max;
    }

    SyntheticTaskSpec apply(SyntheticTaskSpec spec) const {
        if (noise) spec.noise = *noise;
        if (relocate_markers) spec.marker_offset += spec.n_markers;
        if (response_len_min) spec.response_len_min = *response_len_min;
        if (response_len_max) spec.response_len_max = *response_len_max;
        return spec;
    }
};

inline Dataset make_ood_dataset(const SyntheticTaskSpec& spec, const ShiftDescriptor& shift, std::size_t n,
                                std::uint64_t seed) {
    if (shift.noise && !(*shift.noise > spec.noise))
        throw ValidationError("make_ood_dataset: shifted noise must exceed the base noise rate");
    Dataset ds = generate_dataset(shift.apply(spec), n, seed, shift.empty() ? "pair" : "ood");
    ds.meta.ood = !shift.empty();
    return ds;
}

/// Uniform sample without replacement of round(fraction * N) pairs.
inline Dataset random_subsample(const Dataset& ds, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ValidationError("random_subsample: fraction must be in (0, 1], got " + std::to_string(fraction));
    const auto m = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
    if (m == 0) throw ValidationError("random_subsample: fraction selects no pairs");
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    Dataset out;
    out.meta = ds.meta;
    out.examples.reserve(m);
    for (std::size_t i = 0; i < m; ++i) out.examples.push_back(ds.examples[idx[i]]);
    return out;
}

} // namespace sepo::data
