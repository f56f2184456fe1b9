#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sepo/core/error.hpp"
#include "sepo/data/synthetic.hpp"
#include "sepo/lm/model.hpp"
#include "sepo/objectives/losses.hpp"

namespace sepo::scoring {

enum class Side { chosen, rejected };

inline std::string to_string(Side s) { return s == Side::chosen ? "chosen" : "rejected"; }

inline Side side_from_string(const std::string& s) {
    if (s == "chosen") return Side::chosen;
    if (s == "rejected") return Side::rejected;
    throw ValidationError("side must be 'chosen' or 'rejected', got '" + s + "'");
}

/// s(y_i) = log pi_oracle(y_i|q,y_<i) - log pi_ref(y_i|q,y_<i) for one response.
struct TokenScoreTable {
    std::string id;
    Side side = Side::chosen;
    std::vector<double> scores;
};

struct SelectionMask {
    std::string id;
    Side side = Side::chosen;
    std::vector<std::uint8_t> selected;
    double k = 100.0;

    std::size_t count() const { return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1)); }

    std::vector<std::size_t> indices() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < selected.size(); ++i)
            if (selected[i]) out.push_back(i);
        return out;
    }
};

/// ceil(k/100 * n), never below one for n > 0.
inline std::size_t selection_count(double k, std::size_t n) {
    if (!(k > 0.0 && k <= 100.0)) throw ValidationError("selection percentage must be in (0, 100]");
    if (n == 0) return 0;
    // Guard against k*n/100 landing a hair above an integer.
    const double exact = k * static_cast<double>(n) / 100.0;
    auto c = static_cast<std::size_t>(std::ceil(exact - 1e-9 * std::max(1.0, exact)));
    return std::clamp<std::size_t>(c, 1, n);
}

template <class T>
std::pair<TokenScoreTable, TokenScoreTable> score_tokens(const lm::Model<T>& oracle, const lm::Model<T>& ref,
                                                         const data::PreferencePair& pair) {
    return {TokenScoreTable{pair.id, Side::chosen,
                            obj::implicit_token_rewards(oracle, ref, pair.prompt, pair.chosen, 1.0)},
            TokenScoreTable{pair.id, Side::rejected,
                            obj::implicit_token_rewards(oracle, ref, pair.prompt, pair.rejected, 1.0)}};
}

/// Chosen mode keeps the highest-scoring positions, rejected mode the
/// lowest. Equal scores go to the earlier position.
inline SelectionMask select_tokens(const TokenScoreTable& table, double k, Side mode) {
    const std::size_t n = table.scores.size();
    if (n == 0) throw ValidationError("select_tokens: empty response for pair '" + table.id + "'");
    const std::size_t keep = selection_count(k, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto& s = table.scores;
    if (mode == Side::chosen)
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
    else
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });
    SelectionMask m{table.id, table.side, std::vector<std::uint8_t>(n, 0), k};
    for (std::size_t i = 0; i < keep; ++i) m.selected[order[i]] = 1;
    return m;
}

enum class Order { descending, ascending };

struct CurvePoint {
    double top_percent;
    double fraction;
};

/// Cumulative reward share of the top-x% tokens pooled across tables.
/// Scores are shifted by the global minimum when any is negative so the
/// fractions stay monotone in [0, 1]; `shift` reports the amount.
struct AccumulationCurve {
    std::vector<CurvePoint> points;
    double shift = 0.0;
    bool uniform = false;  ///< all scores equal; the diagonal was returned

    /// Fraction reached by the top `percent`% of tokens.
    double at(double percent) const {
        if (points.empty()) return 0.0;
        const std::size_t n = points.size();
        const auto idx = static_cast<std::size_t>(std::ceil(percent / 100.0 * static_cast<double>(n) - 1e-9));
        if (idx == 0) return 0.0;
        return points[std::min(idx, n) - 1].fraction;
    }

    /// Smallest top-percent whose cumulative share reaches `fraction`.
    double percent_for(double fraction) const {
        for (const CurvePoint& p : points)
            if (p.fraction >= fraction - 1e-12) return p.top_percent;
        return 100.0;
    }
};

inline AccumulationCurve accumulation_curve(std::span<const TokenScoreTable> tables, Order order) {
    std::vector<double> pooled;
    for (const auto& t : tables) pooled.insert(pooled.end(), t.scores.begin(), t.scores.end());
    if (pooled.empty()) throw ValidationError("accumulation_curve: no scores");
    AccumulationCurve c;
    const std::size_t n = pooled.size();
    const auto [mn, mx] = std::minmax_element(pooled.begin(), pooled.end());
    c.shift = std::min(0.0, *mn);
    double total = 0.0;
    for (double v : pooled) total += v - c.shift;
    if (*mn == *mx || total <= 0.0) {
        c.uniform = true;
        for (std::size_t i = 0; i < n; ++i)
            c.points.push_back({100.0 * double(i + 1) / double(n), double(i + 1) / double(n)});
        return c;
    }
    if (order == Order::descending) std::sort(pooled.begin(), pooled.end(), std::greater<>{});
    else std::sort(pooled.begin(), pooled.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += pooled[i] - c.shift;
        c.points.push_back({100.0 * double(i + 1) / double(n), std::min(1.0, acc / total)});
    }
    c.points.back().fraction = 1.0;
    return c;
}

/// Share of reward-bearing positions (|gt| >= threshold) the mask captures.
/// Empty when the response has no reward-bearing position.
inline std::optional<double> key_token_recall(const SelectionMask& mask, std::span<const double> gt_rewards,
                                              double threshold) {
    if (mask.selected.size() != gt_rewards.size())
        throw DimensionError("key_token_recall: mask length " + std::to_string(mask.selected.size()) +
                             " vs reward length " + std::to_string(gt_rewards.size()));
    std::size_t keys = 0, hit = 0;
    for (std::size_t i = 0; i < gt_rewards.size(); ++i) {
        if (std::abs(gt_rewards[i]) >= threshold) {
            ++keys;
            hit += mask.selected[i] ? 1 : 0;
        }
    }
    if (keys == 0) return std::nullopt;
    return static_cast<double>(hit) / static_cast<double>(keys);
}

/// Pooled recall: captured key positions over all key positions.
struct RecallTally {
    std::size_t keys = 0;
    std::size_t hits = 0;
    double expected_random_hits = 0.0;  ///< sum over keys of selected/len

    void add(const SelectionMask& mask, std::span<const double> gt_rewards, double threshold) {
        if (mask.selected.size() != gt_rewards.size()) throw DimensionError("RecallTally: length mismatch");
        const double p = static_cast<double>(mask.count()) / static_cast<double>(mask.selected.size());
        for (std::size_t i = 0; i < gt_rewards.size(); ++i) {
            if (std::abs(gt_rewards[i]) >= threshold) {
                ++keys;
                hits += mask.selected[i] ? 1 : 0;
                expected_random_hits += p;
            }
        }
    }

    std::optional<double> recall() const {
        if (keys == 0) return std::nullopt;
        return static_cast<double>(hits) / static_cast<double>(keys);
    }

    /// Expected recall of a mask picking the same number of positions
    /// uniformly at random (hypergeometric mean: selected / length).
    std::optional<double> random_baseline() const {
        if (keys == 0) return std::nullopt;
        return expected_random_hits / static_cast<double>(keys);
    }
};

struct Histogram {
    double lo = 0.0;
    double hi = 0.0;
    std::vector<std::size_t> counts;
    double mean = 0.0;
    double stddev = 0.0;

    double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
    std::size_t total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

/// Equal-width bins over [lo, hi]; values outside are clamped into the edge
/// bins. A degenerate range is widened to +-0.5 around the value.
inline Histogram score_histogram(std::span<const TokenScoreTable> tables, std::size_t bins,
                                 std::optional<std::pair<double, double>> range = std::nullopt) {
    if (bins < 2) throw ValidationError("score_histogram: need at least 2 bins");
    std::vector<double> pooled;
    for (const auto& t : tables) pooled.insert(pooled.end(), t.scores.begin(), t.scores.end());
    Histogram h;
    h.counts.assign(bins, 0);
    if (pooled.empty()) {
        h.lo = range ? range->first : -0.5;
        h.hi = range ? range->second : 0.5;
        return h;
    }
    const auto [mn, mx] = std::minmax_element(pooled.begin(), pooled.end());
    h.lo = range ? range->first : *mn;
    h.hi = range ? range->second : *mx;
    if (!(h.hi > h.lo)) {
        h.lo -= 0.5;
        h.hi += 0.5;
    }
    double sum = 0.0, sq = 0.0;
    for (double v : pooled) {
        auto b = static_cast<long long>(std::floor((v - h.lo) / h.bin_width()));
        b = std::clamp<long long>(b, 0, static_cast<long long>(bins) - 1);
        ++h.counts[static_cast<std::size_t>(b)];
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(pooled.size());
    h.mean = sum / n;
    h.stddev = std::sqrt(std::max(0.0, sq / n - h.mean * h.mean));
    return h;
}

} // namespace sepo::scoring
