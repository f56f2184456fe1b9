#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "sepo/autodiff/ops.hpp"
#include "sepo/data/dataset_io.hpp"
#include "sepo/data/synthetic.hpp"

using namespace sepo;
using namespace sepo::data;

namespace {

bool chosen_has_higher_reward(const Example& ex) { return ex.gt.chosen_total() > ex.gt.rejected_total(); }

std::size_t count_swaps(const Dataset& a, const Dataset& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) n += a.examples[i].pair.chosen != b.examples[i].pair.chosen;
    return n;
}

} // namespace

TEST(SyntheticTask, DefaultSpecIsFeasible) {
    SyntheticTaskSpec s;
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(s.keys_for(9), 2u);
    EXPECT_EQ(s.keys_for(1), 1u);  // floor of one key
    s.key_rule = KeyRule::after_marker;
    EXPECT_NO_THROW(s.validate());
}

TEST(SyntheticTask, InfeasibleSpecsAreRejected) {
    SyntheticTaskSpec s;
    s.key_density = 0.0;
    EXPECT_THROW(s.validate(), ValidationError);
    s = {};
    s.noise = 0.5;
    EXPECT_THROW(s.validate(), ValidationError);
    s = {};
    s.alphabet_size = 5;
    EXPECT_THROW(s.validate(), ValidationError);
    s = {};
    s.key_rule = KeyRule::after_marker;
    s.key_density = 1.0;
    EXPECT_THROW(s.validate(), ValidationError);  // two-token slots do not fit
    EXPECT_THROW(generate_dataset(s, 10, 1), ValidationError);
    EXPECT_THROW(generate_dataset(SyntheticTaskSpec{}, 0, 1), ValidationError);
    EXPECT_THROW(key_rule_from_string("sometimes"), ValidationError);
}

TEST(GenerateDataset, SchemaInvariants) {
    SyntheticTaskSpec s;
    const Dataset ds = generate_dataset(s, 300, 4);
    std::set<std::string> ids;
    for (const auto& ex : ds.examples) {
        EXPECT_NO_THROW(validate_example(ex));
        ids.insert(ex.pair.id);
        EXPECT_EQ(ex.pair.prompt.front(), lm::kBos);
        EXPECT_LE(ex.pair.prompt.size() + ex.pair.chosen.size(), s.max_sequence());
        // Bookkeeping equals the judge.
        EXPECT_DOUBLE_EQ(ex.gt.chosen_total(), ground_truth_judge(ex.pair.prompt, ex.pair.chosen, s));
        EXPECT_DOUBLE_EQ(ex.gt.rejected_total(), ground_truth_judge(ex.pair.prompt, ex.pair.rejected, s));
        EXPECT_EQ(ex.gt.chosen, token_rewards(ex.pair.chosen, s));
    }
    EXPECT_EQ(ids.size(), 300u);
}

TEST(GenerateDataset, DeterministicPerSeed) {
    SyntheticTaskSpec s;
    EXPECT_EQ(generate_dataset(s, 50, 9), generate_dataset(s, 50, 9));
    EXPECT_NE(generate_dataset(s, 50, 9), generate_dataset(s, 50, 10));
    // Pair i does not depend on n.
    EXPECT_EQ(generate_dataset(s, 50, 9).examples[20], generate_dataset(s, 30, 9).examples[20]);
}

TEST(GenerateDataset, MarkerRuleLargeGapPicksGoodKeyAfterMarker) {
    SyntheticTaskSpec s;
    s.key_rule = KeyRule::after_marker;
    s.reward_gap = 10.0;
    s.key_density = 0.1;  // one key per response
    const Dataset ds = generate_dataset(s, 2000, 3);
    std::size_t decisive = 0, good = 0;
    for (const auto& ex : ds.examples) {
        if (ex.gt.chosen_total() == ex.gt.rejected_total()) continue;
        ++decisive;
        const auto& y = ex.pair.chosen;
        for (std::size_t i = 1; i < y.size(); ++i)
            if (s.is_marker(y[i - 1]) && s.is_good(y[i])) {
                ++good;
                break;
            }
    }
    ASSERT_GT(decisive, 500u);
    EXPECT_GT(static_cast<double>(good) / decisive, 0.99);
}

TEST(GenerateDataset, ZeroGapIsAFairCoin) {
    SyntheticTaskSpec s;
    s.reward_gap = 0.0;
    const Dataset ds = generate_dataset(s, 10000, 5);
    // With zero gap the chosen side is the first generated response half the time;
    // planted styles are symmetric, so compare chosen-good against rejected-good.
    std::size_t chosen_good = 0, rejected_good = 0;
    for (const auto& ex : ds.examples) {
        for (int t : ex.pair.chosen) chosen_good += s.is_good(t);
        for (int t : ex.pair.rejected) rejected_good += s.is_good(t);
    }
    const double frac = double(chosen_good) / double(chosen_good + rejected_good);
    EXPECT_NEAR(frac, 0.5, 0.02);
}

// Monte Carlo against the analytic sigmoid: with one key per response of
// value +-g/2, decisive pairs differ by exactly g.
TEST(GenerateDataset, PreferenceRateMatchesSigmoidOfGap) {
    for (double g : {0.5, 1.0, 2.0}) {
        SyntheticTaskSpec s;
        s.reward_gap = g;
        s.key_density = 0.1;
        const Dataset ds = generate_dataset(s, 20000, 17);
        std::size_t decisive = 0, higher = 0;
        for (const auto& ex : ds.examples) {
            if (ex.gt.chosen_total() == ex.gt.rejected_total()) continue;
            ++decisive;
            higher += chosen_has_higher_reward(ex);
        }
        ASSERT_GT(decisive, 8000u);
        EXPECT_NEAR(double(higher) / decisive, ad::sigmoid(g), 0.02) << "gap " << g;
    }
}

TEST(GroundTruthJudge, SimpleCases) {
    SyntheticTaskSpec s;
    s.reward_gap = 4.0;
    const std::vector<int> q{lm::kBos, 12};
    const int f = s.filler_tokens().front();
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {f, f, lm::kEos}, s), 0.0);
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {f, s.good_token(0), lm::kEos}, s), 2.0);
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {s.bad_token(1), s.good_token(0), s.good_token(1)}, s), 2.0);
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {60, 61, lm::kEos}, s), 0.0);  // unknown ids score 0
    s.key_rule = KeyRule::after_marker;
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {f, s.good_token(0), lm::kEos}, s), 0.0);
    EXPECT_DOUBLE_EQ(ground_truth_judge(q, {s.marker_token(0), s.good_token(0), lm::kEos}, s), 2.0);
}

TEST(OodDataset, NoiseShiftSwapsAboutThirtyPercent) {
    SyntheticTaskSpec s;
    const Dataset clean = generate_dataset(s, 10000, 21);
    ShiftDescriptor shift;
    shift.noise = 0.3;
    const Dataset noisy = make_ood_dataset(s, shift, 10000, 21);
    EXPECT_TRUE(noisy.meta.ood);
    EXPECT_NEAR(double(count_swaps(clean, noisy)) / 10000.0, 0.3, 0.015);
    shift.noise = 0.0;
    EXPECT_THROW(make_ood_dataset(s, shift, 10, 21), ValidationError);
}

TEST(OodDataset, EmptyShiftIsIdentity) {
    SyntheticTaskSpec s;
    const Dataset a = generate_dataset(s, 100, 2);
    const Dataset b = make_ood_dataset(s, ShiftDescriptor{}, 100, 2);
    EXPECT_EQ(a, b);
    EXPECT_FALSE(b.meta.ood);
}

TEST(OodDataset, RelocatedMarkersAreDisjoint) {
    SyntheticTaskSpec s;
    s.key_rule = KeyRule::after_marker;
    ShiftDescriptor shift;
    shift.relocate_markers = true;
    const SyntheticTaskSpec t = shift.apply(s);
    EXPECT_NE(t.marker_token(0), s.marker_token(0));
    EXPECT_NE(t.hash(), s.hash());
    const Dataset ds = make_ood_dataset(s, shift, 200, 3);
    EXPECT_TRUE(ds.meta.ood);
    // Rewarded positions follow the relocated marker; the old marker is plain filler now.
    for (const auto& ex : ds.examples)
        for (std::size_t i = 0; i < ex.pair.chosen.size(); ++i)
            if (ex.gt.chosen[i] != 0.0) {
                ASSERT_GT(i, 0u);
                EXPECT_TRUE(t.is_marker(ex.pair.chosen[i - 1]));
            }
    std::ostringstream os;
    os << dataset_to_jsonl(ds);
    EXPECT_NE(os.str().find("\"ood\":true"), std::string::npos);
}

TEST(DatasetIo, RoundTripIsLossless) {
    Dataset ds = generate_dataset(SyntheticTaskSpec{}, 40, 8);
    ds.meta.config_hash = "abc";
    std::istringstream in(dataset_to_jsonl(ds));
    EXPECT_EQ(dataset_from_jsonl(in), ds);
}

TEST(DatasetIo, HashIgnoresWritingRun) {
    Dataset a = generate_dataset(SyntheticTaskSpec{}, 10, 8);
    Dataset b = a;
    b.meta.config_hash = "other-run";
    EXPECT_EQ(dataset_hash(a), dataset_hash(b));
    b.examples[3].pair.id = "changed";
    EXPECT_NE(dataset_hash(a), dataset_hash(b));
}

TEST(DatasetIo, TruncatedFileNamesLastGoodLine) {
    const std::string text = dataset_to_jsonl(generate_dataset(SyntheticTaskSpec{}, 5, 8));
    std::istringstream in(text.substr(0, text.size() - 20));
    try {
        dataset_from_jsonl(in);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        const std::string m = e.what();
        EXPECT_NE(m.find("line 5"), std::string::npos) << m;
        EXPECT_NE(m.find("last good line 4"), std::string::npos) << m;
    }
}

TEST(DatasetIo, InvariantViolationIsValidationError) {
    std::istringstream in(R"({"id":"x","prompt":[1],"chosen":[],"rejected":[4,2]})"
                          "\n");
    EXPECT_THROW(dataset_from_jsonl(in), ValidationError);
    std::istringstream no_eos(R"({"id":"x","prompt":[1],"chosen":[4],"rejected":[4,2]})"
                              "\n");
    EXPECT_THROW(dataset_from_jsonl(no_eos), ValidationError);
}

TEST(DatasetIo, EmptyFileIsEmptyDataset) {
    std::istringstream in("");
    const Dataset ds = dataset_from_jsonl(in);
    EXPECT_TRUE(ds.empty());
    EXPECT_THROW(load_dataset("/nonexistent/dir/x.jsonl"), ValidationError);
}

TEST(RandomSubsample, SizesAndDeterminism) {
    const Dataset ds = generate_dataset(SyntheticTaskSpec{}, 100, 8);
    const Dataset half = random_subsample(ds, 0.5, 1);
    EXPECT_EQ(half.size(), 50u);
    std::set<std::string> ids;
    for (const auto& ex : half.examples) ids.insert(ex.pair.id);
    EXPECT_EQ(ids.size(), 50u);
    EXPECT_EQ(random_subsample(ds, 0.5, 1), half);
    const Dataset all = random_subsample(ds, 1.0, 2);
    std::set<std::string> all_ids;
    for (const auto& ex : all.examples) all_ids.insert(ex.pair.id);
    EXPECT_EQ(all_ids.size(), 100u);
    EXPECT_THROW(random_subsample(ds, 0.001, 1), ValidationError);
    EXPECT_THROW(random_subsample(ds, 0.0, 1), ValidationError);
    EXPECT_THROW(random_subsample(ds, 1.5, 1), ValidationError);
}

TEST(RandomSubsample, DifferentSeedsDiffer) {
    const Dataset ds = generate_dataset(SyntheticTaskSpec{}, 1000, 8);
    EXPECT_NE(random_subsample(ds, 0.3, 1), random_subsample(ds, 0.3, 2));
}
