#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "sepo/data/synthetic.hpp"
#include "sepo/objectives/losses.hpp"
#include "test_util.hpp"

using namespace sepo;
using namespace sepo::obj;
using lm::LMConfig;
using lm::Model;

namespace {

const double kLn2 = std::log(2.0);

LMConfig width16() {
    LMConfig c;
    c.vocab_size = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_model = 16;
    c.max_context = 16;
    return c;
}

Model<double> random_model(std::uint64_t seed, double sd = 0.3) {
    Model<double> m(width16(), seed);
    Rng rng(seed + 1000);
    for (auto* p : m.parameters())
        for (auto& v : p->data()) v += sd * rng.normal();
    return m;
}

ad::Tensor<double>& param(Model<double>& m, const std::string& name) {
    for (auto& [n, t] : m.named_parameters())
        if (n == name) return *t;
    throw std::runtime_error("no param " + name);
}

// With the head weight zeroed the next-token distribution is softmax(head.b)
// at every position, which makes joint log-probs computable by hand.
Model<double> context_free(const std::vector<double>& bias) {
    Model<double> m(width16(), 1);
    auto& b = param(m, "head.b");
    for (std::size_t i = 0; i < bias.size(); ++i) b[i] = bias[i];
    return m;
}

double log_softmax_at(const std::vector<double>& b, int tok) {
    double z = 0.0;
    for (double v : b) z += std::exp(v);
    return b[tok] - std::log(z);
}

struct Pairs {
    std::vector<std::vector<int>> q, w, l;
    std::vector<BatchItem> items() const {
        std::vector<BatchItem> out;
        for (std::size_t i = 0; i < q.size(); ++i) out.push_back({q[i], w[i], l[i]});
        return out;
    }
};

Pairs sample_pairs() {
    Pairs p;
    p.q = {{1, 3, 4}, {1, 5}, {1, 7, 6, 3}};
    p.w = {{3, 4, 5, 2}, {6, 2}, {4, 4, 7, 6, 2}};
    p.l = {{7, 2}, {3, 3, 3, 2}, {5, 6, 2}};
    return p;
}

std::vector<std::vector<std::uint8_t>> alternating(const std::vector<std::vector<int>>& ys, int phase) {
    std::vector<std::vector<std::uint8_t>> out;
    for (const auto& y : ys) {
        std::vector<std::uint8_t> m(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) m[i] = (i + phase) % 2 == 0;
        out.push_back(m);
    }
    return out;
}

std::vector<PairMasks> pair_masks(const std::vector<std::vector<std::uint8_t>>& w,
                                  const std::vector<std::vector<std::uint8_t>>& l) {
    std::vector<PairMasks> out;
    for (std::size_t i = 0; i < w.size(); ++i) out.push_back({w[i], l[i]});
    return out;
}

} // namespace

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.k_w = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.beta = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = {};
    c.precision = 16;
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(SftLoss, UniformModelIsLengthTimesLogV) {
    Model<double> m(width16(), 3);
    const auto p = sample_pairs();
    const auto items = p.items();
    double expect = 0.0;
    for (const auto& w : p.w) expect += w.size() * std::log(8.0);
    EXPECT_NEAR(sft_loss_value(m, std::span<const BatchItem>(items)), expect / 3.0, 1e-12);
}

TEST(SftLoss, EqualsMeanNegativeJointLogProb) {
    const Model<double> m = random_model(4);
    const auto p = sample_pairs();
    const auto items = p.items();
    double s = 0.0;
    for (const auto& it : items) s -= lm::response_logprobs(m, it.prompt, it.chosen).sum();
    EXPECT_NEAR(sft_loss_value(m, std::span<const BatchItem>(items)), s / 3.0, 1e-12);
}

TEST(SftLoss, NearCertainModelHasNearZeroLoss) {
    std::vector<double> b(8, -60.0);
    b[2] = 60.0;
    const Model<double> m = context_free(b);
    const std::vector<int> q{1}, y{2};
    const std::vector<BatchItem> items{{q, y, y}};
    EXPECT_NEAR(sft_loss_value(m, std::span<const BatchItem>(items)), 0.0, 1e-40);
}

TEST(SftLoss, EmptyBatchIsError) {
    Model<double> m(width16(), 3);
    Tape<double> t;
    EXPECT_THROW(sft_loss(t, m, std::span<const BatchItem>{}), ValidationError);
}

TEST(DpoLoss, PolicyEqualsReferenceIsLn2) {
    const Model<double> m = random_model(5);
    const auto p = sample_pairs();
    const auto items = p.items();
    EXPECT_NEAR(dpo_loss_value(m, m, std::span<const BatchItem>(items), 0.1), kLn2, 1e-14);
    for (double r : zero_one_reward_margin(m, m, std::span<const BatchItem>(items), 0.1)) EXPECT_EQ(r, 0.0);
}

TEST(DpoLoss, MatchesHandEvaluation) {
    const std::vector<double> bp{0, 0, 0.3, 1.2, -0.7, 0, 0, 0}, br{0, 0, -0.1, 0.4, 0.5, 0, 0, 0};
    const Model<double> pol = context_free(bp), ref = context_free(br);
    const std::vector<int> q{1}, yw{3, 3, 2}, yl{4, 2};
    auto joint = [&](const std::vector<double>& b, const std::vector<int>& y) {
        double s = 0.0;
        for (int t : y) s += log_softmax_at(b, t);
        return s;
    };
    const double beta = 0.5;
    const double u = (joint(bp, yw) - joint(br, yw)) - (joint(bp, yl) - joint(br, yl));
    const double expect = std::log1p(std::exp(-beta * u));
    const std::vector<BatchItem> items{{q, yw, yl}};
    EXPECT_NEAR(dpo_loss_value(pol, ref, std::span<const BatchItem>(items), beta), expect, 1e-10);
    EXPECT_NEAR(zero_one_reward_margin(pol, ref, std::span<const BatchItem>(items), beta)[0], beta * u, 1e-10);
}

TEST(DpoLoss, DoublingBetaDoublesTheMargin) {
    const Model<double> pol = random_model(6), ref = random_model(7);
    const auto p = sample_pairs();
    const auto items = p.items();
    const auto m1 = zero_one_reward_margin(pol, ref, std::span<const BatchItem>(items), 0.1);
    const auto m2 = zero_one_reward_margin(pol, ref, std::span<const BatchItem>(items), 0.2);
    double expect = 0.0;
    for (std::size_t i = 0; i < m1.size(); ++i) {
        EXPECT_NEAR(m2[i], 2 * m1[i], 1e-12);
        expect += -std::log(ad::sigmoid(m2[i]));
    }
    EXPECT_NEAR(dpo_loss_value(pol, ref, std::span<const BatchItem>(items), 0.2), expect / 3, 1e-12);
}

TEST(DpoLoss, InvariantToPaddingLength) {
    const Model<double> pol = random_model(8), ref = random_model(9);
    std::vector<data::PreferencePair> pairs;
    const auto p = sample_pairs();
    for (std::size_t i = 0; i < 3; ++i) pairs.push_back({"p" + std::to_string(i), p.q[i], p.w[i], p.l[i]});
    const auto a = PaddedBatch::from(pairs, 5), b = PaddedBatch::from(pairs, 11);
    const auto ia = a.items(), ib = b.items();
    EXPECT_NEAR(dpo_loss_value(pol, ref, std::span<const BatchItem>(ia), 0.1),
                dpo_loss_value(pol, ref, std::span<const BatchItem>(ib), 0.1), 1e-12);
}

TEST(DpoLoss, VocabMismatchIsValidationError) {
    LMConfig c = width16();
    c.vocab_size = 9;
    const Model<double> a = random_model(1), b(c, 2);
    const auto p = sample_pairs();
    const auto items = p.items();
    EXPECT_THROW(dpo_loss_value(a, b, std::span<const BatchItem>(items), 0.1), ValidationError);
}

TEST(Gradcheck, SftDpoSepoOnWidth16Model) {
    Model<double> pol = random_model(10);
    const Model<double> ref = random_model(11);
    const auto p = sample_pairs();
    const auto items = p.items();
    const std::span<const BatchItem> batch(items);
    EXPECT_LT(test::model_gradcheck(pol, [&](Tape<double>& t) { return sft_loss(t, pol, batch); }), 1e-5);
    EXPECT_LT(test::model_gradcheck(pol, [&](Tape<double>& t) { return dpo_loss(t, pol, ref, batch, 0.7); }), 1e-5);
    const auto mw = alternating(p.w, 0), ml = alternating(p.l, 1);
    const auto masks = pair_masks(mw, ml);
    EXPECT_LT(test::model_gradcheck(
                  pol, [&](Tape<double>& t) { return sepo_loss(t, pol, batch, std::span<const PairMasks>(masks), 2.0); }),
              1e-5);
}

TEST(ImplicitRewards, OracleEqualsReferenceIsZero) {
    const Model<double> m = random_model(12);
    const std::vector<int> q{1, 3}, y{4, 5, 2};
    for (double r : implicit_token_rewards(m, m, std::span<const int>(q), std::span<const int>(y), 0.1))
        EXPECT_EQ(r, 0.0);
}

TEST(ImplicitRewards, HalfOverQuarterIsLn2) {
    // softmax over 8 ids with four live ids at 0 and the rest at -inf-ish.
    std::vector<double> ora(8, -800.0), ref(8, -800.0);
    ora[3] = std::log(0.5);
    ora[4] = std::log(0.5);
    for (int t : {3, 4, 5, 6}) ref[t] = std::log(0.25);
    const Model<double> o = context_free(ora), r = context_free(ref);
    const std::vector<int> q{1}, y{3};
    const auto rw = implicit_token_rewards(o, r, std::span<const int>(q), std::span<const int>(y), 1.0);
    EXPECT_NEAR(rw[0], kLn2, 1e-12);
}

// Sum of per-token log-ratios equals the joint log-ratio.
TEST(ImplicitRewards, TelescopingIdentity) {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const Model<double> o = random_model(100 + s), r = random_model(200 + s);
        Rng rng(s);
        std::vector<int> q{1}, y;
        for (int i = 0; i < 4; ++i) q.push_back(3 + int(rng.uniform_int(0, 4)));
        for (int i = 0; i < 7; ++i) y.push_back(3 + int(rng.uniform_int(0, 4)));
        y.push_back(2);
        const double beta = 0.3;
        const auto rw = implicit_token_rewards(o, r, std::span<const int>(q), std::span<const int>(y), beta);
        const double sum = std::accumulate(rw.begin(), rw.end(), 0.0);
        const double joint = beta * (lm::response_logprobs(o, std::span<const int>(q), std::span<const int>(y)).sum() -
                                     lm::response_logprobs(r, std::span<const int>(q), std::span<const int>(y)).sum());
        EXPECT_NEAR(sum, joint, 1e-9);
        // Margin consistency.
        const std::vector<int> yl{5, 5, 2};
        const std::vector<BatchItem> items{{q, y, yl}};
        const auto rl = implicit_token_rewards(o, r, std::span<const int>(q), std::span<const int>(yl), beta);
        const double m = zero_one_reward_margin(o, r, std::span<const BatchItem>(items), beta)[0];
        EXPECT_NEAR(m, sum - std::accumulate(rl.begin(), rl.end(), 0.0), 1e-9);
    }
}

TEST(SepoLoss, IdenticalSidesAreExactlyLn2) {
    const Model<double> m = random_model(13);
    const std::vector<int> q{1, 4}, y{3, 6, 5, 2};
    const std::vector<std::uint8_t> mask{1, 0, 1, 0};
    const std::vector<BatchItem> items{{q, y, y}};
    const std::vector<PairMasks> masks{{mask, mask}};
    EXPECT_EQ(sepo_loss_value(m, std::span<const BatchItem>(items), std::span<const PairMasks>(masks), 1.0), kLn2);
}

TEST(SepoLoss, FullMaskIsLengthNormalizedJointLogProb) {
    const Model<double> m = random_model(14);
    const auto p = sample_pairs();
    const auto items = p.items();
    std::vector<std::vector<std::uint8_t>> fw, fl;
    for (const auto& y : p.w) fw.emplace_back(y.size(), 1);
    for (const auto& y : p.l) fl.emplace_back(y.size(), 1);
    const auto masks = pair_masks(fw, fl);
    double expect = 0.0;
    for (const auto& it : items) {
        const double uw = lm::response_logprobs(m, it.prompt, it.chosen).sum() / it.chosen.size();
        const double ul = lm::response_logprobs(m, it.prompt, it.rejected).sum() / it.rejected.size();
        expect -= ad::logsigmoid(uw - ul);
    }
    EXPECT_NEAR(sepo_loss_value(m, std::span<const BatchItem>(items), std::span<const PairMasks>(masks), 1.0),
                expect / 3, 1e-12);
}

// The final response token never feeds a later position, so when it is not
// selected the loss cannot depend on it at all.
TEST(SepoLoss, UnselectedPositionsCarryNoSignal) {
    const Model<double> m = random_model(15);
    const std::vector<int> q{1, 4}, yw1{3, 6, 5}, yw2{3, 6, 7}, yl{4, 4, 2};
    const std::vector<std::uint8_t> mw{1, 1, 0}, ml{0, 1, 1};
    const std::vector<PairMasks> masks{{mw, ml}};
    const std::vector<BatchItem> a{{q, yw1, yl}}, b{{q, yw2, yl}};
    EXPECT_EQ(sepo_loss_value(m, std::span<const BatchItem>(a), std::span<const PairMasks>(masks), 1.0),
              sepo_loss_value(m, std::span<const BatchItem>(b), std::span<const PairMasks>(masks), 1.0));
    // Sanity: the backward pass does reach selected tokens.
    Model<double> g = m;
    g.zero_grads();
    {
        Tape<double> t;
        t.backward(sepo_loss(t, g, std::span<const BatchItem>(a), std::span<const PairMasks>(masks), 1.0));
    }
    EXPECT_NE(param(g, "head.b").grad()[6], 0.0);
}

TEST(SepoLoss, RaisingSelectedChosenLogProbLowersLoss) {
    // Token 3 is only ever selected on the chosen side; raising its logit
    // raises its log-prob at every selected chosen position.
    const std::vector<int> q{1}, yw{3, 5, 3, 2}, yl{4, 6, 2};
    const std::vector<std::uint8_t> mw{1, 0, 1, 0}, ml{1, 1, 0};
    const std::vector<BatchItem> items{{q, yw, yl}};
    const std::vector<PairMasks> masks{{mw, ml}};
    double prev = std::numeric_limits<double>::infinity();
    for (double b3 : {-1.0, -0.5, 0.0, 0.5, 1.0, 2.0}) {
        const Model<double> m = context_free({0, 0, 0, b3, 0, 0, 0, 0});
        const double l = sepo_loss_value(m, std::span<const BatchItem>(items), std::span<const PairMasks>(masks), 1.0);
        EXPECT_LT(l, prev);
        prev = l;
    }
}

TEST(SepoLoss, MaskErrors) {
    Model<double> m = random_model(16);
    const std::vector<int> q{1}, y{3, 2};
    const std::vector<std::uint8_t> ok{1, 0}, empty{0, 0}, short_mask{1};
    const std::vector<BatchItem> items{{q, y, y}};
    Tape<double> t;
    const std::vector<PairMasks> e{{ok, empty}}, s{{short_mask, ok}};
    EXPECT_THROW(sepo_loss(t, m, std::span<const BatchItem>(items), std::span<const PairMasks>(e), 1.0), UsageError);
    EXPECT_THROW(sepo_loss(t, m, std::span<const BatchItem>(items), std::span<const PairMasks>(s), 1.0),
                 DimensionError);
}
