#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "sepo/sepo.hpp"

using namespace sepo;
using namespace sepo::pipeline;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("sepo_test_pipeline_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

ExperimentConfig tiny_config() {
    ExperimentConfig c;
    c.n_target = 96;
    c.n_oracle = 48;
    c.oracle_arch = make_arch(1, 1, 8);
    c.policy_arch = make_arch(2, 2, 8);
    c.eval.n_prompts = 24;
    c.eval.max_new = 12;
    c.sync_archs();
    return c;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SEPO_CLI) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

// Reference values from statsmodels proportion_confint(method="wilson").
TEST(Wilson, MatchesReferenceImplementation) {
    struct Case {
        double p;
        std::size_t n;
        double lo, hi;
    };
    for (const Case& c : {Case{0.5, 100, 0.4038315303659956, 0.5961684696340044},
                          Case{0.8, 50, 0.6696289406777458, 0.8875624998422389},
                          Case{0.0, 20, 0.0, 0.1611251580528194},
                          Case{0.994, 500, 0.9825097478959467, 0.9979574037280398}}) {
        const auto [lo, hi] = wilson_interval(c.p, c.n);
        EXPECT_NEAR(lo, c.lo, 1e-12);
        EXPECT_NEAR(hi, c.hi, 1e-12);
    }
    EXPECT_EQ(wilson_interval(0.3, 0), (std::pair{0.0, 1.0}));
}

TEST(Eval, IdenticalModelsTieEverywhere) {
    const auto cfg = tiny_config();
    const lm::Model<double> m(cfg.policy_arch, 3);
    const auto prompts = data::generate_prompts(cfg.task, 30, 1);
    const EvalReport r = run_eval(m, m, prompts, cfg.task, cfg.eval, 9);
    EXPECT_EQ(r.ties, 30u);
    EXPECT_EQ(r.win_rate, 0.5);
    EXPECT_FALSE(r.significant_win());
    EXPECT_EQ(r.mean_reward_policy, r.mean_reward_base);
}

TEST(CsvTable, AppendsHashAndQuotes) {
    CsvTable t;
    t.header = {"name", "value"};
    t.rows.push_back({"a,b", fmt(0.25)});
    t.rows.push_back({"say \"hi\"", fmt(std::size_t{3})});
    EXPECT_EQ(t.str("h"), "name,value,config_hash\n\"a,b\",0.25,h\n\"say \"\"hi\"\"\",3,h\n");
    t.rows.push_back({"short"});
    EXPECT_THROW(t.str("h"), DimensionError);
    EXPECT_EQ(fmt(1.0 / 3.0), "0.3333333333");
}

TEST(RunConfig, CanonicalSortedText) {
    RunConfig a, b;
    a.set("z", "1");
    a.set("a", "2");
    b.set("a", "2");
    b.set("z", "1");
    EXPECT_EQ(a.text(), "a=2\nz=1\n");
    EXPECT_EQ(a.hash(), b.hash());
    a.set_block("cfg.", "[task]\nx=1\n[eval]\ny=2\n");
    EXPECT_EQ(a.entries().at("cfg.task.x"), "1");
    EXPECT_EQ(a.entries().at("cfg.eval.y"), "2");
    EXPECT_THROW(a.set("bad=key", "v"), ValidationError);
    EXPECT_THROW(a.set("k", "two\nlines"), ValidationError);
}

TEST(OutputDir, CommitsAtomicallyAndCleansUp) {
    const fs::path out = scratch("outdir");
    {
        OutputDir d(out, false);
        d.write("a.txt", "x");
        EXPECT_FALSE(fs::exists(out));
    }
    EXPECT_FALSE(fs::exists(out));
    EXPECT_FALSE(fs::exists(fs::path(out.string() + ".partial")));
    {
        OutputDir d(out, false);
        d.write("sub/a.txt", "x");
        d.commit();
    }
    EXPECT_EQ(slurp(out / "sub" / "a.txt"), "x");
    EXPECT_THROW(OutputDir(out, false), ValidationError);
    EXPECT_NO_THROW(OutputDir(out, true));
    fs::remove_all(out);
}

TEST(Verify, DetectsForeignHashes) {
    const fs::path out = scratch("verify");
    RunConfig rc;
    rc.set("seed", "1");
    const std::string h = rc.hash();
    {
        OutputDir d(out, false);
        d.write(kRunConfigFile, rc.text());
        CsvTable t;
        t.header = {"x"};
        t.rows.push_back({"1"});
        d.write("t.csv", t.str(h));
        d.write("r.json", "{\"config_hash\":\"" + h + "\"}\n");
        d.write("m.jsonl", "{\"config_hash\":\"" + h + "\"}\n{\"meta\":{\"config_hash\":\"" + h + "\"}}\n");
        lm::LMConfig c;
        c.vocab_size = 8;
        c.d_model = 4;
        c.n_heads = 1;
        lm::save_checkpoint(d.path("m.ckpt").string(),
                            lm::ModelCheckpoint<double>{lm::Model<double>(c, 1), lm::Role::policy, {h, "", 0}});
        d.commit();
    }
    const VerifyResult ok = verify_output_dir(out);
    EXPECT_TRUE(ok.ok()) << (ok.problems.empty() ? "" : ok.problems[0]);
    EXPECT_EQ(ok.files_checked, 4u);
    EXPECT_EQ(ok.expected_hash, h);
    {
        std::ofstream f(out / "r.json");
        f << "{\"config_hash\":\"0000\"}\n";
    }
    {
        std::ofstream f(out / "t.csv", std::ios::app);
        f << "2,ffff\n";
    }
    const VerifyResult bad = verify_output_dir(out);
    EXPECT_EQ(bad.problems.size(), 2u);
    fs::remove(out / kRunConfigFile);
    EXPECT_THROW(verify_output_dir(out), ValidationError);
    fs::remove_all(out);
}

TEST(Fit, NonFiniteLossIsDivergence) {
    lm::LMConfig c;
    c.vocab_size = 8;
    c.d_model = 4;
    c.n_heads = 1;
    lm::Model<double> m(c, 1);
    obj::TrainConfig tc;
    tc.steps = 3;
    std::size_t calls = 0;
    const BatchLoss<double> loss = [&](ad::Tape<double>& t, std::span<const std::size_t>, std::vector<double>&) {
        const double v = ++calls == 2 ? std::numeric_limits<double>::quiet_NaN() : 1.0;
        return t.constant(ad::Tensor<double>::scalar(v));
    };
    try {
        fit<double>(m, 10, tc, 1, loss);
        FAIL() << "expected DivergenceError";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
    }
}

TEST(Fit, StepsFromEpochs) {
    obj::TrainConfig tc;
    tc.batch_size = 16;
    tc.epochs = 3;
    EXPECT_EQ(steps_for(tc, 100), 21u);
    tc.steps = 5;
    EXPECT_EQ(steps_for(tc, 100), 5u);
}

TEST(Stages, SepoRejectsMissingMaskIds) {
    const auto cfg = tiny_config();
    const auto d = prepare_data(cfg, 1);
    MaskSet masks = full_masks(d.target);
    const std::string victim = d.target.examples[5].pair.id;
    masks.by_id.erase(victim);
    const lm::Model<double> init(cfg.policy_arch, 1);
    try {
        run_sepo<double>(init, d.target, masks, cfg.sepo_train, 1);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find(victim), std::string::npos) << e.what();
    }
}

TEST(Stages, ContextTooShortIsValidationError) {
    auto cfg = tiny_config();
    cfg.policy_arch.max_context = 6;
    EXPECT_THROW(cfg.validate(), ValidationError);
    const auto d = prepare_data(tiny_config(), 1);
    EXPECT_THROW(run_sft<double>(d.target, cfg.policy_arch, cfg.init_train, 1), ValidationError);
}

TEST(Pipeline, SameSeedSameResultsAcrossThreadCounts) {
    auto cfg = tiny_config();
    const auto a = run_pipeline<double>(cfg, 5);
    const auto b = run_pipeline<double>(cfg, 5);
    EXPECT_EQ(a.recall, b.recall);
    EXPECT_EQ(a.selective.report.wins, b.selective.report.wins);
    EXPECT_EQ(a.selective.final_loss, b.selective.final_loss);
    EXPECT_EQ(a.full.report.mean_reward_policy, b.full.report.mean_reward_policy);
    EXPECT_GT(a.policy_params, a.oracle_params);

    cfg.jobs = 1;
    const auto s1 = sweep_selection<double>(cfg, {5}, {{30, 30}, {100, 100}});
    cfg.jobs = 2;
    const auto s2 = sweep_selection<double>(cfg, {5}, {{30, 30}, {100, 100}});
    EXPECT_EQ(s1.table().str("h"), s2.table().str("h"));
}

TEST(Pipeline, SelectionMasksHaveCeilCounts) {
    const auto cfg = tiny_config();
    const auto d = prepare_data(cfg, 2);
    const auto op = train_oracle<double>(cfg.oracle_arch, cfg, d.oracle_set, 2);
    const auto r = run_score_select(op.oracle.checkpoint.model, op.ref.checkpoint.model, d.target, 30, 30);
    ASSERT_EQ(r.rows.size(), 2 * d.target.size());
    for (const auto& row : r.rows) EXPECT_EQ(row.mask.count(), scoring::selection_count(30, row.table.scores.size()));
    EXPECT_TRUE(r.recall.recall().has_value());
}

class Cli : public ::testing::Test {
  protected:
    fs::path root = scratch("cli");
    std::string p(const std::string& rel) const { return (root / rel).string(); }
    void TearDown() override { fs::remove_all(root); }
};

TEST_F(Cli, FullChainProducesVerifiableDirectories) {
    const std::string task = " --seed 3 --n 80 --n-oracle 40 ";
    ASSERT_EQ(run_cli("gen-data" + task + "--out " + p("data")), 0);
    ASSERT_EQ(run_cli("sft --seed 3 --role base_ref --arch 1x1x8 --data " + p("data/oracle_subset.jsonl") +
                      " --out " + p("ref")),
              0);
    ASSERT_EQ(run_cli("dpo-oracle --seed 3 --epochs 1 --ref " + p("ref/model.ckpt") + " --data " +
                      p("data/oracle_subset.jsonl") + " --out " + p("oracle")),
              0);
    ASSERT_EQ(run_cli("score-select --seed 3 --oracle " + p("oracle/model.ckpt") + " --ref " + p("ref/model.ckpt") +
                      " --data " + p("data/target.jsonl") + " --out " + p("masks")),
              0);
    ASSERT_EQ(run_cli("sft --seed 3 --role policy --arch 1x2x8 --data " + p("data/target.jsonl") + " --out " +
                      p("init")),
              0);
    const std::string sepo_args = "sepo --seed 3 --policy " + p("init/model.ckpt") + " --oracle " +
                                  p("oracle/model.ckpt") + " --ref " + p("ref/model.ckpt") + " --masks " +
                                  p("masks/masks.jsonl") + " --data " + p("data/target.jsonl");
    ASSERT_EQ(run_cli(sepo_args + " --out " + p("sepo")), 0);
    ASSERT_EQ(run_cli("eval --seed 3 --n-prompts 10 --policy " + p("sepo/model.ckpt") + " --base " +
                      p("init/model.ckpt") + " --out " + p("eval")),
              0);
    for (const char* dir : {"data", "ref", "oracle", "masks", "init", "sepo", "eval"}) {
        EXPECT_TRUE(fs::exists(root / dir / kRunConfigFile)) << dir;
        EXPECT_EQ(run_cli("verify --dir " + p(dir)), 0) << dir;
        const VerifyResult v = verify_output_dir(root / dir);
        EXPECT_TRUE(v.ok()) << dir;
        EXPECT_GT(v.files_checked, 0u) << dir;
    }
    const auto report = nlohmann::json::parse(slurp(root / "eval" / "eval.json"));
    EXPECT_EQ(report.at("n").get<int>(), 10);

    // Masks paired with a different oracle are refused.
    ASSERT_EQ(run_cli("dpo-oracle --seed 4 --epochs 1 --ref " + p("ref/model.ckpt") + " --data " +
                      p("data/oracle_subset.jsonl") + " --out " + p("oracle2")),
              0);
    const std::string mismatched = "sepo --seed 3 --policy " + p("init/model.ckpt") + " --oracle " +
                                   p("oracle2/model.ckpt") + " --ref " + p("ref/model.ckpt") + " --masks " +
                                   p("masks/masks.jsonl") + " --data " + p("data/target.jsonl");
    EXPECT_EQ(run_cli(mismatched + " --out " + p("sepo2")), 2);
    EXPECT_FALSE(fs::exists(root / "sepo2"));

    // Existing output is not clobbered without --force; reruns are byte-identical.
    EXPECT_EQ(run_cli(sepo_args + " --out " + p("sepo")), 2);
    ASSERT_EQ(run_cli(sepo_args + " --out " + p("sepo_again")), 0);
    EXPECT_EQ(slurp(root / "sepo" / "model.ckpt"), slurp(root / "sepo_again" / "model.ckpt"));
}

TEST_F(Cli, EnvironmentSeedOverridesFlag) {
    ASSERT_EQ(run_cli("gen-data --seed 1 --n 10 --n-oracle 5 --out " + p("a")), 0);
    ASSERT_EQ(std::system(("SEPO_SEED=1 " + std::string(SEPO_CLI) + " gen-data --seed 2 --n 10 --n-oracle 5 --out " +
                           p("b") + " >/dev/null 2>&1")
                              .c_str()),
              0);
    EXPECT_EQ(slurp(root / "a" / "target.jsonl"), slurp(root / "b" / "target.jsonl"));
    EXPECT_NE(std::system(("SEPO_SEED=x " + std::string(SEPO_CLI) + " gen-data --n 10 --out " + p("c") +
                           " >/dev/null 2>&1")
                              .c_str()),
              0);
}

TEST_F(Cli, BadInputsExitWithValidationCode) {
    EXPECT_EQ(run_cli("gen-data --n 10 --key-density 0 --out " + p("x")), 2);
    EXPECT_EQ(run_cli("sft --data " + p("missing.jsonl") + " --out " + p("x")), 2);
    EXPECT_EQ(run_cli("no-such-command"), 2);
    EXPECT_EQ(run_cli("gen-data --precision 16 --out " + p("x")), 2);
    EXPECT_FALSE(fs::exists(root / "x"));
}
