// sepo: command-line driver for the selective preference optimization lab.
//
//   sepo gen-data        --out runs/data
//   sepo sft             --data runs/data/oracle_subset.jsonl --out runs/ref
//   sepo dpo-oracle      --ref runs/ref/model.ckpt --data ... --out runs/oracle
//   sepo score-select    --oracle ... --ref ... --data runs/data/target.jsonl --out runs/masks
//   sepo sft --role policy --data runs/data/target.jsonl --out runs/init
//   sepo sepo            --policy runs/init/model.ckpt --masks runs/masks/masks.jsonl ...
//   sepo eval            --policy runs/sepo/model.ckpt --base runs/init/model.ckpt --out runs/eval
//   sepo sweep-selection | sweep-datascale | sweep-w2s | weak-data | pipeline --out DIR
//   sepo verify          --dir DIR
//
// Exit codes: 0 ok, 2 validation error, 3 numeric divergence.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sepo/sepo.hpp"

namespace {

using namespace sepo;
using pipeline::ExperimentConfig;
using pipeline::OutputDir;
using pipeline::RunConfig;

struct Options {
    std::string stage;
    std::string out;
    bool force = false;
    std::uint64_t seed = 1;
    int precision = 64;
    std::size_t jobs = 1;

    // task
    std::string key_rule = "anywhere";
    std::size_t alphabet = 16;
    std::size_t prompt_min = 3, prompt_max = 5;
    std::size_t response_min = 9, response_max = 9;
    std::size_t good_set = 2, bad_set = 2, markers = 1;
    double key_density = 0.2;
    double reward_gap = 8.0;
    double p_good = 0.5;
    double noise = 0.0;

    // data
    std::size_t n = 10000;
    std::size_t n_oracle = 2000;
    std::optional<double> ood_noise;
    bool relocate_markers = false;

    // inputs
    std::string data, ref, oracle, policy, base, masks, dir;

    // models
    std::string role = "base_ref";
    std::optional<std::string> arch;
    std::string oracle_arch = "1x2x32";
    std::string policy_arch = "4x4x128";
    std::string oracle_sizes = "1x2x8,1x2x16,1x2x32";

    // training overrides
    std::optional<double> lr, beta, gamma, k_w, k_l, grad_clip;
    std::optional<std::size_t> steps, epochs, batch_size;
    std::optional<double> oracle_beta, oracle_lr;
    std::optional<std::size_t> oracle_epochs;
    double fraction = 1.0;

    // eval
    std::size_t n_prompts = 500;
    double temperature = 0.8;
    std::size_t max_new = 16;

    // sweeps
    std::string seeds = "1,2,3";
    std::string grid = "10,30,50,70,90";
    std::string fractions = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0";
};

template <class V>
std::vector<V> parse_list(const std::string& s, const char* what) {
    std::vector<V> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::istringstream is(item);
        V v{};
        if (!(is >> v) || !is.eof()) throw ValidationError(std::string("bad ") + what + " entry '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ValidationError(std::string("empty ") + what + " list");
    return out;
}

/// "LxHxD" -> layers, heads, d_model.
lm::LMConfig parse_arch(const std::string& s) {
    std::vector<std::size_t> v;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, 'x')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stoul(part, &used));
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw ValidationError("architecture must look like LAYERSxHEADSxDMODEL, got '" + s + "'");
        }
    }
    if (v.size() != 3) throw ValidationError("architecture must look like LAYERSxHEADSxDMODEL, got '" + s + "'");
    return pipeline::make_arch(v[0], v[1], v[2]);
}

data::SyntheticTaskSpec task_spec(const Options& o) {
    data::SyntheticTaskSpec t;
    t.key_rule = data::key_rule_from_string(o.key_rule);
    t.alphabet_size = o.alphabet;
    t.prompt_len_min = o.prompt_min;
    t.prompt_len_max = o.prompt_max;
    t.response_len_min = o.response_min;
    t.response_len_max = o.response_max;
    t.good_set_size = o.good_set;
    t.bad_set_size = o.bad_set;
    t.n_markers = o.markers;
    t.key_density = o.key_density;
    t.reward_gap = o.reward_gap;
    t.p_good = o.p_good;
    t.noise = o.noise;
    t.validate();
    return t;
}

void apply_overrides(const Options& o, obj::TrainConfig& t) {
    if (o.lr) t.lr = *o.lr;
    if (o.beta) t.beta = *o.beta;
    if (o.gamma) t.gamma = *o.gamma;
    if (o.k_w) t.k_w = *o.k_w;
    if (o.k_l) t.k_l = *o.k_l;
    if (o.grad_clip) t.grad_clip = *o.grad_clip;
    if (o.steps) t.steps = *o.steps;
    if (o.epochs) t.epochs = *o.epochs;
    if (o.batch_size) t.batch_size = *o.batch_size;
}

ExperimentConfig experiment_config(const Options& o) {
    ExperimentConfig c;
    c.task = task_spec(o);
    c.n_target = o.n;
    c.n_oracle = o.n_oracle;
    c.oracle_arch = parse_arch(o.oracle_arch);
    c.policy_arch = parse_arch(o.policy_arch);
    c.eval.n_prompts = o.n_prompts;
    c.eval.temperature = o.temperature;
    c.eval.max_new = o.max_new;
    c.jobs = o.jobs;
    apply_overrides(o, c.sepo_train);
    if (o.oracle_beta) c.oracle_train.beta = *o.oracle_beta;
    if (o.oracle_lr) c.oracle_train.lr = *o.oracle_lr;
    if (o.oracle_epochs) c.oracle_train.epochs = *o.oracle_epochs;
    for (obj::TrainConfig* t : {&c.ref_train, &c.oracle_train, &c.init_train, &c.sepo_train}) t->precision = o.precision;
    c.sync_archs();
    c.validate();
    return c;
}

RunConfig base_run_config(const Options& o) {
    RunConfig rc;
    rc.set("stage", o.stage);
    rc.set("seed", std::to_string(o.seed));
    rc.set("precision", std::to_string(o.precision));
    return rc;
}

/// Writes run_config.txt and returns its hash.
std::string stamp(const OutputDir& out, const RunConfig& rc) {
    out.write(pipeline::kRunConfigFile, rc.text());
    return rc.hash();
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw ValidationError(std::string("missing required option ") + flag);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

// ------------------------------------------------------------ single stages

int cmd_gen_data(const Options& o) {
    const auto task = task_spec(o);
    RunConfig rc = base_run_config(o);
    rc.set_block("task.", task.canonical());
    rc.set("n", std::to_string(o.n));
    rc.set("n_oracle", std::to_string(o.n_oracle));
    data::ShiftDescriptor shift;
    if (o.ood_noise) shift.noise = *o.ood_noise;
    shift.relocate_markers = o.relocate_markers;
    rc.set("shift.noise", o.ood_noise ? pipeline::fmt(*o.ood_noise) : "none");
    rc.set("shift.relocate_markers", o.relocate_markers ? "true" : "false");
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    data::Dataset target = data::make_ood_dataset(task, shift, o.n, derive_seed(o.seed, "target"));
    const double frac = std::min(1.0, double(o.n_oracle) / double(o.n));
    data::Dataset subset = data::random_subsample(target, frac, derive_seed(o.seed, "oracle-subset"));
    target.meta.config_hash = h;
    subset.meta.config_hash = h;
    data::save_dataset(target, out.path("target.jsonl").string());
    data::save_dataset(subset, out.path("oracle_subset.jsonl").string());
    out.commit();
    log_line("wrote " + std::to_string(target.size()) + " pairs (" + std::to_string(subset.size()) +
             " in the oracle subset) to " + o.out);
    return 0;
}

template <class T>
void write_training(const OutputDir& out, pipeline::TrainResult<T>& r, const std::string& h) {
    r.checkpoint.provenance.config_hash = h;
    lm::save_checkpoint(out.path("model.ckpt").string(), r.checkpoint);
    out.write("train_log.csv", pipeline::train_log_table(r.log).str(h));
    log_line("loss " + pipeline::fmt(r.first_loss()) + " -> " + pipeline::fmt(r.final_loss()) + " over " +
             std::to_string(r.log.size()) + " steps");
}

template <class T>
lm::ModelCheckpoint<T> load_model(const std::string& path, const char* flag) {
    require(path, flag);
    const std::uint32_t width = lm::checkpoint_scalar_bytes(path);
    if (width != sizeof(T))
        throw ValidationError(std::string(flag) + " checkpoint stores " + std::to_string(8 * width) +
                              "-bit values but --precision is " + std::to_string(8 * sizeof(T)));
    return lm::load_checkpoint<T>(path);
}

template <class T>
int cmd_sft(const Options& o) {
    require(o.data, "--data");
    const ExperimentConfig cfg = experiment_config(o);
    const lm::Role role = lm::role_from_string(o.role);
    if (role == lm::Role::oracle) throw ValidationError("sft produces base_ref or policy checkpoints");
    lm::LMConfig arch = o.arch ? parse_arch(*o.arch) : (role == lm::Role::policy ? cfg.policy_arch : cfg.oracle_arch);
    arch.vocab_size = cfg.task.vocab_size();
    arch.max_context = cfg.context_needed();
    obj::TrainConfig tc = role == lm::Role::policy ? cfg.init_train : cfg.ref_train;
    apply_overrides(o, tc);
    tc.precision = o.precision;
    const data::Dataset ds = data::load_dataset(o.data);
    RunConfig rc = base_run_config(o);
    rc.set("role", lm::to_string(role));
    rc.set_block("arch.", arch.canonical());
    rc.set_block("train.", tc.canonical());
    rc.add_input("data", o.data);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    auto r = pipeline::run_sft<T>(ds, arch, tc, o.seed, role, h);
    write_training(out, r, h);
    out.commit();
    return 0;
}

template <class T>
int cmd_dpo_oracle(const Options& o) {
    require(o.data, "--data");
    const ExperimentConfig cfg = experiment_config(o);
    const auto ref = load_model<T>(o.ref, "--ref");
    obj::TrainConfig tc = cfg.oracle_train;
    apply_overrides(o, tc);
    if (o.oracle_beta) tc.beta = *o.oracle_beta;
    tc.precision = o.precision;
    data::Dataset ds = data::load_dataset(o.data);
    if (o.fraction < 1.0) ds = data::random_subsample(ds, o.fraction, derive_seed(o.seed, "fraction"));
    else if (!(o.fraction == 1.0)) throw ValidationError("--fraction must be in (0, 1]");
    RunConfig rc = base_run_config(o);
    rc.set_block("train.", tc.canonical());
    rc.set("fraction", pipeline::fmt(o.fraction));
    rc.add_input("data", o.data);
    rc.add_input("ref", o.ref);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    auto r = pipeline::run_dpo_oracle<T>(ref.model, ds, tc, o.seed, h);
    write_training(out, r, h);
    out.commit();
    return 0;
}

template <class T>
int cmd_score_select(const Options& o) {
    require(o.data, "--data");
    const auto oracle = load_model<T>(o.oracle, "--oracle");
    const auto ref = load_model<T>(o.ref, "--ref");
    const double k_w = o.k_w.value_or(30.0), k_l = o.k_l.value_or(30.0);
    const data::Dataset ds = data::load_dataset(o.data);
    RunConfig rc = base_run_config(o);
    rc.set("k_w", pipeline::fmt(k_w));
    rc.set("k_l", pipeline::fmt(k_l));
    rc.add_input("data", o.data);
    rc.add_input("oracle", o.oracle);
    rc.add_input("ref", o.ref);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto sel = pipeline::run_score_select(oracle.model, ref.model, ds, k_w, k_l);
    scoring::write_mask_file(out.path("masks.jsonl").string(), sel.rows, h);
    pipeline::MaskMeta meta{lm::file_hash(o.oracle), lm::file_hash(o.ref), data::dataset_hash(ds), k_w, k_l, h};
    out.write("masks.jsonl.meta.json", meta.dump());
    out.write("curves.csv", scoring::curve_csv({{"chosen", sel.chosen_curve}, {"rejected", sel.rejected_curve}}, h));
    out.write("histograms.csv",
              scoring::histogram_csv({{"chosen", sel.chosen_hist}, {"rejected", sel.rejected_hist}}, h));
    nlohmann::json summary{{"pairs", ds.size()},
                           {"k_w", k_w},
                           {"k_l", k_l},
                           {"chosen_curve_shift", sel.chosen_curve.shift},
                           {"rejected_curve_shift", sel.rejected_curve.shift},
                           {"config_hash", h}};
    if (auto r = sel.recall.recall()) {
        summary["key_token_recall"] = *r;
        summary["random_recall"] = *sel.recall.random_baseline();
        log_line("key-token recall " + pipeline::fmt(*r) + " (random " + pipeline::fmt(*sel.recall.random_baseline()) +
                 ")");
    }
    out.write("selection_summary.json", summary.dump(2) + "\n");
    out.commit();
    return 0;
}

template <class T>
int cmd_sepo(const Options& o) {
    require(o.data, "--data");
    require(o.masks, "--masks");
    const ExperimentConfig cfg = experiment_config(o);
    const auto init = load_model<T>(o.policy, "--policy");
    require(o.oracle, "--oracle");
    require(o.ref, "--ref");
    const data::Dataset ds = data::load_dataset(o.data);
    const pipeline::MaskMeta meta = pipeline::MaskMeta::load(pipeline::mask_meta_path(o.masks));
    if (meta.oracle_hash != lm::file_hash(o.oracle) || meta.ref_hash != lm::file_hash(o.ref))
        throw ValidationError("mask file was scored with a different oracle/reference pair than --oracle/--ref");
    if (meta.dataset_hash != data::dataset_hash(ds))
        throw ValidationError("mask file was scored on a different dataset than --data");
    const auto mf = scoring::read_mask_file(o.masks);
    obj::TrainConfig tc = cfg.sepo_train;
    tc.k_w = meta.k_w;
    tc.k_l = meta.k_l;
    RunConfig rc = base_run_config(o);
    rc.set_block("train.", tc.canonical());
    rc.add_input("data", o.data);
    rc.add_input("masks", o.masks);
    rc.add_input("policy", o.policy);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    auto r = pipeline::run_sepo<T>(init.model, ds, pipeline::MaskSet::from(mf), tc, o.seed, h);
    write_training(out, r, h);
    out.commit();
    return 0;
}

template <class T>
int cmd_eval(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    const auto policy = load_model<T>(o.policy, "--policy");
    const auto base = load_model<T>(o.base, "--base");
    RunConfig rc = base_run_config(o);
    rc.set_block("task.", cfg.task.canonical());
    rc.set("n_prompts", std::to_string(cfg.eval.n_prompts));
    rc.set("temperature", pipeline::fmt(cfg.eval.temperature));
    rc.set("max_new", std::to_string(cfg.eval.max_new));
    rc.add_input("policy", o.policy);
    rc.add_input("base", o.base);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto prompts = data::generate_prompts(cfg.task, cfg.eval.n_prompts, derive_seed(o.seed, "eval-prompts"));
    auto rep = pipeline::run_eval(policy.model, base.model, prompts, cfg.task, cfg.eval, derive_seed(o.seed, "eval"));
    rep.config_hash = h;
    out.write("eval.json", pipeline::report_json(rep).dump(2) + "\n");
    out.commit();
    log_line("win rate " + pipeline::fmt(rep.win_rate) + " [" + pipeline::fmt(rep.ci_low) + ", " +
             pipeline::fmt(rep.ci_high) + "] over " + std::to_string(rep.n) + " prompts at temperature " +
             pipeline::fmt(rep.temperature));
    return 0;
}

// ------------------------------------------------------------ experiments

RunConfig experiment_run_config(const Options& o, const ExperimentConfig& cfg) {
    RunConfig rc = base_run_config(o);
    rc.set_block("", cfg.canonical());
    return rc;
}

template <class T>
int cmd_pipeline(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, experiment_run_config(o, cfg));
    const auto r = pipeline::run_pipeline<T>(cfg, o.seed);
    pipeline::CsvTable t;
    t.header = {"seed", "arm", "k_w", "k_l", "oracle_params", "policy_params", "recall", "random_recall"};
    for (auto& c : pipeline::report_header()) t.header.push_back(c);
    for (const auto* a : {&r.selective, &r.full}) {
        std::vector<std::string> row{pipeline::fmt(r.seed), a == &r.full ? "full" : "selective",
                                     pipeline::fmt(a->k_w), pipeline::fmt(a->k_l), pipeline::fmt(r.oracle_params),
                                     pipeline::fmt(r.policy_params), pipeline::fmt(r.recall),
                                     pipeline::fmt(r.random_recall)};
        for (auto& c : pipeline::report_cells(a->report)) row.push_back(c);
        t.rows.push_back(std::move(row));
    }
    out.write("pipeline.csv", t.str(h));
    out.write("curves.csv",
              scoring::curve_csv({{"chosen", r.selection.chosen_curve}, {"rejected", r.selection.rejected_curve}}, h));
    out.write("histograms.csv", scoring::histogram_csv(
                                    {{"chosen", r.selection.chosen_hist}, {"rejected", r.selection.rejected_hist}}, h));
    out.commit();
    log_line("recall " + pipeline::fmt(r.recall) + " (random " + pipeline::fmt(r.random_recall) + "); selective win " +
             pipeline::fmt(r.selective.report.win_rate) + ", full win " + pipeline::fmt(r.full.report.win_rate));
    return 0;
}

template <class T>
int cmd_sweep_selection(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    const auto seeds = parse_list<std::uint64_t>(o.seeds, "--seeds");
    const auto ks = parse_list<double>(o.grid, "--grid");
    RunConfig rc = experiment_run_config(o, cfg);
    rc.set("seeds", o.seeds);
    rc.set("grid", o.grid);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto sweep = pipeline::sweep_selection<T>(cfg, seeds, pipeline::full_grid(ks));
    out.write("selection_grid.csv", sweep.table().str(h));
    out.commit();
    std::size_t failed = 0;
    for (const auto& c : sweep.cells) failed += c.arm ? 0 : 1;
    log_line(std::to_string(sweep.cells.size()) + " cells, " + std::to_string(failed) + " failed");
    return 0;
}

template <class T>
int cmd_sweep_datascale(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    const auto seeds = parse_list<std::uint64_t>(o.seeds, "--seeds");
    const auto fr = parse_list<double>(o.fractions, "--fractions");
    RunConfig rc = experiment_run_config(o, cfg);
    rc.set("seeds", o.seeds);
    rc.set("fractions", o.fractions);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto sweep = pipeline::sweep_datascale<T>(cfg, seeds, fr);
    out.write("datascale_cells.csv", sweep.table().str(h));
    out.write("datascale_summary.csv", sweep.summary_table().str(h));
    out.commit();
    log_line(std::string("monotone trend: ") + (sweep.monotone() ? "yes" : "no"));
    return 0;
}

template <class T>
int cmd_sweep_w2s(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    const auto seeds = parse_list<std::uint64_t>(o.seeds, "--seeds");
    std::vector<pipeline::OracleSize> sizes;
    for (const auto& s : parse_list<std::string>(o.oracle_sizes, "--oracle-sizes")) sizes.push_back({s, parse_arch(s)});
    RunConfig rc = experiment_run_config(o, cfg);
    rc.set("seeds", o.seeds);
    rc.set("oracle_sizes", o.oracle_sizes);
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto sweep = pipeline::sweep_w2s<T>(cfg, seeds, sizes);
    out.write("w2s.csv", sweep.table().str(h));
    for (const auto& c : sweep.cells) {
        if (!c.warning.empty()) log_line("warning: oracle " + c.label + ": " + c.warning);
        if (!c.arm) continue;
        out.write("histograms/oracle_" + c.label + "_seed" + std::to_string(c.seed) + ".csv",
                  scoring::histogram_csv({{"chosen", c.chosen_hist}, {"rejected", c.rejected_hist}}, h));
    }
    out.commit();
    return 0;
}

template <class T>
int cmd_weak_data(const Options& o) {
    const ExperimentConfig cfg = experiment_config(o);
    const auto seeds = parse_list<std::uint64_t>(o.seeds, "--seeds");
    data::ShiftDescriptor shift;
    shift.noise = o.ood_noise.value_or(0.3);
    shift.relocate_markers = o.relocate_markers;
    RunConfig rc = experiment_run_config(o, cfg);
    rc.set("seeds", o.seeds);
    rc.set("shift.noise", pipeline::fmt(*shift.noise));
    rc.set("shift.relocate_markers", o.relocate_markers ? "true" : "false");
    OutputDir out(o.out, o.force);
    const std::string h = stamp(out, rc);
    const auto run = pipeline::run_weak_data<T>(cfg, shift, seeds, o.k_w.value_or(30.0));
    out.write("weak_data.csv", run.table().str(h));
    out.commit();
    log_line("measured OOD label flip rate " + pipeline::fmt(run.ood_label_flip_rate));
    return 0;
}

int cmd_verify(const Options& o) {
    const std::string dir = o.dir.empty() ? o.out : o.dir;
    require(dir, "--dir");
    const auto v = pipeline::verify_output_dir(dir);
    for (const auto& p : v.problems) std::cerr << "mismatch: " << p << '\n';
    std::cout << (v.ok() ? "ok" : "FAILED") << ": " << v.files_checked << " files checked against config hash "
              << v.expected_hash << '\n';
    return v.ok() ? 0 : 2;
}

template <class T>
int dispatch(const Options& o) {
    const std::string& s = o.stage;
    if (s == "sft") return cmd_sft<T>(o);
    if (s == "dpo-oracle") return cmd_dpo_oracle<T>(o);
    if (s == "score-select") return cmd_score_select<T>(o);
    if (s == "sepo") return cmd_sepo<T>(o);
    if (s == "eval") return cmd_eval<T>(o);
    if (s == "pipeline") return cmd_pipeline<T>(o);
    if (s == "sweep-selection") return cmd_sweep_selection<T>(o);
    if (s == "sweep-datascale") return cmd_sweep_datascale<T>(o);
    if (s == "sweep-w2s") return cmd_sweep_w2s<T>(o);
    if (s == "weak-data") return cmd_weak_data<T>(o);
    throw ValidationError("unknown stage '" + s + "'");
}

} // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Selective preference optimization lab"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML key = value file with option defaults");

    app.add_option("--out", o.out, "Output directory (written atomically)");
    app.add_flag("--force", o.force, "Replace an existing output directory");
    app.add_option("--seed", o.seed, "Root seed (SEPO_SEED in the environment wins)");
    app.add_option("--precision", o.precision, "Scalar width in bits")->check(CLI::IsMember({32, 64}));
    app.add_option("--jobs", o.jobs, "Worker threads for sweep cells");

    auto* task = "Task";
    app.add_option("--key-rule", o.key_rule, "anywhere | after_marker")->group(task);
    app.add_option("--alphabet", o.alphabet, "Content symbols")->group(task);
    app.add_option("--prompt-len-min", o.prompt_min)->group(task);
    app.add_option("--prompt-len-max", o.prompt_max)->group(task);
    app.add_option("--response-len-min", o.response_min)->group(task);
    app.add_option("--response-len-max", o.response_max)->group(task);
    app.add_option("--good-set", o.good_set)->group(task);
    app.add_option("--bad-set", o.bad_set)->group(task);
    app.add_option("--markers", o.markers)->group(task);
    app.add_option("--key-density", o.key_density)->group(task);
    app.add_option("--reward-gap", o.reward_gap)->group(task);
    app.add_option("--p-good", o.p_good, "Probability a response is good-style")->group(task);
    app.add_option("--noise", o.noise, "Label swap probability")->group(task);

    auto* dat = "Data";
    app.add_option("--n", o.n, "Target pairs")->group(dat);
    app.add_option("--n-oracle", o.n_oracle, "Oracle subset pairs")->group(dat);
    app.add_option("--ood-noise", o.ood_noise, "Shifted label noise (gen-data, weak-data)")->group(dat);
    app.add_flag("--relocate-markers", o.relocate_markers, "Shift to a disjoint marker vocabulary")->group(dat);
    app.add_option("--data", o.data, "Dataset JSONL")->group(dat);
    app.add_option("--fraction", o.fraction, "Oracle data fraction (dpo-oracle)")->group(dat);

    auto* mdl = "Models";
    app.add_option("--ref", o.ref, "Reference checkpoint")->group(mdl);
    app.add_option("--oracle", o.oracle, "Oracle checkpoint")->group(mdl);
    app.add_option("--policy", o.policy, "Policy checkpoint")->group(mdl);
    app.add_option("--base", o.base, "Base policy checkpoint (eval)")->group(mdl);
    app.add_option("--masks", o.masks, "Mask JSONL from score-select")->group(mdl);
    app.add_option("--role", o.role, "base_ref | policy (sft)")->group(mdl);
    app.add_option("--arch", o.arch, "LAYERSxHEADSxDMODEL for sft")->group(mdl);
    app.add_option("--oracle-arch", o.oracle_arch)->group(mdl);
    app.add_option("--policy-arch", o.policy_arch)->group(mdl);
    app.add_option("--oracle-sizes", o.oracle_sizes, "Comma list of oracle archs (sweep-w2s)")->group(mdl);

    auto* trn = "Training";
    app.add_option("--lr", o.lr)->group(trn);
    app.add_option("--steps", o.steps, "Optimizer steps; 0 means --epochs passes")->group(trn);
    app.add_option("--epochs", o.epochs)->group(trn);
    app.add_option("--batch-size", o.batch_size)->group(trn);
    app.add_option("--beta", o.beta, "DPO KL coefficient")->group(trn);
    app.add_option("--gamma", o.gamma, "SePO reward scale")->group(trn);
    app.add_option("--k-w", o.k_w, "Chosen-side selection percent")->group(trn);
    app.add_option("--k-l", o.k_l, "Rejected-side selection percent")->group(trn);
    app.add_option("--grad-clip", o.grad_clip)->group(trn);
    app.add_option("--oracle-beta", o.oracle_beta)->group(trn);
    app.add_option("--oracle-lr", o.oracle_lr)->group(trn);
    app.add_option("--oracle-epochs", o.oracle_epochs)->group(trn);

    auto* evl = "Evaluation";
    app.add_option("--n-prompts", o.n_prompts)->group(evl);
    app.add_option("--temperature", o.temperature)->group(evl);
    app.add_option("--max-new", o.max_new)->group(evl);

    auto* swp = "Sweeps";
    app.add_option("--seeds", o.seeds, "Comma list of root seeds")->group(swp);
    app.add_option("--grid", o.grid, "Selection percents for both sides")->group(swp);
    app.add_option("--fractions", o.fractions)->group(swp);
    app.add_option("--dir", o.dir, "Directory to verify")->group(swp);

    const std::vector<std::pair<const char*, const char*>> subs{
        {"gen-data", "Generate a synthetic target set and oracle subset"},
        {"sft", "Supervised fine-tuning on chosen responses"},
        {"dpo-oracle", "Train the DPO oracle from a reference"},
        {"score-select", "Score tokens and write selection masks"},
        {"sepo", "Train a policy on selected tokens"},
        {"eval", "Win rate of a policy against a base policy"},
        {"pipeline", "All three steps plus eval of selective and full-token arms"},
        {"sweep-selection", "k_w x k_l grid"},
        {"sweep-datascale", "Oracle data fraction sweep"},
        {"sweep-w2s", "Oracle size sweep"},
        {"weak-data", "Selective vs full-token training on noisy shifted data"},
        {"verify", "Check every file in a run directory carries its config hash"}};
    for (const auto& [name, help] : subs) app.add_subcommand(name, help)->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    o.stage = app.get_subcommands().front()->get_name();
    if (const char* env = std::getenv("SEPO_SEED")) {
        try {
            o.seed = std::stoull(env);
        } catch (const std::exception&) {
            std::cerr << "error: SEPO_SEED is not an unsigned integer: '" << env << "'\n";
            return 2;
        }
    }

    try {
        if (o.stage == "verify") return cmd_verify(o);
        require(o.out, "--out");
        if (o.stage == "gen-data") return cmd_gen_data(o);
        return o.precision == 32 ? dispatch<float>(o) : dispatch<double>(o);
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << '\n';
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
