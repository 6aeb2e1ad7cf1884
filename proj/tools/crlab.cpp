// crlab command-line tool.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crlab/crlab.hpp"

namespace fs = std::filesystem;
using namespace crlab;

namespace {

struct CommonOptions {
    std::string out = "crlab-out";
    std::string config_file;
    std::vector<std::string> sets;
    std::optional<double> lambda_cr;
    std::optional<std::size_t> steps;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> seeds;
    std::optional<std::size_t> jobs;
    bool resume = false;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--out", o.out, "Output directory; every file is written under it");
    cmd->add_option("--config", o.config_file, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", o.sets, "Override a config key (key=value), repeatable");
    cmd->add_option("--lambda-cr", o.lambda_cr, "Contrastive weight");
    cmd->add_option("--steps", o.steps, "Total training steps");
    cmd->add_option("--seed", o.seed, "Seed (single run) or first seed (experiments)");
    cmd->add_option("--seeds", o.seeds, "Number of seeds for experiments");
    cmd->add_option("--jobs", o.jobs, "Parallel experiment arms");
    cmd->add_flag("--resume", o.resume, "Skip the command if its manifest is complete and matches");
}

LabConfig resolve(const CommonOptions& o, Settings extra = {}) {
    Settings file;
    if (!o.config_file.empty()) file = read_settings_file(o.config_file);
    Settings flags;
    for (const auto& s : o.sets) flags.push_back(parse_assignment(s));
    for (auto& e : extra) flags.push_back(std::move(e));
    auto num = [](auto v) {
        std::ostringstream os;
        os << std::setprecision(17) << v;
        return os.str();
    };
    if (o.lambda_cr) flags.emplace_back("lambda_cr", num(*o.lambda_cr));
    if (o.steps) flags.emplace_back("steps", num(*o.steps));
    if (o.seed) {
        flags.emplace_back("seed", num(*o.seed));
        flags.emplace_back("first_seed", num(*o.seed));
    }
    if (o.seeds) flags.emplace_back("seeds", num(*o.seeds));
    if (o.jobs) flags.emplace_back("jobs", num(*o.jobs));
    return build_config(file, flags);
}

/// Tracks outputs and writes manifest.json on completion.
class OutputDir {
public:
    OutputDir(const std::string& root, const std::string& command, const LabConfig& cfg)
        : root_(root), manifest_(make_manifest(command, cfg)) {
        fs::create_directories(root_);
    }

    bool up_to_date() const {
        const auto path = root_ / "manifest.json";
        if (!fs::exists(path)) return false;
        std::ifstream is(path);
        nlohmann::json j;
        try {
            is >> j;
            const auto m = RunManifest::from_json(j);
            if (!m.complete || m.config_hash != manifest_.config_hash) return false;
            for (const auto& f : m.outputs)
                if (!fs::exists(root_ / f)) return false;
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    fs::path path(const std::string& rel) {
        fs::create_directories((root_ / rel).parent_path());
        record(rel);
        return root_ / rel;
    }

    void record(const std::string& rel) {
        if (std::find(manifest_.outputs.begin(), manifest_.outputs.end(), rel) == manifest_.outputs.end())
            manifest_.outputs.push_back(rel);
    }

    void finish() {
        manifest_.finished = utc_timestamp();
        manifest_.complete = true;
        std::ofstream os(root_ / "manifest.json");
        os << manifest_.to_json().dump(2) << '\n';
    }

    const fs::path& root() const { return root_; }

private:
    fs::path root_;
    RunManifest manifest_;
};

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    if (!os) throw DataError("cannot write " + p.string());
    os << text;
}

nlohmann::json row_json(const MetricsRow& r) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    return {{"step", r.step},         {"lr", r.lr},
            {"loss_total", r.loss.total}, {"loss_sup", r.loss.sup},
            {"loss_cs", r.loss.cs},   {"loss_cr", r.loss.cr},
            {"mask_cs", r.loss.mask_ratio_cs}, {"mask_cr", r.loss.mask_ratio_cr},
            {"acc_raw", r.acc_raw},   {"acc_ema", r.acc_ema},
            {"silhouette", num(r.silhouette)}};
}

int cmd_run(const CommonOptions& o) {
    const LabConfig cfg = resolve(o);
    OutputDir out(o.out, "run", cfg);
    if (o.resume && out.up_to_date()) {
        std::cout << "up to date: " << o.out << "\n";
        return 0;
    }
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig train = cfg.resolved_train();
    const Dataset ds = generate_dataset(cfg.resolved_data());
    RunResult res;
    try {
        res = run(train, ds);
    } catch (const NonFiniteLossError& e) {
        write_text(out.path("nonfinite_snapshot.json"), e.snapshot() + "\n");
        throw;
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    {
        std::ofstream os(out.path("metrics.csv"));
        write_metrics_csv(os, res.metrics);
    }
    save_checkpoint(out.path("checkpoint_raw.json").string(), res.params);
    save_checkpoint(out.path("checkpoint_ema.json").string(), res.ema);
    write_text(out.path("config.txt"), config_text(cfg));
    nlohmann::json summary = {{"config", config_snapshot(cfg)},
                              {"seed", train.seed},
                              {"final", row_json(res.metrics.back())},
                              {"clamp_warnings", res.clamp_warnings},
                              {"wall_seconds", wall}};
    write_text(out.path("summary.json"), summary.dump(2) + "\n");
    out.finish();

    const auto& last = res.metrics.back();
    std::cout << "step " << last.step << "  acc_raw " << last.acc_raw << "  acc_ema " << last.acc_ema
              << "  silhouette " << last.silhouette << "  (" << wall << " s)\n";
    return 0;
}

template <class Fn>
int cmd_experiment(const CommonOptions& o, const std::string& name, const LabConfig& cfg, Fn&& body) {
    OutputDir out(o.out, name, cfg);
    if (o.resume && out.up_to_date()) {
        std::cout << "up to date: " << o.out << "\n";
        return 0;
    }
    const ExperimentReport rep = body(cfg);
    for (const auto& rel : write_report(out.root(), rep)) out.record(rel);
    write_text(out.path("config.txt"), config_text(cfg));
    out.finish();
    return 0;
}

void print_efficiency(const ExperimentReport& rep) {
    std::size_t cross = 0, sil = 0;
    for (const auto& e : rep.efficiency) {
        std::cout << "seed " << e.seed << "  cs-only final " << e.baseline_final << "  cs+cr final "
                  << e.candidate_final << "  crossover "
                  << (e.crossover_step ? std::to_string(*e.crossover_step) : std::string("none"))
                  << "  silhouette dominates " << (e.silhouette_dominates ? "yes" : "no") << "\n";
        cross += e.crossover_step && e.crossover_fraction <= 0.5;
        sil += e.silhouette_dominates;
    }
    std::cout << "crossover <= 50% of steps: " << cross << "/" << rep.efficiency.size()
              << "  silhouette dominance: " << sil << "/" << rep.efficiency.size() << "\n";
}

int cmd_gradcheck(std::size_t instances, std::uint64_t seed, const std::string& out_dir) {
    GradcheckOptions opt;
    opt.instances = instances;
    opt.seed = seed;
    const auto rep = run_gradcheck(opt);
    std::cout << std::left << std::setw(24) << "check" << std::setw(12) << "instances" << "max rel error\n";
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : rep.entries) {
        std::cout << std::setw(24) << e.name << std::setw(12) << e.instances << e.max_rel_error
                  << (e.passed() ? "" : "  FAIL") << "\n";
        j.push_back({{"name", e.name}, {"instances", e.instances}, {"max_rel_error", e.max_rel_error},
                     {"tolerance", e.tolerance}, {"passed", e.passed()}});
    }
    std::cout << "tolerance " << opt.tolerance << ", " << rep.seconds << " s\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_text(fs::path(out_dir) / "gradcheck.json", j.dump(2) + "\n");
    }
    return rep.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semi-supervised learning lab: consistency and contrastive regularization"};
    app.require_subcommand(1);

    CommonOptions run_o, eff_o, open_o, abl_o, exp_o;
    auto* run_cmd = app.add_subcommand("run", "Train one configuration");
    add_common(run_cmd, run_o);

    auto* eff_cmd = app.add_subcommand("efficiency", "cs-only vs cs+cr convergence and clustering");
    add_common(eff_cmd, eff_o);

    auto* open_cmd = app.add_subcommand("openset", "Accuracy under OOD injection into the unlabeled pool");
    add_common(open_cmd, open_o);
    std::string preset;
    std::string factors;
    open_cmd->add_option("--preset", preset, "far or near");
    open_cmd->add_option("--factors", factors, "OOD counts as multiples of the unlabeled count, e.g. 0,0.5,1,2");

    auto* abl_cmd = app.add_subcommand("ablate", "One-axis hyperparameter sweep");
    add_common(abl_cmd, abl_o);
    std::string axis, values;
    abl_cmd->add_option("--axis", axis, "lambda_cr|lambda_cs|mu|delta|delta_cr|thresholds|views|loss_mode");
    abl_cmd->add_option("--values", values, "Comma-separated values (default: axis presets)");

    auto* gc_cmd = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
    std::size_t gc_instances = 100;
    std::uint64_t gc_seed = 0x6C;
    std::string gc_out;
    gc_cmd->add_option("--instances", gc_instances, "Random instances per check");
    gc_cmd->add_option("--seed", gc_seed, "Instance seed");
    gc_cmd->add_option("--out", gc_out, "Also write gradcheck.json here");

    auto* exp_cmd = app.add_subcommand("export-data", "Write the generated dataset as CSV");
    add_common(exp_cmd, exp_o);
    double ood_factor = 0;
    exp_cmd->add_option("--ood-factor", ood_factor, "Inject this multiple of the unlabeled count as OOD samples");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) return cmd_run(run_o);
        if (*eff_cmd) {
            return cmd_experiment(eff_o, "efficiency", resolve(eff_o), [](const LabConfig& cfg) {
                auto rep = run_efficiency_experiment(cfg.resolved_train(), cfg.data, cfg.experiment.seed_list(),
                                                     cfg.experiment.jobs);
                print_efficiency(rep);
                return rep;
            });
        }
        if (*open_cmd) {
            Settings extra;
            if (!preset.empty()) extra.emplace_back("ood_preset", preset);
            if (!factors.empty()) extra.emplace_back("ood_factors", factors);
            return cmd_experiment(open_o, "openset", resolve(open_o, extra), [](const LabConfig& cfg) {
                const auto counts = ood_counts_from_factors(cfg.experiment.ood_factors, cfg.data.unlabeled_count);
                auto rep = run_openset_experiment(cfg.resolved_train(), cfg.data, counts, cfg.experiment.ood_preset,
                                                  cfg.experiment.seed_list(), cfg.experiment.jobs);
                for (const auto& s : rep.openset)
                    std::cout << "seed " << s.seed << "  " << s.arm << "  degradation " << s.degradation << "\n";
                return rep;
            });
        }
        if (*abl_cmd) {
            Settings extra;
            if (!axis.empty()) extra.emplace_back("axis", axis);
            if (!values.empty()) extra.emplace_back("values", values);
            return cmd_experiment(abl_o, "ablate", resolve(abl_o, extra), [](const LabConfig& cfg) {
                auto rep = run_ablation_sweep(cfg.resolved_train(), cfg.data, cfg.experiment.axis,
                                              cfg.experiment.values, cfg.experiment.seed_list(),
                                              cfg.experiment.reference_arms, cfg.experiment.jobs);
                for (const auto& r : rep.ablation)
                    std::cout << r.axis << "=" << r.value << "  seed " << r.seed << "  acc_ema " << r.final_acc_ema
                              << "\n";
                for (const auto& r : rep.reference)
                    std::cout << "reference " << r.value << "  seed " << r.seed << "  acc_ema " << r.final_acc_ema
                              << "\n";
                return rep;
            });
        }
        if (*gc_cmd) return cmd_gradcheck(gc_instances, gc_seed, gc_out);
        if (*exp_cmd) {
            const LabConfig cfg = resolve(exp_o);
            OutputDir out(exp_o.out, "export-data", cfg);
            if (exp_o.resume && out.up_to_date()) {
                std::cout << "up to date: " << exp_o.out << "\n";
                return 0;
            }
            const DatasetSpec spec = cfg.resolved_data();
            Dataset ds = generate_dataset(spec);
            if (ood_factor > 0) {
                const auto count = ood_counts_from_factors({ood_factor}, spec.unlabeled_count).front();
                ds.unlabeled = inject_ood(ds.unlabeled, spec, OodSpec{count, cfg.experiment.ood_preset, spec.seed});
            }
            std::ofstream os(out.path("dataset.csv"));
            write_dataset_csv(os, ds);
            os.close();
            out.finish();
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
