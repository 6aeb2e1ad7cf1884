#pragma once

// Multi-arm experiments: efficiency (cs-only vs cs+cr), open-set robustness,
// and one-axis ablation sweeps. Arms are independent and may run on a small
// thread pool; results are assembled in arm order, so reports do not depend
// on the job count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "crlab/config.hpp"
#include "crlab/data.hpp"
#include "crlab/trainer.hpp"

namespace crlab {

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
template <class F>
void parallel_for(std::size_t n, std::size_t jobs, F&& fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mu);
                    if (!error) error = std::current_exception();
                    next.store(n);
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------

struct ArmSpec {
    std::string name;  // e.g. "cs+cr"; the seed is kept separately
    TrainConfig train;
    DatasetSpec data;
    OodSpec ood;  // count 0: no injection
    nlohmann::json descriptor = nlohmann::json::object();
};

struct ArmResult {
    std::string name;
    std::uint64_t seed = 0;
    nlohmann::json descriptor;
    MetricsTable metrics;
    RunResult run;

    double final_acc_ema() const { return metrics.back().acc_ema; }
    double final_acc_raw() const { return metrics.back().acc_raw; }
};

/// Training-only execution of one arm: the returned RunResult carries the
/// final parameters for any later diagnostics.
inline ArmResult run_arm(const ArmSpec& spec) {
    const Dataset ds = generate_dataset(spec.data);
    const UnlabeledSet pool = spec.ood.count ? inject_ood(ds.unlabeled, spec.data, spec.ood) : ds.unlabeled;
    ArmResult r;
    r.name = spec.name;
    r.seed = spec.train.seed;
    r.descriptor = spec.descriptor;
    r.run = run(spec.train, ds.labeled, pool, ds.test);
    r.metrics = r.run.metrics;
    return r;
}

inline std::vector<ArmResult> run_arms(const std::vector<ArmSpec>& specs, std::size_t jobs) {
    std::vector<ArmResult> out(specs.size());
    parallel_for(specs.size(), jobs, [&](std::size_t i) { out[i] = run_arm(specs[i]); });
    return out;
}

/// Mean and population std of acc_ema and silhouette across seeds, per checkpoint.
struct ArmAggregate {
    std::string name;
    std::vector<std::size_t> steps;
    std::vector<double> acc_ema_mean, acc_ema_std, silhouette_mean, silhouette_std;
};

struct EfficiencySeed {
    std::uint64_t seed = 0;
    double baseline_final = 0;                 // cs-only final EMA accuracy
    double candidate_final = 0;                // cs+cr final EMA accuracy
    std::optional<std::size_t> crossover_step; // first cs+cr checkpoint reaching baseline_final
    double crossover_fraction = std::numeric_limits<double>::quiet_NaN();
    bool silhouette_dominates = false;         // every checkpoint after 10% of steps
};

struct OpenSetSeed {
    std::uint64_t seed = 0;
    std::string arm;
    std::vector<std::size_t> counts;
    std::vector<double> final_acc;
    double degradation = 0;          // final_acc[last] − final_acc[0]
    double confidence_in = 0;        // mean max-probability on in-distribution pool samples
    double confidence_ood = 0;       // same on OOD samples, largest count
};

struct AblationRow {
    std::string axis;
    std::string value;
    std::uint64_t seed = 0;
    double final_acc_ema = 0;
    double final_acc_raw = 0;
    double min_mask_cs = 0, max_mask_cs = 0, min_mask_cr = 0, max_mask_cr = 0;
};

struct ExperimentReport {
    std::string kind;
    nlohmann::json settings;
    std::vector<ArmResult> arms;
    std::vector<ArmAggregate> aggregates;
    std::vector<EfficiencySeed> efficiency;
    std::vector<OpenSetSeed> openset;
    std::vector<AblationRow> ablation;   // one row per swept value per seed
    std::vector<AblationRow> reference;  // cr-only and cs+ntxent arms
    std::size_t flag_reads_during_training = 0;

    const ArmResult& arm(const std::string& name, std::uint64_t seed) const {
        for (const auto& a : arms)
            if (a.name == name && a.seed == seed) return a;
        throw ConfigError("report has no arm " + name + " for seed " + std::to_string(seed));
    }
};

inline std::string arm_file_stem(const ArmResult& a) {
    std::string s;
    for (char c : a.name) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-') ? c : '_';
    return s + "_seed" + std::to_string(a.seed);
}

/// Checkpoint steps must agree across every arm that is aggregated together.
inline std::vector<ArmAggregate> aggregate_arms(const std::vector<ArmResult>& arms) {
    std::vector<std::string> names;
    for (const auto& a : arms)
        if (std::find(names.begin(), names.end(), a.name) == names.end()) names.push_back(a.name);
    std::vector<ArmAggregate> out;
    for (const auto& name : names) {
        std::vector<const ArmResult*> group;
        for (const auto& a : arms)
            if (a.name == name) group.push_back(&a);
        ArmAggregate agg;
        agg.name = name;
        const auto& ref = group.front()->metrics;
        for (const auto* g : group) {
            if (g->metrics.size() != ref.size()) throw DimensionError("aggregate: checkpoint counts differ in " + name);
            for (std::size_t i = 0; i < ref.size(); ++i)
                if (g->metrics[i].step != ref[i].step) throw DimensionError("aggregate: checkpoint steps differ in " + name);
        }
        for (std::size_t i = 0; i < ref.size(); ++i) {
            agg.steps.push_back(ref[i].step);
            auto stats = [&](auto field, std::vector<double>& mean, std::vector<double>& sd) {
                double s = 0, s2 = 0;
                for (const auto* g : group) s += field(g->metrics[i]);
                const double m = s / double(group.size());
                for (const auto* g : group) s2 += (field(g->metrics[i]) - m) * (field(g->metrics[i]) - m);
                mean.push_back(m);
                sd.push_back(std::sqrt(s2 / double(group.size())));
            };
            stats([](const MetricsRow& r) { return r.acc_ema; }, agg.acc_ema_mean, agg.acc_ema_std);
            stats([](const MetricsRow& r) { return r.silhouette; }, agg.silhouette_mean, agg.silhouette_std);
        }
        out.push_back(std::move(agg));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Efficiency.

inline EfficiencySeed compare_efficiency(const ArmResult& baseline, const ArmResult& candidate) {
    if (baseline.metrics.size() != candidate.metrics.size())
        throw DimensionError("efficiency: arms logged different checkpoints");
    EfficiencySeed e;
    e.seed = baseline.seed;
    e.baseline_final = baseline.final_acc_ema();
    e.candidate_final = candidate.final_acc_ema();
    const std::size_t total = baseline.metrics.back().step;
    for (const auto& r : candidate.metrics) {
        if (r.acc_ema >= e.baseline_final) {
            e.crossover_step = r.step;
            e.crossover_fraction = total ? double(r.step) / double(total) : 0.0;
            break;
        }
    }
    e.silhouette_dominates = true;
    for (std::size_t i = 0; i < baseline.metrics.size(); ++i) {
        const auto& b = baseline.metrics[i];
        if (b.step != candidate.metrics[i].step) throw DimensionError("efficiency: checkpoint steps differ");
        if (10 * b.step <= total) continue;
        if (!(candidate.metrics[i].silhouette >= b.silhouette)) e.silhouette_dominates = false;
    }
    return e;
}

inline ArmSpec make_arm(const std::string& name, const TrainConfig& base, const DatasetSpec& data,
                        std::uint64_t seed) {
    ArmSpec a;
    a.name = name;
    a.train = base;
    a.train.seed = seed;
    a.train.model.input_dim = data.input_dim;
    a.train.model.num_classes = data.num_classes;
    a.data = data;
    a.data.seed = seed;
    a.descriptor = {{"loss_mode", to_string(base.loss_mode)}};
    return a;
}

inline ExperimentReport run_efficiency_experiment(const TrainConfig& base, const DatasetSpec& data,
                                                  const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
    if (seeds.empty()) throw ConfigError("efficiency: no seeds");
    std::vector<ArmSpec> specs;
    for (auto seed : seeds) {
        TrainConfig cs = base, cr = base;
        cs.loss_mode = LossMode::cs_only;
        cr.loss_mode = LossMode::cs_cr;
        specs.push_back(make_arm("cs-only", cs, data, seed));
        specs.push_back(make_arm("cs+cr", cr, data, seed));
    }
    ExperimentReport rep;
    rep.kind = "efficiency";
    rep.settings = {{"steps", base.steps}, {"eval_interval", base.eval_interval}, {"seeds", seeds}};
    rep.arms = run_arms(specs, jobs);
    for (std::size_t i = 0; i < seeds.size(); ++i)
        rep.efficiency.push_back(compare_efficiency(rep.arms[2 * i], rep.arms[2 * i + 1]));
    rep.aggregates = aggregate_arms(rep.arms);
    return rep;
}

// ---------------------------------------------------------------------------
// Open-set.

/// Mean max-probability of the EMA model on pool samples, split by the hidden
/// OOD flag. Evaluation only; never called during training.
inline std::pair<double, double> ood_confidence(const ModelParams<double>& params, const UnlabeledSet& pool) {
    const auto c = forward(params, pool.x, ForwardMode::logits_only);
    double in_sum = 0, ood_sum = 0;
    std::size_t in_n = 0, ood_n = 0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        const auto p = softmax(c.logits.row(i));
        const double conf = *std::max_element(p.begin(), p.end());
        if (pool.is_ood.read(i)) {
            ood_sum += conf;
            ++ood_n;
        } else {
            in_sum += conf;
            ++in_n;
        }
    }
    const double nan = std::numeric_limits<double>::quiet_NaN();
    return {in_n ? in_sum / double(in_n) : nan, ood_n ? ood_sum / double(ood_n) : nan};
}

inline ExperimentReport run_openset_experiment(const TrainConfig& base, const DatasetSpec& data,
                                               const std::vector<std::size_t>& counts, OodPreset preset,
                                               const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
    if (counts.empty() || counts.front() != 0) throw ConfigError("openset: counts must start at 0");
    if (!std::is_sorted(counts.begin(), counts.end())) throw ConfigError("openset: counts must be ascending");
    if (seeds.empty()) throw ConfigError("openset: no seeds");

    const LossMode modes[] = {LossMode::cs_only, LossMode::cs_cr};
    std::vector<ArmSpec> specs;
    for (auto seed : seeds)
        for (auto mode : modes)
            for (auto count : counts) {
                TrainConfig t = base;
                t.loss_mode = mode;
                ArmSpec a = make_arm(to_string(mode), t, data, seed);
                a.name += "@ood" + std::to_string(count);
                a.ood = OodSpec{count, preset, seed};
                a.descriptor["ood_count"] = count;
                a.descriptor["ood_preset"] = to_string(preset);
                specs.push_back(std::move(a));
            }

    ExperimentReport rep;
    rep.kind = "openset";
    rep.settings = {{"steps", base.steps}, {"counts", counts}, {"preset", to_string(preset)}, {"seeds", seeds}};
    const std::size_t reads_before = HiddenFlags::reads().load();
    rep.arms = run_arms(specs, jobs);
    rep.flag_reads_during_training = HiddenFlags::reads().load() - reads_before;

    std::size_t k = 0;
    for (auto seed : seeds)
        for (auto mode : modes) {
            OpenSetSeed o;
            o.seed = seed;
            o.arm = to_string(mode);
            o.counts = counts;
            for (std::size_t c = 0; c < counts.size(); ++c) o.final_acc.push_back(rep.arms[k + c].final_acc_ema());
            o.degradation = o.final_acc.back() - o.final_acc.front();
            const auto& last = specs[k + counts.size() - 1];
            if (last.ood.count) {
                const Dataset ds = generate_dataset(last.data);
                const auto pool = inject_ood(ds.unlabeled, last.data, last.ood);
                std::tie(o.confidence_in, o.confidence_ood) = ood_confidence(rep.arms[k + counts.size() - 1].run.ema, pool);
            } else {
                o.confidence_in = o.confidence_ood = std::numeric_limits<double>::quiet_NaN();
            }
            rep.openset.push_back(std::move(o));
            k += counts.size();
        }
    rep.aggregates = aggregate_arms(rep.arms);
    return rep;
}

inline std::vector<std::size_t> ood_counts_from_factors(const std::vector<double>& factors, std::size_t unlabeled) {
    std::vector<std::size_t> out;
    for (double f : factors) {
        if (!(f >= 0)) throw ConfigError("ood factor must be >= 0");
        out.push_back(static_cast<std::size_t>(std::llround(f * double(unlabeled))));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ablation.

inline std::vector<std::string> default_axis_values(const std::string& axis) {
    if (axis == "lambda_cr") return {"0", "0.5", "1", "2", "10"};
    if (axis == "lambda_cs") return {"0", "0.5", "1", "2"};
    if (axis == "mu") return {"1", "3", "7"};
    if (axis == "delta" || axis == "delta_cr" || axis == "thresholds") return {"0", "0.5", "0.8", "0.95"};
    if (axis == "views") return {"1", "2", "4"};
    if (axis == "loss_mode") return {"cs-only", "cr-only", "cs+cr", "cs+ntxent"};
    throw ConfigError("unknown ablation axis '" + axis + "'");
}

/// Applies one axis value. `thresholds` sets δ and δ′ together.
inline void apply_axis(TrainConfig& t, const std::string& axis, const std::string& value) {
    LabConfig tmp;
    tmp.train = t;
    if (axis == "thresholds") {
        apply_setting(tmp, "delta", value);
        apply_setting(tmp, "delta_cr", value);
    } else if (axis == "lambda_cr" || axis == "lambda_cs" || axis == "mu" || axis == "delta" ||
               axis == "delta_cr" || axis == "views" || axis == "loss_mode") {
        apply_setting(tmp, axis, value);
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "'");
    }
    t = tmp.train;
}

inline AblationRow ablation_row(const ArmResult& a, const std::string& axis, const std::string& value) {
    AblationRow r;
    r.axis = axis;
    r.value = value;
    r.seed = a.seed;
    r.final_acc_ema = a.final_acc_ema();
    r.final_acc_raw = a.final_acc_raw();
    r.min_mask_cs = r.min_mask_cr = std::numeric_limits<double>::infinity();
    r.max_mask_cs = r.max_mask_cr = -std::numeric_limits<double>::infinity();
    for (const auto& m : a.metrics) {
        r.min_mask_cs = std::min(r.min_mask_cs, m.loss.mask_ratio_cs);
        r.max_mask_cs = std::max(r.max_mask_cs, m.loss.mask_ratio_cs);
        r.min_mask_cr = std::min(r.min_mask_cr, m.loss.mask_ratio_cr);
        r.max_mask_cr = std::max(r.max_mask_cr, m.loss.mask_ratio_cr);
    }
    return r;
}

inline ExperimentReport run_ablation_sweep(const TrainConfig& base, const DatasetSpec& data, const std::string& axis,
                                           std::vector<std::string> values, const std::vector<std::uint64_t>& seeds,
                                           bool reference_arms = true, std::size_t jobs = 1) {
    if (values.empty()) values = default_axis_values(axis);
    if (seeds.empty()) throw ConfigError("ablation: no seeds");
    std::vector<ArmSpec> specs;
    std::vector<std::string> arm_values;
    for (const auto& v : values)
        for (auto seed : seeds) {
            TrainConfig t = base;
            apply_axis(t, axis, v);
            t.validate();
            ArmSpec a = make_arm(axis + "=" + v, t, data, seed);
            a.descriptor[axis] = v;
            specs.push_back(std::move(a));
            arm_values.push_back(v);
        }
    const std::size_t swept = specs.size();
    if (reference_arms) {
        for (auto mode : {LossMode::cr_only, LossMode::cs_ntxent}) {
            TrainConfig t = base;
            t.loss_mode = mode;
            if (mode == LossMode::cs_ntxent) t.views = 2;
            for (auto seed : seeds) specs.push_back(make_arm(std::string("reference:") + to_string(mode), t, data, seed));
        }
    }

    ExperimentReport rep;
    rep.kind = "ablation";
    rep.settings = {{"axis", axis}, {"values", values}, {"steps", base.steps}, {"seeds", seeds},
                    {"reference_arms", reference_arms}};
    rep.arms = run_arms(specs, jobs);
    for (std::size_t i = 0; i < swept; ++i) rep.ablation.push_back(ablation_row(rep.arms[i], axis, arm_values[i]));
    for (std::size_t i = swept; i < rep.arms.size(); ++i)
        rep.reference.push_back(ablation_row(rep.arms[i], "loss_mode", to_string(specs[i].train.loss_mode)));
    rep.aggregates = aggregate_arms(rep.arms);
    return rep;
}

// ---------------------------------------------------------------------------
// Serialization.

namespace detail {
inline nlohmann::json num(double v) {
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}
inline nlohmann::json nums(const std::vector<double>& v) {
    auto out = nlohmann::json::array();
    for (double x : v) out.push_back(num(x));
    return out;
}
inline nlohmann::json row_json(const AblationRow& r) {
    return {{"axis", r.axis},
            {"value", r.value},
            {"seed", r.seed},
            {"final_acc_ema", num(r.final_acc_ema)},
            {"final_acc_raw", num(r.final_acc_raw)},
            {"mask_cs", {num(r.min_mask_cs), num(r.max_mask_cs)}},
            {"mask_cr", {num(r.min_mask_cr), num(r.max_mask_cr)}}};
}
}  // namespace detail

inline nlohmann::json report_json(const ExperimentReport& rep) {
    using detail::num;
    nlohmann::json j;
    j["kind"] = rep.kind;
    j["settings"] = rep.settings;
    auto arms = nlohmann::json::array();
    for (const auto& a : rep.arms) {
        arms.push_back({{"name", a.name},
                        {"seed", a.seed},
                        {"descriptor", a.descriptor},
                        {"metrics_csv", "arms/" + arm_file_stem(a) + ".csv"},
                        {"final_acc_ema", num(a.final_acc_ema())},
                        {"final_acc_raw", num(a.final_acc_raw())},
                        {"clamp_warnings", a.run.clamp_warnings}});
    }
    j["arms"] = arms;
    auto aggs = nlohmann::json::array();
    for (const auto& g : rep.aggregates) {
        aggs.push_back({{"name", g.name},
                        {"steps", g.steps},
                        {"acc_ema_mean", detail::nums(g.acc_ema_mean)},
                        {"acc_ema_std", detail::nums(g.acc_ema_std)},
                        {"silhouette_mean", detail::nums(g.silhouette_mean)},
                        {"silhouette_std", detail::nums(g.silhouette_std)}});
    }
    j["aggregates"] = aggs;
    if (!rep.efficiency.empty()) {
        auto e = nlohmann::json::array();
        for (const auto& s : rep.efficiency) {
            e.push_back({{"seed", s.seed},
                         {"baseline_final", num(s.baseline_final)},
                         {"candidate_final", num(s.candidate_final)},
                         {"crossover_step", s.crossover_step ? nlohmann::json(*s.crossover_step) : nlohmann::json(nullptr)},
                         {"crossover_fraction", num(s.crossover_fraction)},
                         {"silhouette_dominates", s.silhouette_dominates}});
        }
        j["efficiency"] = e;
    }
    if (!rep.openset.empty()) {
        auto o = nlohmann::json::array();
        for (const auto& s : rep.openset) {
            o.push_back({{"seed", s.seed},
                         {"arm", s.arm},
                         {"counts", s.counts},
                         {"final_acc", detail::nums(s.final_acc)},
                         {"degradation", num(s.degradation)},
                         {"confidence_in", num(s.confidence_in)},
                         {"confidence_ood", num(s.confidence_ood)}});
        }
        j["openset"] = o;
        j["flag_reads_during_training"] = rep.flag_reads_during_training;
    }
    if (!rep.ablation.empty()) {
        auto t = nlohmann::json::array();
        for (const auto& r : rep.ablation) t.push_back(detail::row_json(r));
        j["ablation"] = t;
        auto ref = nlohmann::json::array();
        for (const auto& r : rep.reference) ref.push_back(detail::row_json(r));
        j["reference"] = ref;
    }
    return j;
}

/// Writes report.json and arms/<arm>_seed<k>.csv under dir; returns the
/// written paths relative to dir.
inline std::vector<std::string> write_report(const std::filesystem::path& dir, const ExperimentReport& rep) {
    std::filesystem::create_directories(dir / "arms");
    std::vector<std::string> written;
    for (const auto& a : rep.arms) {
        const std::string rel = "arms/" + arm_file_stem(a) + ".csv";
        std::ofstream os(dir / rel);
        if (!os) throw DataError("cannot write " + (dir / rel).string());
        write_metrics_csv(os, a.metrics);
        written.push_back(rel);
    }
    std::ofstream os(dir / "report.json");
    if (!os) throw DataError("cannot write " + (dir / "report.json").string());
    os << report_json(rep).dump(2) << '\n';
    written.push_back("report.json");
    return written;
}

}  // namespace crlab
