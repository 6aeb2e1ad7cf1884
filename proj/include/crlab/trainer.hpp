#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "crlab/data.hpp"
#include "crlab/errors.hpp"
#include "crlab/losses.hpp"
#include "crlab/metrics.hpp"
#include "crlab/model.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

enum class PseudoSource { weak, clean };

struct TrainConfig {
    std::size_t batch_size = 16;  // B
    std::size_t mu = 7;
    std::size_t views = 2;        // m
    double delta = 0.95;
    double delta_cr = 0.95;
    double tau = 0.01;
    double lambda_cs = 1.0;
    double lambda_cr = 1.0;
    double lr = 0.03;
    double momentum = 0.9;        // Nesterov β
    double weight_decay = 5e-4;
    double ema_momentum = 0.999;
    std::size_t steps = 20000;    // S
    std::size_t eval_interval = 500;
    std::uint64_t seed = 0;
    PseudoSource pseudo_source = PseudoSource::weak;
    bool pseudo_from_ema = false;
    LossMode loss_mode = LossMode::cs_cr;
    std::size_t silhouette_samples = 512;
    ModelShape model;
    AugmentConfig augment;

    LossSettings loss_settings() const { return {lambda_cs, lambda_cr, tau, loss_mode}; }

    void validate() const {
        if (batch_size < 1 || mu < 1 || views < 1) throw ConfigError("B, mu and views must be >= 1");
        if (!(delta >= 0 && delta <= 1)) throw ConfigError("delta must be in [0,1]");
        if (!(delta_cr >= 0 && delta_cr <= 1)) throw ConfigError("delta_cr must be in [0,1]");
        if (!(tau > 0)) throw ConfigError("tau must be > 0");
        if (lambda_cs < 0 || lambda_cr < 0 || lr < 0 || momentum < 0 || weight_decay < 0)
            throw ConfigError("rates and loss weights must be >= 0");
        if (!(ema_momentum >= 0 && ema_momentum < 1)) throw ConfigError("ema_momentum must be in [0,1)");
        if (eval_interval < 1) throw ConfigError("eval_interval must be >= 1");
        if (loss_mode == LossMode::cs_ntxent && views != 2)
            throw ConfigError("cs+ntxent requires views = 2");
        model.validate();
    }
};

struct OptimizerState {
    ModelParams<double> velocity;
    std::size_t step = 0;
};

inline OptimizerState make_optimizer_state(const ModelParams<double>& params) {
    return OptimizerState{params.zeros_like(), 0};
}

/// η(s) = η₀·cos(7πs / 16S).
inline double cosine_lr(std::size_t step, std::size_t total, double lr0) {
    if (total == 0) throw ConfigError("cosine_lr: total steps must be >= 1");
    if (step > total) throw ConfigError("cosine_lr: step beyond total");
    return lr0 * std::cos(7.0 * std::numbers::pi * double(step) / (16.0 * double(total)));
}

/// g ← g + wd·p ; v ← β·v + g ; p ← p − lr·(g + β·v)
inline void sgd_nesterov_step(ModelParams<double>& params, const ModelParams<double>& grads,
                              OptimizerState& state, double lr, double beta, double weight_decay) {
    if (!params.congruent(grads) || !params.congruent(state.velocity))
        throw DimensionError("sgd_nesterov_step: shapes differ");
    auto p = params.tensors();
    const auto g = grads.tensors();
    auto v = state.velocity.tensors();
    for (std::size_t t = 0; t < p.size(); ++t) {
        for (std::size_t i = 0; i < p[t].size(); ++i) {
            const double gi = g[t][i] + weight_decay * p[t][i];
            v[t][i] = beta * v[t][i] + gi;
            p[t][i] -= lr * (gi + beta * v[t][i]);
        }
    }
    ++state.step;
}

// ---------------------------------------------------------------------------

struct TrainState {
    ModelParams<double> params;
    OptimizerState optimizer;
    EmaShadow<double> ema;
    std::size_t clamp_warnings = 0;
};

inline TrainState make_train_state(const TrainConfig& cfg) {
    cfg.validate();
    Rng init_rng = Rng(cfg.seed).fork(0x1417);
    TrainState s;
    s.params = init_params(cfg.model, init_rng);
    s.optimizer = make_optimizer_state(s.params);
    s.ema = make_ema(s.params, cfg.ema_momentum);
    return s;
}

/// Everything computed for one batch before the optimizer step.
struct StepEvaluation {
    LossBreakdown breakdown;
    ModelParams<double> grads;
};

inline std::string breakdown_json(const LossBreakdown& b, std::size_t step) {
    std::ostringstream os;
    os << std::setprecision(17) << "{\"step\":" << step << ",\"loss_sup\":" << b.sup
       << ",\"loss_cs\":" << b.cs << ",\"loss_cr\":" << b.cr << ",\"loss_total\":" << b.total
       << ",\"mask_cs\":" << b.mask_ratio_cs << ",\"mask_cr\":" << b.mask_ratio_cr << "}";
    return os.str();
}

/// Loss and gradients of the current parameters on one batch.
inline StepEvaluation evaluate_step(TrainState& state, const BatchPair& batch, const TrainConfig& cfg) {
    const auto& src_params = cfg.pseudo_from_ema ? state.ema.params : state.params;
    const Matrix& src_x = cfg.pseudo_source == PseudoSource::weak ? batch.augmented.weak
                                                                  : batch.batch.unlabeled_x;
    // Stop-gradient: records hold constants; nothing flows back into this forward.
    const auto pseudo = forward(src_params, src_x, ForwardMode::logits_only);
    const auto records = make_pseudo_labels(pseudo.logits, cfg.delta, cfg.delta_cr);

    const auto labeled = forward(state.params, batch.batch.labeled_x, ForwardMode::logits_only);
    const auto strong = forward(state.params, batch.augmented.strong);
    state.clamp_warnings += strong.clamp_count;

    auto tl = total_loss(state.params, labeled, std::span<const int>(batch.batch.labels), strong,
                         records, cfg.views, cfg.loss_settings());
    if (!std::isfinite(tl.breakdown.total) || !all_finite(tl.grads)) {
        throw NonFiniteLossError("non-finite loss at step " + std::to_string(state.optimizer.step),
                                 breakdown_json(tl.breakdown, state.optimizer.step));
    }
    return {tl.breakdown, std::move(tl.grads)};
}

/// One optimization step: pseudo-labels, total loss, Nesterov update, EMA.
inline LossBreakdown train_step(TrainState& state, const BatchPair& batch, const TrainConfig& cfg) {
    auto eval = evaluate_step(state, batch, cfg);
    const double lr = cosine_lr(state.optimizer.step, std::max<std::size_t>(cfg.steps, 1), cfg.lr);
    sgd_nesterov_step(state.params, eval.grads, state.optimizer, lr, cfg.momentum, cfg.weight_decay);
    ema_update(state.ema, state.params);
    return eval.breakdown;
}

// ---------------------------------------------------------------------------
// Metrics.

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0;
    LossBreakdown loss;
    double acc_raw = 0;
    double acc_ema = 0;
    double silhouette = 0;  // NaN when fewer than two pseudo-label clusters
};

using MetricsTable = std::vector<MetricsRow>;

inline const char* kMetricsHeader =
    "step,lr,loss_total,loss_sup,loss_cs,loss_cr,mask_cs,mask_cr,acc_raw,acc_ema,silhouette";

inline void write_metrics_csv(std::ostream& os, const MetricsTable& table) {
    os << kMetricsHeader << '\n';
    os << std::setprecision(12);
    for (const auto& r : table) {
        os << r.step << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.sup << ',' << r.loss.cs << ','
           << r.loss.cr << ',' << r.loss.mask_ratio_cs << ',' << r.loss.mask_ratio_cr << ',' << r.acc_raw
           << ',' << r.acc_ema << ',';
        if (std::isnan(r.silhouette)) os << "nan";
        else os << r.silhouette;
        os << '\n';
    }
}

struct RunResult {
    MetricsTable metrics;
    ModelParams<double> params;
    ModelParams<double> ema;
    std::size_t clamp_warnings = 0;
};

/// Silhouette of penultimate strong-view features grouped by pseudo-label, on a
/// fixed seeded sample of the unlabeled pool.
inline double feature_silhouette(const ModelParams<double>& params, const UnlabeledSet& pool,
                                 const TrainConfig& cfg) {
    Rng rng = Rng(cfg.seed).fork(0x5111);
    const std::size_t n = std::min(cfg.silhouette_samples, pool.size());
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.index(idx.size() - i)]);

    const std::size_t d = pool.x.cols();
    Matrix weak(n, d), strong(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = pool.x.row(idx[i]);
        const auto w = cfg.pseudo_source == PseudoSource::weak ? augment(src, Strength::weak, cfg.augment, rng)
                                                               : Vector(src.begin(), src.end());
        const auto s = augment(src, Strength::strong, cfg.augment, rng);
        std::copy(w.begin(), w.end(), weak.row(i).begin());
        std::copy(s.begin(), s.end(), strong.row(i).begin());
    }
    const auto pl = forward(params, weak, ForwardMode::logits_only);
    const auto fs = forward(params, strong, ForwardMode::logits_only);
    std::vector<int> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<int>(argmax(pl.logits.row(i)));
    try {
        return silhouette(fs.features, std::span<const int>(ids));
    } catch (const DegenerateInputError&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

inline double test_accuracy(const ModelParams<double>& params, const LabeledSet& test) {
    const auto c = forward(params, test.x, ForwardMode::logits_only);
    return accuracy(c.logits, std::span<const int>(test.labels));
}

/// Trains for cfg.steps steps. A row is emitted at step 0, every eval_interval
/// steps, and at the last step; its losses are measured on that step's batch
/// with the parameters the accuracies were measured on.
inline RunResult run(const TrainConfig& cfg, const LabeledSet& labeled, const UnlabeledSet& unlabeled,
                     const LabeledSet& test) {
    cfg.validate();
    TrainState state = make_train_state(cfg);
    Rng batch_rng = Rng(cfg.seed).fork(0xBA7C);
    RunResult result;
    const std::size_t total = cfg.steps;

    for (std::size_t s = 0; s <= total; ++s) {
        const bool log_row = s % cfg.eval_interval == 0 || s == total;
        MetricsRow row;
        if (log_row) {
            row.step = s;
            row.lr = cosine_lr(s, std::max<std::size_t>(total, 1), cfg.lr);
            row.acc_raw = test_accuracy(state.params, test);
            row.acc_ema = test_accuracy(state.ema.params, test);
            row.silhouette = feature_silhouette(state.params, unlabeled, cfg);
        }
        const auto batch = sample_batch(labeled, unlabeled, cfg.batch_size, cfg.mu, cfg.views,
                                        cfg.augment, batch_rng);
        if (s < total) {
            row.loss = train_step(state, batch, cfg);
        } else if (log_row) {
            row.loss = evaluate_step(state, batch, cfg).breakdown;
        }
        if (log_row) result.metrics.push_back(row);
    }
    result.params = std::move(state.params);
    result.ema = std::move(state.ema.params);
    result.clamp_warnings = state.clamp_warnings;
    return result;
}

inline RunResult run(const TrainConfig& cfg, const Dataset& ds) {
    return run(cfg, ds.labeled, ds.unlabeled, ds.test);
}

}  // namespace crlab
