#pragma once

// Analytic-versus-finite-difference checks for every loss gradient. Reference
// values are extrapolated central differences of the scalar loss in long double,
// with quad precision for entries the long double tableau cannot certify, on
// random small models whose ReLU pre-activations stay clear of the kink.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/eigen.hpp>

#include "crlab/losses.hpp"
#include "crlab/model.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

using Real = long double;
using Quad = boost::multiprecision::cpp_bin_float_quad;

struct GradcheckEntry {
    std::string name;
    std::size_t instances = 0;
    double max_rel_error = 0;
    double tolerance = 1e-6;
    bool passed() const { return max_rel_error <= tolerance; }
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double seconds = 0;
    bool passed() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
    }
};

struct GradcheckOptions {
    std::size_t instances = 100;
    std::uint64_t seed = 0x6C;
    double tolerance = 1e-6;
    double kink_margin = 1e-2;  // minimum |pre-activation| for an accepted instance
};

/// Initial step of the extrapolation tableau. Smaller steps cost accuracy on
/// saturated contrastive losses, where the loss is a difference of O(1/τ) terms.
inline constexpr long double kFdStep = 1e-3L;

/// Largest tableau error bound, relative to the estimate, accepted from the
/// long double pass before an entry is recomputed in quad precision.
inline constexpr long double kFdCertify = 1e-9L;

/// Loss value plus the sign of every ReLU pre-activation that produced it.
template <class T>
struct FdProbe {
    T value{};
    std::vector<char> pattern;
};

template <class T>
void append_relu_pattern(const ForwardCache<T>& c, std::vector<char>& out) {
    for (const auto& pre : c.layer_pre)
        for (T v : pre.flat()) out.push_back(v > T(0));
    for (T v : c.proj_pre.flat()) out.push_back(v > T(0));
    out.insert(out.end(), c.proj_clamped.begin(), c.proj_clamped.end());
}

namespace detail {

/// Extrapolated central difference of entry (t, i). A stencil whose
/// evaluations change the activation pattern straddles a kink; the entry is
/// then redone with a step ten times smaller.
template <class T, class F>
T kink_free_difference(F& f, ModelParams<T>& x, const std::vector<char>& base, std::size_t t, std::size_t i,
                       T h, T& err) {
    auto span = x.tensors()[t];
    const T orig = span[i];
    for (T step = h;; step /= T(10)) {
        if (step < h * T(1e-6)) throw PropagationError("finite differences: no kink-free step");
        bool crossed = false;
        const T d = central_difference(
            [&](T off) {
                span[i] = orig + off;
                auto probe = f(x);
                span[i] = orig;
                if (probe.pattern != base) crossed = true;
                return probe.value;
            },
            step, FdOrder::extrapolated, &err);
        if (!crossed) return d;
    }
}

}  // namespace detail

/// Reference gradient of f over every parameter entry. f must accept
/// ModelParams of any floating type and return an FdProbe of that type.
/// Entries are computed in long double; one whose error bound exceeds
/// kFdCertify·|estimate| is recomputed in quad precision.
template <class F>
ModelParams<Real> reference_grad(F&& f, const ModelParams<double>& at, Real h = kFdStep) {
    ModelParams<Real> x = at.cast<Real>();
    const auto base = f(x).pattern;
    std::optional<ModelParams<Quad>> xq;
    ModelParams<Real> g = x.zeros_like();
    auto gs = g.tensors();
    for (std::size_t t = 0; t < gs.size(); ++t) {
        for (std::size_t i = 0; i < gs[t].size(); ++i) {
            Real err = 0;
            Real d = detail::kink_free_difference(f, x, base, t, i, h, err);
            if (err > kFdCertify * abs(d)) {
                if (!xq) xq = at.cast<Quad>();
                Quad eq = 0;
                d = static_cast<Real>(detail::kink_free_difference(f, *xq, base, t, i, Quad(h), eq));
            }
            gs[t][i] = d;
        }
    }
    return g;
}

template <class A, class B>
double max_relative_error(const ModelParams<A>& analytic, const ModelParams<B>& reference, double floor = 1e-8) {
    const auto a = analytic.tensors();
    const auto b = reference.tensors();
    if (a.size() != b.size()) throw DimensionError("max_relative_error: parameter sets differ");
    double worst = 0;
    for (std::size_t t = 0; t < a.size(); ++t) worst = std::max(worst, max_relative_error(a[t], b[t], floor));
    return worst;
}

/// A random batch for a random small model.
struct CheckInstance {
    ModelParams<double> params;
    Matrix labeled_x;
    std::vector<int> labels;
    Matrix strong_x;  // sources·m rows, source-major
    std::vector<PseudoLabelRecord<double>> records;
    std::size_t m = 2;
};

template <class T>
std::vector<PseudoLabelRecord<T>> cast_records(const std::vector<PseudoLabelRecord<double>>& in) {
    std::vector<PseudoLabelRecord<T>> out;
    for (const auto& r : in) {
        PseudoLabelRecord<T> c;
        c.q.assign(r.q.begin(), r.q.end());
        c.q_hat = r.q_hat;
        c.confidence = T(r.confidence);
        c.mask_cs = r.mask_cs;
        c.mask_cr = r.mask_cr;
        out.push_back(std::move(c));
    }
    return out;
}

/// Normalization z = g/‖g‖ has curvature of order 1/‖g‖²; rows shorter than
/// this make the difference steps too coarse.
inline constexpr double kProjNormMargin = 0.1;

inline double min_proj_norm(const ForwardCache<double>& c) {
    double lo = std::numeric_limits<double>::infinity();
    for (double v : c.proj_norm) lo = std::min(lo, v);
    return lo;
}

inline double min_abs_preactivation(const ForwardCache<double>& c) {
    double lo = std::numeric_limits<double>::infinity();
    for (const auto& pre : c.layer_pre)
        for (double v : pre.flat()) lo = std::min(lo, std::abs(v));
    for (double v : c.proj_pre.flat()) lo = std::min(lo, std::abs(v));
    return lo;
}

/// Views ≤ 12, H and P ≤ 8, K ≤ 4; at least one confident anchor with a positive.
inline CheckInstance random_instance(Rng& rng, std::size_t m, double kink_margin) {
    for (;;) {
        ModelShape shape;
        shape.input_dim = 2 + rng.index(4);
        shape.hidden = {3 + rng.index(6)};
        shape.feature_dim = 2 + rng.index(7);
        shape.num_classes = 2 + rng.index(3);
        shape.proj_hidden = 2 + rng.index(7);
        shape.proj_dim = 2 + rng.index(7);
        CheckInstance in;
        in.m = m;
        in.params = init_params(shape, rng);
        for (auto t : in.params.tensors())
            for (auto& v : t) v += rng.normal(0.0, 0.1);  // nonzero biases

        const std::size_t sources = std::max<std::size_t>(1, (4 + rng.index(9)) / m);
        const std::size_t labeled = 2 + rng.index(4);
        in.labeled_x = Matrix(labeled, shape.input_dim);
        in.strong_x = Matrix(sources * m, shape.input_dim);
        for (auto& v : in.labeled_x.flat()) v = rng.normal(0.0, 1.5);
        for (auto& v : in.strong_x.flat()) v = rng.normal(0.0, 1.5);
        for (std::size_t i = 0; i < labeled; ++i) in.labels.push_back(static_cast<int>(rng.index(shape.num_classes)));

        // Frozen pseudo-labels from random logits; thresholds split confident and unconfident.
        Matrix logits(sources, shape.num_classes);
        for (auto& v : logits.flat()) v = rng.normal(0.0, 2.5);
        in.records = make_pseudo_labels(logits, 0.6, 0.6);

        const auto sc = forward(in.params, in.strong_x);
        const auto lc = forward(in.params, in.labeled_x);
        if (sc.clamp_count || min_proj_norm(sc) < kProjNormMargin ||
            std::min(min_abs_preactivation(sc), min_abs_preactivation(lc)) < kink_margin)
            continue;
        const auto vl = view_labels(in.records, m);
        const auto mask = view_mask_cr(in.records, m);
        bool anchor_ok = false;
        for (std::size_t a = 0; a < vl.size() && !anchor_ok; ++a) {
            if (!mask[a]) continue;
            for (std::size_t v = 0; v < vl.size(); ++v)
                if (v != a && vl[v] == vl[a]) anchor_ok = true;
        }
        if (!anchor_ok) continue;
        return in;
    }
}

// ---------------------------------------------------------------------------
// Individual checks; each returns the worst relative error on one instance.

/// Closed-form −∂r/∂h (τ = 1, z = h) against differences of r(u′).
inline double check_cr_exact(Rng& rng) {
    const std::size_t n = 3 + rng.index(10);
    const std::size_t d = 1 + rng.index(8);
    const std::size_t k = 1 + rng.index(4);
    for (;;) {
        Matrix h(n, d);
        for (auto& v : h.flat()) v = rng.normal();
        std::vector<int> labels(n);
        for (auto& l : labels) l = static_cast<int>(rng.index(k));
        const std::size_t anchor = rng.index(n);
        if (std::count(labels.begin(), labels.end(), labels[anchor]) < 2) continue;

        const auto g = grad_cr_exact(h, std::span<const int>(labels), anchor);
        const auto hl = h.cast<Real>();
        const auto fd = finite_diff_grad<Real>(
            [&](const BasicMatrix<Real>& x) {
                return anchor_contrastive_loss(x, std::span<const int>(labels), anchor, Real(1));
            },
            hl, kFdStep, FdOrder::extrapolated);
        BasicMatrix<Real> descent_ref = fd;
        descent_ref *= Real(-1);
        return max_relative_error(g.view_descent, descent_ref);
    }
}

/// Full chain: contrastive loss on z, back through normalization and the model.
inline double check_cr_full(const CheckInstance& in, double tau, bool ntxent = false) {
    const auto c = forward(in.params, in.strong_x);
    const auto loss = ntxent ? ntxent_loss(c.z, in.m, tau) : contrastive_loss(c.z, in.records, in.m, tau);
    const auto analytic = backward(in.params, c, BasicMatrix<double>{}, loss.grad);

    const auto fd = reference_grad(
        [&](const auto& p) {
            using S = typename std::decay_t<decltype(p)>::value_type;
            const auto cl = forward(p, in.strong_x.cast<S>());
            FdProbe<S> out{ntxent ? ntxent_loss(cl.z, in.m, S(tau)).value
                                  : contrastive_loss(cl.z, cast_records<S>(in.records), in.m, S(tau)).value,
                           {}};
            append_relu_pattern(cl, out.pattern);
            return out;
        },
        in.params);
    return max_relative_error(analytic, fd);
}

/// Full chain for the consistency term.
inline double check_cs_full(const CheckInstance& in) {
    const auto c = forward(in.params, in.strong_x, ForwardMode::logits_only);
    const auto loss = consistency_loss(c.logits, in.records, in.m);
    const auto analytic = backward(in.params, c, loss.grad, BasicMatrix<double>{});

    const auto fd = reference_grad(
        [&](const auto& p) {
            using S = typename std::decay_t<decltype(p)>::value_type;
            const auto cl = forward(p, in.strong_x.cast<S>(), ForwardMode::logits_only);
            FdProbe<S> out{consistency_loss(cl.logits, cast_records<S>(in.records), in.m).value, {}};
            append_relu_pattern(cl, out.pattern);
            return out;
        },
        in.params);
    return max_relative_error(analytic, fd);
}

/// Closed-form −∂R_CS/∂h against differences over the features with W fixed.
inline double check_cs_feature(const CheckInstance& in) {
    const auto c = forward(in.params, in.strong_x, ForwardMode::logits_only);
    const auto probs = softmax_rows(c.logits);
    const auto descent = cs_feature_descent(in.params.classifier, probs, in.records, in.m);

    const auto rec = cast_records<Real>(in.records);
    const auto w = in.params.classifier.cast<Real>();
    auto fd = finite_diff_grad<Real>(
        [&](const BasicMatrix<Real>& h) { return consistency_loss(matmul(h, w), rec, in.m).value; },
        c.features.cast<Real>(), kFdStep, FdOrder::extrapolated);
    fd *= Real(-1);
    return max_relative_error(descent, fd);
}

/// The per-class slice of −∂R_CS/∂W plus the cross-class terms it omits equals
/// the full descent direction.
inline double check_cs_classweight(const CheckInstance& in) {
    const auto c = forward(in.params, in.strong_x, ForwardMode::logits_only);
    const auto probs = softmax_rows(c.logits);
    auto total = cs_classweight_descent(c.features, probs, in.records, in.m);
    const std::size_t n = c.features.rows();
    for (std::size_t v = 0; v < n; ++v) {
        const auto& r = in.records[v / in.m];
        if (!r.mask_cs) continue;
        for (std::size_t i = 0; i < probs.cols(); ++i) {
            if (static_cast<int>(i) == r.q_hat) continue;
            for (std::size_t a = 0; a < c.features.cols(); ++a)
                total(a, i) -= c.features(v, a) * probs(v, i) / double(n);
        }
    }
    const auto rec = cast_records<Real>(in.records);
    const auto h = c.features.cast<Real>();
    auto fd = finite_diff_grad<Real>(
        [&](const BasicMatrix<Real>& w) { return consistency_loss(matmul(h, w), rec, in.m).value; },
        in.params.classifier.cast<Real>(), kFdStep, FdOrder::extrapolated);
    fd *= Real(-1);
    return max_relative_error(total, fd);
}

/// L_L + λ_CS·R_CS + λ_CR·R_CR through total_loss.
inline double check_total(const CheckInstance& in, double tau) {
    const LossSettings s{1.0, 1.0, tau, LossMode::cs_cr};
    const auto lc = forward(in.params, in.labeled_x, ForwardMode::logits_only);
    const auto sc = forward(in.params, in.strong_x);
    const auto analytic = total_loss(in.params, lc, std::span<const int>(in.labels), sc, in.records, in.m, s);

    const auto fd = reference_grad(
        [&](const auto& p) {
            using S = typename std::decay_t<decltype(p)>::value_type;
            const auto rec = cast_records<S>(in.records);
            const auto l = forward(p, in.labeled_x.cast<S>(), ForwardMode::logits_only);
            const auto st = forward(p, in.strong_x.cast<S>());
            FdProbe<S> out{supervised_loss(l.logits, std::span<const int>(in.labels)).value +
                           consistency_loss(st.logits, rec, in.m).value +
                           contrastive_loss(st.z, rec, in.m, S(tau)).value,
                           {}};
            append_relu_pattern(l, out.pattern);
            append_relu_pattern(st, out.pattern);
            return out;
        },
        in.params);
    return max_relative_error(analytic.grads, fd);
}

// ---------------------------------------------------------------------------

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    GradcheckReport rep;
    Rng rng(opt.seed);
    auto add = [&](const std::string& name, auto&& one) {
        GradcheckEntry e{name, opt.instances, 0.0, opt.tolerance};
        for (std::size_t i = 0; i < opt.instances; ++i) e.max_rel_error = std::max(e.max_rel_error, one());
        rep.entries.push_back(e);
    };
    add("cr_exact", [&] { return check_cr_exact(rng); });
    for (double tau : {1.0, 0.1, 0.01}) {
        std::ostringstream label;
        label << "cr_full tau=" << tau;
        add(label.str(),
            [&] { return check_cr_full(random_instance(rng, 2, opt.kink_margin), tau); });
    }
    add("ntxent_full tau=0.1", [&] { return check_cr_full(random_instance(rng, 2, opt.kink_margin), 0.1, true); });
    add("cs_full", [&] { return check_cs_full(random_instance(rng, 1 + rng.index(3), opt.kink_margin)); });
    add("cs_feature", [&] { return check_cs_feature(random_instance(rng, 2, opt.kink_margin)); });
    add("cs_classweight", [&] { return check_cs_classweight(random_instance(rng, 2, opt.kink_margin)); });
    add("total tau=0.01", [&] { return check_total(random_instance(rng, 2, opt.kink_margin), 0.01); });
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace crlab
