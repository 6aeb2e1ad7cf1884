#pragma once

// Training objectives and their gradients.
//
// Strong views are laid out source-major: view v of unlabeled source s is row
// s·m + v, and inherits the pseudo-label record of source s. All unlabeled
// terms are averaged over the full view count |A_m(U)| = m·μB, so masked views
// stay in the denominator.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "crlab/errors.hpp"
#include "crlab/model.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

template <class T>
struct LossGrad {
    T value = T(0);
    BasicMatrix<T> grad;  // same shape as the differentiated input
};

// ---------------------------------------------------------------------------
// Supervised cross-entropy.

template <class T>
LossGrad<T> supervised_loss(const BasicMatrix<T>& logits, std::span<const int> labels) {
    const std::size_t n = logits.rows(), k = logits.cols();
    if (labels.size() != n) throw DimensionError("supervised_loss: label count != batch");
    if (n == 0) throw DimensionError("supervised_loss: empty batch");
    LossGrad<T> out{T(0), BasicMatrix<T>(n, k)};
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw DataError("supervised_loss: label " + std::to_string(labels[i]) +
                            " outside [0," + std::to_string(k) + ")");
        }
        const auto row = logits.row(i);
        const T lse = log_sum_exp(row);
        const auto y = static_cast<std::size_t>(labels[i]);
        out.value += lse - row[y];
        auto g = out.grad.row(i);
        for (std::size_t j = 0; j < k; ++j) g[j] = exp(row[j] - lse) / T(n);
        g[y] -= T(1) / T(n);
    }
    out.value /= T(n);
    return out;
}

// ---------------------------------------------------------------------------
// Pseudo-labels.

/// Frozen prediction on the pseudo-label source. q never carries gradient.
template <class T>
struct PseudoLabelRecord {
    BasicVector<T> q;
    int q_hat = 0;
    T confidence = T(0);
    bool mask_cs = false;  // confidence > δ
    bool mask_cr = false;  // confidence > δ′
};

template <class T>
std::vector<PseudoLabelRecord<T>> make_pseudo_labels(const BasicMatrix<T>& logits, T delta,
                                                     T delta_cr) {
    std::vector<PseudoLabelRecord<T>> out;
    out.reserve(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        PseudoLabelRecord<T> r;
        r.q = softmax(logits.row(i));
        r.q_hat = static_cast<int>(argmax(std::span<const T>(r.q)));
        r.confidence = r.q[static_cast<std::size_t>(r.q_hat)];
        r.mask_cs = r.confidence > delta;
        r.mask_cr = r.confidence > delta_cr;
        out.push_back(std::move(r));
    }
    return out;
}

template <class T>
void require_grouping(std::size_t views, const std::vector<PseudoLabelRecord<T>>& records,
                      std::size_t m, const char* who) {
    if (m == 0 || views != records.size() * m) {
        throw DimensionError(std::string(who) + ": " + std::to_string(views) + " views but " +
                             std::to_string(records.size()) + " sources x m=" + std::to_string(m));
    }
}

/// Pseudo-label of every view.
template <class T>
std::vector<int> view_labels(const std::vector<PseudoLabelRecord<T>>& records, std::size_t m) {
    std::vector<int> out;
    out.reserve(records.size() * m);
    for (const auto& r : records)
        for (std::size_t v = 0; v < m; ++v) out.push_back(r.q_hat);
    return out;
}

template <class T>
std::vector<char> view_mask_cr(const std::vector<PseudoLabelRecord<T>>& records, std::size_t m) {
    std::vector<char> out;
    out.reserve(records.size() * m);
    for (const auto& r : records)
        for (std::size_t v = 0; v < m; ++v) out.push_back(r.mask_cr ? 1 : 0);
    return out;
}

// ---------------------------------------------------------------------------
// Consistency regularization.

template <class T>
LossGrad<T> consistency_loss(const BasicMatrix<T>& strong_logits,
                             const std::vector<PseudoLabelRecord<T>>& records, std::size_t m) {
    require_grouping(strong_logits.rows(), records, m, "consistency_loss");
    const std::size_t n = strong_logits.rows(), k = strong_logits.cols();
    LossGrad<T> out{T(0), BasicMatrix<T>(n, k)};
    for (std::size_t v = 0; v < n; ++v) {
        const auto& rec = records[v / m];
        if (!rec.mask_cs) continue;
        const auto row = strong_logits.row(v);
        const T lse = log_sum_exp(row);
        const auto y = static_cast<std::size_t>(rec.q_hat);
        out.value += lse - row[y];
        auto g = out.grad.row(v);
        for (std::size_t j = 0; j < k; ++j) g[j] = exp(row[j] - lse) / T(n);
        g[y] -= T(1) / T(n);
    }
    out.value /= T(n);
    return out;
}

/// Per-class slice of −∂R_CS/∂w_i: (1/N) Σ_{u′ ∈ Q̂_i} mask · h(u′)(1 − p̂(i|u′)).
/// Terms from views pseudo-labeled with another class are left out; this is the
/// closed form used for analysis, not the training gradient.
template <class T>
BasicMatrix<T> cs_classweight_descent(const BasicMatrix<T>& features, const BasicMatrix<T>& probs,
                                      const std::vector<PseudoLabelRecord<T>>& records, std::size_t m) {
    require_grouping(features.rows(), records, m, "cs_classweight_descent");
    if (probs.rows() != features.rows()) throw DimensionError("cs_classweight_descent: rows differ");
    const std::size_t n = features.rows(), h = features.cols(), k = probs.cols();
    BasicMatrix<T> out(h, k);
    for (std::size_t v = 0; v < n; ++v) {
        const auto& rec = records[v / m];
        if (!rec.mask_cs) continue;
        const auto i = static_cast<std::size_t>(rec.q_hat);
        const T coef = (T(1) - probs(v, i)) / T(n);
        const auto hv = features.row(v);
        for (std::size_t a = 0; a < h; ++a) out(a, i) += coef * hv[a];
    }
    return out;
}

/// Exact −∂R_CS/∂h(u′) per view: (mask/N)·(w_q̂ (1 − p̂(q̂|u′)) − Σ_{i≠q̂} w_i p̂(i|u′)).
template <class T>
BasicMatrix<T> cs_feature_descent(const BasicMatrix<T>& classifier, const BasicMatrix<T>& probs,
                                  const std::vector<PseudoLabelRecord<T>>& records, std::size_t m) {
    require_grouping(probs.rows(), records, m, "cs_feature_descent");
    if (classifier.cols() != probs.cols()) throw DimensionError("cs_feature_descent: K differs");
    const std::size_t n = probs.rows(), h = classifier.rows(), k = probs.cols();
    BasicMatrix<T> out(n, h);
    for (std::size_t v = 0; v < n; ++v) {
        const auto& rec = records[v / m];
        if (!rec.mask_cs) continue;
        const auto y = static_cast<std::size_t>(rec.q_hat);
        auto o = out.row(v);
        for (std::size_t i = 0; i < k; ++i) {
            const T c = (i == y ? T(1) - probs(v, i) : -probs(v, i)) / T(n);
            for (std::size_t a = 0; a < h; ++a) o[a] += c * classifier(a, i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Contrastive regularization.

/// P̂(u′): other views sharing u′'s pseudo-label; N(u′): views with another label.
struct PositiveSet {
    std::vector<std::vector<std::size_t>> positives;
    std::vector<std::vector<std::size_t>> negatives;

    std::size_t size() const { return positives.size(); }
};

inline PositiveSet build_positive_sets(std::span<const int> labels) {
    PositiveSet ps;
    const std::size_t n = labels.size();
    ps.positives.resize(n);
    ps.negatives.resize(n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t v = 0; v < n; ++v) {
            if (v == a) continue;
            (labels[v] == labels[a] ? ps.positives : ps.negatives)[a].push_back(v);
        }
    return ps;
}

namespace detail {

/// Shared kernel for pseudo-label and instance contrastive losses.
/// positive(a, v) says whether v is a positive of anchor a. Returns the mean of
/// weight(a)·r(a) over all N anchors and its gradient with respect to z.
template <class T, class IsPositive>
LossGrad<T> contrastive_kernel(const BasicMatrix<T>& z, std::span<const char> anchor_on, T tau,
                               IsPositive&& positive) {
    if (!(tau > T(0))) throw ConfigError("contrastive loss: temperature must be > 0");
    const std::size_t n = z.rows();
    if (anchor_on.size() != n) throw DimensionError("contrastive loss: mask length != views");
    LossGrad<T> out{T(0), BasicMatrix<T>(n, z.cols())};
    if (n < 2) return out;

    const BasicMatrix<T> gram = matmul_nt(z, z);
    BasicMatrix<T> coef(n, n);  // ∂(N·R)/∂S_av
    std::vector<T> scores(n), expo(n);
    for (std::size_t a = 0; a < n; ++a) {
        if (!anchor_on[a]) continue;
        std::size_t n_pos = 0;
        for (std::size_t v = 0; v < n; ++v)
            if (v != a && positive(a, v)) ++n_pos;
        if (n_pos == 0) continue;  // r undefined; anchor contributes nothing

        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t v = 0; v < n; ++v) {
            if (v == a) continue;
            scores[v] = gram(a, v) / tau;
            mx = std::max(mx, scores[v]);
        }
        T sum = 0;
        for (std::size_t v = 0; v < n; ++v) {
            if (v == a) continue;
            expo[v] = exp(scores[v] - mx);
            sum += expo[v];
        }
        const T lse = mx + log(sum);

        T pos_mean = 0;
        const T inv_pos = T(1) / T(n_pos);
        auto c = coef.row(a);
        for (std::size_t v = 0; v < n; ++v) {
            if (v == a) continue;
            const T s = expo[v] / sum;
            if (positive(a, v)) {
                pos_mean += scores[v];
                c[v] = s - inv_pos;
            } else {
                c[v] = s;
            }
        }
        out.value += lse - pos_mean * inv_pos;
    }
    out.value /= T(n);

    // S_av = ⟨z_a, z_v⟩/τ ⇒ dZ = (C + Cᵀ)·Z / (τN)
    BasicMatrix<T> sym(n, n);
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t v = 0; v < n; ++v) sym(a, v) = coef(a, v) + coef(v, a);
    out.grad = matmul(sym, z);
    out.grad *= T(1) / (tau * T(n));
    return out;
}

}  // namespace detail

/// R_CR = (1/N) Σ_{u′} 1[anchor confident] · r(u′). P̂ and the denominator range
/// over all views regardless of confidence.
template <class T>
LossGrad<T> contrastive_loss(const BasicMatrix<T>& z, std::span<const int> labels,
                             std::span<const char> anchor_mask, T tau) {
    if (labels.size() != z.rows()) throw DimensionError("contrastive_loss: label count != views");
    return detail::contrastive_kernel(z, anchor_mask, tau, [&](std::size_t a, std::size_t v) {
        return labels[a] == labels[v];
    });
}

template <class T>
LossGrad<T> contrastive_loss(const BasicMatrix<T>& z, const std::vector<PseudoLabelRecord<T>>& records,
                             std::size_t m, T tau) {
    require_grouping(z.rows(), records, m, "contrastive_loss");
    const auto labels = view_labels(records, m);
    const auto mask = view_mask_cr(records, m);
    return contrastive_loss(z, std::span<const int>(labels), std::span<const char>(mask), tau);
}

/// r(u′) for one anchor, unmasked.
template <class T>
T anchor_contrastive_loss(const BasicMatrix<T>& z, std::span<const int> labels, std::size_t anchor, T tau) {
    const std::size_t n = z.rows();
    if (anchor >= n) throw DimensionError("anchor_contrastive_loss: anchor out of range");
    if (!(tau > T(0))) throw ConfigError("anchor_contrastive_loss: temperature must be > 0");
    std::vector<T> scores;
    T pos = 0;
    std::size_t n_pos = 0;
    for (std::size_t v = 0; v < n; ++v) {
        if (v == anchor) continue;
        const T s = dot(z.row(anchor), z.row(v)) / tau;
        scores.push_back(s);
        if (labels[v] == labels[anchor]) {
            pos += s;
            ++n_pos;
        }
    }
    if (n_pos == 0) throw DegenerateInputError("anchor_contrastive_loss: empty positive set");
    return log_sum_exp(std::span<const T>(scores)) - pos / T(n_pos);
}

/// Closed-form descent directions of r(u′) under z = h and τ = 1.
template <class T>
struct CrExactGradient {
    BasicVector<T> anchor_descent;   // −∂r/∂h(u′) = main_term + remainder
    BasicVector<T> main_term;        // Σ_{p′∈P̂} (1/|P̂| − s[u′,p′]) h(p′)
    BasicVector<T> remainder;        // −Σ_{n′∈N} s[u′,n′] h(n′)
    BasicMatrix<T> view_descent;     // row v: −∂r/∂h(v); the anchor row equals anchor_descent
    BasicVector<T> scores;           // s[u′, v′] per view (0 at the anchor)
};

template <class T>
CrExactGradient<T> grad_cr_exact(const BasicMatrix<T>& h, std::span<const int> labels, std::size_t anchor) {
    const std::size_t n = h.rows(), d = h.cols();
    if (labels.size() != n) throw DimensionError("grad_cr_exact: label count != views");
    if (anchor >= n) throw DimensionError("grad_cr_exact: anchor out of range");
    std::size_t n_pos = 0;
    for (std::size_t v = 0; v < n; ++v)
        if (v != anchor && labels[v] == labels[anchor]) ++n_pos;
    if (n_pos == 0) throw DegenerateInputError("grad_cr_exact: anchor has no pseudo-positives");

    CrExactGradient<T> g;
    g.scores.assign(n, T(0));
    {
        std::vector<T> raw;
        for (std::size_t v = 0; v < n; ++v)
            if (v != anchor) raw.push_back(dot(h.row(anchor), h.row(v)));
        const T lse = log_sum_exp(std::span<const T>(raw));
        std::size_t j = 0;
        for (std::size_t v = 0; v < n; ++v)
            if (v != anchor) g.scores[v] = exp(raw[j++] - lse);
    }
    const T inv_pos = T(1) / T(n_pos);
    g.main_term.assign(d, T(0));
    g.remainder.assign(d, T(0));
    g.view_descent = BasicMatrix<T>(n, d);
    const auto hu = h.row(anchor);
    for (std::size_t v = 0; v < n; ++v) {
        if (v == anchor) continue;
        const bool pos = labels[v] == labels[anchor];
        const T w = pos ? inv_pos - g.scores[v] : -g.scores[v];
        auto& target = pos ? g.main_term : g.remainder;
        const auto hv = h.row(v);
        auto row = g.view_descent.row(v);
        for (std::size_t a = 0; a < d; ++a) {
            target[a] += w * hv[a];
            row[a] = w * hu[a];
        }
    }
    g.anchor_descent.resize(d);
    for (std::size_t a = 0; a < d; ++a) {
        g.anchor_descent[a] = g.main_term[a] + g.remainder[a];
        g.view_descent(anchor, a) = g.anchor_descent[a];
    }
    return g;
}

/// Instance-discrimination NT-Xent over sibling pairs (m = 2); every view is an anchor.
template <class T>
LossGrad<T> ntxent_loss(const BasicMatrix<T>& z, std::size_t m, T tau) {
    if (m != 2) throw ConfigError("ntxent_loss: requires exactly 2 views per source, got " + std::to_string(m));
    if (z.rows() % 2 != 0) throw DimensionError("ntxent_loss: odd number of views");
    const std::vector<char> all(z.rows(), 1);
    return detail::contrastive_kernel(z, std::span<const char>(all), tau,
                                      [](std::size_t a, std::size_t v) { return a / 2 == v / 2; });
}

// ---------------------------------------------------------------------------
// Total loss.

enum class LossMode { cs_only, cr_only, cs_cr, cs_ntxent };

inline const char* to_string(LossMode m) {
    switch (m) {
        case LossMode::cs_only: return "cs-only";
        case LossMode::cr_only: return "cr-only";
        case LossMode::cs_cr: return "cs+cr";
        case LossMode::cs_ntxent: return "cs+ntxent";
    }
    return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
    if (s == "cs-only") return LossMode::cs_only;
    if (s == "cr-only") return LossMode::cr_only;
    if (s == "cs+cr") return LossMode::cs_cr;
    if (s == "cs+ntxent") return LossMode::cs_ntxent;
    throw ConfigError("unknown loss mode '" + s + "' (expected cs-only|cr-only|cs+cr|cs+ntxent)");
}

struct LossSettings {
    double lambda_cs = 1.0;
    double lambda_cr = 1.0;
    double tau = 0.01;
    LossMode mode = LossMode::cs_cr;

    double effective_lambda_cs() const { return mode == LossMode::cr_only ? 0.0 : lambda_cs; }
    double effective_lambda_cr() const { return mode == LossMode::cs_only ? 0.0 : lambda_cr; }
};

struct LossBreakdown {
    double sup = 0;     // L_L
    double cs = 0;      // R_CS
    double cr = 0;      // R_CR, or NT-Xent in cs+ntxent mode
    double total = 0;   // sup + lambda_cs·cs + lambda_cr·cr
    double mask_ratio_cs = 0;
    double mask_ratio_cr = 0;
    double lambda_cs = 0;
    double lambda_cr = 0;
};

template <class T>
struct TotalLoss {
    LossBreakdown breakdown;
    ModelParams<T> grads;
};

/// Combines the three terms and routes their gradients through the model.
/// The unweighted R_CR is always evaluated so it can be logged in cs-only runs.
template <class T>
TotalLoss<T> total_loss(const ModelParams<T>& params, const ForwardCache<T>& labeled,
                        std::span<const int> labels, const ForwardCache<T>& strong,
                        const std::vector<PseudoLabelRecord<T>>& records, std::size_t m,
                        const LossSettings& settings) {
    if (settings.lambda_cs < 0 || settings.lambda_cr < 0) throw ConfigError("total_loss: negative lambda");
    TotalLoss<T> out;
    auto& b = out.breakdown;
    b.lambda_cs = settings.effective_lambda_cs();
    b.lambda_cr = settings.effective_lambda_cr();

    const auto sup = supervised_loss(labeled.logits, labels);
    const auto cs = consistency_loss(strong.logits, records, m);
    const auto cr = settings.mode == LossMode::cs_ntxent
                        ? ntxent_loss(strong.z, m, T(settings.tau))
                        : contrastive_loss(strong.z, records, m, T(settings.tau));
    b.sup = static_cast<double>(sup.value);
    b.cs = static_cast<double>(cs.value);
    b.cr = static_cast<double>(cr.value);
    b.total = b.sup + b.lambda_cs * b.cs + b.lambda_cr * b.cr;
    std::size_t n_cs = 0, n_cr = 0;
    for (const auto& r : records) {
        n_cs += r.mask_cs;
        n_cr += r.mask_cr;
    }
    if (!records.empty()) {
        b.mask_ratio_cs = double(n_cs) / double(records.size());
        b.mask_ratio_cr = double(n_cr) / double(records.size());
    }

    out.grads = backward(params, labeled, sup.grad, BasicMatrix<T>{});
    if (b.lambda_cs > 0 || b.lambda_cr > 0) {
        BasicMatrix<T> g_logits, g_z;
        if (b.lambda_cs > 0) {
            g_logits = cs.grad;
            g_logits *= T(b.lambda_cs);
        }
        if (b.lambda_cr > 0) {
            g_z = cr.grad;
            g_z *= T(b.lambda_cr);
        }
        accumulate(out.grads, backward(params, strong, g_logits, g_z));
    }
    return out;
}

}  // namespace crlab
