#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "crlab/gradcheck.hpp"
#include "crlab/losses.hpp"
#include "oracles.hpp"
#include "properties.hpp"

using namespace crlab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (auto& v : m.flat()) v = rng.normal(0, sd);
    return m;
}

Matrix unit_rows(Matrix z) {
    for (std::size_t i = 0; i < z.rows(); ++i) {
        const auto n = l2_normalize(z.row(i));
        std::copy(n.begin(), n.end(), z.row(i).begin());
    }
    return z;
}

PseudoLabelRecord<double> record(int q_hat, bool cs, bool cr) {
    PseudoLabelRecord<double> r;
    r.q_hat = q_hat;
    r.mask_cs = cs;
    r.mask_cr = cr;
    return r;
}

}  // namespace

// --- supervised ----------------------------------------------------------------

TEST(Supervised, UniformLogitsGiveLogK) {
    const Matrix logits(3, 4);
    const std::vector<int> y{0, 3, 2};
    EXPECT_NEAR(supervised_loss(logits, std::span<const int>(y)).value, std::log(4.0), 1e-15);
}

TEST(Supervised, HugeMarginGivesNearZero) {
    const Matrix logits{{60, 0, 0}, {0, 0, 60}};
    const std::vector<int> y{0, 2};
    EXPECT_LT(supervised_loss(logits, std::span<const int>(y)).value, 1e-20);
}

TEST(Supervised, MatchesNaiveOracleAndRejectsBadLabels) {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.index(8), k = 2 + rng.index(5);
        const auto logits = random_matrix(n, k, rng, 3);
        std::vector<int> y(n);
        for (auto& v : y) v = int(rng.index(k));
        EXPECT_NEAR(supervised_loss(logits, std::span<const int>(y)).value, double(oracle::supervised(logits, y)),
                    1e-12);
    }
    const std::vector<int> bad{4};
    EXPECT_THROW(supervised_loss(Matrix(1, 4), std::span<const int>(bad)), DataError);
}

// --- pseudo-labels ---------------------------------------------------------------

TEST(PseudoLabels, ThresholdAndTieRules) {
    const Matrix confident{{std::log(0.97), std::log(0.02), std::log(0.01)}};
    const auto a = make_pseudo_labels(confident, 0.95, 0.95);
    EXPECT_EQ(a[0].q_hat, 0);
    EXPECT_TRUE(a[0].mask_cs);

    const auto u = make_pseudo_labels(Matrix(1, 4), 0.95, 0.95);
    EXPECT_FALSE(u[0].mask_cs);
    EXPECT_FALSE(u[0].mask_cr);

    const auto tie = make_pseudo_labels(Matrix{{0.0, 0.0}}, 0.4, 0.4);
    EXPECT_EQ(tie[0].q_hat, 0);
    EXPECT_TRUE(tie[0].mask_cs);

    // Strict inequality at the threshold.
    const auto eq = make_pseudo_labels(Matrix{{0.0, 0.0}}, 0.5, 0.5);
    EXPECT_FALSE(eq[0].mask_cs);
}

// --- consistency -----------------------------------------------------------------

TEST(Consistency, MatchedOneHotLimitContributesNothing) {
    const Matrix strong{{80, 0}};
    const std::vector recs{record(0, true, true)};
    EXPECT_LT(consistency_loss(strong, recs, 1).value, 1e-30);
}

TEST(Consistency, AllUnconfidentGivesZeroLossAndGradient) {
    Rng rng(2);
    const auto strong = random_matrix(6, 3, rng);
    const std::vector recs{record(0, false, false), record(1, false, true), record(2, false, false)};
    const auto l = consistency_loss(strong, recs, 2);
    EXPECT_EQ(l.value, 0.0);
    for (double v : l.grad.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Consistency, HandExampleTwoSourcesOneView) {
    // p(view 0) = [0.8, 0.2], target 0; view 1 masked. Full-count denominator 2.
    const Matrix strong{{std::log(0.8), std::log(0.2)}, {0.0, 3.0}};
    const std::vector recs{record(0, true, true), record(1, false, false)};
    const auto l = consistency_loss(strong, recs, 1);
    EXPECT_NEAR(l.value, -std::log(0.8) / 2.0, 1e-12);
    EXPECT_NEAR(l.grad(0, 0), (0.8 - 1.0) / 2.0, 1e-12);
    EXPECT_NEAR(l.grad(0, 1), 0.2 / 2.0, 1e-12);
    EXPECT_EQ(l.grad(1, 0), 0.0);
    EXPECT_EQ(l.grad(1, 1), 0.0);
}

TEST(Consistency, MatchesOracleOnRandomInstances) {
    Rng rng(3);
    for (int t = 0; t < 100; ++t) {
        const std::size_t s = 1 + rng.index(6), m = 1 + rng.index(3), k = 2 + rng.index(3);
        const auto recs = make_pseudo_labels(random_matrix(s, k, rng, 3), 0.7, 0.7);
        const auto strong = random_matrix(s * m, k, rng, 2);
        EXPECT_NEAR(consistency_loss(strong, recs, m).value, double(oracle::consistency(strong, recs, m)), 1e-10);
    }
    EXPECT_THROW(consistency_loss(Matrix(5, 2), std::vector{record(0, true, true)}, 2), DimensionError);
}

// --- class-weight slice --------------------------------------------------------

TEST(ClassWeight, AllMaskedGivesZero) {
    Rng rng(4);
    const auto h = random_matrix(4, 3, rng);
    const auto p = softmax_rows(random_matrix(4, 2, rng));
    const auto out = cs_classweight_descent(h, p, std::vector{record(0, false, false), record(1, false, false)}, 2);
    for (double v : out.flat()) EXPECT_EQ(v, 0.0);
}

TEST(ClassWeight, SaturatedPredictionContributesZero) {
    const Matrix h{{1.0, 2.0}};
    const Matrix p{{1.0, 0.0}};
    const auto out = cs_classweight_descent(h, p, std::vector{record(0, true, true)}, 1);
    for (double v : out.flat()) EXPECT_EQ(v, 0.0);
}

TEST(ClassWeight, MatchesBruteForceAccumulation) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t s = 1 + rng.index(5), m = 1 + rng.index(3), k = 2 + rng.index(3), d = 1 + rng.index(6);
        const auto recs = make_pseudo_labels(random_matrix(s, k, rng, 3), 0.6, 0.6);
        const auto h = random_matrix(s * m, d, rng);
        const auto p = softmax_rows(random_matrix(s * m, k, rng));
        const auto fast = cs_classweight_descent(h, p, recs, m);
        const auto ref = oracle::cs_slice(h, p, recs, m);
        EXPECT_LT(max_abs_diff(fast.flat(), ref.flat()), 1e-12);
    }
}

// The bound on a summand only holds when the strong view itself is confident;
// the mask alone constrains the weak view.
TEST(ClassWeight, ConfidentStrongViewSummandIsBounded) {
    Rng rng(15);
    const double delta = 0.95;
    int checked = 0;
    for (int t = 0; t < 500; ++t) {
        const std::size_t k = 2 + rng.index(3), d = 1 + rng.index(6);
        const auto h = random_matrix(1, d, rng);
        const auto p = softmax_rows(random_matrix(1, k, rng, 4));
        const auto recs = make_pseudo_labels(random_matrix(1, k, rng, 4), 0.0, 0.0);
        const auto qh = std::size_t(recs[0].q_hat);
        if (!(p(0, qh) > delta)) continue;
        ++checked;
        const auto out = cs_classweight_descent(h, p, recs, 1);
        double col = 0;
        for (std::size_t a = 0; a < d; ++a) col += out(a, qh) * out(a, qh);
        EXPECT_LE(std::sqrt(col), norm2(h.row(0)) * (1 - delta) + 1e-15);
    }
    EXPECT_GT(checked, 10);
}

// --- contrastive -----------------------------------------------------------------

TEST(Contrastive, IdenticalEmbeddingsGiveLogThree) {
    const Matrix z{{1, 0}, {1, 0}, {1, 0}, {1, 0}};
    const std::vector recs{record(2, true, true), record(2, true, true)};
    EXPECT_NEAR(contrastive_loss(z, recs, 2, 1.0).value, std::log(3.0), 1e-14);
    const std::vector<int> labels(4, 2);
    for (std::size_t a = 0; a < 4; ++a)
        EXPECT_NEAR(anchor_contrastive_loss(z, std::span<const int>(labels), a, 1.0), std::log(3.0), 1e-14);
}

TEST(Contrastive, UnconfidentAnchorOnlyReceivesGradientThroughOthers) {
    Rng rng(6);
    const auto z = unit_rows(random_matrix(6, 3, rng));
    const std::vector<int> labels{0, 0, 1, 1, 0, 1};
    std::vector<char> all(6, 1), without(6, 1);
    without[0] = 0;
    const auto full = contrastive_loss(z, std::span<const int>(labels), std::span<const char>(all), 0.5);
    const auto part = contrastive_loss(z, std::span<const int>(labels), std::span<const char>(without), 0.5);
    EXPECT_NEAR(full.value - part.value,
                double(oracle::anchor_r(z, labels, 0, 0.5L)) / 6.0, 1e-12);
    // Row 0 still receives gradient from anchors 1 and 4 that use it as a positive.
    EXPECT_GT(norm2(part.grad.row(0)), 1e-8);

    std::vector<char> none(6, 0);
    none[1] = 1;
    const std::vector<int> lone{0, 1, 2, 3, 4, 5};
    const auto empty = contrastive_loss(z, std::span<const int>(lone), std::span<const char>(none), 0.5);
    EXPECT_EQ(empty.value, 0.0);  // empty positive set contributes nothing
}

TEST(Contrastive, MatchesDoubleLoopOracle) {
    Rng rng(7);
    const std::vector<int> labels6{0, 0, 1, 1, 2, 2};
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = t == 0 ? 6 : 2 + rng.index(11), p = t == 0 ? 4 : 1 + rng.index(8);
        const auto z = unit_rows(random_matrix(n, p, rng));
        std::vector<int> labels(n);
        std::vector<char> mask(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = t == 0 ? labels6[i] : int(rng.index(3));
            mask[i] = rng.bernoulli(0.7);
        }
        const double tau = t == 0 ? 0.5 : std::vector{1.0, 0.5, 0.1, 0.01}[rng.index(4)];
        const double ref = double(oracle::contrastive(z, labels, mask, tau));
        const double got =
            contrastive_loss(z, std::span<const int>(labels), std::span<const char>(mask), tau).value;
        EXPECT_NEAR(got, ref, 1e-10 * std::max(1.0, std::abs(ref)));
    }
    EXPECT_THROW(contrastive_loss(Matrix(2, 2), std::vector{record(0, true, true)}, 2, 0.0), ConfigError);
}

TEST(Contrastive, GradientMatchesFiniteDifferencesOfZ) {
    Rng rng(8);
    for (double tau : {1.0, 0.1}) {
        const auto z = unit_rows(random_matrix(8, 3, rng));
        const std::vector<int> labels{0, 0, 1, 1, 0, 2, 2, 1};
        const std::vector<char> mask{1, 0, 1, 1, 1, 0, 1, 1};
        const auto g = contrastive_loss(z, std::span<const int>(labels), std::span<const char>(mask), tau).grad;
        const auto fd = finite_diff_grad<Real>(
            [&](const BasicMatrix<Real>& x) {
                return contrastive_loss(x, std::span<const int>(labels), std::span<const char>(mask), Real(tau)).value;
            },
            z.cast<Real>(), kFdStep, FdOrder::extrapolated);
        EXPECT_LT(max_relative_error(g, fd), 1e-8);
    }
}

TEST(Contrastive, PermutingViewsPermutesGradient) {
    Rng rng(9);
    const auto z = unit_rows(random_matrix(7, 4, rng));
    const std::vector<int> labels{0, 1, 0, 2, 1, 0, 2};
    const std::vector<char> mask{1, 1, 0, 1, 1, 1, 0};
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    Matrix zp(7, 4);
    std::vector<int> lp(7);
    std::vector<char> mp(7);
    for (std::size_t i = 0; i < 7; ++i) {
        std::copy(z.row(perm[i]).begin(), z.row(perm[i]).end(), zp.row(i).begin());
        lp[i] = labels[perm[i]];
        mp[i] = mask[perm[i]];
    }
    const auto a = contrastive_loss(z, std::span<const int>(labels), std::span<const char>(mask), 0.2);
    const auto b = contrastive_loss(zp, std::span<const int>(lp), std::span<const char>(mp), 0.2);
    EXPECT_NEAR(a.value, b.value, 1e-12);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b.grad(i, c), a.grad(perm[i], c), 1e-12);
}

TEST(Contrastive, LossesAreNonNegative) {
    Rng rng(10);
    for (int t = 0; t < 50; ++t) {
        const auto z = unit_rows(random_matrix(6, 3, rng));
        const auto recs = make_pseudo_labels(random_matrix(3, 3, rng, 3), 0.5, 0.5);
        EXPECT_GE(contrastive_loss(z, recs, 2, 0.1).value, 0.0);
        EXPECT_GE(consistency_loss(random_matrix(6, 3, rng), recs, 2).value, 0.0);
        EXPECT_GE(ntxent_loss(z, 2, 0.1).value, 0.0);
    }
}

// --- closed-form gradient ------------------------------------------------------

TEST(CrExact, AllPositiveIdenticalEmbeddingsAreStationary) {
    const Matrix h{{0.3, -0.2}, {0.3, -0.2}, {0.3, -0.2}, {0.3, -0.2}};
    const std::vector<int> labels(4, 1);
    const auto g = grad_cr_exact(h, std::span<const int>(labels), 0);
    for (double v : g.main_term) EXPECT_NEAR(v, 0.0, 1e-15);
    for (double v : g.remainder) EXPECT_EQ(v, 0.0);
    for (double v : g.view_descent.flat()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(CrExact, ThreeViewHandExample) {
    // Anchor h0 = (1,0), positive h1 = (0,1), negative h2 = (1,1).
    // Scores: <h0,h1> = 0, <h0,h2> = 1, so s1 = 1/(1+e), s2 = e/(1+e).
    const Matrix h{{1, 0}, {0, 1}, {1, 1}};
    const std::vector<int> labels{0, 0, 1};
    const auto g = grad_cr_exact(h, std::span<const int>(labels), 0);
    const double e = std::exp(1.0), s1 = 1 / (1 + e), s2 = e / (1 + e);
    EXPECT_NEAR(g.scores[1], s1, 1e-15);
    EXPECT_NEAR(g.scores[2], s2, 1e-15);
    // Positive: (1 − s1)·h0; negative: −s2·h0.
    EXPECT_NEAR(g.view_descent(1, 0), 1 - s1, 1e-15);
    EXPECT_NEAR(g.view_descent(1, 1), 0.0, 1e-15);
    EXPECT_NEAR(g.view_descent(2, 0), -s2, 1e-15);
    EXPECT_NEAR(g.view_descent(2, 1), 0.0, 1e-15);
    // Anchor: main (1 − s1)·h1, remainder −s2·h2.
    EXPECT_NEAR(g.main_term[0], 0.0, 1e-15);
    EXPECT_NEAR(g.main_term[1], 1 - s1, 1e-15);
    EXPECT_NEAR(g.remainder[0], -s2, 1e-15);
    EXPECT_NEAR(g.remainder[1], -s2, 1e-15);
    EXPECT_NEAR(g.anchor_descent[1], 1 - s1 - s2, 1e-15);
}

TEST(CrExact, EmptyPositiveSetIsDegenerate) {
    const Matrix h{{1, 0}, {0, 1}};
    const std::vector<int> labels{0, 1};
    EXPECT_THROW(grad_cr_exact(h, std::span<const int>(labels), 0), DegenerateInputError);
}

TEST(CrExact, MatchesFiniteDifferencesOnRandomInstances) {
    Rng rng(11);
    for (int t = 0; t < 20; ++t) EXPECT_LT(check_cr_exact(rng), 1e-6);
}

TEST(CrExact, DescentReachesUniformScoresOnAllPositiveSets) {
    Rng rng(12);
    for (int t = 0; t < 3; ++t) EXPECT_LT(props::optimality_descent(rng).max_deviation, 1e-4);
}

// --- NT-Xent ------------------------------------------------------------------

TEST(NtXent, OrthogonalSourcesHandValue) {
    const Matrix z{{1, 0}, {1, 0}, {0, 1}, {0, 1}};
    const double e = std::exp(1.0);
    EXPECT_NEAR(ntxent_loss(z, 2, 1.0).value, -std::log(e / (e + 2)), 1e-14);
    EXPECT_NEAR(ntxent_loss(z, 2, 1.0).value, 0.5514, 5e-5);
}

TEST(NtXent, ReducesToContrastiveWithUniqueConfidentLabels) {
    Rng rng(13);
    const auto z = unit_rows(random_matrix(8, 3, rng));
    const std::vector recs{record(0, true, true), record(1, true, true), record(2, true, true), record(3, true, true)};
    const auto a = ntxent_loss(z, 2, 0.3), b = contrastive_loss(z, recs, 2, 0.3);
    EXPECT_NEAR(a.value, b.value, 1e-14);
    EXPECT_LT(max_abs_diff(a.grad.flat(), b.grad.flat()), 1e-14);
}

TEST(NtXent, MatchesOracleAndRequiresTwoViews) {
    Rng rng(14);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 * (1 + rng.index(6));
        const auto z = unit_rows(random_matrix(n, 1 + rng.index(6), rng));
        const double tau = std::vector{1.0, 0.1, 0.01}[rng.index(3)];
        const double ref = double(oracle::ntxent(z, tau));
        EXPECT_NEAR(ntxent_loss(z, 2, tau).value, ref, 1e-10 * std::max(1.0, ref));
    }
    EXPECT_THROW(ntxent_loss(Matrix(6, 2), 3, 1.0), ConfigError);
}

// --- exclusion ------------------------------------------------------------------

TEST(Exclusion, ConsistencyIgnoresUnconfidentViewWhileContrastiveReachesIt) {
    Rng rng(15);
    for (int t = 0; t < 20; ++t) {
        const auto r = props::exclusion_construction(rng);
        EXPECT_EQ(r.cs_feature_grad_norm, 0.0);
        EXPECT_EQ(r.cs_logit_grad_norm, 0.0);
        EXPECT_GT(r.cr_embedding_grad_norm, 1e-8);
    }
}

// --- total loss ---------------------------------------------------------------

TEST(TotalLoss, ZeroWeightsReduceToSupervised) {
    Rng rng(16);
    const auto in = random_instance(rng, 2, 1e-2);
    const auto lc = forward(in.params, in.labeled_x, ForwardMode::logits_only);
    const auto sc = forward(in.params, in.strong_x);
    const auto tl = total_loss(in.params, lc, std::span<const int>(in.labels), sc, in.records, 2,
                               LossSettings{0.0, 0.0, 0.1, LossMode::cs_cr});
    const auto sup = supervised_loss(lc.logits, std::span<const int>(in.labels));
    EXPECT_EQ(tl.breakdown.total, tl.breakdown.sup);
    EXPECT_TRUE(tl.grads == backward(in.params, lc, sup.grad, Matrix{}));
    EXPECT_THROW(total_loss(in.params, lc, std::span<const int>(in.labels), sc, in.records, 2,
                            LossSettings{-1.0, 0.0, 0.1, LossMode::cs_cr}),
                 ConfigError);
}

TEST(TotalLoss, ModesSelectEffectiveWeights) {
    LossSettings s{1.0, 10.0, 0.01, LossMode::cs_only};
    EXPECT_EQ(s.effective_lambda_cr(), 0.0);
    s.mode = LossMode::cr_only;
    EXPECT_EQ(s.effective_lambda_cs(), 0.0);
    EXPECT_EQ(s.effective_lambda_cr(), 10.0);
    EXPECT_EQ(parse_loss_mode("cs+ntxent"), LossMode::cs_ntxent);
    EXPECT_THROW(parse_loss_mode("cs+CR"), ConfigError);
}

TEST(TotalLoss, CsOnlyStillLogsContrastiveValue) {
    Rng rng(17);
    const auto in = random_instance(rng, 2, 1e-2);
    const auto lc = forward(in.params, in.labeled_x, ForwardMode::logits_only);
    const auto sc = forward(in.params, in.strong_x);
    const auto tl = total_loss(in.params, lc, std::span<const int>(in.labels), sc, in.records, 2,
                               LossSettings{1.0, 1.0, 0.1, LossMode::cs_only});
    EXPECT_GT(tl.breakdown.cr, 0.0);
    EXPECT_EQ(tl.breakdown.total, tl.breakdown.sup + tl.breakdown.cs);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
    Rng rng(18);
    for (int t = 0; t < 5; ++t) EXPECT_LT(check_total(random_instance(rng, 2, 1e-2), 0.1), 1e-6);
}
