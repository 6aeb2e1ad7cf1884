#include <gtest/gtest.h>

#include <cmath>

#include "crlab/checkpoint.hpp"
#include "crlab/gradcheck.hpp"
#include "crlab/model.hpp"
#include "oracles.hpp"

using namespace crlab;

namespace {

ModelShape small_shape() {
    ModelShape s;
    s.input_dim = 3;
    s.hidden = {5};
    s.feature_dim = 4;
    s.num_classes = 3;
    s.proj_dim = 2;
    return s;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
    Matrix m(r, c);
    for (auto& v : m.flat()) v = rng.normal(0, sd);
    return m;
}

}  // namespace

TEST(Forward, ZeroNetworkGivesUniformProbabilities) {
    Rng rng(1);
    auto p = init_params(small_shape(), rng);
    for (auto t : p.tensors())
        for (auto& v : t) v = 0;
    const auto c = forward(p, random_matrix(4, 3, rng), ForwardMode::logits_only);
    for (double v : c.logits.flat()) EXPECT_EQ(v, 0.0);
    const auto probs = softmax_rows(c.logits);
    for (double v : probs.flat()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Forward, IdentityEncoderAndClassifierPassInputsThrough) {
    ModelShape s;
    s.input_dim = 2;
    s.hidden = {};
    s.feature_dim = 2;
    s.num_classes = 2;
    s.activation = Nonlinearity::identity;
    Rng rng(2);
    auto p = init_params(s, rng);
    p.encoder[0].weight = Matrix{{1, 0}, {0, 1}};
    p.classifier = Matrix{{1, 0}, {0, 1}};
    const Matrix x{{0.3, -1.2}, {2.0, 0.5}};
    EXPECT_EQ(forward(p, x, ForwardMode::logits_only).logits, x);
}

TEST(Forward, LogitsMatchIndependentRecomputationAndZIsUnit) {
    Rng rng(3);
    ModelShape shape = small_shape();
    shape.hidden = {24};
    shape.feature_dim = 16;
    const auto p = init_params(shape, rng);
    const auto x = random_matrix(6, 3, rng);
    const auto c = forward(p, x);
    ASSERT_EQ(c.clamp_count, 0u);
    Matrix h = x;
    for (const auto& layer : p.encoder) {
        h = oracle::matmul(h, layer.weight);
        for (std::size_t i = 0; i < h.rows(); ++i)
            for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) = std::max(0.0, h(i, j) + layer.bias[j]);
    }
    const auto logits = oracle::matmul(h, p.classifier);
    EXPECT_LT(max_abs_diff(c.logits.flat(), logits.flat()), 1e-12);
    for (std::size_t i = 0; i < c.z.rows(); ++i) EXPECT_NEAR(norm2(c.z.row(i)), 1.0, 1e-10);
}

TEST(Forward, DeterministicAndShapeChecked) {
    Rng rng(4);
    const auto p = init_params(small_shape(), rng);
    const auto x = random_matrix(5, 3, rng);
    const auto a = forward(p, x), b = forward(p, x);
    EXPECT_EQ(a.z, b.z);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_THROW(forward(p, random_matrix(2, 4, rng)), DimensionError);
}

TEST(Forward, DegenerateProjectionIsClampedAndCounted) {
    Rng rng(5);
    auto p = init_params(small_shape(), rng);
    p.proj_out.weight.fill(0);
    std::fill(p.proj_out.bias.begin(), p.proj_out.bias.end(), 0.0);
    const auto c = forward(p, random_matrix(3, 3, rng));
    EXPECT_EQ(c.clamp_count, 3u);
    for (double v : c.z.flat()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    Rng rng(6);
    const auto p = init_params(small_shape(), rng);
    const auto c = forward(p, random_matrix(4, 3, rng));
    const auto g = backward(p, c, Matrix(4, 3), Matrix(4, 2));
    for (auto t : g.tensors())
        for (double v : t) EXPECT_EQ(v, 0.0);
}

TEST(Backward, OneHotLogitGradientIsOuterProduct) {
    Rng rng(7);
    const auto p = init_params(small_shape(), rng);
    const auto c = forward(p, random_matrix(4, 3, rng));
    Matrix gl(4, 3);
    gl(2, 1) = 1.0;
    const auto g = backward(p, c, gl, Matrix{});
    for (std::size_t a = 0; a < 4; ++a)
        for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(g.classifier(a, k), k == 1 ? c.features(2, a) : 0.0);
}

TEST(Backward, LinearInUpstreamGradients) {
    Rng rng(8);
    const auto p = init_params(small_shape(), rng);
    const auto c = forward(p, random_matrix(4, 3, rng));
    const auto gl = random_matrix(4, 3, rng), gz = random_matrix(4, 2, rng);
    auto both = backward(p, c, gl, gz);
    auto sum = backward(p, c, gl, Matrix{});
    accumulate(sum, backward(p, c, Matrix{}, gz));
    EXPECT_LT(max_relative_error(both, sum), 1e-12);
}

TEST(Backward, RandomUpstreamMatchesFiniteDifferences) {
    Rng rng(9);
    for (int trial = 0; trial < 5; ++trial) {
        const auto in = random_instance(rng, 2, 1e-2);
        const std::size_t n = in.strong_x.rows();
        const auto gl = random_matrix(n, in.params.num_classes(), rng);
        const auto gz = random_matrix(n, in.params.proj_dim(), rng);
        const auto c = forward(in.params, in.strong_x);
        const auto analytic = backward(in.params, c, gl, gz);
        const auto fd = reference_grad(
            [&](const auto& q) {
                using S = typename std::decay_t<decltype(q)>::value_type;
                const auto cl = forward(q, in.strong_x.cast<S>());
                const auto gls = gl.cast<S>(), gzs = gz.cast<S>();
                FdProbe<S> out;
                for (std::size_t i = 0; i < cl.logits.size(); ++i) out.value += cl.logits.data()[i] * gls.data()[i];
                for (std::size_t i = 0; i < cl.z.size(); ++i) out.value += cl.z.data()[i] * gzs.data()[i];
                append_relu_pattern(cl, out.pattern);
                return out;
            },
            in.params);
        EXPECT_LT(max_relative_error(analytic, fd), 1e-6);
    }
}

TEST(Ema, FixedPointAndOneStep) {
    Rng rng(10);
    const auto p = init_params(small_shape(), rng);
    auto shadow = make_ema(p, 0.999);
    ema_update(shadow, p);
    EXPECT_TRUE(shadow.params == p);

    auto zero = p.zeros_like();
    auto ones = p.zeros_like();
    for (auto t : ones.tensors())
        for (auto& v : t) v = 1.0;
    auto s = make_ema(zero, 0.999);
    ema_update(s, ones);
    for (auto t : s.params.tensors())
        for (double v : t) EXPECT_NEAR(v, 0.001, 1e-15);
}

TEST(Ema, GeometricDecayToConstantParams) {
    Rng rng(11);
    const auto s0 = init_params(small_shape(), rng);
    const auto target = init_params(small_shape(), rng);
    auto s = make_ema(s0, 0.9);
    const int k = 37;
    for (int i = 0; i < k; ++i) ema_update(s, target);
    const auto a = s.params.tensors();
    const auto p = target.tensors();
    const auto z = s0.tensors();
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t i = 0; i < a[t].size(); ++i)
            EXPECT_NEAR(a[t][i], p[t][i] + (z[t][i] - p[t][i]) * std::pow(0.9, k), 1e-12);
}

TEST(Ema, ConvexCombinationBounds) {
    Rng rng(12);
    auto params = init_params(small_shape(), rng);
    auto s = make_ema(params, 0.7);
    auto lo = params, hi = params;
    for (int step = 0; step < 20; ++step) {
        for (auto t : params.tensors())
            for (auto& v : t) v += rng.normal();
        auto pl = lo.tensors(), ph = hi.tensors();
        const auto pc = params.tensors();
        for (std::size_t t = 0; t < pc.size(); ++t)
            for (std::size_t i = 0; i < pc[t].size(); ++i) {
                pl[t][i] = std::min(pl[t][i], pc[t][i]);
                ph[t][i] = std::max(ph[t][i], pc[t][i]);
            }
        ema_update(s, params);
        const auto sv = s.params.tensors();
        for (std::size_t t = 0; t < sv.size(); ++t)
            for (std::size_t i = 0; i < sv[t].size(); ++i) {
                EXPECT_GE(sv[t][i], pl[t][i] - 1e-12);
                EXPECT_LE(sv[t][i], ph[t][i] + 1e-12);
            }
    }
    EXPECT_THROW(make_ema(params, 1.0), ConfigError);
}

TEST(Init, DeterministicZeroBiasAndScaledWeights) {
    Rng a(13), b(13);
    const auto p = init_params(small_shape(), a);
    EXPECT_TRUE(p == init_params(small_shape(), b));
    for (const auto& l : p.encoder)
        for (double v : l.bias) EXPECT_EQ(v, 0.0);

    ModelShape wide;
    wide.input_dim = 100;
    wide.hidden = {200};
    Rng r(14);
    const auto w = init_params(wide, r);
    double s2 = 0;
    for (double v : w.encoder[0].weight.flat()) s2 += v * v;
    const double sd = std::sqrt(s2 / double(w.encoder[0].weight.size()));
    EXPECT_NEAR(sd, 0.1, 0.02);

    ModelShape bad;
    bad.feature_dim = 0;
    EXPECT_THROW(init_params(bad, r), ConfigError);
}

TEST(Checkpoint, RoundTripIsExact) {
    Rng rng(15);
    const auto p = init_params(small_shape(), rng);
    const auto j = checkpoint_json(p);
    EXPECT_EQ(j.at("format"), kCheckpointFormat);
    const auto q = params_from_checkpoint(nlohmann::json::parse(j.dump()));
    EXPECT_TRUE(p == q);
    auto broken = j;
    broken["format"] = "other/0";
    EXPECT_THROW(params_from_checkpoint(broken), DataError);
}
