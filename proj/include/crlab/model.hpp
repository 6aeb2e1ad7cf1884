#pragma once

// Encoder h(x), linear classifier W (logits = h·W), projection head producing
// unit-norm embeddings z, and an exponential-moving-average shadow.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "crlab/errors.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

enum class Nonlinearity { identity, relu, leaky_relu };

struct ModelShape {
    std::size_t input_dim = 8;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t feature_dim = 16;  // H
    std::size_t num_classes = 4;   // K
    std::size_t proj_hidden = 0;   // 0 means feature_dim
    std::size_t proj_dim = 8;      // P
    Nonlinearity activation = Nonlinearity::relu;
    double leaky_slope = 0.01;

    std::size_t projection_hidden() const { return proj_hidden ? proj_hidden : feature_dim; }

    void validate() const {
        auto need = [](std::size_t v, const char* name) {
            if (v == 0) throw ConfigError(std::string("model shape: ") + name + " must be >= 1");
        };
        need(input_dim, "input_dim");
        for (auto h : hidden) need(h, "hidden width");
        need(feature_dim, "feature_dim");
        need(num_classes, "num_classes");
        need(projection_hidden(), "proj_hidden");
        need(proj_dim, "proj_dim");
    }
};

template <class T>
struct Dense {
    BasicMatrix<T> weight;  // fan_in × fan_out
    BasicVector<T> bias;
    Nonlinearity act = Nonlinearity::identity;
    T slope = T(0);

    std::size_t fan_in() const { return weight.rows(); }
    std::size_t fan_out() const { return weight.cols(); }
};

template <class T>
T activate(T x, Nonlinearity act, T slope) {
    switch (act) {
        case Nonlinearity::relu: return x > T(0) ? x : T(0);
        case Nonlinearity::leaky_relu: return x > T(0) ? x : slope * x;
        case Nonlinearity::identity: break;
    }
    return x;
}

template <class T>
T activate_derivative(T pre, Nonlinearity act, T slope) {
    switch (act) {
        case Nonlinearity::relu: return pre > T(0) ? T(1) : T(0);
        case Nonlinearity::leaky_relu: return pre > T(0) ? T(1) : slope;
        case Nonlinearity::identity: break;
    }
    return T(1);
}

/// Trainable parameters. Also used as the gradient container.
template <class T>
struct ModelParams {
    using value_type = T;

    std::vector<Dense<T>> encoder;
    BasicMatrix<T> classifier;  // H × K, no bias
    Dense<T> proj_hidden;
    Dense<T> proj_out;

    std::size_t input_dim() const { return encoder.front().fan_in(); }
    std::size_t feature_dim() const { return classifier.rows(); }
    std::size_t num_classes() const { return classifier.cols(); }
    std::size_t proj_dim() const { return proj_out.fan_out(); }

    /// Every tensor with a stable name, in a fixed order.
    template <class F>
    void visit(F&& f) {
        for (std::size_t l = 0; l < encoder.size(); ++l) {
            f("encoder." + std::to_string(l) + ".weight", encoder[l].weight.rows(),
              encoder[l].weight.cols(), encoder[l].weight.flat());
            f("encoder." + std::to_string(l) + ".bias", std::size_t(1), encoder[l].bias.size(),
              std::span<T>(encoder[l].bias));
        }
        f(std::string("classifier"), classifier.rows(), classifier.cols(), classifier.flat());
        f(std::string("proj.0.weight"), proj_hidden.weight.rows(), proj_hidden.weight.cols(),
          proj_hidden.weight.flat());
        f(std::string("proj.0.bias"), std::size_t(1), proj_hidden.bias.size(),
          std::span<T>(proj_hidden.bias));
        f(std::string("proj.1.weight"), proj_out.weight.rows(), proj_out.weight.cols(),
          proj_out.weight.flat());
        f(std::string("proj.1.bias"), std::size_t(1), proj_out.bias.size(),
          std::span<T>(proj_out.bias));
    }

    std::vector<std::span<T>> tensors() {
        std::vector<std::span<T>> out;
        visit([&](const std::string&, std::size_t, std::size_t, std::span<T> s) { out.push_back(s); });
        return out;
    }
    std::vector<std::span<const T>> tensors() const {
        auto& self = const_cast<ModelParams&>(*this);
        std::vector<std::span<const T>> out;
        self.visit([&](const std::string&, std::size_t, std::size_t, std::span<T> s) {
            out.push_back(s);
        });
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto s : tensors()) n += s.size();
        return n;
    }

    ModelParams zeros_like() const {
        ModelParams z = *this;
        for (auto s : z.tensors()) std::fill(s.begin(), s.end(), T(0));
        return z;
    }

    bool congruent(const ModelParams& o) const {
        const auto a = tensors();
        const auto b = o.tensors();
        if (a.size() != b.size()) return false;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].size() != b[i].size()) return false;
        return encoder.size() == o.encoder.size();
    }

    template <class U>
    ModelParams<U> cast() const {
        auto cast_dense = [](const Dense<T>& d) {
            return Dense<U>{d.weight.template cast<U>(),
                            BasicVector<U>(d.bias.begin(), d.bias.end()), d.act, U(d.slope)};
        };
        ModelParams<U> out;
        for (const auto& d : encoder) out.encoder.push_back(cast_dense(d));
        out.classifier = classifier.template cast<U>();
        out.proj_hidden = cast_dense(proj_hidden);
        out.proj_out = cast_dense(proj_out);
        return out;
    }

    friend bool operator==(const ModelParams& a, const ModelParams& b) {
        if (!a.congruent(b)) return false;
        const auto x = a.tensors();
        const auto y = b.tensors();
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!std::equal(x[i].begin(), x[i].end(), y[i].begin())) return false;
        return true;
    }
};

/// Adds `scale * src` into `dst` tensor by tensor.
template <class T>
void accumulate(ModelParams<T>& dst, const ModelParams<T>& src, T scale = T(1)) {
    if (!dst.congruent(src)) throw DimensionError("accumulate: parameter shapes differ");
    auto d = dst.tensors();
    const auto s = src.tensors();
    for (std::size_t t = 0; t < d.size(); ++t)
        for (std::size_t i = 0; i < d[t].size(); ++i) d[t][i] += scale * s[t][i];
}

template <class T>
bool all_finite(const ModelParams<T>& p) {
    for (auto s : p.tensors())
        if (!all_finite(s)) return false;
    return true;
}

/// Activations kept for the backward pass.
template <class T>
struct ForwardCache {
    std::vector<BasicMatrix<T>> layer_inputs;  // input to each encoder layer
    std::vector<BasicMatrix<T>> layer_pre;     // pre-activation of each encoder layer
    BasicMatrix<T> features;                   // h, batch × H
    BasicMatrix<T> logits;                     // batch × K
    BasicMatrix<T> proj_pre;                   // batch × proj_hidden
    BasicMatrix<T> proj_act;
    BasicMatrix<T> proj_raw;                   // pre-normalization, batch × P
    BasicVector<T> proj_norm;                  // norm used per row (clamped to epsilon)
    std::vector<char> proj_clamped;
    BasicMatrix<T> z;                          // unit rows, batch × P
    std::size_t clamp_count = 0;

    std::size_t batch() const { return features.rows(); }
};

template <class T>
BasicMatrix<T> dense_pre(const Dense<T>& layer, const BasicMatrix<T>& x) {
    if (x.cols() != layer.fan_in()) {
        throw DimensionError("dense layer expects " + std::to_string(layer.fan_in()) +
                             " inputs, got " + x.shape_string());
    }
    BasicMatrix<T> out = matmul(x, layer.weight);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto r = out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) r[j] += layer.bias[j];
    }
    return out;
}

template <class T>
BasicMatrix<T> apply_activation(const BasicMatrix<T>& pre, Nonlinearity act, T slope) {
    BasicMatrix<T> out = pre;
    if (act == Nonlinearity::identity) return out;
    for (auto& v : out.flat()) v = activate(v, act, slope);
    return out;
}

enum class ForwardMode { full, logits_only };

template <class T>
ForwardCache<T> forward(const ModelParams<T>& params, const BasicMatrix<T>& inputs,
                        ForwardMode mode = ForwardMode::full) {
    if (params.encoder.empty()) throw DimensionError("forward: model has no encoder layers");
    if (inputs.cols() != params.input_dim()) {
        throw DimensionError("forward: inputs " + inputs.shape_string() + ", model expects " +
                             std::to_string(params.input_dim()) + " columns");
    }
    ForwardCache<T> c;
    BasicMatrix<T> x = inputs;
    for (const auto& layer : params.encoder) {
        BasicMatrix<T> pre = dense_pre(layer, x);
        BasicMatrix<T> act = apply_activation(pre, layer.act, layer.slope);
        c.layer_inputs.push_back(std::move(x));
        c.layer_pre.push_back(std::move(pre));
        x = std::move(act);
    }
    c.features = std::move(x);
    c.logits = matmul(c.features, params.classifier);
    if (mode == ForwardMode::logits_only) return c;

    c.proj_pre = dense_pre(params.proj_hidden, c.features);
    c.proj_act = apply_activation(c.proj_pre, params.proj_hidden.act, params.proj_hidden.slope);
    // The output layer of the head is linear.
    c.proj_raw = dense_pre(params.proj_out, c.proj_act);
    const std::size_t n = c.proj_raw.rows();
    c.z = BasicMatrix<T>(n, c.proj_raw.cols());
    c.proj_norm.assign(n, T(0));
    c.proj_clamped.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        T nrm = norm2(c.proj_raw.row(i));
        if (!(nrm > T(kNormEpsilon))) {
            // Degenerate embedding: divide by epsilon instead of aborting.
            nrm = T(kNormEpsilon);
            c.proj_clamped[i] = 1;
            ++c.clamp_count;
        }
        c.proj_norm[i] = nrm;
        auto src = c.proj_raw.row(i);
        auto dst = c.z.row(i);
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] = src[j] / nrm;
    }
    return c;
}

namespace detail {

template <class T>
void dense_backward(const Dense<T>& layer, const BasicMatrix<T>& input, const BasicMatrix<T>& pre,
                    BasicMatrix<T> grad_out, Dense<T>& grad_layer, BasicMatrix<T>* grad_input) {
    if (layer.act != Nonlinearity::identity) {
        auto g = grad_out.flat();
        const auto p = pre.flat();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= activate_derivative(p[i], layer.act, layer.slope);
    }
    grad_layer.weight += matmul_tn(input, grad_out);
    for (std::size_t i = 0; i < grad_out.rows(); ++i) {
        const auto r = grad_out.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) grad_layer.bias[j] += r[j];
    }
    if (grad_input) *grad_input = matmul_nt(grad_out, layer.weight);
}

}  // namespace detail

/// Parameter gradients of a scalar loss given dL/dlogits and dL/dz. Either
/// upstream gradient may be an empty matrix, meaning zero.
template <class T>
ModelParams<T> backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
                        const BasicMatrix<T>& grad_logits, const BasicMatrix<T>& grad_z) {
    ModelParams<T> grads = params.zeros_like();
    const std::size_t n = cache.batch();
    BasicMatrix<T> grad_h(n, params.feature_dim());

    if (!grad_logits.empty()) {
        cache.logits.require_same_shape(grad_logits, "backward(grad_logits)");
        grads.classifier += matmul_tn(cache.features, grad_logits);
        grad_h += matmul_nt(grad_logits, params.classifier);
    }
    if (!grad_z.empty()) {
        if (cache.z.empty()) throw DimensionError("backward: cache has no projection outputs");
        cache.z.require_same_shape(grad_z, "backward(grad_z)");
        // z = g/‖g‖  ⇒  dL/dg = (dz − z⟨z,dz⟩)/‖g‖ ; a clamped row is g/ε.
        BasicMatrix<T> grad_raw(n, grad_z.cols());
        for (std::size_t i = 0; i < n; ++i) {
            const auto zi = cache.z.row(i);
            const auto dz = grad_z.row(i);
            auto out = grad_raw.row(i);
            const T inv = T(1) / cache.proj_norm[i];
            if (cache.proj_clamped[i]) {
                for (std::size_t j = 0; j < out.size(); ++j) out[j] = dz[j] * inv;
            } else {
                const T zd = dot(zi, dz);
                for (std::size_t j = 0; j < out.size(); ++j) out[j] = (dz[j] - zi[j] * zd) * inv;
            }
        }
        BasicMatrix<T> grad_act;
        detail::dense_backward(params.proj_out, cache.proj_act, cache.proj_raw, std::move(grad_raw),
                               grads.proj_out, &grad_act);
        BasicMatrix<T> grad_feat;
        detail::dense_backward(params.proj_hidden, cache.features, cache.proj_pre,
                               std::move(grad_act), grads.proj_hidden, &grad_feat);
        grad_h += grad_feat;
    }

    BasicMatrix<T> g = std::move(grad_h);
    for (std::size_t l = params.encoder.size(); l-- > 0;) {
        BasicMatrix<T> grad_in;
        detail::dense_backward(params.encoder[l], cache.layer_inputs[l], cache.layer_pre[l],
                               std::move(g), grads.encoder[l], l > 0 ? &grad_in : nullptr);
        g = std::move(grad_in);
    }
    return grads;
}

// ---------------------------------------------------------------------------

template <class T>
struct EmaShadow {
    ModelParams<T> params;
    T momentum = T(0.999);
};

template <class T>
EmaShadow<T> make_ema(const ModelParams<T>& params, T momentum) {
    if (!(momentum >= T(0) && momentum < T(1))) throw ConfigError("EMA momentum must be in [0,1)");
    return EmaShadow<T>{params, momentum};
}

/// s ← m·s + (1−m)·p, in place.
template <class T>
EmaShadow<T>& ema_update(EmaShadow<T>& shadow, const ModelParams<T>& params) {
    if (!shadow.params.congruent(params)) throw DimensionError("ema_update: shapes differ");
    auto s = shadow.params.tensors();
    const auto p = params.tensors();
    const T m = shadow.momentum;
    for (std::size_t t = 0; t < s.size(); ++t)
        for (std::size_t i = 0; i < s[t].size(); ++i) s[t][i] = m * s[t][i] + (T(1) - m) * p[t][i];
    return shadow;
}

// ---------------------------------------------------------------------------

inline Dense<double> init_dense(std::size_t fan_in, std::size_t fan_out, Nonlinearity act,
                                double slope, Rng& rng) {
    Dense<double> d{Matrix(fan_in, fan_out), Vector(fan_out, 0.0), act, slope};
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& w : d.weight.flat()) w = rng.normal(0.0, sd);
    return d;
}

/// Weights ~ N(0, 1/fan_in), biases zero.
inline ModelParams<double> init_params(const ModelShape& shape, Rng& rng) {
    shape.validate();
    ModelParams<double> p;
    std::size_t in = shape.input_dim;
    for (std::size_t w : shape.hidden) {
        p.encoder.push_back(init_dense(in, w, shape.activation, shape.leaky_slope, rng));
        in = w;
    }
    p.encoder.push_back(init_dense(in, shape.feature_dim, shape.activation, shape.leaky_slope, rng));
    {
        const double sd = 1.0 / std::sqrt(static_cast<double>(shape.feature_dim));
        p.classifier = Matrix(shape.feature_dim, shape.num_classes);
        for (auto& w : p.classifier.flat()) w = rng.normal(0.0, sd);
    }
    p.proj_hidden = init_dense(shape.feature_dim, shape.projection_hidden(), shape.activation,
                               shape.leaky_slope, rng);
    p.proj_out = init_dense(shape.projection_hidden(), shape.proj_dim, Nonlinearity::identity, 0.0, rng);
    return p;
}

}  // namespace crlab
