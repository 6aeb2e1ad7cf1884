#pragma once

// Dense real linear algebra, stable elementwise transforms, seeded randomness
// and a central-difference gradient oracle.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "crlab/errors.hpp"

namespace crlab {

// Generic code calls these unqualified so that extended-precision scalar
// types supply their own overloads.
using std::abs;
using std::exp;
using std::isfinite;
using std::log;
using std::sqrt;

inline constexpr double kNormEpsilon = 1e-12;

template <class T>
using BasicVector = std::vector<T>;
using Vector = BasicVector<double>;

/// Row-major dense matrix. Rows are exposed as spans.
template <class T>
class BasicMatrix {
public:
    using value_type = T;

    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                                 " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }
    BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) throw DimensionError("ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static BasicMatrix from_row(std::span<const T> row) {
        return BasicMatrix(1, row.size(), std::vector<T>(row.begin(), row.end()));
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }
    const T& operator()(std::size_t r, std::size_t c) const {
        assert(r < rows_ && c < cols_);
        return data_[r * cols_ + c];
    }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const BasicMatrix& o) const noexcept {
        return rows_ == o.rows_ && cols_ == o.cols_;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicMatrix& operator+=(const BasicMatrix& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    BasicMatrix& operator-=(const BasicMatrix& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    BasicMatrix& operator*=(T s) {
        for (auto& v : data_) v *= s;
        return *this;
    }

    friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

    template <class U>
    BasicMatrix<U> cast() const {
        return BasicMatrix<U>(rows_, cols_, std::vector<U>(data_.begin(), data_.end()));
    }

    void require_same_shape(const BasicMatrix& o, const char* op) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string(op) + ": shape " + shape_string() + " vs " +
                                 o.shape_string());
        }
    }
    std::string shape_string() const {
        return std::to_string(rows_) + "x" + std::to_string(cols_);
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;

// ---------------------------------------------------------------------------
// Products, delegated to Eigen over the row-major storage.

namespace detail {

template <class T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
Eigen::Map<const EigenRowMajor<T>> view(const BasicMatrix<T>& m) {
    return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <class T>
Eigen::Map<EigenRowMajor<T>> view(BasicMatrix<T>& m) {
    return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

}  // namespace detail

/// a (n×k) · b (k×m)
template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + a.shape_string() + " * " + b.shape_string());
    }
    BasicMatrix<T> c(a.rows(), b.cols());
    if (a.cols() > 0) detail::view(c).noalias() = detail::view(a) * detail::view(b);
    return c;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
    BasicMatrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

/// aᵀ (k×n) · b (n×m)
template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + a.shape_string() + "^T * " + b.shape_string());
    }
    BasicMatrix<T> c(a.cols(), b.cols());
    if (a.rows() > 0) detail::view(c).noalias() = detail::view(a).transpose() * detail::view(b);
    return c;
}

/// a (n×k) · bᵀ (k×m) where b is m×k.
template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + a.shape_string() + " * " + b.shape_string() + "^T");
    }
    BasicMatrix<T> c(a.rows(), b.rows());
    if (a.cols() > 0) detail::view(c).noalias() = detail::view(a) * detail::view(b).transpose();
    return c;
}

template <class A, class B>
std::remove_cv_t<A> dot(std::span<A> a, std::span<B> b) {
    if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
    std::remove_cv_t<A> s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <class E>
std::remove_cv_t<E> norm2(std::span<E> v) {
    std::remove_cv_t<E> s = 0;
    for (auto x : v) s += x * x;
    return sqrt(s);
}

template <class E>
bool all_finite(std::span<E> v) {
    return std::all_of(v.begin(), v.end(), [](auto x) { return isfinite(x); });
}

template <class T>
bool all_finite(const BasicMatrix<T>& m) {
    return all_finite(m.flat());
}

// ---------------------------------------------------------------------------
// Stable transforms.

/// log Σ exp(x_i), stabilized by the max.
template <class E>
std::remove_cv_t<E> log_sum_exp(std::span<E> x) {
    using T = std::remove_cv_t<E>;
    if (x.empty()) throw DimensionError("log_sum_exp: empty input");
    const T mx = *std::max_element(x.begin(), x.end());
    T s = 0;
    for (T v : x) s += exp(v - mx);
    return mx + log(s);
}

template <class E>
BasicVector<std::remove_cv_t<E>> softmax(std::span<E> logits) {
    using T = std::remove_cv_t<E>;
    if (logits.empty()) throw DimensionError("softmax: empty input");
    const T mx = *std::max_element(logits.begin(), logits.end());
    BasicVector<T> out(logits.size());
    T s = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = exp(logits[i] - mx);
        s += out[i];
    }
    for (auto& v : out) v /= s;
    return out;
}

template <class T>
BasicVector<T> softmax(const BasicVector<T>& logits) {
    return softmax(std::span<const T>(logits));
}

template <class E>
BasicVector<std::remove_cv_t<E>> log_softmax(std::span<E> logits) {
    using T = std::remove_cv_t<E>;
    const T lse = log_sum_exp(logits);
    BasicVector<T> out(logits.begin(), logits.end());
    for (auto& v : out) v -= lse;
    return out;
}

/// Row-wise softmax.
template <class T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& logits) {
    BasicMatrix<T> p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        const auto s = softmax(logits.row(i));
        std::copy(s.begin(), s.end(), p.row(i).begin());
    }
    return p;
}

template <class E>
BasicVector<std::remove_cv_t<E>> l2_normalize(std::span<E> v) {
    using T = std::remove_cv_t<E>;
    const T n = norm2(v);
    if (!(n > T(kNormEpsilon))) {
        throw DegenerateInputError("l2_normalize: norm " + std::to_string(double(n)) +
                                   " at or below epsilon");
    }
    BasicVector<T> out(v.begin(), v.end());
    for (auto& x : out) x /= n;
    return out;
}

template <class T>
BasicVector<T> l2_normalize(const BasicVector<T>& v) {
    return l2_normalize(std::span<const T>(v));
}

/// Lowest index among maximal entries.
template <class E>
std::size_t argmax(std::span<E> v) {
    if (v.empty()) throw DimensionError("argmax: empty input");
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// Randomness.

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded generator with a draw counter. Identical seed and call sequence
/// give identical output.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t position() const noexcept { return position_; }

    /// Independent generator for a named sub-stream; does not advance *this.
    Rng fork(std::uint64_t stream) const { return Rng(mix_seed(seed_ ^ mix_seed(stream))); }

    double uniform() { return uniform(0.0, 1.0); }
    double uniform(double lo, double hi) {
        ++position_;
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        ++position_;
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }
    bool bernoulli(double p) { return uniform() < p; }
    std::size_t index(std::size_t n) {
        ++position_;
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }

    template <class It>
    void shuffle(It first, It last) {
        // Fisher-Yates on our own draws so the position counter stays exact.
        const auto n = static_cast<std::size_t>(last - first);
        for (std::size_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[index(i)]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t position_ = 0;
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Finite-difference oracle.

inline constexpr double kDefaultFdStep = 1e-5;

/// second: (f(x+h) − f(x−h)) / 2h. fourth: five-point stencil. extrapolated:
/// Ridders' Richardson tableau over central differences with steps h, h/1.4, …,
/// keeping the estimate with the smallest error bound. That bound is written to
/// err_out when given; the low orders report zero.
enum class FdOrder { second, fourth, extrapolated };

template <class T, class Eval>
T central_difference(Eval&& eval_at_offset, T h, FdOrder order, T* err_out = nullptr) {
    if (err_out) *err_out = T(0);
    auto checked = [&](T off) {
        const T v = eval_at_offset(off);
        if (!isfinite(v)) throw PropagationError("finite differences: non-finite value");
        return v;
    };
    auto d2 = [&](T step) { return (checked(step) - checked(-step)) / (T(2) * step); };
    if (order == FdOrder::second) return d2(h);
    if (order == FdOrder::fourth) {
        const T f1 = checked(h) - checked(-h);
        const T f2 = checked(T(2) * h) - checked(T(-2) * h);
        return (T(8) * f1 - f2) / (T(12) * h);
    }

    constexpr std::size_t kLevels = 6;
    const T con2 = T(1.96);  // shrink factor 1.4, squared
    T tab[kLevels][kLevels];
    T step = h;
    tab[0][0] = d2(step);
    T best = tab[0][0];
    T err = std::numeric_limits<T>::max();
    for (std::size_t i = 1; i < kLevels; ++i) {
        step /= T(1.4);
        tab[0][i] = d2(step);
        T fac = con2;
        for (std::size_t j = 1; j <= i; ++j) {
            tab[j][i] = (tab[j - 1][i] * fac - tab[j - 1][i - 1]) / (fac - T(1));
            fac *= con2;
            const T e = std::max(abs(tab[j][i] - tab[j - 1][i]), abs(tab[j][i] - tab[j - 1][i - 1]));
            if (e <= err) {
                err = e;
                best = tab[j][i];
            }
        }
        if (abs(tab[i][i] - tab[i - 1][i - 1]) >= T(2) * err) break;
    }
    if (err_out) *err_out = err;
    return best;
}

/// Central differences (f(x+h·e) − f(x−h·e)) / 2h for every entry of `at`,
/// optionally refined per FdOrder. T may be wider than double to push roundoff
/// below the comparison tolerance.
template <class T>
BasicMatrix<T> finite_diff_grad(const std::function<T(const BasicMatrix<T>&)>& f,
                                const BasicMatrix<T>& at, T h = T(kDefaultFdStep),
                                FdOrder order = FdOrder::second) {
    if (!(h > T(0))) throw ConfigError("finite_diff_grad: step must be positive");
    BasicMatrix<T> grad(at.rows(), at.cols());
    BasicMatrix<T> x = at;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = x.data()[i];
        try {
            grad.data()[i] = central_difference(
                [&](T off) {
                    x.data()[i] = orig + off;
                    const T v = f(x);
                    x.data()[i] = orig;
                    return v;
                },
                h, order);
        } catch (const PropagationError&) {
            throw PropagationError("finite_diff_grad: function returned non-finite value at entry " +
                                   std::to_string(i));
        }
    }
    return grad;
}

/// Largest |a − b| / |a| over entries with |a| > floor. Zero if none qualify.
template <class T, class U>
double max_relative_error(std::span<T> analytic, std::span<U> reference,
                          double floor = 1e-8) {
    if (analytic.size() != reference.size()) throw DimensionError("max_relative_error: length");
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = static_cast<double>(analytic[i]);
        if (abs(a) <= floor) continue;
        const double r = static_cast<double>(reference[i]);
        worst = std::max(worst, abs(a - r) / abs(a));
    }
    return worst;
}

template <class T, class U>
double max_relative_error(const BasicMatrix<T>& analytic, const BasicMatrix<U>& reference,
                          double floor = 1e-8) {
    if (analytic.rows() != reference.rows() || analytic.cols() != reference.cols()) {
        throw DimensionError("max_relative_error: shape mismatch");
    }
    return max_relative_error(analytic.flat(), reference.flat(), floor);
}

template <class A, class B>
double max_abs_diff(std::span<A> a, std::span<B> b) {
    if (a.size() != b.size()) throw DimensionError("max_abs_diff: length");
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, static_cast<double>(abs(a[i] - b[i])));
    return worst;
}

}  // namespace crlab
