#pragma once

// Synthetic Gaussian-mixture tasks, vector augmentation, batch sampling with
// the unlabeled ratio and view count, OOD injection, and CSV import/export.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "crlab/errors.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

struct DatasetSpec {
    std::size_t num_classes = 4;      // K
    std::size_t input_dim = 8;        // D
    std::vector<Vector> centers;      // empty: drawn from the seed at center_radius
    double center_radius = 3.0;
    double noise_scale = 1.0;         // within-class standard deviation
    std::size_t labels_per_class = 4;
    std::size_t unlabeled_count = 2000;
    std::size_t test_count = 2000;
    std::uint64_t seed = 0;

    std::vector<Vector> resolved_centers() const;
    void validate() const;
};

/// Per-sample OOD markers. Only diagnostics read them; every read is counted
/// so tests can assert training never does.
class HiddenFlags {
public:
    HiddenFlags() = default;
    explicit HiddenFlags(std::vector<char> flags) : flags_(std::move(flags)) {}

    std::size_t size() const noexcept { return flags_.size(); }
    bool read(std::size_t i) const {
        reads().fetch_add(1, std::memory_order_relaxed);
        return flags_.at(i) != 0;
    }
    void push_back(bool v) { flags_.push_back(v ? 1 : 0); }

    static std::atomic<std::uint64_t>& reads() {
        static std::atomic<std::uint64_t> counter{0};
        return counter;
    }

    // Reordering does not inspect values.
    void permute(const std::vector<std::size_t>& order) {
        std::vector<char> out(order.size());
        for (std::size_t i = 0; i < order.size(); ++i) out[i] = flags_[order[i]];
        flags_ = std::move(out);
    }

private:
    std::vector<char> flags_;
};

struct LabeledSet {
    Matrix x;
    std::vector<int> labels;
    std::size_t size() const { return x.rows(); }
};

struct UnlabeledSet {
    Matrix x;
    std::vector<int> hidden_labels;  // diagnostics only; -1 for OOD
    HiddenFlags is_ood;
    std::size_t size() const { return x.rows(); }
};

struct Dataset {
    LabeledSet labeled;
    UnlabeledSet unlabeled;
    LabeledSet test;
};

inline void DatasetSpec::validate() const {
    if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
    if (input_dim < 1) throw ConfigError("dataset: input_dim must be >= 1");
    if (labels_per_class < 1) throw ConfigError("dataset: labels_per_class must be >= 1");
    if (noise_scale < 0) throw ConfigError("dataset: noise_scale must be >= 0");
    if (labels_per_class * num_classes > unlabeled_count) {
        throw ConfigError("dataset: labels_per_class * num_classes (" +
                          std::to_string(labels_per_class * num_classes) +
                          ") exceeds generated training pool (" + std::to_string(unlabeled_count) + ")");
    }
    if (!centers.empty()) {
        if (centers.size() != num_classes) throw ConfigError("dataset: need one center per class");
        for (const auto& c : centers)
            if (c.size() != input_dim) throw ConfigError("dataset: center dimension mismatch");
        for (std::size_t a = 0; a < centers.size(); ++a)
            for (std::size_t b = a + 1; b < centers.size(); ++b)
                if (centers[a] == centers[b]) throw ConfigError("dataset: centers must be distinct");
    }
}

/// Explicit centers, or K points drawn uniformly on the sphere of center_radius.
inline std::vector<Vector> DatasetSpec::resolved_centers() const {
    if (!centers.empty()) return centers;
    Rng rng = Rng(seed).fork(0xC3A7E5);
    std::vector<Vector> out;
    for (std::size_t k = 0; k < num_classes; ++k) {
        Vector v(input_dim);
        for (auto& x : v) x = rng.normal();
        v = l2_normalize(v);
        for (auto& x : v) x *= center_radius;
        out.push_back(std::move(v));
    }
    return out;
}

namespace detail {

inline void draw_from_mixture(const std::vector<Vector>& centers, double noise, std::size_t n,
                              Rng& rng, Matrix& x, std::vector<int>& labels) {
    const std::size_t d = centers.front().size();
    x = Matrix(n, d);
    labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = rng.index(centers.size());
        labels[i] = static_cast<int>(k);
        auto r = x.row(i);
        for (std::size_t j = 0; j < d; ++j) r[j] = centers[k][j] + noise * rng.normal();
    }
}

}  // namespace detail

/// Training pool and test set drawn i.i.d. from the mixture. The unlabeled
/// set is the whole pool; the labeled set is a stratified subset of it.
inline Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    const auto centers = spec.resolved_centers();
    Rng rng = Rng(spec.seed).fork(0xDA7A);

    Dataset ds;
    std::vector<int> pool_labels;
    detail::draw_from_mixture(centers, spec.noise_scale, spec.unlabeled_count, rng, ds.unlabeled.x,
                              pool_labels);
    ds.unlabeled.hidden_labels = pool_labels;
    ds.unlabeled.is_ood = HiddenFlags(std::vector<char>(spec.unlabeled_count, 0));

    std::vector<std::size_t> order(spec.unlabeled_count);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    std::vector<std::size_t> taken(spec.num_classes, 0);
    std::vector<std::size_t> chosen;
    for (std::size_t i : order) {
        const auto k = static_cast<std::size_t>(pool_labels[i]);
        if (taken[k] < spec.labels_per_class) {
            ++taken[k];
            chosen.push_back(i);
        }
    }
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
        if (taken[k] < spec.labels_per_class) {
            throw ConfigError("dataset: class " + std::to_string(k) + " has only " +
                              std::to_string(taken[k]) + " samples in the pool, need " +
                              std::to_string(spec.labels_per_class));
        }
    }
    std::sort(chosen.begin(), chosen.end());
    ds.labeled.x = Matrix(chosen.size(), spec.input_dim);
    for (std::size_t r = 0; r < chosen.size(); ++r) {
        const auto src = ds.unlabeled.x.row(chosen[r]);
        std::copy(src.begin(), src.end(), ds.labeled.x.row(r).begin());
        ds.labeled.labels.push_back(pool_labels[chosen[r]]);
    }

    detail::draw_from_mixture(centers, spec.noise_scale, spec.test_count, rng, ds.test.x,
                              ds.test.labels);
    return ds;
}

// ---------------------------------------------------------------------------
// Augmentation.

enum class Strength { weak, strong };

struct AugmentConfig {
    double weak_noise = 0.05;    // σ_w
    double strong_noise = 0.25;  // σ_s
    double drop_prob = 0.1;      // coordinate dropout
    double scale_jitter = 0.2;   // global scale in [1−γ, 1+γ]
};

/// weak: x + N(0, σ_w²). strong: scale·(x + N(0, σ_s²)) with coordinates zeroed
/// at probability p_drop.
inline Vector augment(std::span<const double> x, Strength strength, const AugmentConfig& cfg,
                      Rng& rng) {
    Vector out(x.begin(), x.end());
    if (strength == Strength::weak) {
        for (auto& v : out) v += cfg.weak_noise * rng.normal();
        return out;
    }
    for (auto& v : out) v += cfg.strong_noise * rng.normal();
    const double scale = rng.uniform(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
    for (auto& v : out) {
        v *= scale;
        if (rng.bernoulli(cfg.drop_prob)) v = 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batches.

struct SampleBatch {
    Matrix labeled_x;            // B × D
    std::vector<int> labels;
    Matrix unlabeled_x;          // μB × D, clean
    std::vector<std::size_t> unlabeled_index;  // rows of the unlabeled pool
};

/// Strong views are source-major: view v of source s sits at row s·m + v.
struct AugmentedBatch {
    Matrix weak;                 // μB × D
    Matrix strong;               // m·μB × D
    std::vector<std::size_t> source;  // per strong view, index into the μB sources
    std::size_t views_per_source = 1;

    std::size_t num_sources() const { return weak.rows(); }
    std::size_t num_views() const { return strong.rows(); }
};

struct BatchPair {
    SampleBatch batch;
    AugmentedBatch augmented;
};

inline BatchPair sample_batch(const LabeledSet& labeled, const UnlabeledSet& unlabeled,
                              std::size_t batch_size, std::size_t mu, std::size_t views,
                              const AugmentConfig& aug, Rng& rng) {
    if (labeled.size() == 0 || unlabeled.size() == 0) throw ConfigError("sample_batch: empty pool");
    if (batch_size < 1 || mu < 1 || views < 1) throw ConfigError("sample_batch: B, mu, m must be >= 1");
    const std::size_t d = labeled.x.cols();
    if (unlabeled.x.cols() != d) throw DimensionError("sample_batch: labeled/unlabeled dims differ");

    BatchPair out;
    auto& b = out.batch;
    b.labeled_x = Matrix(batch_size, d);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t r = rng.index(labeled.size());
        // Labeled samples get a weak view, as in the supervised branch of FixMatch.
        const Vector v = augment(labeled.x.row(r), Strength::weak, aug, rng);
        std::copy(v.begin(), v.end(), b.labeled_x.row(i).begin());
        b.labels.push_back(labeled.labels[r]);
    }
    const std::size_t nu = mu * batch_size;
    b.unlabeled_x = Matrix(nu, d);
    auto& a = out.augmented;
    a.weak = Matrix(nu, d);
    a.strong = Matrix(nu * views, d);
    a.views_per_source = views;
    for (std::size_t s = 0; s < nu; ++s) {
        const std::size_t r = rng.index(unlabeled.size());
        b.unlabeled_index.push_back(r);
        const auto src = unlabeled.x.row(r);
        std::copy(src.begin(), src.end(), b.unlabeled_x.row(s).begin());
        const Vector w = augment(src, Strength::weak, aug, rng);
        std::copy(w.begin(), w.end(), a.weak.row(s).begin());
        for (std::size_t v = 0; v < views; ++v) {
            const Vector sv = augment(src, Strength::strong, aug, rng);
            std::copy(sv.begin(), sv.end(), a.strong.row(s * views + v).begin());
            a.source.push_back(s);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Open-set injection.

enum class OodPreset { far, near };

struct OodSpec {
    std::size_t count = 0;
    OodPreset preset = OodPreset::far;
    std::uint64_t seed = 0;
};

/// OOD cluster centers. far: at least 5σ from every in-distribution center and
/// well outside the class shell; near: between two class centers, overlapping them.
inline std::vector<Vector> ood_centers(const DatasetSpec& spec, OodPreset preset, Rng& rng) {
    const auto centers = spec.resolved_centers();
    const std::size_t d = spec.input_dim;
    const double sigma = std::max(spec.noise_scale, 1e-6);
    std::vector<Vector> out;
    const std::size_t n_clusters = centers.size();
    if (preset == OodPreset::near) {
        for (std::size_t k = 0; k < n_clusters; ++k) {
            const auto& a = centers[k];
            const auto& b = centers[(k + 1) % n_clusters];
            Vector c(d);
            for (std::size_t j = 0; j < d; ++j) c[j] = 0.5 * (a[j] + b[j]) + 0.5 * sigma * rng.normal();
            out.push_back(std::move(c));
        }
        return out;
    }
    double max_radius = 0;
    for (const auto& c : centers) max_radius = std::max(max_radius, norm2(std::span<const double>(c)));
    const double radius = max_radius + 6.0 * sigma;
    while (out.size() < n_clusters) {
        Vector dir(d);
        for (auto& x : dir) x = rng.normal();
        dir = l2_normalize(dir);
        for (auto& x : dir) x *= radius;
        bool ok = true;
        for (const auto& c : centers) {
            double dist = 0;
            for (std::size_t j = 0; j < d; ++j) dist += (dir[j] - c[j]) * (dir[j] - c[j]);
            if (std::sqrt(dist) < 5.0 * sigma) ok = false;
        }
        if (ok) out.push_back(std::move(dir));
    }
    return out;
}

/// Union of the pool and `ood.count` OOD draws, deterministically shuffled.
inline UnlabeledSet inject_ood(const UnlabeledSet& pool, const DatasetSpec& spec, const OodSpec& ood) {
    if (ood.count == 0) return pool;
    Rng rng = Rng(ood.seed).fork(0x00D);
    const auto centers = ood_centers(spec, ood.preset, rng);
    const std::size_t d = pool.x.cols();
    const std::size_t n0 = pool.size();
    const std::size_t n = n0 + ood.count;

    Matrix x(n, d);
    std::copy(pool.x.data(), pool.x.data() + pool.x.size(), x.data());
    std::vector<int> labels = pool.hidden_labels;
    HiddenFlags flags = pool.is_ood;
    for (std::size_t i = 0; i < ood.count; ++i) {
        const auto& c = centers[rng.index(centers.size())];
        auto r = x.row(n0 + i);
        for (std::size_t j = 0; j < d; ++j) r[j] = c[j] + spec.noise_scale * rng.normal();
        labels.push_back(-1);
        flags.push_back(true);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    UnlabeledSet out;
    out.x = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto src = x.row(order[i]);
        std::copy(src.begin(), src.end(), out.x.row(i).begin());
        out.hidden_labels.push_back(labels[order[i]]);
    }
    flags.permute(order);
    out.is_ood = std::move(flags);
    return out;
}

// ---------------------------------------------------------------------------
// CSV: x0..x{D-1},label,is_ood,split

inline void write_dataset_csv(std::ostream& os, const Dataset& ds) {
    const std::size_t d = ds.test.x.cols();
    for (std::size_t j = 0; j < d; ++j) os << 'x' << j << ',';
    os << "label,is_ood,split\n";
    os << std::setprecision(17);
    auto emit = [&](const Matrix& x, std::size_t i, int label, bool ood, const char* split) {
        for (double v : x.row(i)) os << v << ',';
        os << label << ',' << (ood ? 1 : 0) << ',' << split << '\n';
    };
    for (std::size_t i = 0; i < ds.labeled.size(); ++i)
        emit(ds.labeled.x, i, ds.labeled.labels[i], false, "labeled");
    for (std::size_t i = 0; i < ds.unlabeled.size(); ++i)
        emit(ds.unlabeled.x, i, ds.unlabeled.hidden_labels[i], ds.unlabeled.is_ood.read(i), "unlabeled");
    for (std::size_t i = 0; i < ds.test.size(); ++i)
        emit(ds.test.x, i, ds.test.labels[i], false, "test");
}

inline Dataset read_dataset_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("dataset csv: empty file");
    std::size_t d = 0;
    {
        std::stringstream hs(line);
        std::string col;
        std::vector<std::string> cols;
        while (std::getline(hs, col, ',')) cols.push_back(col);
        if (cols.size() < 4 || cols[cols.size() - 3] != "label" || cols[cols.size() - 2] != "is_ood" ||
            cols.back() != "split") {
            throw DataError("dataset csv: bad header '" + line + "'");
        }
        d = cols.size() - 3;
        for (std::size_t j = 0; j < d; ++j)
            if (cols[j] != "x" + std::to_string(j)) throw DataError("dataset csv: bad column " + cols[j]);
    }
    std::vector<double> lx, ux, tx;
    Dataset ds;
    std::vector<char> flags;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string cell;
        std::vector<double> row(d);
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::getline(ls, cell, ',')) throw DataError("dataset csv: short row at line " + std::to_string(lineno));
            row[j] = std::stod(cell);
        }
        std::string label_s, ood_s, split;
        if (!std::getline(ls, label_s, ',') || !std::getline(ls, ood_s, ',') || !std::getline(ls, split)) {
            throw DataError("dataset csv: short row at line " + std::to_string(lineno));
        }
        const int label = std::stoi(label_s);
        if (split == "labeled") {
            lx.insert(lx.end(), row.begin(), row.end());
            ds.labeled.labels.push_back(label);
        } else if (split == "unlabeled") {
            ux.insert(ux.end(), row.begin(), row.end());
            ds.unlabeled.hidden_labels.push_back(label);
            flags.push_back(ood_s == "1" ? 1 : 0);
        } else if (split == "test") {
            tx.insert(tx.end(), row.begin(), row.end());
            ds.test.labels.push_back(label);
        } else {
            throw DataError("dataset csv: unknown split '" + split + "' at line " + std::to_string(lineno));
        }
    }
    ds.labeled.x = Matrix(ds.labeled.labels.size(), d, std::move(lx));
    ds.unlabeled.x = Matrix(ds.unlabeled.hidden_labels.size(), d, std::move(ux));
    ds.unlabeled.is_ood = HiddenFlags(std::move(flags));
    ds.test.x = Matrix(ds.test.labels.size(), d, std::move(tx));
    return ds;
}

}  // namespace crlab
