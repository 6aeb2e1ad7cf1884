#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "crlab/errors.hpp"
#include "crlab/numerics.hpp"

namespace crlab {

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
template <class T>
double accuracy(const BasicMatrix<T>& logits, std::span<const int> labels) {
    if (logits.rows() == 0) throw DataError("accuracy: empty set");
    if (labels.size() != logits.rows()) throw DimensionError("accuracy: label count != rows");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i)
        hit += static_cast<int>(argmax(logits.row(i))) == labels[i];
    return double(hit) / double(logits.rows());
}

/// Mean silhouette with Euclidean distance. Points alone in their cluster score
/// 0, as do points with a = b = 0.
template <class T>
double silhouette(const BasicMatrix<T>& features, std::span<const int> ids) {
    const std::size_t n = features.rows();
    if (ids.size() != n) throw DimensionError("silhouette: id count != rows");
    if (n < 3) throw DegenerateInputError("silhouette: need at least 3 points");
    int max_id = -1;
    for (int id : ids) {
        if (id < 0) throw DataError("silhouette: negative cluster id");
        max_id = std::max(max_id, id);
    }
    const auto k = static_cast<std::size_t>(max_id) + 1;
    std::vector<std::size_t> count(k, 0);
    for (int id : ids) ++count[static_cast<std::size_t>(id)];
    const auto nonempty = std::count_if(count.begin(), count.end(), [](std::size_t c) { return c > 0; });
    if (nonempty < 2) throw DegenerateInputError("silhouette: fewer than two non-empty clusters");

    double total = 0;
    std::vector<double> dist_sum(k);
    for (std::size_t i = 0; i < n; ++i) {
        std::fill(dist_sum.begin(), dist_sum.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const auto fi = features.row(i);
            const auto fj = features.row(j);
            double d2 = 0;
            for (std::size_t c = 0; c < fi.size(); ++c) {
                const double diff = static_cast<double>(fi[c] - fj[c]);
                d2 += diff * diff;
            }
            dist_sum[static_cast<std::size_t>(ids[j])] += std::sqrt(d2);
        }
        const auto own = static_cast<std::size_t>(ids[i]);
        if (count[own] < 2) continue;
        const double a = dist_sum[own] / double(count[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            if (c != own && count[c] > 0) b = std::min(b, dist_sum[c] / double(count[c]));
        const double denom = std::max(a, b);
        if (denom > 0) total += (b - a) / denom;
    }
    return total / double(n);
}

}  // namespace crlab
