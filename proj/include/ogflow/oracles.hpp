#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ogflow/evalkit.hpp"
#include "ogflow/tensor.hpp"

// Brute-force reference implementations, written from first principles and
// sharing no code with the production paths in geometry.hpp / losses.hpp /
// evalkit.hpp. Used by the selfcheck suites to certify the fast paths.

namespace ogflow::oracle {

struct KnnRow {
    std::vector<std::uint32_t> indices;
    std::vector<double> distances;
};

/// Full-sort k nearest neighbors of one query, ties by lower index.
template <typename T>
KnnRow knn_row(const Tensor<T>& refs, const T* q, std::size_t k) {
    const std::size_t m = refs.shape[0];
    std::vector<std::pair<double, std::uint32_t>> all(m);
    for (std::size_t j = 0; j < m; ++j) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double d = static_cast<double>(q[a]) - static_cast<double>(refs.v[j * 3 + a]);
            d2 += d * d;
        }
        all[j] = {d2, static_cast<std::uint32_t>(j)};
    }
    std::sort(all.begin(), all.end());
    KnnRow row;
    for (std::size_t c = 0; c < k; ++c) {
        row.indices.push_back(all[c].second);
        row.distances.push_back(std::sqrt(all[c].first));
    }
    return row;
}

template <typename T>
std::vector<KnnRow> knn(const Tensor<T>& queries, const Tensor<T>& refs, std::size_t k) {
    std::vector<KnnRow> rows;
    for (std::size_t i = 0; i < queries.shape[0]; ++i)
        rows.push_back(knn_row(refs, queries.v.data() + i * 3, k));
    return rows;
}

/// Checks one FPS pick sequence against the greedy definition by exhaustive
/// recomputation: every pick must maximize the minimum distance to all
/// previous picks, ties resolved to the lowest index.
template <typename T>
bool fps_is_valid(const Tensor<T>& positions, const std::vector<std::uint32_t>& picks,
                  std::size_t seed_index) {
    const std::size_t n = positions.shape[0];
    if (picks.empty() || picks[0] != seed_index) return false;
    auto dist2 = [&](std::size_t a, std::size_t b) {
        double acc = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double d = static_cast<double>(positions.v[a * 3 + c]) -
                             static_cast<double>(positions.v[b * 3 + c]);
            acc += d * d;
        }
        return acc;
    };
    for (std::size_t s = 1; s < picks.size(); ++s) {
        double best = -1.0;
        std::size_t best_idx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double mind = std::numeric_limits<double>::max();
            for (std::size_t p = 0; p < s; ++p) mind = std::min(mind, dist2(i, picks[p]));
            if (mind > best) {
                best = mind;
                best_idx = i;
            }
        }
        if (picks[s] != best_idx) return false;
    }
    return true;
}

/// Non-occluded Chamfer distance for one level, recomputed directly from the
/// formula (double precision, exact norms, no epsilon guards).
template <typename T>
double chamfer_level(const Tensor<T>& warped_source, const Tensor<T>& target,
                     const Tensor<T>& occ_fwd, const Tensor<T>& occ_bwd) {
    const std::size_t n = warped_source.shape[0];
    const std::size_t m = target.shape[0];
    auto dist = [](const T* a, const T* b) {
        double acc = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double d = static_cast<double>(a[c]) - static_cast<double>(b[c]);
            acc += d * d;
        }
        return std::sqrt(acc);
    };
    double num_f = 0.0, den_f = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mind = std::numeric_limits<double>::max();
        for (std::size_t j = 0; j < m; ++j)
            mind = std::min(mind, dist(warped_source.v.data() + i * 3, target.v.data() + j * 3));
        num_f += mind * static_cast<double>(occ_fwd.v[i]);
        den_f += static_cast<double>(occ_fwd.v[i]);
    }
    double num_b = 0.0, den_b = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        double mind = std::numeric_limits<double>::max();
        for (std::size_t i = 0; i < n; ++i)
            mind = std::min(mind, dist(target.v.data() + j * 3, warped_source.v.data() + i * 3));
        num_b += mind * static_cast<double>(occ_bwd.v[j]);
        den_b += static_cast<double>(occ_bwd.v[j]);
    }
    return static_cast<double>(n) * num_f / den_f + static_cast<double>(m) * num_b / den_b;
}

/// Flow metrics recomputed from the definitions.
template <typename T>
MetricsReport metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& gt_occ) {
    const std::size_t n = pred.shape[0];
    std::vector<double> err(n), rel(n);
    for (std::size_t i = 0; i < n; ++i) {
        double e2 = 0.0, g2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double d = static_cast<double>(gt.v[i * 3 + a]) -
                             static_cast<double>(pred.v[i * 3 + a]);
            e2 += d * d;
            g2 += static_cast<double>(gt.v[i * 3 + a]) * static_cast<double>(gt.v[i * 3 + a]);
        }
        err[i] = std::sqrt(e2);
        rel[i] = err[i] / std::max(std::sqrt(g2), 1e-4);
    }
    MetricsReport r;
    r.sample_count = 1;
    double acc = 0.0;
    for (double e : err) acc += e;
    r.epe_full = acc / static_cast<double>(n);
    double vis_e = 0.0;
    std::size_t vis = 0, a05 = 0, a10 = 0, out = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (gt_occ.v[i] == T(0)) continue;
        ++vis;
        vis_e += err[i];
        if (err[i] < 0.05 || rel[i] < 0.05) ++a05;
        if (err[i] < 0.10 || rel[i] < 0.10) ++a10;
        if (err[i] > 0.30 || rel[i] > 0.10) ++out;
    }
    r.epe = vis_e / static_cast<double>(vis);
    r.acc_05 = static_cast<double>(a05) / static_cast<double>(vis);
    r.acc_10 = static_cast<double>(a10) / static_cast<double>(vis);
    r.outliers = static_cast<double>(out) / static_cast<double>(vis);
    return r;
}

} // namespace ogflow::oracle
