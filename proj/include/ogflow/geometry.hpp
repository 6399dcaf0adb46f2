#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "ogflow/errors.hpp"
#include "ogflow/tensor.hpp"

// Non-learned point-cloud kernels: farthest point sampling, exact k-NN,
// inverse-distance interpolation and backward warping. All functions are
// pure; neighbor search is exact brute force (desk scale, N <= 8192).

namespace ogflow {

/// Positions [N, 3] plus per-point feature vectors [N, D] (D may be 0).
template <typename T>
struct PointCloud {
    Tensor<T> positions;
    Tensor<T> features;

    PointCloud() = default;
    explicit PointCloud(Tensor<T> pos) : positions(std::move(pos)) {
        features = Tensor<T>(Shape{positions.shape[0], 0});
    }
    PointCloud(Tensor<T> pos, Tensor<T> feat)
        : positions(std::move(pos)), features(std::move(feat)) {}

    std::size_t size() const { return positions.shape.empty() ? 0 : positions.shape[0]; }
    std::size_t feature_dim() const { return features.shape.size() == 2 ? features.shape[1] : 0; }

    void validate() const {
        if (positions.rank() != 2 || positions.shape[1] != 3 || positions.shape[0] < 1)
            throw ShapeError("point cloud positions must be [N,3] with N >= 1, got " +
                             shape_str(positions.shape));
        if (features.numel() > 0 && (features.rank() != 2 || features.shape[0] != positions.shape[0]))
            throw ShapeError("point cloud features must be [N,D], got " + shape_str(features.shape));
        if (!positions.all_finite()) throw NumericError("point cloud positions contain non-finite values");
    }

    template <typename U>
    PointCloud<U> cast() const {
        return PointCloud<U>(positions.template cast<U>(), features.template cast<U>());
    }
};

/// Per-point 3D motion vectors [N, 3], aligned index-for-index with a source
/// cloud.
template <typename T>
using FlowField = Tensor<T>;

/// Per-point non-occlusion probabilities [N] in [0,1]; ground truth masks
/// hold only {0,1} (1 = non-occluded).
template <typename T>
using OcclusionMask = Tensor<T>;

/// k-NN result: row r holds the indices of the k nearest reference points of
/// query r with their Euclidean distances, sorted ascending, ties broken by
/// the lower reference index.
template <typename T>
struct IndexMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint32_t> indices;
    std::vector<T> distances;

    std::uint32_t index(std::size_t r, std::size_t c) const { return indices[r * cols + c]; }
    T distance(std::size_t r, std::size_t c) const { return distances[r * cols + c]; }

    bool operator==(const IndexMatrix& o) const {
        return rows == o.rows && cols == o.cols && indices == o.indices && distances == o.distances;
    }
};

namespace detail {
template <typename T>
inline T sq_dist3(const T* a, const T* b) {
    const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}
} // namespace detail

/// Greedy farthest point sampling. The first pick is seed_index; every
/// subsequent pick maximizes the minimum distance to the picks so far, ties
/// broken by the lowest index.
template <typename T>
std::vector<std::uint32_t> farthest_point_sampling(const Tensor<T>& positions, std::size_t m,
                                                   std::size_t seed_index = 0) {
    const std::size_t n = positions.shape[0];
    if (m < 1 || m > n)
        throw ConfigError("farthest_point_sampling: m=" + std::to_string(m) +
                          " out of range [1, " + std::to_string(n) + "]");
    if (seed_index >= n)
        throw IndexError("farthest_point_sampling: seed index " + std::to_string(seed_index) +
                         " out of range");
    std::vector<std::uint32_t> picks;
    picks.reserve(m);
    picks.push_back(static_cast<std::uint32_t>(seed_index));
    std::vector<T> min_d2(n, std::numeric_limits<T>::max());
    const T* p = positions.v.data();
    for (std::size_t step = 1; step < m; ++step) {
        const T* last = p + picks.back() * 3;
        std::size_t best = 0;
        T best_d2 = T(-1);
        for (std::size_t i = 0; i < n; ++i) {
            const T d2 = detail::sq_dist3(p + i * 3, last);
            if (d2 < min_d2[i]) min_d2[i] = d2;
            if (min_d2[i] > best_d2) {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        picks.push_back(static_cast<std::uint32_t>(best));
    }
    return picks;
}

/// Exact k nearest neighbors of each query among refs.
template <typename T>
IndexMatrix<T> knn_search(const Tensor<T>& queries, const Tensor<T>& refs, std::size_t k) {
    const std::size_t nq = queries.shape[0];
    const std::size_t nr = refs.shape[0];
    if (k < 1 || k > nr)
        throw ConfigError("knn_search: k=" + std::to_string(k) + " out of range [1, " +
                          std::to_string(nr) + "]");
    IndexMatrix<T> out;
    out.rows = nq;
    out.cols = k;
    out.indices.resize(nq * k);
    out.distances.resize(nq * k);
    const T* q = queries.v.data();
    const T* r = refs.v.data();
    std::vector<std::pair<T, std::uint32_t>> cand(nr);
    for (std::size_t i = 0; i < nq; ++i) {
        const T* qi = q + i * 3;
        for (std::size_t j = 0; j < nr; ++j)
            cand[j] = {detail::sq_dist3(qi, r + j * 3), static_cast<std::uint32_t>(j)};
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end());
        for (std::size_t c = 0; c < k; ++c) {
            out.indices[i * k + c] = cand[c].second;
            out.distances[i * k + c] = std::sqrt(cand[c].first);
        }
    }
    return out;
}

/// Inverse-distance-weighted average of `values` over the k nearest refs:
/// out(q) = sum w_i v_i / sum w_i with w_i = 1 / (d_i + 1e-8).
template <typename T>
Tensor<T> idw_interpolate(const Tensor<T>& queries, const Tensor<T>& refs, const Tensor<T>& values,
                          std::size_t k) {
    if (refs.shape[0] == 0) throw ConfigError("idw_interpolate: empty reference set");
    if (values.shape[0] != refs.shape[0])
        throw ShapeError("idw_interpolate: values rows " + shape_str(values.shape) +
                         " do not match refs " + shape_str(refs.shape));
    constexpr T kEps = T(1e-8);
    const std::size_t d = values.rank() == 2 ? values.shape[1] : 1;
    const IndexMatrix<T> nn = knn_search(queries, refs, std::min(k, refs.shape[0]));
    Tensor<T> out(values.rank() == 2 ? Shape{queries.shape[0], d} : Shape{queries.shape[0]});
    for (std::size_t i = 0; i < nn.rows; ++i) {
        T wsum = T(0);
        for (std::size_t c = 0; c < nn.cols; ++c) {
            const T w = T(1) / (nn.distance(i, c) + kEps);
            wsum += w;
            const T* v = values.v.data() + nn.index(i, c) * d;
            for (std::size_t j = 0; j < d; ++j) out.v[i * d + j] += w * v[j];
        }
        for (std::size_t j = 0; j < d; ++j) out.v[i * d + j] /= wsum;
    }
    return out;
}

/// Backward-warps the target toward the source: interpolates the source flow
/// at each target point over the warped source positions {s_i + f(s_i)} and
/// returns positions {t_j - f_hat(t_j)}. Features pass through unchanged.
template <typename T>
PointCloud<T> warp_target(const PointCloud<T>& target, const PointCloud<T>& source,
                          const FlowField<T>& flow, std::size_t k = 3) {
    if (flow.shape[0] != source.size())
        throw ShapeError("warp_target: flow rows " + shape_str(flow.shape) +
                         " do not match source size " + std::to_string(source.size()));
    Tensor<T> warped_src = source.positions;
    for (std::size_t i = 0; i < warped_src.v.size(); ++i) warped_src.v[i] += flow.v[i];
    const Tensor<T> f_hat =
        idw_interpolate(target.positions, warped_src, flow, std::min(k, source.size()));
    PointCloud<T> out = target;
    for (std::size_t i = 0; i < out.positions.v.size(); ++i) out.positions.v[i] -= f_hat.v[i];
    return out;
}

} // namespace ogflow
