#pragma once

#include <cmath>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "ogflow/errors.hpp"
#include "ogflow/geometry.hpp"
#include "ogflow/tensor.hpp"

// Scene-flow and occlusion metrics, matching the standard evaluation
// protocol: EPE_full over all points, EPE / accuracy / outlier fractions
// over the non-occluded population.

namespace ogflow {

struct MetricsReport {
    double epe_full = 0.0;  // meters, all points
    double epe = 0.0;       // meters, non-occluded points
    double acc_05 = 0.0;    // e < 0.05 m or rel < 5%
    double acc_10 = 0.0;    // e < 0.10 m or rel < 10%
    double outliers = 0.0;  // e > 0.30 m or rel > 10%
    double occ_accuracy = 0.0;
    bool has_occ_accuracy = false;
    std::size_t sample_count = 0;
    // Which population accuracy/outlier fractions were computed over.
    std::string acc_population = "non_occluded";
};

namespace detail {
inline constexpr double kRelGuard = 1e-4; // meters; floor for the relative-error denominator
}

/// Per-sample flow metrics. gt_occ is the binary non-occlusion mask
/// (1 = non-occluded). Accuracy and outlier fractions use the non-occluded
/// population; thresholds are strict comparisons.
template <typename T>
MetricsReport flow_metrics(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& gt_occ) {
    if (pred.shape != gt.shape)
        throw ShapeError("flow_metrics: prediction " + shape_str(pred.shape) +
                         " vs ground truth " + shape_str(gt.shape));
    const std::size_t n = pred.shape[0];
    if (gt_occ.numel() != n)
        throw ShapeError("flow_metrics: mask size " + std::to_string(gt_occ.numel()) +
                         " vs " + std::to_string(n) + " points");

    double sum_all_e = 0.0, sum_vis_e = 0.0;
    std::size_t vis = 0, n_acc05 = 0, n_acc10 = 0, n_out = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double e2 = 0.0, g2 = 0.0;
        for (int a = 0; a < 3; ++a) {
            const double d = static_cast<double>(gt.v[i * 3 + a]) -
                             static_cast<double>(pred.v[i * 3 + a]);
            e2 += d * d;
            g2 += static_cast<double>(gt.v[i * 3 + a]) * static_cast<double>(gt.v[i * 3 + a]);
        }
        const double e = std::sqrt(e2);
        sum_all_e += e;
        if (gt_occ.v[i] == T(0)) continue;
        ++vis;
        sum_vis_e += e;
        const double rel = e / std::max(std::sqrt(g2), detail::kRelGuard);
        if (e < 0.05 || rel < 0.05) ++n_acc05;
        if (e < 0.10 || rel < 0.10) ++n_acc10;
        if (e > 0.30 || rel > 0.10) ++n_out;
    }
    if (vis == 0)
        throw UndefinedMetricError("flow_metrics: no non-occluded points, EPE undefined");

    MetricsReport r;
    r.epe_full = sum_all_e / static_cast<double>(n);
    r.epe = sum_vis_e / static_cast<double>(vis);
    r.acc_05 = static_cast<double>(n_acc05) / static_cast<double>(vis);
    r.acc_10 = static_cast<double>(n_acc10) / static_cast<double>(vis);
    r.outliers = static_cast<double>(n_out) / static_cast<double>(vis);
    r.sample_count = 1;
    return r;
}

/// Fraction of points whose thresholded prediction (>= 0.5 means
/// non-occluded) matches the binary label.
template <typename T>
double occlusion_accuracy(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.numel() != gt.numel())
        throw ShapeError("occlusion_accuracy: size mismatch " + std::to_string(pred.numel()) +
                         " vs " + std::to_string(gt.numel()));
    const std::size_t n = pred.numel();
    if (n == 0) throw UndefinedMetricError("occlusion_accuracy: empty mask");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool pred_vis = pred.v[i] >= T(0.5);
        const bool gt_vis = gt.v[i] != T(0);
        if (pred_vis == gt_vis) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

/// Exact mean over per-sample reports.
inline MetricsReport aggregate(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw UndefinedMetricError("aggregate: no reports");
    MetricsReport out;
    std::size_t occ_count = 0;
    for (const auto& r : reports) {
        out.epe_full += r.epe_full;
        out.epe += r.epe;
        out.acc_05 += r.acc_05;
        out.acc_10 += r.acc_10;
        out.outliers += r.outliers;
        out.sample_count += r.sample_count;
        if (r.has_occ_accuracy) {
            out.occ_accuracy += r.occ_accuracy;
            ++occ_count;
        }
    }
    const double n = static_cast<double>(reports.size());
    out.epe_full /= n;
    out.epe /= n;
    out.acc_05 /= n;
    out.acc_10 /= n;
    out.outliers /= n;
    if (occ_count > 0) {
        out.occ_accuracy /= static_cast<double>(occ_count);
        out.has_occ_accuracy = true;
    }
    return out;
}

/// Key-value text rendering with a stable key order.
inline std::string to_text(const MetricsReport& r) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "epe_full " << r.epe_full << "\n";
    os << "epe " << r.epe << "\n";
    os << "acc_05 " << r.acc_05 << "\n";
    os << "acc_10 " << r.acc_10 << "\n";
    os << "outliers " << r.outliers << "\n";
    if (r.has_occ_accuracy) os << "occ_accuracy " << r.occ_accuracy << "\n";
    os << "acc_population " << r.acc_population << "\n";
    os << "sample_count " << r.sample_count << "\n";
    return os.str();
}

} // namespace ogflow
