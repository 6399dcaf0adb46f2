#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ogflow/autodiff.hpp"
#include "ogflow/errors.hpp"
#include "ogflow/geometry.hpp"
#include "ogflow/network.hpp"
#include "ogflow/tensor.hpp"

// Training objectives. All losses are alpha-weighted point sums over pyramid
// levels (vectors indexed by level, 0 = finest) and return scalar graph
// Values.

namespace ogflow {

template <typename T>
struct LossWeights {
    std::vector<T> alpha{static_cast<T>(0.02), static_cast<T>(0.04), static_cast<T>(0.08),
                         static_cast<T>(0.16)}; // finest first
    T lambda_reg = static_cast<T>(3.0);
    T lambda_f = static_cast<T>(0.6);
    T lambda_oc = static_cast<T>(1.0);

    void validate(int levels) const {
        if (static_cast<int>(alpha.size()) != levels)
            throw ConfigError("loss weights: alpha has " + std::to_string(alpha.size()) +
                              " entries for " + std::to_string(levels) + " levels");
        for (T a : alpha)
            if (a < T(0)) throw ConfigError("loss weights: negative alpha");
        if (lambda_reg < T(0) || lambda_f < T(0) || lambda_oc < T(0))
            throw ConfigError("loss weights: negative lambda");
    }
};

namespace detail {
inline constexpr double kNormEps = 1e-8;
inline constexpr double kMaskEps = 1e-6;

template <typename T>
void check_levels(std::size_t a, std::size_t b, const char* what) {
    if (a != b)
        throw ConfigError(std::string(what) + ": got " + std::to_string(a) +
                          " levels, expected " + std::to_string(b));
}
} // namespace detail

/// Subsamples full-resolution per-point ground truth ([N,D] or [N]) to every
/// pyramid level using the exact FPS index lists.
template <typename T>
std::vector<Tensor<T>> subsample_per_level(const Pyramid<T>& pyr, const Tensor<T>& full) {
    const std::size_t d = full.rank() == 2 ? full.shape[1] : 1;
    std::vector<Tensor<T>> out;
    out.reserve(pyr.levels.size());
    for (const auto& lvl : pyr.levels) {
        const std::size_t n = lvl.sample_indices.size();
        Tensor<T> t(full.rank() == 2 ? Shape{n, d} : Shape{n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                t.v[i * d + j] = full.v[lvl.sample_indices[i] * d + j];
        out.push_back(std::move(t));
    }
    return out;
}

template <typename T>
std::vector<Value<T>> flows_by_level(const ForwardResult<T>& r) {
    std::vector<Value<T>> out(r.levels.size());
    for (const auto& lo : r.levels) out[lo.level] = lo.flow;
    return out;
}

template <typename T>
std::vector<Value<T>> occlusions_by_level(const ForwardResult<T>& r) {
    std::vector<Value<T>> out(r.levels.size());
    for (const auto& lo : r.levels) out[lo.level] = lo.occlusion;
    return out;
}

/// Multi-level flow loss (supervised Eq. form, also used for synthetic
/// pairs): sum_l alpha_l sum_i ||f_gt - f||_2.
template <typename T>
Value<T> flow_loss(const std::vector<Value<T>>& pred, const std::vector<Tensor<T>>& gt,
                   const std::vector<T>& alpha) {
    detail::check_levels<T>(pred.size(), alpha.size(), "flow_loss");
    detail::check_levels<T>(gt.size(), alpha.size(), "flow_loss ground truth");
    std::vector<Value<T>> terms;
    for (std::size_t l = 0; l < pred.size(); ++l) {
        if (pred[l].shape() != gt[l].shape)
            throw ShapeError("flow_loss: level " + std::to_string(l) + " prediction " +
                             shape_str(pred[l].shape()) + " vs ground truth " +
                             shape_str(gt[l].shape));
        Value<T> res = sub(pred[l], Value<T>::constant(gt[l]));
        terms.push_back(scale(sum_all(rownorm_eps(res, static_cast<T>(detail::kNormEps))),
                              alpha[l]));
    }
    return add_many(terms);
}

/// Multi-level occlusion loss: per-point L1 between predicted probability
/// and the binary label.
template <typename T>
Value<T> occlusion_loss(const std::vector<Value<T>>& pred, const std::vector<Tensor<T>>& gt,
                        const std::vector<T>& alpha) {
    detail::check_levels<T>(pred.size(), alpha.size(), "occlusion_loss");
    detail::check_levels<T>(gt.size(), alpha.size(), "occlusion_loss ground truth");
    std::vector<Value<T>> terms;
    for (std::size_t l = 0; l < pred.size(); ++l) {
        const std::size_t n = pred[l].shape()[0];
        if (gt[l].numel() != n)
            throw ShapeError("occlusion_loss: level " + std::to_string(l) + " has " +
                             std::to_string(n) + " predictions vs " +
                             std::to_string(gt[l].numel()) + " labels");
        Value<T> p = pred[l].shape().size() == 2 ? reshape(pred[l], Shape{n}) : pred[l];
        Tensor<T> g = gt[l];
        g.shape = Shape{n};
        terms.push_back(scale(sum_all(abs(sub(p, Value<T>::constant(std::move(g))))), alpha[l]));
    }
    return add_many(terms);
}

/// Non-occluded Chamfer distance (both directions, cardinality-scaled,
/// occlusion-weighted with normalized detached masks):
///   D_l = |S^l| * sum_i min_j ||s_i^w - t_j|| * O^f(s_i) / sum O^f
///       + |T^l| * sum_j min_i ||t_j - s_i^w|| * O^b(t_j) / sum O^b
/// The masks are detached here regardless of what the caller passed, so
/// gradients reach the flow predictions only.
template <typename T>
Value<T> nonoccluded_chamfer(const std::vector<Value<T>>& warped_source,
                             const std::vector<Tensor<T>>& target,
                             const std::vector<Value<T>>& occ_fwd,
                             const std::vector<Value<T>>& occ_bwd, const std::vector<T>& alpha) {
    detail::check_levels<T>(warped_source.size(), alpha.size(), "nonoccluded_chamfer");
    detail::check_levels<T>(target.size(), alpha.size(), "nonoccluded_chamfer target");
    detail::check_levels<T>(occ_fwd.size(), alpha.size(), "nonoccluded_chamfer forward mask");
    detail::check_levels<T>(occ_bwd.size(), alpha.size(), "nonoccluded_chamfer backward mask");

    const T eps = static_cast<T>(detail::kNormEps);
    std::vector<Value<T>> terms;
    for (std::size_t l = 0; l < alpha.size(); ++l) {
        const std::size_t n = warped_source[l].shape()[0];
        const std::size_t m = target[l].shape[0];

        Tensor<T> of = detach(occ_fwd[l]).data();
        of.shape = Shape{n};
        Tensor<T> ob = detach(occ_bwd[l]).data();
        ob.shape = Shape{m};
        double sum_f = 0.0, sum_b = 0.0;
        for (T v : of.v) sum_f += static_cast<double>(v);
        for (T v : ob.v) sum_b += static_cast<double>(v);
        if (sum_f < detail::kMaskEps || sum_b < detail::kMaskEps)
            throw DegenerateMaskError("nonoccluded_chamfer: level " + std::to_string(l) +
                                      " mask sums to " + std::to_string(std::min(sum_f, sum_b)) +
                                      " (all points predicted occluded)");

        const T* sw = warped_source[l].data().v.data();
        const T* tp = target[l].v.data();
        std::vector<std::uint32_t> idx_fwd(n), idx_bwd(m);
        for (std::size_t i = 0; i < n; ++i) {
            T best = std::numeric_limits<T>::max();
            std::uint32_t bj = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const T d2 = detail::sq_dist3(sw + i * 3, tp + j * 3);
                if (d2 < best) {
                    best = d2;
                    bj = static_cast<std::uint32_t>(j);
                }
            }
            idx_fwd[i] = bj;
        }
        for (std::size_t j = 0; j < m; ++j) {
            T best = std::numeric_limits<T>::max();
            std::uint32_t bi = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const T d2 = detail::sq_dist3(tp + j * 3, sw + i * 3);
                if (d2 < best) {
                    best = d2;
                    bi = static_cast<std::uint32_t>(i);
                }
            }
            idx_bwd[j] = bi;
        }

        auto tgt_const = Value<T>::constant(target[l]);
        Value<T> d_fwd =
            rownorm_eps(sub(warped_source[l], gather_rows(tgt_const, idx_fwd)), eps);
        Value<T> d_bwd =
            rownorm_eps(sub(gather_rows(warped_source[l], idx_bwd), tgt_const), eps);

        Value<T> term_f = scale(sum_all(mul(d_fwd, Value<T>::constant(std::move(of)))),
                                static_cast<T>(static_cast<double>(n) / sum_f));
        Value<T> term_b = scale(sum_all(mul(d_bwd, Value<T>::constant(std::move(ob)))),
                                static_cast<T>(static_cast<double>(m) / sum_b));
        terms.push_back(scale(add(term_f, term_b), alpha[l]));
    }
    return add_many(terms);
}

/// Smoothness regularization over the pyramid's intra-source neighborhoods:
///   sum_l alpha_l sum_i sum_{k in N_S(i)} ||f(s_i) - f(s_k)||_1 / |N_S(i)|.
/// Occluded regions are deliberately not excluded.
template <typename T>
Value<T> smoothness_reg(const std::vector<Value<T>>& flows,
                        const std::vector<IndexMatrix<T>>& self_neighbors,
                        const std::vector<T>& alpha) {
    detail::check_levels<T>(flows.size(), alpha.size(), "smoothness_reg");
    detail::check_levels<T>(self_neighbors.size(), alpha.size(), "smoothness_reg neighbors");
    std::vector<Value<T>> terms;
    for (std::size_t l = 0; l < flows.size(); ++l) {
        const IndexMatrix<T>& nbr = self_neighbors[l];
        const std::size_t n = flows[l].shape()[0];
        if (nbr.rows != n)
            throw ShapeError("smoothness_reg: level " + std::to_string(l) + " has " +
                             std::to_string(n) + " flows vs " + std::to_string(nbr.rows) +
                             " neighbor rows");
        Value<T> nb = gather(flows[l], nbr.indices, nbr.rows, nbr.cols);
        Value<T> diff = abs(sub(nb, expand_mid(flows[l], nbr.cols)));
        terms.push_back(scale(sum_all(diff),
                              alpha[l] / static_cast<T>(nbr.cols)));
    }
    return add_many(terms);
}

/// Total self-supervised objective:
///   L = L_nch + lambda_reg * L_reg + lambda_f * L_f~ + lambda_oc * L_oc~,
/// with the synthetic flow term dropped entirely once disabled.
template <typename T>
Value<T> self_supervised_total(const Value<T>& chamfer, const Value<T>& reg,
                               const Value<T>& synth_flow, const Value<T>& synth_occ,
                               const LossWeights<T>& weights, bool synth_flow_enabled) {
    if (weights.lambda_reg < T(0) || weights.lambda_f < T(0) || weights.lambda_oc < T(0))
        throw ConfigError("self_supervised_total: negative loss weight");
    std::vector<Value<T>> terms{chamfer, scale(reg, weights.lambda_reg)};
    if (synth_flow_enabled) terms.push_back(scale(synth_flow, weights.lambda_f));
    terms.push_back(scale(synth_occ, weights.lambda_oc));
    return add_many(terms);
}

/// Supervised objective (Eq. form with real ground truth): the multi-level
/// flow loss against the pyramid-subsampled labels. No occlusion term.
template <typename T>
Value<T> supervised_loss(const ForwardResult<T>& result, const Tensor<T>& gt_flow,
                         const std::vector<T>& alpha) {
    return flow_loss(flows_by_level(result), subsample_per_level(result.source, gt_flow), alpha);
}

} // namespace ogflow
