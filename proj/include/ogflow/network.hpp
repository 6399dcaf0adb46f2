#pragma once

#include <cmath>
#include <cstdint>
#include <iostream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "ogflow/autodiff.hpp"
#include "ogflow/errors.hpp"
#include "ogflow/geometry.hpp"
#include "ogflow/random.hpp"
#include "ogflow/tensor.hpp"

// The 3D-OGFlow model: shared feature pyramid encoder, per-level occlusion
// predictor, occlusion-weighted cost volume and residual flow predictor,
// composed coarse-to-fine. Every learned layer is a shared 1x1 convolution
// (a linear map applied per point / per neighbor) built on the autodiff
// graph, so the whole forward pass is differentiable end to end -- including
// the warping and upsampling interpolation.

namespace ogflow {

enum class CostVolumeMode { cross_only, self_only, masked_cross, occlusion_weighted };

inline const char* to_string(CostVolumeMode m) {
    switch (m) {
        case CostVolumeMode::cross_only: return "cross_only";
        case CostVolumeMode::self_only: return "self_only";
        case CostVolumeMode::masked_cross: return "masked_cross";
        case CostVolumeMode::occlusion_weighted: return "occlusion_weighted";
    }
    return "?";
}

inline CostVolumeMode cost_volume_mode_from_string(const std::string& s) {
    if (s == "cross_only") return CostVolumeMode::cross_only;
    if (s == "self_only") return CostVolumeMode::self_only;
    if (s == "masked_cross") return CostVolumeMode::masked_cross;
    if (s == "occlusion_weighted") return CostVolumeMode::occlusion_weighted;
    throw ConfigError("unknown cost volume mode: " + s);
}

struct ModelConfig {
    int levels = 4;
    std::vector<std::size_t> points_per_level{}; // empty: derive N / 4^l
    std::vector<int> feature_widths{64, 96, 192, 320};
    std::vector<int> cost_volume_widths{32, 64, 128, 256}; // d_cv per level
    int occ_width = 64;                                    // d_oc
    int k1 = 32; // warped-target neighbors (cost volume + occlusion predictor)
    int k2 = 64; // intra-source neighbors (self cost volume + smoothness)
    int k_conv = 16; // point-convolution neighbors
    int k_up = 3;    // upsample / warping interpolation neighbors
    int input_feature_dim = 0;
    CostVolumeMode cost_volume_mode = CostVolumeMode::occlusion_weighted;

    void validate() const {
        if (levels < 2) throw ConfigError("model config: levels must be >= 2");
        if (static_cast<int>(feature_widths.size()) < levels ||
            static_cast<int>(cost_volume_widths.size()) < levels)
            throw ConfigError("model config: need a feature and cost-volume width per level");
        if (!points_per_level.empty()) {
            if (static_cast<int>(points_per_level.size()) != levels)
                throw ConfigError("model config: points_per_level length must equal levels");
            for (int l = 1; l < levels; ++l)
                if (points_per_level[l] >= points_per_level[l - 1])
                    throw ConfigError("model config: points_per_level must be strictly decreasing");
        }
        for (int l = 0; l < levels; ++l)
            if (feature_widths[l] < 1 || cost_volume_widths[l] < 1)
                throw ConfigError("model config: widths must be positive");
        if (occ_width < 1 || k1 < 1 || k2 < 1 || k_conv < 1 || k_up < 1)
            throw ConfigError("model config: neighbor counts and widths must be positive");
        if (input_feature_dim < 0) throw ConfigError("model config: negative feature dim");
    }

    /// Per-level point counts for a cloud of n points. An explicit
    /// points_per_level list applies verbatim when n matches its full
    /// resolution and proportionally otherwise.
    std::vector<std::size_t> level_sizes(std::size_t n) const {
        std::vector<std::size_t> sizes(levels);
        for (int l = 0; l < levels; ++l) {
            std::size_t s;
            if (!points_per_level.empty()) {
                if (n == points_per_level[0]) {
                    s = points_per_level[l];
                } else {
                    const double ratio = static_cast<double>(points_per_level[l]) /
                                         static_cast<double>(points_per_level[0]);
                    s = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
                }
            } else {
                s = n >> (2 * l);
            }
            if (s < 1) s = 1;
            if (l > 0 && s >= sizes[l - 1]) s = sizes[l - 1] > 1 ? sizes[l - 1] - 1 : 1;
            if (s > n)
                throw ConfigError("model config: level " + std::to_string(l) + " wants " +
                                  std::to_string(s) + " points but the cloud has " +
                                  std::to_string(n));
            sizes[l] = s;
        }
        for (int l = 1; l < levels; ++l)
            if (sizes[l] >= sizes[l - 1])
                throw ConfigError("model config: cloud of " + std::to_string(n) +
                                  " points cannot fill " + std::to_string(levels) +
                                  " strictly decreasing levels");
        return sizes;
    }

    bool operator==(const ModelConfig&) const = default;
};

inline std::size_t clamp_k(std::size_t requested, std::size_t available, const char* what) {
    if (requested <= available) return requested;
    static std::set<std::string> warned;
    const std::string key = std::string(what) + ":" + std::to_string(requested) + ">" +
                            std::to_string(available);
    if (warned.insert(key).second)
        std::cerr << "[ogflow] warning: " << what << " clamped from " << requested << " to "
                  << available << " (not enough points)\n";
    return available;
}

/// Named map of every learnable tensor. Entries are leaf graph Values shared
/// across forward passes; order is fixed by construction and defines the
/// checkpoint layout.
template <typename T>
class ModelParams {
public:
    struct Entry {
        std::string name;
        Value<T> value;
    };

    static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        ModelParams p;
        Rng rng(derive_seed(seed, 0x1417));
        for (int l = 0; l < cfg.levels; ++l) {
            const int w = cfg.feature_widths[l];
            const int w_in = l == 0 ? cfg.input_feature_dim : cfg.feature_widths[l - 1];
            p.add_linear("enc" + std::to_string(l) + ".conv0", 3 + w_in, w, rng);
            p.add_linear("enc" + std::to_string(l) + ".conv1", w, w, rng);
        }
        for (int l = 0; l < cfg.levels; ++l) {
            const int w = cfg.feature_widths[l];
            const int dcv = cfg.cost_volume_widths[l];
            const int doc = cfg.occ_width;
            const std::string ls = std::to_string(l);
            p.add_linear("occ" + ls + ".conv0", 2 * w + 4, doc, rng);
            p.add_linear("occ" + ls + ".conv1", doc, doc, rng);
            p.add_linear("occ" + ls + ".head0", doc, doc, rng);
            p.add_linear("occ" + ls + ".head1", doc, 1, rng);
            p.add_linear("cost" + ls + ".conv0", 2 * w + 3, dcv, rng);
            p.add_linear("cost" + ls + ".conv1", dcv, dcv, rng);
            const int pin = w + dcv + 4;
            p.add_linear("flow" + ls + ".conv0", pin + 3, dcv, rng);
            p.add_linear("flow" + ls + ".conv1", dcv, dcv, rng);
            p.add_linear("flow" + ls + ".head0", dcv, dcv, rng);
            p.add_linear("flow" + ls + ".head1", dcv, 3, rng);
        }
        return p;
    }

    Value<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].value;
    }
    const Value<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return entries_[it->second].value;
    }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_) e.value.reset_grad();
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.value.data().all_finite()) return false;
        return true;
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

private:
    void add_linear(const std::string& name, int din, int dout, Rng& rng) {
        const double bound = std::sqrt(6.0 / static_cast<double>(din + dout));
        Tensor<T> W(Shape{static_cast<std::size_t>(din), static_cast<std::size_t>(dout)});
        for (auto& v : W.v) v = static_cast<T>(rng.uniform(-bound, bound));
        add(name + ".W", std::move(W));
        add(name + ".b", Tensor<T>::zeros(Shape{static_cast<std::size_t>(dout)}));
    }
    void add(std::string name, Tensor<T> t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter: " + name);
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), Value<T>::leaf(std::move(t), true)});
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Layer building blocks

namespace nn {

template <typename T>
Value<T> dense(ModelParams<T>& p, const std::string& layer, const Value<T>& x) {
    return linear(x, p.at(layer + ".W"), p.at(layer + ".b"));
}

inline constexpr double kLeakySlope = 0.1;

template <typename T>
Value<T> dense_act(ModelParams<T>& p, const std::string& layer, const Value<T>& x) {
    return leaky_relu(dense(p, layer, x), static_cast<T>(kLeakySlope));
}

} // namespace nn

/// Simplified point convolution: for each output point, gather k nearest
/// input points, run a shared two-layer MLP on (relative displacement (+)
/// neighbor feature) and max-pool over the neighborhood.
template <typename T>
Value<T> point_conv(const Tensor<T>& in_positions, const Value<T>& in_features,
                    const Tensor<T>& out_positions, ModelParams<T>& params,
                    const std::string& prefix, std::size_t k) {
    const std::size_t m = out_positions.shape[0];
    const std::size_t kc = clamp_k(k, in_positions.shape[0], "k_conv");
    const IndexMatrix<T> nn_idx = knn_search(out_positions, in_positions, kc);
    auto in_pos = Value<T>::constant(in_positions);
    auto out_pos = Value<T>::constant(out_positions);
    Value<T> disp = sub(gather(in_pos, nn_idx.indices, m, kc), expand_mid(out_pos, kc));
    Value<T> x = disp;
    if (!in_features.shape().empty() && in_features.shape().back() > 0)
        x = concat_last<T>({disp, gather(in_features, nn_idx.indices, m, kc)});
    Value<T> h = nn::dense_act(params, prefix + ".conv0", x);
    h = nn::dense_act(params, prefix + ".conv1", h);
    return max_over_axis(h);
}

/// One pyramid level of one cloud.
template <typename T>
struct PyramidLevel {
    Tensor<T> positions;                      // [Nl, 3]
    Value<T> features;                        // [Nl, w_l]
    std::vector<std::uint32_t> sample_indices; // into the original cloud
    IndexMatrix<T> self_neighbors;            // k2-NN within the level (source only)

    std::size_t size() const { return positions.shape[0]; }
};

template <typename T>
struct Pyramid {
    std::vector<PyramidLevel<T>> levels; // level 0 = full resolution
};

/// FPS-downsamples the cloud per level and encodes features with the shared
/// point convolution stack. The same weights serve source and target.
template <typename T>
Pyramid<T> encode_pyramid(const PointCloud<T>& cloud, ModelParams<T>& params,
                          const ModelConfig& cfg, std::size_t fps_seed = 0,
                          bool with_self_neighbors = false) {
    cloud.validate();
    if (static_cast<int>(cloud.feature_dim()) != cfg.input_feature_dim)
        throw ConfigError("encode_pyramid: cloud has " + std::to_string(cloud.feature_dim()) +
                          " feature channels, config expects " +
                          std::to_string(cfg.input_feature_dim));
    const auto sizes = cfg.level_sizes(cloud.size());

    Pyramid<T> pyr;
    pyr.levels.resize(cfg.levels);
    for (int l = 0; l < cfg.levels; ++l) {
        PyramidLevel<T>& lvl = pyr.levels[l];
        if (l == 0) {
            lvl.positions = cloud.positions;
            lvl.sample_indices.resize(cloud.size());
            for (std::size_t i = 0; i < cloud.size(); ++i)
                lvl.sample_indices[i] = static_cast<std::uint32_t>(i);
            lvl.features = point_conv(lvl.positions, Value<T>::constant(cloud.features),
                                      lvl.positions, params, "enc0", cfg.k_conv);
        } else {
            const PyramidLevel<T>& prev = pyr.levels[l - 1];
            const std::size_t seed_index = fps_seed == 0 ? 0 : fps_seed % prev.size();
            const auto picks = farthest_point_sampling(prev.positions, sizes[l], seed_index);
            lvl.positions = Tensor<T>(Shape{sizes[l], 3});
            lvl.sample_indices.resize(sizes[l]);
            for (std::size_t i = 0; i < sizes[l]; ++i) {
                for (int a = 0; a < 3; ++a)
                    lvl.positions.v[i * 3 + a] = prev.positions.v[picks[i] * 3 + a];
                lvl.sample_indices[i] = prev.sample_indices[picks[i]];
            }
            lvl.features = point_conv(prev.positions, prev.features, lvl.positions, params,
                                      "enc" + std::to_string(l), cfg.k_conv);
        }
        if (with_self_neighbors) {
            // Exclude each point from its own neighborhood: the self cost
            // volume must carry the neighbors' signal, not the point's own,
            // or the occlusion weighting degenerates (self >= cross always).
            const std::size_t k2c = clamp_k(cfg.k2, std::max<std::size_t>(lvl.size() - 1, 1),
                                            "k2");
            IndexMatrix<T> nn = knn_search(lvl.positions, lvl.positions,
                                           std::min(k2c + 1, lvl.size()));
            if (nn.cols > 1) {
                IndexMatrix<T> trimmed;
                trimmed.rows = nn.rows;
                trimmed.cols = nn.cols - 1;
                trimmed.indices.reserve(trimmed.rows * trimmed.cols);
                trimmed.distances.reserve(trimmed.rows * trimmed.cols);
                for (std::size_t i = 0; i < nn.rows; ++i) {
                    // Drop the entry for the point itself; if a coincident
                    // twin sorted first, drop the self index instead.
                    std::size_t skip = 0;
                    for (std::size_t c = 0; c < nn.cols; ++c)
                        if (nn.index(i, c) == i) {
                            skip = c;
                            break;
                        }
                    for (std::size_t c = 0; c < nn.cols; ++c) {
                        if (c == skip) continue;
                        trimmed.indices.push_back(nn.index(i, c));
                        trimmed.distances.push_back(nn.distance(i, c));
                    }
                }
                nn = std::move(trimmed);
            }
            lvl.self_neighbors = std::move(nn);
        }
    }
    return pyr;
}

// ---------------------------------------------------------------------------
// Differentiable interpolation layers

/// Upsamples per-point values from coarse points to fine points by k-NN IDW.
/// The interpolation weights depend only on (constant) positions, so this is
/// a fixed sparse linear map on the graph.
template <typename T>
Value<T> idw_upsample(const Tensor<T>& fine_positions, const Tensor<T>& coarse_positions,
                      const Value<T>& coarse_values, std::size_t k) {
    constexpr T kEps = T(1e-8);
    const std::size_t n = fine_positions.shape[0];
    const std::size_t kc = std::min<std::size_t>(k, coarse_positions.shape[0]);
    const std::size_t d = coarse_values.shape().back();
    const IndexMatrix<T> nn_idx = knn_search(fine_positions, coarse_positions, kc);
    Tensor<T> w(Shape{n, kc});
    for (std::size_t i = 0; i < n; ++i) {
        T wsum = T(0);
        for (std::size_t c = 0; c < kc; ++c) {
            w.v[i * kc + c] = T(1) / (nn_idx.distance(i, c) + kEps);
            wsum += w.v[i * kc + c];
        }
        for (std::size_t c = 0; c < kc; ++c) w.v[i * kc + c] /= wsum;
    }
    return sum_mid(mul(gather(coarse_values, nn_idx.indices, n, kc),
                       expand_last(Value<T>::constant(std::move(w)), d)));
}

/// Differentiable backward warping: interpolates the (graph) flow at each
/// target point over the current warped source positions and shifts the
/// target against it. Mirrors geometry::warp_target, with gradients flowing
/// through both the interpolation weights and the flow values.
template <typename T>
Value<T> warp_target_positions(const Tensor<T>& target_positions, const Value<T>& warped_source,
                               const Value<T>& source_flow, std::size_t k) {
    constexpr T kEps = T(1e-8);
    const std::size_t m = target_positions.shape[0];
    const std::size_t kc = std::min<std::size_t>(k, warped_source.shape()[0]);
    const IndexMatrix<T> nn_idx = knn_search(target_positions, warped_source.data(), kc);
    auto tgt = Value<T>::constant(target_positions);
    Value<T> diffs = sub(gather(warped_source, nn_idx.indices, m, kc), expand_mid(tgt, kc));
    Value<T> w = reciprocal_eps(rownorm_eps(diffs, kEps), kEps); // [m, k]
    Value<T> weighted = sum_mid(mul(gather(source_flow, nn_idx.indices, m, kc), expand_last(w, 3)));
    Value<T> f_hat = div_eps(weighted, expand_last(sum_last(w), 3), T(0));
    return sub(tgt, f_hat);
}

// ---------------------------------------------------------------------------
// Cost volume (Eq.1-4) and predictors

/// Matching cost h(c_i, g_j, t_j - s_i): concat along the feature axis, one
/// activated 1x1 convolution, one linear one. Shapes: s_feat [N,w],
/// t_feats [N,k,w], displacements [N,k,3] -> [N,k,d_cv].
template <typename T>
Value<T> matching_cost(const Value<T>& s_feat, const Value<T>& t_feats,
                       const Value<T>& displacements, ModelParams<T>& params, int level) {
    const std::size_t k = t_feats.shape()[1];
    Value<T> x = concat_last<T>({expand_mid(s_feat, k), t_feats, displacements});
    const std::string prefix = "cost" + std::to_string(level);
    return nn::dense(params, prefix + ".conv1", nn::dense_act(params, prefix + ".conv0", x));
}

/// CV_cross: per-channel max over the k1 warped-target neighbors.
template <typename T>
Value<T> cost_volume_cross(const Value<T>& cost) {
    return max_over_axis(cost);
}

/// CV_self: per-channel max of the neighbors' CV_cross over N_S(s_i).
template <typename T>
Value<T> cost_volume_self(const Value<T>& cv_cross, const IndexMatrix<T>& self_neighbors) {
    return max_over_axis(
        gather(cv_cross, self_neighbors.indices, self_neighbors.rows, self_neighbors.cols));
}

/// Final cost volume. occlusion_weighted implements Eq.4,
/// CV = O * CV_cross + (1 - O) * CV_self; the other modes are the ablation
/// variants.
template <typename T>
Value<T> occlusion_weighted_cv(const Value<T>& cv_cross, const Value<T>& cv_self,
                               const Value<T>& occlusion, CostVolumeMode mode) {
    for (const T& o : occlusion.data().v)
        if (!(o >= T(0) && o <= T(1)))
            throw NumericError("occlusion_weighted_cv: occlusion value outside [0,1]");
    switch (mode) {
        case CostVolumeMode::cross_only: return cv_cross;
        case CostVolumeMode::self_only: return cv_self;
        case CostVolumeMode::masked_cross: return rowwise_scale(cv_cross, occlusion);
        case CostVolumeMode::occlusion_weighted: break;
    }
    const std::size_t d = cv_cross.shape()[1];
    Value<T> o = occlusion.shape().size() == 2
                     ? reshape(occlusion, Shape{occlusion.shape()[0]})
                     : occlusion;
    Value<T> ow = expand_last(o, d);
    return add(mul(ow, cv_cross), mul(affine(ow, T(-1), T(1)), cv_self));
}

/// Occlusion predictor head: two activated 1x1 convolutions at width d_oc,
/// max-pool over the shared warped-target neighborhood, two-layer MLP,
/// sigmoid. Consumes the same gathered displacement / feature tensors as the
/// cost volume.
template <typename T>
Value<T> predict_occlusion(const Value<T>& upsampled_occ, const Value<T>& s_feat,
                           const Value<T>& displacements, const Value<T>& t_feats,
                           ModelParams<T>& params, int level) {
    const std::size_t k = displacements.shape()[1];
    Value<T> x = concat_last<T>(
        {expand_mid(upsampled_occ, k), expand_mid(s_feat, k), displacements, t_feats});
    const std::string prefix = "occ" + std::to_string(level);
    Value<T> h = nn::dense_act(params, prefix + ".conv0", x);
    h = nn::dense_act(params, prefix + ".conv1", h);
    Value<T> pooled = max_over_axis(h);
    Value<T> mlp = nn::dense_act(params, prefix + ".head0", pooled);
    return sigmoid(nn::dense(params, prefix + ".head1", mlp));
}

/// Residual flow predictor: concat(per-point features, cost volume,
/// upsampled flow, occlusion) -> point convolution -> MLP -> 3-vector
/// residual. The caller adds the upsampled flow.
template <typename T>
Value<T> predict_residual_flow(const Tensor<T>& positions, const Value<T>& s_feat,
                               const Value<T>& cost_volume, const Value<T>& upsampled_flow,
                               const Value<T>& occlusion, ModelParams<T>& params, int level,
                               std::size_t k_conv) {
    Value<T> pf = concat_last<T>({s_feat, cost_volume, upsampled_flow, occlusion});
    const std::string prefix = "flow" + std::to_string(level);
    Value<T> pc = point_conv(positions, pf, positions, params, prefix, k_conv);
    Value<T> h = nn::dense_act(params, prefix + ".head0", pc);
    return nn::dense(params, prefix + ".head1", h);
}

template <typename T>
struct LevelOutput {
    int level = 0;                  // pyramid level (0 = finest)
    Value<T> flow;                  // [Nl, 3]
    Value<T> occlusion;             // [Nl, 1], strictly in (0,1)
    Value<T> cost_volume;           // [Nl, d_cv]
    IndexMatrix<T> target_neighbors; // the k1 matrix shared by predictor and cost volume
    Tensor<T> warped_target;        // [Ml, 3] warped target positions at this level
};

template <typename T>
struct ForwardResult {
    Pyramid<T> source;
    Pyramid<T> target;
    std::vector<LevelOutput<T>> levels; // coarse -> fine, level 0 last

    const LevelOutput<T>& at_level(int level) const {
        for (const auto& lo : levels)
            if (lo.level == level) return lo;
        throw ConfigError("no output for level " + std::to_string(level));
    }
    const LevelOutput<T>& finest() const { return at_level(0); }
};

struct ForwardOptions {
    std::size_t fps_seed_source = 0;
    std::size_t fps_seed_target = 0;
    /// Stop-gradient on the predicted occlusion where it enters the flow
    /// path (cost-volume blend and flow-predictor input). The self-supervised
    /// loop enables this so the occlusion predictor trains purely from the
    /// synthetic occlusion loss; supervised training leaves it off so the
    /// occlusion emerges from the flow loss alone.
    bool detach_occlusion_in_flow = false;
    /// Stop-gradient on the mask's flow-predictor *input* edge only. That
    /// edge carries no occlusion semantics and its gradient can drown the
    /// meaningful one coming through the cost-volume blend. Gradient-check
    /// harnesses turn this off to compare against the fully live graph.
    bool detach_occlusion_as_feature = true;
};

/// Full coarse-to-fine pass of the model. The coarsest level starts from
/// zero flow and an all-ones occlusion prior; each finer level upsamples
/// flow and occlusion, warps the target toward the source, predicts
/// occlusion, builds the blended cost volume and adds a residual flow.
template <typename T>
ForwardResult<T> model_forward(const PointCloud<T>& source, const PointCloud<T>& target,
                               ModelParams<T>& params, const ModelConfig& cfg,
                               const ForwardOptions& opt = {}) {
    cfg.validate();
    ForwardResult<T> out;
    out.source = encode_pyramid(source, params, cfg, opt.fps_seed_source, true);
    out.target = encode_pyramid(target, params, cfg, opt.fps_seed_target, false);

    Value<T> prev_flow, prev_occ;
    for (int l = cfg.levels - 1; l >= 0; --l) {
        const PyramidLevel<T>& sl = out.source.levels[l];
        const PyramidLevel<T>& tl = out.target.levels[l];
        const std::size_t n = sl.size();

        Value<T> f_up, o_up;
        if (l == cfg.levels - 1) {
            f_up = Value<T>::constant(Tensor<T>::zeros(Shape{n, 3}));
            o_up = Value<T>::constant(Tensor<T>::full(Shape{n, 1}, T(1)));
        } else {
            const Tensor<T>& coarse_pos = out.source.levels[l + 1].positions;
            f_up = idw_upsample(sl.positions, coarse_pos, prev_flow, cfg.k_up);
            o_up = idw_upsample(sl.positions, coarse_pos, prev_occ, cfg.k_up);
        }

        Value<T> warped_src = add(Value<T>::constant(sl.positions), f_up);
        Value<T> warped_tgt = warp_target_positions(tl.positions, warped_src, f_up, cfg.k_up);

        const std::size_t k1c = clamp_k(cfg.k1, tl.size(), "k1");
        const IndexMatrix<T> twn = knn_search(sl.positions, warped_tgt.data(), k1c);

        // Shared neighbor gathering between the occlusion predictor and the
        // cost volume.
        Value<T> disp = sub(gather(warped_tgt, twn.indices, n, k1c),
                            expand_mid(Value<T>::constant(sl.positions), k1c));
        Value<T> g_nb = gather(tl.features, twn.indices, n, k1c);

        Value<T> occ = predict_occlusion(o_up, sl.features, disp, g_nb, params, l);
        Value<T> occ_blend = opt.detach_occlusion_in_flow ? detach(occ) : occ;
        Value<T> occ_feat = opt.detach_occlusion_in_flow || opt.detach_occlusion_as_feature
                                ? detach(occ)
                                : occ;

        Value<T> cost = matching_cost(sl.features, g_nb, disp, params, l);
        Value<T> cv_cross = cost_volume_cross(cost);
        Value<T> cv_self = cost_volume_self(cv_cross, sl.self_neighbors);
        Value<T> cv = occlusion_weighted_cv(cv_cross, cv_self, occ_blend, cfg.cost_volume_mode);

        Value<T> residual =
            predict_residual_flow(sl.positions, sl.features, cv, f_up, occ_feat, params, l,
                                  cfg.k_conv);
        Value<T> flow = add(residual, f_up);

        LevelOutput<T> lo;
        lo.level = l;
        lo.flow = flow;
        lo.occlusion = occ;
        lo.cost_volume = cv;
        lo.target_neighbors = twn;
        lo.warped_target = warped_tgt.data();
        out.levels.push_back(std::move(lo));

        prev_flow = flow;
        prev_occ = occ;
    }
    return out;
}

} // namespace ogflow
