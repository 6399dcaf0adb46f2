#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ogflow/datagen.hpp"
#include "ogflow/evalkit.hpp"
#include "ogflow/geometry.hpp"
#include "ogflow/gradcheck.hpp"
#include "ogflow/losses.hpp"
#include "ogflow/network.hpp"
#include "ogflow/oracles.hpp"
#include "ogflow/random.hpp"

// Self-verification suites shared by the `gradcheck` / `selfcheck` CLI
// subcommands and the acceptance tests: finite-difference gradient checks,
// oracle-equivalence checks, the cost-volume blend identities, the
// stop-gradient rule and the synthetic-pair bookkeeping.

namespace ogflow::checks {

struct CheckResult {
    std::string name;
    bool pass = false;
    double value = 0.0;     // measured quantity (max error, fraction, ...)
    double threshold = 0.0; // gate it was compared against
};

inline bool all_pass(const std::vector<CheckResult>& rs) {
    for (const auto& r : rs)
        if (!r.pass) return false;
    return true;
}

namespace detail {

inline Tensor<double> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

inline Value<double> project(const Value<double>& x, std::uint64_t seed) {
    Rng rng(seed);
    Tensor<double> w(x.shape());
    for (auto& v : w.v) v = rng.uniform(-1.0, 1.0);
    return sum_all(mul(x, Value<double>::constant(w)));
}

inline ModelConfig gradcheck_model_config() {
    ModelConfig cfg;
    cfg.levels = 2;
    cfg.feature_widths = {4, 8};
    cfg.cost_volume_widths = {4, 6};
    cfg.occ_width = 4;
    cfg.k1 = 4;
    cfg.k2 = 4;
    cfg.k_conv = 4;
    cfg.k_up = 3;
    return cfg;
}

} // namespace detail

/// Finite-difference checks of every differentiable primitive (>= 10 random
/// shapes each, float64, h = 1e-5, gate 1e-6) plus the end-to-end supervised
/// loss on a 2-level 16-point model (gate 1e-4).
inline std::vector<CheckResult> gradient_suite(std::uint64_t seed) {
    std::vector<CheckResult> out;
    Rng rng(derive_seed(seed, 0x6AD));

    auto unary = [&](const char* name,
                     const std::function<Value<double>(const Value<double>&)>& op, double lo,
                     double hi) {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> t = detail::rand_tensor(
                {1 + rng.uniform_index(4), 1 + rng.uniform_index(5)}, rng, lo, hi);
            auto res = grad_check({&t}, [&](const std::vector<Value<double>>& in) {
                return detail::project(op(in[0]), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({std::string("grad/") + name, worst < 1e-6, worst, 1e-6});
    };
    auto binary = [&](const char* name,
                      const std::function<Value<double>(const Value<double>&,
                                                        const Value<double>&)>& op,
                      double lo_b, double hi_b) {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const Shape s{1 + rng.uniform_index(4), 1 + rng.uniform_index(5)};
            Tensor<double> a = detail::rand_tensor(s, rng);
            Tensor<double> b = detail::rand_tensor(s, rng, lo_b, hi_b);
            auto res = grad_check({&a, &b}, [&](const std::vector<Value<double>>& in) {
                return detail::project(op(in[0], in[1]), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({std::string("grad/") + name, worst < 1e-6, worst, 1e-6});
    };

    binary("add", [](auto a, auto b) { return add(a, b); }, -1.0, 1.0);
    binary("sub", [](auto a, auto b) { return sub(a, b); }, -1.0, 1.0);
    binary("mul", [](auto a, auto b) { return mul(a, b); }, -1.0, 1.0);
    binary("div_eps", [](auto a, auto b) { return div_eps(a, b, 1e-8); }, 0.5, 2.0);
    unary("affine", [](auto x) { return affine(x, 1.7, -0.4); }, -1.0, 1.0);
    unary("reciprocal_eps", [](auto x) { return reciprocal_eps(x, 3.0); }, -1.0, 1.0);
    unary("abs", [](auto x) { return abs(x); }, 0.2, 1.0);
    unary("leaky_relu", [](auto x) { return leaky_relu(x, 0.1); }, -1.0, 1.0);
    unary("sigmoid", [](auto x) { return sigmoid(x); }, -3.0, 3.0);
    unary("rownorm_eps", [](auto x) { return rownorm_eps(x, 1e-8); }, 0.1, 1.0);
    unary("sum_all", [](auto x) { return sum_all(x); }, -1.0, 1.0);
    unary("mean_all", [](auto x) { return mean_all(x); }, -1.0, 1.0);
    unary("sum_last", [](auto x) { return sum_last(x); }, -1.0, 1.0);
    unary("expand_last", [](auto x) { return expand_last(x, 3); }, -1.0, 1.0);
    unary("expand_mid", [](auto x) { return expand_mid(x, 4); }, -1.0, 1.0);
    unary("reshape", [](auto x) { return reshape(x, Shape{x.numel()}); }, -1.0, 1.0);

    {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = 2 + rng.uniform_index(4);
            const std::size_t din = 1 + rng.uniform_index(4);
            const std::size_t dout = 1 + rng.uniform_index(4);
            Tensor<double> x = detail::rand_tensor({n, din}, rng);
            Tensor<double> W = detail::rand_tensor({din, dout}, rng);
            Tensor<double> b = detail::rand_tensor({dout}, rng);
            auto res = grad_check({&x, &W, &b}, [&](const std::vector<Value<double>>& in) {
                return detail::project(linear(in[0], in[1], in[2]), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({"grad/linear", worst < 1e-6, worst, 1e-6});
    }
    {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> a = detail::rand_tensor({3, 2}, rng);
            Tensor<double> b = detail::rand_tensor({3, 3}, rng);
            auto res = grad_check({&a, &b}, [&](const std::vector<Value<double>>& in) {
                return detail::project(concat_last<double>({in[0], in[1]}), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({"grad/concat", worst < 1e-6, worst, 1e-6});
    }
    {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t m = 3 + rng.uniform_index(5);
            Tensor<double> x = detail::rand_tensor({m, 3}, rng);
            std::vector<std::uint32_t> idx(8);
            for (auto& i : idx) i = static_cast<std::uint32_t>(rng.uniform_index(m));
            auto res = grad_check({&x}, [&](const std::vector<Value<double>>& in) {
                return detail::project(gather(in[0], idx, 4, 2), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({"grad/gather", worst < 1e-6, worst, 1e-6});
    }
    {
        double worst = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> x = detail::rand_tensor({3, 4, 2}, rng);
            auto res = grad_check({&x}, [&](const std::vector<Value<double>>& in) {
                return detail::project(max_over_axis(in[0]), 7);
            });
            worst = std::max(worst, res.max_rel_err);
        }
        out.push_back({"grad/max_over_axis", worst < 1e-6, worst, 1e-6});
        double worst2 = 0.0;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> x = detail::rand_tensor({2, 3, 4}, rng);
            auto res = grad_check({&x}, [&](const std::vector<Value<double>>& in) {
                return detail::project(sum_mid(in[0]), 7);
            });
            worst2 = std::max(worst2, res.max_rel_err);
        }
        out.push_back({"grad/sum_mid", worst2 < 1e-6, worst2, 1e-6});
    }
    {
        // detach: gradient of sum(detach(x) * y) w.r.t. x must be exactly 0.
        Tensor<double> xt = detail::rand_tensor({4, 3}, rng);
        Tensor<double> yt = detail::rand_tensor({4, 3}, rng);
        auto x = Value<double>::leaf(xt, true);
        auto y = Value<double>::leaf(yt, true);
        backward(sum_all(mul(detach(x), y)));
        double leak = 0.0;
        if (x.has_grad())
            for (double g : x.grad().v) leak = std::max(leak, std::abs(g));
        bool y_ok = y.has_grad() && y.grad().v == xt.v;
        out.push_back({"grad/detach", leak == 0.0 && y_ok, leak, 0.0});
    }
    {
        // End-to-end supervised loss on the 2-level 16-point model, at a
        // generic parameter point (biases jittered off the exact kink).
        ModelConfig cfg = detail::gradcheck_model_config();
        auto params = ModelParams<double>::init(cfg, derive_seed(seed, 0xE2E));
        Rng jitter(derive_seed(seed, 0xE2E2));
        for (auto& e : params.entries())
            for (auto& v : e.value.data().v) v += jitter.uniform(-0.05, 0.05);
        Rng cr(derive_seed(seed, 0xC10));
        PointCloud<double> src(detail::rand_tensor({16, 3}, cr));
        PointCloud<double> tgt(detail::rand_tensor({14, 3}, cr));
        Tensor<double> gt = detail::rand_tensor({16, 3}, cr, -0.3, 0.3);
        std::vector<double> alpha{0.02, 0.04};
        ForwardOptions opt;
        opt.detach_occlusion_as_feature = false; // compare against the fully live graph
        std::vector<Value<double>> leaves;
        for (auto& e : params.entries()) leaves.push_back(e.value);
        auto res = leaf_grad_check(leaves, [&]() {
            auto result = model_forward(src, tgt, params, cfg, opt);
            return supervised_loss(result, gt, alpha);
        });
        out.push_back({"grad/end_to_end_eq10", res.max_rel_err < 1e-4, res.max_rel_err, 1e-4});
    }
    return out;
}

/// Oracle equivalence: knn exact, non-occluded Chamfer within 1e-5, metrics
/// within 1e-6, FPS verified exhaustively for N <= 64. `trials` random seeds
/// per check.
inline std::vector<CheckResult> oracle_suite(std::uint64_t seed, int trials = 100) {
    std::vector<CheckResult> out;
    Rng rng(derive_seed(seed, 0x04AC1E));

    {
        bool exact = true;
        for (int t = 0; t < trials && exact; ++t) {
            const std::size_t nq = 1 + rng.uniform_index(24);
            const std::size_t nr = 1 + rng.uniform_index(48);
            const std::size_t k = 1 + rng.uniform_index(nr);
            Tensor<double> q = detail::rand_tensor({nq, 3}, rng);
            Tensor<double> r = detail::rand_tensor({nr, 3}, rng);
            auto fast = knn_search(q, r, k);
            auto ref = oracle::knn(q, r, k);
            for (std::size_t i = 0; i < nq && exact; ++i)
                for (std::size_t c = 0; c < k; ++c)
                    if (fast.index(i, c) != ref[i].indices[c]) {
                        exact = false;
                        break;
                    }
        }
        out.push_back({"oracle/knn_exact", exact, exact ? 0.0 : 1.0, 0.0});
    }
    {
        double worst = 0.0;
        for (int t = 0; t < trials; ++t) {
            const std::size_t n = 3 + rng.uniform_index(40);
            const std::size_t m = 3 + rng.uniform_index(40);
            Tensor<double> sw = detail::rand_tensor({n, 3}, rng);
            Tensor<double> tp = detail::rand_tensor({m, 3}, rng);
            Tensor<double> of = detail::rand_tensor({n}, rng, 0.05, 1.0);
            Tensor<double> ob = detail::rand_tensor({m}, rng, 0.05, 1.0);
            auto loss = nonoccluded_chamfer<double>(
                {Value<double>::constant(sw)}, {tp}, {Value<double>::constant(of)},
                {Value<double>::constant(ob)}, {1.0});
            worst = std::max(worst,
                             std::abs(loss.data().v[0] - oracle::chamfer_level(sw, tp, of, ob)));
        }
        out.push_back({"oracle/chamfer", worst < 1e-5, worst, 1e-5});
    }
    {
        double worst = 0.0;
        for (int t = 0; t < trials; ++t) {
            const std::size_t n = 5 + rng.uniform_index(50);
            Tensor<double> gt = detail::rand_tensor({n, 3}, rng);
            Tensor<double> pred = detail::rand_tensor({n, 3}, rng, -1.2, 1.2);
            Tensor<double> occ(Shape{n});
            for (auto& v : occ.v) v = rng.uniform() < 0.3 ? 0.0 : 1.0;
            occ.v[0] = 1.0;
            auto r = flow_metrics(pred, gt, occ);
            auto ref = oracle::metrics(pred, gt, occ);
            worst = std::max({worst, std::abs(r.epe_full - ref.epe_full),
                              std::abs(r.epe - ref.epe), std::abs(r.acc_05 - ref.acc_05),
                              std::abs(r.acc_10 - ref.acc_10),
                              std::abs(r.outliers - ref.outliers)});
        }
        out.push_back({"oracle/metrics", worst < 1e-6, worst, 1e-6});
    }
    {
        bool valid = true;
        for (int t = 0; t < trials && valid; ++t) {
            const std::size_t n = 2 + rng.uniform_index(63);
            Tensor<double> pos = detail::rand_tensor({n, 3}, rng);
            const std::size_t m = 1 + rng.uniform_index(n);
            const std::size_t s = rng.uniform_index(n);
            valid = oracle::fps_is_valid(pos, farthest_point_sampling(pos, m, s), s);
        }
        out.push_back({"oracle/fps_exhaustive", valid, valid ? 0.0 : 1.0, 0.0});
    }
    return out;
}

/// Eq.4 identities on random volumes: O=1 bit-identical to CV_cross, O=0
/// bit-identical to CV_self, O=0.5 within 1e-6 of the arithmetic mean.
inline std::vector<CheckResult> blend_identity_suite(std::uint64_t seed, int trials = 20) {
    Rng rng(derive_seed(seed, 0xB1E4D));
    bool ones_exact = true, zeros_exact = true;
    double mean_err = 0.0;
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = 2 + rng.uniform_index(30);
        const std::size_t d = 1 + rng.uniform_index(16);
        auto cross = Value<double>::constant(detail::rand_tensor({n, d}, rng, -2.0, 2.0));
        auto self = Value<double>::constant(detail::rand_tensor({n, d}, rng, -2.0, 2.0));
        auto ones = Value<double>::constant(Tensor<double>::full(Shape{n, 1}, 1.0));
        auto zeros = Value<double>::constant(Tensor<double>::zeros(Shape{n, 1}));
        auto halves = Value<double>::constant(Tensor<double>::full(Shape{n, 1}, 0.5));
        ones_exact = ones_exact &&
                     occlusion_weighted_cv(cross, self, ones,
                                           CostVolumeMode::occlusion_weighted)
                             .data()
                             .v == cross.data().v;
        zeros_exact = zeros_exact &&
                      occlusion_weighted_cv(cross, self, zeros,
                                            CostVolumeMode::occlusion_weighted)
                              .data()
                              .v == self.data().v;
        auto mean = occlusion_weighted_cv(cross, self, halves,
                                          CostVolumeMode::occlusion_weighted);
        for (std::size_t i = 0; i < n * d; ++i)
            mean_err = std::max(mean_err,
                                std::abs(mean.data().v[i] -
                                         0.5 * (cross.data().v[i] + self.data().v[i])));
    }
    return {{"blend/O1_equals_cross_bitwise", ones_exact, ones_exact ? 0.0 : 1.0, 0.0},
            {"blend/O0_equals_self_bitwise", zeros_exact, zeros_exact ? 0.0 : 1.0, 0.0},
            {"blend/O05_equals_mean", mean_err < 1e-6, mean_err, 1e-6}};
}

/// Stop-gradient rule over random configurations: the chamfer loss alone
/// leaves every occlusion-predictor parameter untouched; the full
/// self-supervised objective (lambda_oc = 1) reaches at least one.
inline std::vector<CheckResult> stopgrad_suite(std::uint64_t seed, int configs = 20) {
    Rng rng(derive_seed(seed, 0x570b));
    bool chamfer_clean = true;
    bool total_reaches = true;
    for (int t = 0; t < configs && (chamfer_clean || total_reaches); ++t) {
        ModelConfig cfg;
        cfg.levels = 2;
        const int w0 = 3 + static_cast<int>(rng.uniform_index(4));
        cfg.feature_widths = {w0, w0 * 2};
        cfg.cost_volume_widths = {3 + static_cast<int>(rng.uniform_index(4)),
                                  4 + static_cast<int>(rng.uniform_index(4))};
        cfg.occ_width = 3 + static_cast<int>(rng.uniform_index(4));
        cfg.k1 = 3 + static_cast<int>(rng.uniform_index(3));
        cfg.k2 = 3 + static_cast<int>(rng.uniform_index(3));
        cfg.k_conv = 3;
        cfg.k_up = 3;
        auto params = ModelParams<double>::init(cfg, derive_seed(seed, 0x570c, t));
        Rng jitter(derive_seed(seed, 0x570d, t));
        for (auto& e : params.entries())
            for (auto& v : e.value.data().v) v += jitter.uniform(-0.05, 0.05);

        const std::size_t n = 14 + rng.uniform_index(10);
        const std::size_t m = 14 + rng.uniform_index(10);
        PointCloud<double> src(detail::rand_tensor({n, 3}, rng));
        PointCloud<double> tgt(detail::rand_tensor({m, 3}, rng));
        std::vector<double> alpha{0.02, 0.04};

        ForwardOptions opt;
        opt.detach_occlusion_in_flow = true;
        auto fwd = model_forward(src, tgt, params, cfg, opt);
        auto bwd = model_forward(tgt, src, params, cfg, opt);

        auto flows = flows_by_level(fwd);
        std::vector<Value<double>> warped;
        std::vector<Tensor<double>> target_pos;
        std::vector<IndexMatrix<double>> nbrs;
        for (int l = 0; l < cfg.levels; ++l) {
            warped.push_back(add(Value<double>::constant(fwd.source.levels[l].positions),
                                 flows[l]));
            target_pos.push_back(fwd.target.levels[l].positions);
            nbrs.push_back(fwd.source.levels[l].self_neighbors);
        }
        auto chamfer = nonoccluded_chamfer(warped, target_pos, occlusions_by_level(fwd),
                                           occlusions_by_level(bwd), alpha);
        params.zero_grads();
        backward(chamfer);
        for (auto& e : params.entries()) {
            if (e.name.rfind("occ", 0) != 0 || !e.value.has_grad()) continue;
            for (double g : e.value.grad().v)
                if (g != 0.0) chamfer_clean = false;
        }

        // Full objective with a synthetic leg.
        SyntheticPairSpec spec;
        spec.translation_magnitude = 1.0;
        spec.num_centers = 2;
        spec.removal_fraction = 0.05;
        spec.rng_seed = derive_seed(seed, 0x570e, t);
        auto sp = make_synthetic_pair(src, spec);
        auto fwd3 = model_forward(sp.source, sp.target, params, cfg, opt);
        auto lf = flow_loss(flows_by_level(fwd3),
                            subsample_per_level(fwd3.source, *sp.gt_flow), alpha);
        auto loc = occlusion_loss(occlusions_by_level(fwd3),
                                  subsample_per_level(fwd3.source, *sp.gt_occlusion), alpha);
        auto reg = smoothness_reg(flows, nbrs, alpha);
        LossWeights<double> w;
        w.alpha = alpha;
        w.lambda_reg = 1.0;
        w.lambda_f = 0.6;
        w.lambda_oc = 1.0;
        auto total = self_supervised_total(chamfer, reg, lf, loc, w, true);
        params.zero_grads();
        backward(total);
        bool reached = false;
        for (auto& e : params.entries())
            if (e.name.rfind("occ", 0) == 0 && e.value.has_grad())
                for (double g : e.value.grad().v)
                    if (g != 0.0) reached = true;
        total_reaches = total_reaches && reached;
    }
    return {{"stopgrad/chamfer_zero_on_occ_params", chamfer_clean, chamfer_clean ? 0.0 : 1.0,
             0.0},
            {"stopgrad/eq9_reaches_occ_params", total_reaches, total_reaches ? 0.0 : 1.0, 0.0}};
}

/// Synthetic-pair bookkeeping over seeded draws: |T~| + #zeros = N, the zero
/// set is exactly the removed translated points, and ||f~|| = 2.0 +- 1e-6.
inline std::vector<CheckResult> synthetic_bookkeeping_suite(std::uint64_t seed,
                                                            int trials = 1000) {
    Rng rng(derive_seed(seed, 0xB00C));
    bool counts_ok = true, sets_ok = true;
    double mag_err = 0.0;
    for (int t = 0; t < trials; ++t) {
        const std::size_t n = 40 + rng.uniform_index(80);
        Tensor<float> pos(Shape{n, 3});
        for (auto& v : pos.v) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        PointCloud<float> src(pos);
        SyntheticPairSpec spec;
        spec.rng_seed = derive_seed(seed, 0xB00D, t);
        auto pair = make_synthetic_pair(src, spec);

        std::size_t zeros = 0;
        for (float o : pair.gt_occlusion->v)
            if (o == 0.0f) ++zeros;
        counts_ok = counts_ok && (pair.target.size() + zeros == n);

        // Exact set check: a source point is non-occluded iff its translated
        // image appears (bitwise) in T~.
        std::size_t w = 0;
        for (std::size_t i = 0; i < n && sets_ok; ++i) {
            if (pair.gt_occlusion->v[i] == 0.0f) continue;
            for (int a = 0; a < 3; ++a)
                if (pair.target.positions.at2(w, a) !=
                    src.positions.at2(i, a) + pair.gt_flow->at2(i, a))
                    sets_ok = false;
            ++w;
        }
        sets_ok = sets_ok && w == pair.target.size();

        for (std::size_t i = 0; i < n; ++i) {
            double m2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                const double f = pair.gt_flow->at2(i, a);
                m2 += f * f;
            }
            mag_err = std::max(mag_err, std::abs(std::sqrt(m2) - 2.0));
        }
    }
    return {{"synth/count_identity", counts_ok, counts_ok ? 0.0 : 1.0, 0.0},
            {"synth/zero_set_equals_removed_set", sets_ok, sets_ok ? 0.0 : 1.0, 0.0},
            {"synth/translation_magnitude", mag_err < 1e-6, mag_err, 1e-6}};
}

} // namespace ogflow::checks
