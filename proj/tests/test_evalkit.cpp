#include <catch2/catch_amalgamated.hpp>

#include "ogflow/evalkit.hpp"
#include "ogflow/oracles.hpp"
#include "ogflow/random.hpp"

using namespace ogflow;

namespace {

Tensor<double> random_flow(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor<double> t(Shape{n, 3});
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

Tensor<double> random_mask(std::size_t n, std::uint64_t seed, double p_occluded = 0.3) {
    Rng rng(seed);
    Tensor<double> t(Shape{n});
    bool any_vis = false;
    for (auto& v : t.v) {
        v = rng.uniform() < p_occluded ? 0.0 : 1.0;
        any_vis = any_vis || v == 1.0;
    }
    if (!any_vis) t.v[0] = 1.0;
    return t;
}

} // namespace

TEST_CASE("flow metrics definitions") {
    SECTION("perfect prediction") {
        Tensor<double> gt = random_flow(10, 1);
        Tensor<double> occ = random_mask(10, 2);
        auto r = flow_metrics(gt, gt, occ);
        REQUIRE(r.epe_full == 0.0);
        REQUIRE(r.epe == 0.0);
        REQUIRE(r.acc_05 == 1.0);
        REQUIRE(r.acc_10 == 1.0);
        REQUIRE(r.outliers == 0.0);
    }
    SECTION("threshold arithmetic for a single point") {
        // e = 0.04 on a 10 m ground-truth flow: inside both accuracy bands.
        Tensor<double> gt(Shape{1, 3}, {10, 0, 0});
        Tensor<double> pred(Shape{1, 3}, {10.04, 0, 0});
        Tensor<double> occ(Shape{1}, {1});
        auto r = flow_metrics(pred, gt, occ);
        REQUIRE(r.acc_05 == 1.0);
        REQUIRE(r.acc_10 == 1.0);
        REQUIRE(r.outliers == 0.0);
        REQUIRE(r.epe == Catch::Approx(0.04));
    }
    SECTION("occluded points count only in EPE_full") {
        Tensor<double> gt(Shape{2, 3}, {0, 0, 0, 0, 0, 0});
        Tensor<double> pred(Shape{2, 3}, {1, 0, 0, 0, 0, 0});
        Tensor<double> occ(Shape{2}, {0, 1}); // first point occluded, e=1
        auto r = flow_metrics(pred, gt, occ);
        REQUIRE(r.epe_full == Catch::Approx(0.5));
        REQUIRE(r.epe == 0.0);
    }
    SECTION("no non-occluded points is undefined") {
        Tensor<double> gt = random_flow(4, 3);
        Tensor<double> occ = Tensor<double>::zeros(Shape{4});
        REQUIRE_THROWS_AS(flow_metrics(gt, gt, occ), UndefinedMetricError);
    }
}

TEST_CASE("metric properties over random samples") {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 5 + rng.uniform_index(60);
        Tensor<double> gt = random_flow(n, 10 + trial);
        Tensor<double> pred = random_flow(n, 300 + trial, -1.2, 1.2);
        Tensor<double> occ = random_mask(n, 600 + trial);
        auto r = flow_metrics(pred, gt, occ);

        // ACC_05 <= ACC_10.
        REQUIRE(r.acc_05 <= r.acc_10 + 1e-12);

        // Mean decomposition: EPE_full = w * EPE_occluded + (1-w) * EPE.
        std::size_t occluded = 0;
        double occ_err = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (occ.v[i] != 0.0) continue;
            ++occluded;
            double e2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                const double d = gt.at2(i, a) - pred.at2(i, a);
                e2 += d * d;
            }
            occ_err += std::sqrt(e2);
        }
        const double w = static_cast<double>(occluded) / static_cast<double>(n);
        const double epe_occ = occluded ? occ_err / static_cast<double>(occluded) : 0.0;
        REQUIRE(r.epe_full == Catch::Approx(w * epe_occ + (1.0 - w) * r.epe).margin(1e-12));

        // e < 0.1 and r < 0.1 implies not an outlier (per-point check).
        for (std::size_t i = 0; i < n; ++i) {
            if (occ.v[i] == 0.0) continue;
            double e2 = 0.0, g2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                const double d = gt.at2(i, a) - pred.at2(i, a);
                e2 += d * d;
                g2 += gt.at2(i, a) * gt.at2(i, a);
            }
            const double e = std::sqrt(e2);
            const double rel = e / std::max(std::sqrt(g2), 1e-4);
            if (e < 0.1 && rel < 0.1) REQUIRE_FALSE((e > 0.3 || rel > 0.1));
        }

        // Permutation invariance.
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        Rng prng(900 + trial);
        prng.shuffle(perm);
        Tensor<double> gt_p(Shape{n, 3}), pred_p(Shape{n, 3}), occ_p(Shape{n});
        for (std::size_t i = 0; i < n; ++i) {
            for (int a = 0; a < 3; ++a) {
                gt_p.at2(i, a) = gt.at2(perm[i], a);
                pred_p.at2(i, a) = pred.at2(perm[i], a);
            }
            occ_p.v[i] = occ.v[perm[i]];
        }
        auto rp = flow_metrics(pred_p, gt_p, occ_p);
        REQUIRE(rp.epe_full == Catch::Approx(r.epe_full).margin(1e-12));
        REQUIRE(rp.epe == Catch::Approx(r.epe).margin(1e-12));
        REQUIRE(rp.acc_05 == Catch::Approx(r.acc_05).margin(1e-12));
        REQUIRE(rp.outliers == Catch::Approx(r.outliers).margin(1e-12));

        // Oracle equivalence.
        auto ref = oracle::metrics(pred, gt, occ);
        REQUIRE(r.epe_full == Catch::Approx(ref.epe_full).margin(1e-6));
        REQUIRE(r.epe == Catch::Approx(ref.epe).margin(1e-6));
        REQUIRE(r.acc_05 == Catch::Approx(ref.acc_05).margin(1e-6));
        REQUIRE(r.acc_10 == Catch::Approx(ref.acc_10).margin(1e-6));
        REQUIRE(r.outliers == Catch::Approx(ref.outliers).margin(1e-6));
    }
}

TEST_CASE("occlusion accuracy") {
    SECTION("exact match") {
        Tensor<double> gt(Shape{4}, {1, 0, 1, 0});
        REQUIRE(occlusion_accuracy(gt, gt) == 1.0);
    }
    SECTION("all 0.5 against all ones is 1.0 (boundary is non-occluded)") {
        Tensor<double> pred = Tensor<double>::full(Shape{6}, 0.5);
        Tensor<double> gt = Tensor<double>::full(Shape{6}, 1.0);
        REQUIRE(occlusion_accuracy(pred, gt) == 1.0);
    }
    SECTION("hand count 1/3") {
        Tensor<double> pred(Shape{3}, {0.9, 0.1, 0.6});
        Tensor<double> gt(Shape{3}, {1, 1, 0});
        REQUIRE(occlusion_accuracy(pred, gt) == Catch::Approx(1.0 / 3.0));
    }
}

TEST_CASE("report aggregation and rendering") {
    MetricsReport a;
    a.epe_full = 0.2;
    a.epe = 0.1;
    a.acc_05 = 0.5;
    a.acc_10 = 0.6;
    a.outliers = 0.2;
    a.sample_count = 1;
    MetricsReport b = a;
    b.epe_full = 0.4;
    auto agg = aggregate({a, b});
    REQUIRE(agg.epe_full == Catch::Approx(0.3));
    REQUIRE(agg.sample_count == 2);

    const std::string text = to_text(agg);
    REQUIRE(text.find("epe_full") == 0);
    REQUIRE(text.find("acc_population non_occluded") != std::string::npos);
}
