#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "ogflow/losses.hpp"
#include "ogflow/network.hpp"
#include "ogflow/oracles.hpp"
#include "ogflow/random.hpp"

using namespace ogflow;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    Rng rng(seed);
    Tensor<T> t(std::move(s));
    for (auto& v : t.v) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

ModelConfig tiny_config() {
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

} // namespace

TEST_CASE("flow loss") {
    SECTION("prediction equals ground truth") {
        Tensor<double> gt = random_tensor<double>({5, 3}, 1);
        auto pred = Value<double>::leaf(gt, true);
        auto loss = flow_loss<double>({pred}, {gt}, {1.0});
        REQUIRE(loss.data().v[0] == Catch::Approx(0.0).margin(1e-7)); // eps-guard residue only
    }
    SECTION("single point residual (3,4,0) gives 5") {
        Tensor<double> gt(Shape{1, 3}, {0, 0, 0});
        auto pred = Value<double>::constant(Tensor<double>(Shape{1, 3}, {3, 4, 0}));
        auto loss = flow_loss<double>({pred}, {gt}, {1.0});
        REQUIRE(loss.data().v[0] == Catch::Approx(5.0).epsilon(1e-12));
    }
    SECTION("alpha scales linearly") {
        Tensor<double> gt = random_tensor<double>({6, 3}, 2);
        auto pred = Value<double>::constant(random_tensor<double>({6, 3}, 3));
        auto l1 = flow_loss<double>({pred}, {gt}, {1.0});
        auto l3 = flow_loss<double>({pred}, {gt}, {3.0});
        REQUIRE(l3.data().v[0] == Catch::Approx(3.0 * l1.data().v[0]));
    }
    SECTION("level-count mismatch") {
        Tensor<double> gt = random_tensor<double>({4, 3}, 4);
        auto pred = Value<double>::constant(gt);
        REQUIRE_THROWS_AS(flow_loss<double>({pred}, {gt}, {0.5, 0.5}), ConfigError);
    }
}

TEST_CASE("occlusion loss") {
    SECTION("prediction equals ground truth") {
        Tensor<double> gt(Shape{4}, {0, 1, 1, 0});
        auto pred = Value<double>::constant(gt);
        auto loss = occlusion_loss<double>({pred}, {gt}, {1.0});
        REQUIRE(loss.data().v[0] == 0.0);
    }
    SECTION("hand case 0.3") {
        Tensor<double> gt(Shape{2}, {0, 1});
        auto pred = Value<double>::constant(Tensor<double>(Shape{2}, {0.2, 0.9}));
        auto loss = occlusion_loss<double>({pred}, {gt}, {1.0});
        REQUIRE(loss.data().v[0] == Catch::Approx(0.3).epsilon(1e-12));
    }
    SECTION("bounded by alpha * N") {
        Rng rng(5);
        const std::size_t n = 17;
        Tensor<double> gt(Shape{n});
        for (auto& v : gt.v) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
        auto pred = Value<double>::constant(random_tensor<double>({n}, 6, 0.0, 1.0));
        auto loss = occlusion_loss<double>({pred}, {gt}, {0.7});
        REQUIRE(loss.data().v[0] <= 0.7 * static_cast<double>(n) + 1e-12);
    }
}

TEST_CASE("non-occluded chamfer") {
    SECTION("coincident sets give zero") {
        Tensor<double> pts = random_tensor<double>({6, 3}, 7);
        auto warped = Value<double>::constant(pts);
        auto of = Value<double>::constant(random_tensor<double>({6, 1}, 8, 0.2, 1.0));
        auto ob = Value<double>::constant(random_tensor<double>({6, 1}, 9, 0.2, 1.0));
        auto loss = nonoccluded_chamfer<double>({warped}, {pts}, {of}, {ob}, {1.0});
        REQUIRE(loss.data().v[0] == Catch::Approx(0.0).margin(1e-6));
    }
    SECTION("hand case from the definition") {
        Tensor<double> sw(Shape{2, 3}, {0, 0, 0, 9, 0, 0});
        Tensor<double> tp(Shape{1, 3}, {0, 0, 0});
        auto warped = Value<double>::constant(sw);
        auto ob = Value<double>::constant(Tensor<double>(Shape{1, 1}, {1.0}));

        auto of_10 = Value<double>::constant(Tensor<double>(Shape{2, 1}, {1.0, 0.0}));
        auto l0 = nonoccluded_chamfer<double>({warped}, {tp}, {of_10}, {ob}, {1.0});
        REQUIRE(l0.data().v[0] == Catch::Approx(0.0).margin(1e-6));

        auto of_11 = Value<double>::constant(Tensor<double>(Shape{2, 1}, {1.0, 1.0}));
        auto l1 = nonoccluded_chamfer<double>({warped}, {tp}, {of_11}, {ob}, {1.0});
        REQUIRE(l1.data().v[0] == Catch::Approx(9.0).margin(1e-6));
    }
    SECTION("degenerate all-occluded mask") {
        Tensor<double> pts = random_tensor<double>({5, 3}, 10);
        auto warped = Value<double>::constant(pts);
        auto of = Value<double>::constant(Tensor<double>::zeros(Shape{5, 1}));
        auto ob = Value<double>::constant(Tensor<double>::full(Shape{5, 1}, 1.0));
        REQUIRE_THROWS_AS(nonoccluded_chamfer<double>({warped}, {pts}, {of}, {ob}, {1.0}),
                          DegenerateMaskError);
    }
    SECTION("all-ones masks match the brute-force oracle") {
        Rng rng(11);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = 3 + rng.uniform_index(30);
            const std::size_t m = 3 + rng.uniform_index(30);
            Tensor<double> sw = random_tensor<double>({n, 3}, 100 + trial);
            Tensor<double> tp = random_tensor<double>({m, 3}, 200 + trial);
            Tensor<double> of = Tensor<double>::full(Shape{n}, 1.0);
            Tensor<double> ob = Tensor<double>::full(Shape{m}, 1.0);
            auto loss = nonoccluded_chamfer<double>(
                {Value<double>::constant(sw)}, {tp},
                {Value<double>::constant(of)}, {Value<double>::constant(ob)}, {1.0});
            const double ref = oracle::chamfer_level(sw, tp, of, ob);
            REQUIRE(loss.data().v[0] == Catch::Approx(ref).margin(1e-5));
        }
    }
    SECTION("random masks match the oracle too") {
        Rng rng(12);
        for (int trial = 0; trial < 10; ++trial) {
            const std::size_t n = 4 + rng.uniform_index(20);
            const std::size_t m = 4 + rng.uniform_index(20);
            Tensor<double> sw = random_tensor<double>({n, 3}, 300 + trial);
            Tensor<double> tp = random_tensor<double>({m, 3}, 400 + trial);
            Tensor<double> of = random_tensor<double>({n}, 500 + trial, 0.05, 1.0);
            Tensor<double> ob = random_tensor<double>({m}, 600 + trial, 0.05, 1.0);
            auto loss = nonoccluded_chamfer<double>(
                {Value<double>::constant(sw)}, {tp},
                {Value<double>::constant(of)}, {Value<double>::constant(ob)}, {1.0});
            const double ref = oracle::chamfer_level(sw, tp, of, ob);
            REQUIRE(loss.data().v[0] == Catch::Approx(ref).margin(1e-5));
        }
    }
    SECTION("gradients flow to the warped source") {
        Tensor<double> sw = random_tensor<double>({8, 3}, 13);
        Tensor<double> tp = random_tensor<double>({6, 3}, 14);
        auto warped = Value<double>::leaf(sw, true);
        auto of = Value<double>::constant(Tensor<double>::full(Shape{8, 1}, 1.0));
        auto ob = Value<double>::constant(Tensor<double>::full(Shape{6, 1}, 1.0));
        auto loss = nonoccluded_chamfer<double>({warped}, {tp}, {of}, {ob}, {1.0});
        backward(loss);
        REQUIRE(warped.has_grad());
        double mag = 0.0;
        for (double g : warped.grad().v) mag += std::abs(g);
        REQUIRE(mag > 0.0);
    }
}

TEST_CASE("smoothness regularization") {
    SECTION("constant flow is perfectly smooth") {
        auto flow = Value<double>::constant(Tensor<double>::full(Shape{5, 3}, 0.7));
        IndexMatrix<double> nbr;
        nbr.rows = 5;
        nbr.cols = 2;
        Rng rng(15);
        for (std::size_t i = 0; i < 10; ++i) {
            nbr.indices.push_back(static_cast<std::uint32_t>(rng.uniform_index(5)));
            nbr.distances.push_back(0.1);
        }
        auto loss = smoothness_reg<double>({flow}, {nbr}, {1.0});
        REQUIRE(loss.data().v[0] == 0.0);
    }
    SECTION("two mutually-neighboring points differing by (1,0,0) give 2") {
        auto flow = Value<double>::constant(Tensor<double>(Shape{2, 3}, {0, 0, 0, 1, 0, 0}));
        IndexMatrix<double> nbr;
        nbr.rows = 2;
        nbr.cols = 1;
        nbr.indices = {1, 0};
        nbr.distances = {1.0, 1.0};
        auto loss = smoothness_reg<double>({flow}, {nbr}, {1.0});
        REQUIRE(loss.data().v[0] == Catch::Approx(2.0).epsilon(1e-12));
    }
    SECTION("L1 homogeneity") {
        Tensor<double> f = random_tensor<double>({7, 3}, 16);
        IndexMatrix<double> nbr;
        nbr.rows = 7;
        nbr.cols = 3;
        Rng rng(17);
        for (std::size_t i = 0; i < 21; ++i) {
            nbr.indices.push_back(static_cast<std::uint32_t>(rng.uniform_index(7)));
            nbr.distances.push_back(0.1);
        }
        auto base = smoothness_reg<double>({Value<double>::constant(f)}, {nbr}, {1.0});
        Tensor<double> fs = f;
        for (auto& v : fs.v) v *= -2.5;
        auto scaled = smoothness_reg<double>({Value<double>::constant(fs)}, {nbr}, {1.0});
        REQUIRE(scaled.data().v[0] == Catch::Approx(2.5 * base.data().v[0]));
    }
}

TEST_CASE("self-supervised total") {
    auto s = [](double x) { return Value<double>::constant(Tensor<double>::scalar(x)); };
    SECTION("all lambdas zero leaves the chamfer term") {
        LossWeights<double> w;
        w.alpha = {1.0};
        w.lambda_reg = 0.0;
        w.lambda_f = 0.0;
        w.lambda_oc = 0.0;
        auto total = self_supervised_total(s(1.5), s(2.0), s(3.0), s(4.0), w, true);
        REQUIRE(total.data().v[0] == 1.5);
    }
    SECTION("hand weighted sums") {
        LossWeights<double> w;
        w.alpha = {1.0};
        // Components (1,2,3,4): contributions 1 + reg*2 + f*3 + oc*4.
        w.lambda_reg = 0.5;
        w.lambda_f = 0.6;
        w.lambda_oc = 1.0;
        auto t1 = self_supervised_total(s(1), s(2), s(3), s(4), w, true);
        REQUIRE(t1.data().v[0] == Catch::Approx(1.0 + 1.0 + 1.8 + 4.0).epsilon(1e-12)); // 7.8
        w.lambda_reg = 0.6;
        auto t2 = self_supervised_total(s(1), s(2), s(3), s(4), w, true);
        REQUIRE(t2.data().v[0] == Catch::Approx(1.0 + 1.2 + 1.8 + 4.0).epsilon(1e-12)); // 8.0
    }
    SECTION("synthetic flow term dropped when disabled") {
        LossWeights<double> w;
        w.alpha = {1.0};
        w.lambda_reg = 1.0;
        w.lambda_f = 10.0;
        w.lambda_oc = 1.0;
        auto total = self_supervised_total(s(1), s(1), s(100), s(1), w, false);
        REQUIRE(total.data().v[0] == 3.0);
    }
    SECTION("paper defaults") {
        LossWeights<double> w;
        REQUIRE(w.lambda_f == 0.6);
        REQUIRE(w.lambda_oc == 1.0);
    }
    SECTION("negative weights rejected") {
        LossWeights<double> w;
        w.lambda_oc = -1.0;
        REQUIRE_THROWS_AS(self_supervised_total(s(1), s(1), s(1), s(1), w, true), ConfigError);
    }
}

TEST_CASE("stop-gradient keeps occlusion parameters out of the chamfer loss") {
    ModelConfig cfg = tiny_config();
    auto params = ModelParams<double>::init(cfg, 90);
    Rng jitter(91);
    for (auto& e : params.entries())
        for (auto& v : e.value.data().v) v += jitter.uniform(-0.05, 0.05);

    Rng rng(92);
    Tensor<double> sp(Shape{18, 3}), tp(Shape{16, 3});
    for (auto& v : sp.v) v = rng.uniform(-1, 1);
    for (auto& v : tp.v) v = rng.uniform(-1, 1);
    PointCloud<double> src(sp), tgt(tp);
    std::vector<double> alpha{0.02, 0.04};

    ForwardOptions opt;
    opt.detach_occlusion_in_flow = true;
    auto fwd = model_forward(src, tgt, params, cfg, opt);
    auto bwd = model_forward(tgt, src, params, cfg, opt);

    std::vector<Value<double>> warped, occ_f, occ_b;
    std::vector<Tensor<double>> target_pos;
    auto flows = flows_by_level(fwd);
    auto occs_f = occlusions_by_level(fwd);
    auto occs_b = occlusions_by_level(bwd);
    for (int l = 0; l < cfg.levels; ++l) {
        warped.push_back(add(Value<double>::constant(fwd.source.levels[l].positions), flows[l]));
        target_pos.push_back(fwd.target.levels[l].positions);
        occ_f.push_back(occs_f[l]);
        occ_b.push_back(occs_b[l]);
    }
    auto chamfer = nonoccluded_chamfer(warped, target_pos, occ_f, occ_b, alpha);

    params.zero_grads();
    backward(chamfer);

    bool some_flow_grad = false;
    for (auto& e : params.entries()) {
        const bool occ_param = e.name.rfind("occ", 0) == 0;
        if (occ_param) {
            if (e.value.has_grad())
                for (double g : e.value.grad().v) REQUIRE(g == 0.0);
        } else if (e.value.has_grad()) {
            for (double g : e.value.grad().v)
                if (g != 0.0) some_flow_grad = true;
        }
    }
    REQUIRE(some_flow_grad);

    SECTION("the full Eq.9 objective does reach occlusion parameters") {
        params.zero_grads();
        // Synthetic leg: third inference against a translated copy.
        Tensor<double> tps = sp;
        for (std::size_t i = 0; i < 18; ++i) tps.v[i * 3] += 2.0;
        auto fwd3 = model_forward(src, PointCloud<double>(tps), params, cfg, opt);
        Tensor<double> synth_flow_gt(Shape{18, 3});
        for (std::size_t i = 0; i < 18; ++i) synth_flow_gt.v[i * 3] = 2.0;
        Tensor<double> synth_occ_gt = Tensor<double>::full(Shape{18}, 1.0);

        auto lf = flow_loss(flows_by_level(fwd3),
                            subsample_per_level(fwd3.source, synth_flow_gt), alpha);
        auto loc = occlusion_loss(occlusions_by_level(fwd3),
                                  subsample_per_level(fwd3.source, synth_occ_gt), alpha);
        std::vector<IndexMatrix<double>> nbrs;
        for (int l = 0; l < cfg.levels; ++l) nbrs.push_back(fwd.source.levels[l].self_neighbors);
        auto reg = smoothness_reg(flows, nbrs, alpha);

        LossWeights<double> w;
        w.alpha = alpha;
        auto total = self_supervised_total(chamfer, reg, lf, loc, w, true);
        backward(total);

        bool occ_grad_nonzero = false;
        for (auto& e : params.entries())
            if (e.name.rfind("occ", 0) == 0 && e.value.has_grad())
                for (double g : e.value.grad().v)
                    if (g != 0.0) occ_grad_nonzero = true;
        REQUIRE(occ_grad_nonzero);
    }
}
