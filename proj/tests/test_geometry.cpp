#include <catch2/catch_amalgamated.hpp>

#include "ogflow/geometry.hpp"
#include "ogflow/oracles.hpp"
#include "ogflow/random.hpp"

using namespace ogflow;

namespace {

Tensor<double> random_points(std::size_t n, Rng& rng, double extent = 1.0) {
    Tensor<double> t(Shape{n, 3});
    for (auto& v : t.v) v = rng.uniform(-extent, extent);
    return t;
}

} // namespace

TEST_CASE("farthest point sampling") {
    SECTION("collinear points pick the far end") {
        Tensor<double> pos(Shape{4, 3}, {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0});
        auto picks = farthest_point_sampling(pos, 2, 0);
        REQUIRE(picks == std::vector<std::uint32_t>{0, 3});
    }
    SECTION("m = N yields a permutation") {
        Rng rng(5);
        Tensor<double> pos = random_points(12, rng);
        auto picks = farthest_point_sampling(pos, 12, 3);
        std::vector<std::uint32_t> sorted = picks;
        std::sort(sorted.begin(), sorted.end());
        for (std::uint32_t i = 0; i < 12; ++i) REQUIRE(sorted[i] == i);
    }
    SECTION("m = 1 returns the seed") {
        Rng rng(6);
        Tensor<double> pos = random_points(5, rng);
        REQUIRE(farthest_point_sampling(pos, 1, 4) == std::vector<std::uint32_t>{4});
    }
    SECTION("m out of range") {
        Rng rng(7);
        Tensor<double> pos = random_points(5, rng);
        REQUIRE_THROWS_AS(farthest_point_sampling(pos, 6, 0), ConfigError);
        REQUIRE_THROWS_AS(farthest_point_sampling(pos, 0, 0), ConfigError);
    }
    SECTION("exhaustive oracle agreement for small clouds") {
        Rng rng(8);
        for (int trial = 0; trial < 25; ++trial) {
            const std::size_t n = 2 + rng.uniform_index(30);
            Tensor<double> pos = random_points(n, rng);
            const std::size_t m = 1 + rng.uniform_index(n);
            const std::size_t seed = rng.uniform_index(n);
            auto picks = farthest_point_sampling(pos, m, seed);
            REQUIRE(oracle::fps_is_valid(pos, picks, seed));
        }
    }
}

TEST_CASE("knn search") {
    SECTION("hand case") {
        Tensor<double> q(Shape{1, 3}, {0, 0, 0});
        Tensor<double> r(Shape{3, 3}, {1, 0, 0, 2, 0, 0, 3, 0, 0});
        auto nn = knn_search(q, r, 2);
        REQUIRE(nn.indices == std::vector<std::uint32_t>{0, 1});
        REQUIRE(nn.distances[0] == Catch::Approx(1.0));
        REQUIRE(nn.distances[1] == Catch::Approx(2.0));
    }
    SECTION("k = |refs| returns all, distance-sorted") {
        Rng rng(9);
        Tensor<double> q = random_points(4, rng);
        Tensor<double> r = random_points(6, rng);
        auto nn = knn_search(q, r, 6);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t c = 1; c < 6; ++c)
                REQUIRE(nn.distance(i, c) >= nn.distance(i, c - 1));
    }
    SECTION("equidistant refs list the lower index first") {
        Tensor<double> q(Shape{1, 3}, {0, 0, 0});
        Tensor<double> r(Shape{3, 3}, {0, 0, 5, 1, 0, 0, -1, 0, 0});
        auto nn = knn_search(q, r, 2);
        REQUIRE(nn.indices == std::vector<std::uint32_t>{1, 2});
    }
    SECTION("k too large rejected") {
        Rng rng(10);
        Tensor<double> q = random_points(2, rng);
        Tensor<double> r = random_points(3, rng);
        REQUIRE_THROWS_AS(knn_search(q, r, 4), ConfigError);
    }
    SECTION("matches the brute-force oracle exactly") {
        Rng rng(11);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t nq = 1 + rng.uniform_index(20);
            const std::size_t nr = 1 + rng.uniform_index(40);
            const std::size_t k = 1 + rng.uniform_index(nr);
            Tensor<double> q = random_points(nq, rng);
            Tensor<double> r = random_points(nr, rng);
            auto fast = knn_search(q, r, k);
            auto ref = oracle::knn(q, r, k);
            for (std::size_t i = 0; i < nq; ++i)
                for (std::size_t c = 0; c < k; ++c) {
                    REQUIRE(fast.index(i, c) == ref[i].indices[c]);
                    REQUIRE(fast.distance(i, c) == Catch::Approx(ref[i].distances[c]));
                }
        }
    }
}

TEST_CASE("idw interpolation") {
    SECTION("coincident query is dominated by its ref") {
        Tensor<double> refs(Shape{2, 3}, {0, 0, 0, 1, 1, 1});
        Tensor<double> vals(Shape{2, 2}, {5, -2, 100, 100});
        Tensor<double> q(Shape{1, 3}, {0, 0, 0});
        auto out = idw_interpolate(q, refs, vals, 2);
        REQUIRE(out.v[0] == Catch::Approx(5.0).margin(1e-6));
        REQUIRE(out.v[1] == Catch::Approx(-2.0).margin(1e-6));
    }
    SECTION("constant values reproduce exactly") {
        Rng rng(12);
        Tensor<double> refs = random_points(8, rng);
        Tensor<double> vals = Tensor<double>::full(Shape{8, 3}, 7.25);
        Tensor<double> q = random_points(5, rng);
        auto out = idw_interpolate(q, refs, vals, 3);
        for (double v : out.v) REQUIRE(v == Catch::Approx(7.25).epsilon(1e-12));
    }
    SECTION("midpoint averages") {
        Tensor<double> refs(Shape{2, 3}, {-1, 0, 0, 1, 0, 0});
        Tensor<double> vals(Shape{2, 1}, {0, 2});
        Tensor<double> q(Shape{1, 3}, {0, 0, 0});
        auto out = idw_interpolate(q, refs, vals, 2);
        REQUIRE(out.v[0] == Catch::Approx(1.0).epsilon(1e-9));
    }
    SECTION("empty refs rejected") {
        Tensor<double> refs(Shape{0, 3});
        Tensor<double> vals(Shape{0, 1});
        Tensor<double> q(Shape{1, 3}, {0, 0, 0});
        REQUIRE_THROWS_AS(idw_interpolate(q, refs, vals, 1), ConfigError);
    }
    SECTION("output lies in the per-dimension convex hull of neighbor values") {
        Rng rng(13);
        for (int trial = 0; trial < 10; ++trial) {
            Tensor<double> refs = random_points(10, rng);
            Tensor<double> vals(Shape{10, 3});
            for (auto& v : vals.v) v = rng.uniform(-4.0, 4.0);
            Tensor<double> q = random_points(6, rng);
            const std::size_t k = 3;
            auto nn = knn_search(q, refs, k);
            auto out = idw_interpolate(q, refs, vals, k);
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t d = 0; d < 3; ++d) {
                    double lo = 1e18, hi = -1e18;
                    for (std::size_t c = 0; c < k; ++c) {
                        lo = std::min(lo, vals.at2(nn.index(i, c), d));
                        hi = std::max(hi, vals.at2(nn.index(i, c), d));
                    }
                    REQUIRE(out.at2(i, d) >= lo - 1e-12);
                    REQUIRE(out.at2(i, d) <= hi + 1e-12);
                }
        }
    }
}

TEST_CASE("backward warping") {
    Rng rng(14);
    SECTION("zero flow is the identity bit-for-bit") {
        PointCloud<double> src(random_points(20, rng));
        PointCloud<double> tgt(random_points(15, rng));
        FlowField<double> flow = Tensor<double>::zeros(Shape{20, 3});
        auto warped = warp_target(tgt, src, flow, 3);
        REQUIRE(warped.positions.v == tgt.positions.v);
    }
    SECTION("constant flow with T = S + u recovers S") {
        PointCloud<double> src(random_points(16, rng));
        FlowField<double> flow(Shape{16, 3});
        const double u[3] = {0.3, -0.2, 0.5};
        for (std::size_t i = 0; i < 16; ++i)
            for (int a = 0; a < 3; ++a) flow.v[i * 3 + a] = u[a];
        Tensor<double> tpos = src.positions;
        for (std::size_t i = 0; i < 16; ++i)
            for (int a = 0; a < 3; ++a) tpos.v[i * 3 + a] += u[a];
        auto warped = warp_target(PointCloud<double>(tpos), src, flow, 3);
        for (std::size_t i = 0; i < warped.positions.v.size(); ++i)
            REQUIRE(warped.positions.v[i] ==
                    Catch::Approx(src.positions.v[i]).margin(1e-9));
    }
    SECTION("single source point shifts every target by -f") {
        PointCloud<double> src(Tensor<double>(Shape{1, 3}, {0.5, 0.5, 0.5}));
        FlowField<double> flow(Shape{1, 3}, {1.0, 2.0, 3.0});
        PointCloud<double> tgt(random_points(7, rng));
        auto warped = warp_target(tgt, src, flow, 3);
        for (std::size_t i = 0; i < 7; ++i)
            for (int a = 0; a < 3; ++a)
                REQUIRE(warped.positions.at2(i, a) ==
                        Catch::Approx(tgt.positions.at2(i, a) - flow.v[a]).epsilon(1e-12));
    }
}
