#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ogflow/datagen.hpp"
#include "ogflow/random.hpp"

using namespace ogflow;

namespace {

PointCloud<float> random_cloud(std::size_t n, std::uint64_t seed, double extent = 1.0) {
    Rng rng(seed);
    Tensor<float> pos(Shape{n, 3});
    for (auto& v : pos.v) v = static_cast<float>(rng.uniform(-extent, extent));
    return PointCloud<float>(std::move(pos));
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("make_synthetic_pair bookkeeping") {
    SECTION("no centers removes nothing") {
        auto src = random_cloud(50, 1);
        SyntheticPairSpec spec;
        spec.num_centers = 0;
        spec.rng_seed = 3;
        auto pair = make_synthetic_pair(src, spec);
        REQUIRE(pair.target.size() == 50);
        for (float o : pair.gt_occlusion->v) REQUIRE(o == 1.0f);
    }
    SECTION("translation magnitude is 2 meters by default") {
        auto src = random_cloud(40, 2);
        SyntheticPairSpec spec;
        spec.rng_seed = 9;
        auto pair = make_synthetic_pair(src, spec);
        for (std::size_t i = 0; i < 40; ++i) {
            double n2 = 0.0;
            for (int a = 0; a < 3; ++a) {
                const double f = pair.gt_flow->at2(i, a);
                n2 += f * f;
            }
            REQUIRE(std::sqrt(n2) == Catch::Approx(2.0).margin(1e-6));
        }
    }
    SECTION("size accounting: |T~| + #zeros = N; zero set equals removed set") {
        auto src = random_cloud(100, 4);
        SyntheticPairSpec spec;
        spec.num_centers = 4;
        spec.removal_fraction = 0.025; // ceil(2.5) = 3 per center
        bool saw_disjoint_case = false;
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            spec.rng_seed = seed;
            auto pair = make_synthetic_pair(src, spec);
            std::size_t zeros = 0;
            for (float o : pair.gt_occlusion->v)
                if (o == 0.0f) ++zeros;
            REQUIRE(pair.target.size() + zeros == 100);
            if (zeros == 12) saw_disjoint_case = true; // 4 centers x 3, disjoint

            // Surviving translated points appear verbatim in T~, in order.
            std::size_t w = 0;
            for (std::size_t i = 0; i < 100; ++i) {
                if (pair.gt_occlusion->v[i] == 0.0f) continue;
                for (int a = 0; a < 3; ++a)
                    REQUIRE(pair.target.positions.at2(w, a) ==
                            src.positions.at2(i, a) + pair.gt_flow->at2(i, a));
                ++w;
            }
            REQUIRE(w == pair.target.size());
        }
        REQUIRE(saw_disjoint_case);
    }
    SECTION("degenerate spec rejected") {
        auto src = random_cloud(10, 5);
        SyntheticPairSpec spec;
        spec.removal_fraction = 0.3; // 4 centers x 0.3 >= 1.0
        REQUIRE_THROWS_AS(make_synthetic_pair(src, spec), ConfigError);
    }
}

TEST_CASE("gen_scene ground truth") {
    SECTION("zero motion keeps everything") {
        SceneSpec spec;
        spec.num_points = 64;
        spec.motion_scale = 0.0;
        auto pair = gen_scene<float>(spec, 7);
        REQUIRE(pair.target.size() == 64);
        REQUIRE(pair.target.positions.v == pair.source.positions.v);
        for (float f : pair.gt_flow->v) REQUIRE(f == 0.0f);
        for (float o : pair.gt_occlusion->v) REQUIRE(o == 1.0f);
    }
    SECTION("seeded generation is bit-identical") {
        SceneSpec spec;
        spec.num_points = 128;
        auto a = gen_scene<float>(spec, 123);
        auto b = gen_scene<float>(spec, 123);
        REQUIRE(a.source.positions.v == b.source.positions.v);
        REQUIRE(a.target.positions.v == b.target.positions.v);
        REQUIRE(a.gt_flow->v == b.gt_flow->v);
        REQUIRE(a.gt_occlusion->v == b.gt_occlusion->v);
    }
    SECTION("non-occluded moved points stay inside the viewing box") {
        SceneSpec spec;
        spec.num_points = 200;
        spec.min_occlusion_fraction = 0.1;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto pair = gen_scene<float>(spec, seed);
            std::size_t occluded = 0;
            for (std::size_t i = 0; i < 200; ++i) {
                if (pair.gt_occlusion->v[i] == 0.0f) {
                    ++occluded;
                    continue;
                }
                for (int a = 0; a < 3; ++a) {
                    const double moved =
                        pair.source.positions.at2(i, a) + pair.gt_flow->at2(i, a);
                    REQUIRE(std::abs(moved) <= spec.box_half_extent + 1e-6);
                }
            }
            REQUIRE(occluded >= 20); // requested >= 10%
            REQUIRE(pair.target.size() == 200 - occluded);
        }
    }
}

TEST_CASE("OGF1 round trip") {
    SceneSpec spec;
    spec.num_points = 90;
    spec.min_occlusion_fraction = 0.05;
    auto pair = gen_scene<float>(spec, 31);
    const std::string path = temp_path("ogflow_test_pair.ogf1");

    SECTION("write-read is the identity, bit for bit") {
        write_pair(pair, path);
        auto rt = read_pair(path);
        REQUIRE(rt.source.positions.v == pair.source.positions.v);
        REQUIRE(rt.target.positions.v == pair.target.positions.v);
        REQUIRE(rt.gt_flow.has_value());
        REQUIRE(rt.gt_flow->v == pair.gt_flow->v);
        REQUIRE(rt.gt_occlusion->v == pair.gt_occlusion->v);
    }
    SECTION("file starts with magic and version 1") {
        write_pair(pair, path);
        std::ifstream f(path, std::ios::binary);
        char head[8];
        f.read(head, 8);
        REQUIRE(std::string(head, 4) == "OGF1");
        REQUIRE(static_cast<unsigned char>(head[4]) == 1);
    }
    SECTION("pairs without ground truth round trip too") {
        ScenePair<float> bare;
        bare.source = pair.source;
        bare.target = pair.target;
        write_pair(bare, path);
        auto rt = read_pair(path);
        REQUIRE_FALSE(rt.gt_flow.has_value());
        REQUIRE_FALSE(rt.gt_occlusion.has_value());
        REQUIRE(rt.source.positions.v == pair.source.positions.v);
    }
    SECTION("bad magic") {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << "NOPEnope";
        f.close();
        REQUIRE_THROWS_AS(read_pair(path), BadMagicError);
    }
    SECTION("truncated flow block") {
        write_pair(pair, path);
        const auto full = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, full - pair.source.size() * 3 * 2); // chop into flow
        REQUIRE_THROWS_AS(read_pair(path), TruncatedFileError);
    }
    SECTION("trailing garbage is an inconsistency") {
        write_pair(pair, path);
        std::ofstream f(path, std::ios::binary | std::ios::app);
        f << "x";
        f.close();
        REQUIRE_THROWS_AS(read_pair(path), InconsistentFileError);
    }
    std::remove(path.c_str());
}
