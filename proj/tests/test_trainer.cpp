#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ogflow/datagen.hpp"
#include "ogflow/trainer.hpp"

using namespace ogflow;

namespace {

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

std::vector<ScenePair<float>> tiny_dataset(std::size_t count, std::size_t points,
                                           std::uint64_t seed, double motion = 0.3) {
    SceneSpec spec;
    spec.num_points = points;
    spec.motion_scale = motion;
    spec.box_half_extent = 1.0;
    std::vector<ScenePair<float>> out;
    for (std::size_t i = 0; i < count; ++i)
        out.push_back(gen_scene<float>(spec, derive_seed(seed, 0xDA7A, i)));
    return out;
}

LossWeights<float> tiny_weights() {
    LossWeights<float> w;
    w.alpha = {0.02f, 0.04f};
    return w;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("learning-rate schedule") {
    TrainConfig cfg;
    REQUIRE(lr_at(0, cfg) == Catch::Approx(0.001));
    REQUIRE(lr_at(10, cfg) == Catch::Approx(0.00085));
    REQUIRE(lr_at(25, cfg) == Catch::Approx(0.001 * 0.85 * 0.85));
}

TEST_CASE("lambda_reg schedule") {
    TrainConfig cfg;
    cfg.epochs = 100; // ramp window [33, 47]
    REQUIRE(lambda_reg_at(0, cfg) == 3.0);
    REQUIRE(lambda_reg_at(20, cfg) == 3.0);
    REQUIRE(lambda_reg_at(60, cfg) == 1.0);
    REQUIRE(lambda_reg_at(40, cfg) == Catch::Approx(2.0));
}

TEST_CASE("adam step") {
    ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;

    SECTION("zero gradient leaves parameters unchanged") {
        auto params = ModelParams<float>::init(mcfg, 1);
        auto adam = AdamState<float>::init(params);
        std::vector<float> before = params.entries()[0].value.data().v;
        params.zero_grads();
        adam_step(params, adam, 1e-3, tcfg);
        REQUIRE(params.entries()[0].value.data().v == before);
    }
    SECTION("first step with unit gradient moves by about -lr") {
        auto params = ModelParams<float>::init(mcfg, 2);
        auto adam = AdamState<float>::init(params);
        auto& p0 = params.entries()[0].value;
        const float before = p0.data().v[0];
        auto& g = p0.ensure_grad();
        g.v[0] = 1.0f;
        adam_step(params, adam, 1e-3, tcfg);
        REQUIRE(p0.data().v[0] == Catch::Approx(before - 1e-3).margin(1e-9));
    }
    SECTION("NaN gradient is a poisoned-gradient error") {
        auto params = ModelParams<float>::init(mcfg, 3);
        auto adam = AdamState<float>::init(params);
        params.entries()[0].value.ensure_grad().v[0] =
            std::numeric_limits<float>::quiet_NaN();
        REQUIRE_THROWS_AS(adam_step(params, adam, 1e-3, tcfg), PoisonedGradientError);
    }
}

TEST_CASE("supervised training smoke and determinism") {
    auto data = tiny_dataset(8, 32, 99);
    auto val = tiny_dataset(2, 32, 100);
    TrainConfig tcfg;
    tcfg.epochs = 2;
    tcfg.batch_size = 2;
    tcfg.rng_seed = 5;

    auto run_once = [&]() {
        TrainSession<float> s(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        s.set_data(&data, &val);
        s.run();
        return s;
    };
    auto a = run_once();
    auto b = run_once();

    SECTION("losses are finite and recorded") {
        REQUIRE(a.step_losses().size() == static_cast<std::size_t>(a.total_steps()));
        for (double l : a.step_losses()) REQUIRE(std::isfinite(l));
        REQUIRE_FALSE(a.epoch_stats().empty());
        REQUIRE(a.epoch_stats().back().has_val);
    }
    SECTION("identical seeds give bit-identical parameters and traces") {
        REQUIRE(a.step_losses() == b.step_losses());
        for (std::size_t p = 0; p < a.params().entries().size(); ++p)
            REQUIRE(a.params().entries()[p].value.data().v ==
                    b.params().entries()[p].value.data().v);
    }
    SECTION("missing ground truth rejected") {
        std::vector<ScenePair<float>> bare = data;
        bare[0].gt_flow.reset();
        TrainSession<float> s(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        REQUIRE_THROWS_AS(s.set_data(&bare, nullptr), ConfigError);
    }
}

TEST_CASE("self-supervised training never breaks the stop-gradient rule") {
    auto data = tiny_dataset(4, 24, 42);
    TrainConfig tcfg;
    tcfg.epochs = 1;
    tcfg.batch_size = 2;
    tcfg.max_steps = 3;
    tcfg.rng_seed = 7;
    SyntheticPairSpec synth;
    synth.translation_magnitude = 1.0;
    synth.num_centers = 2;
    synth.removal_fraction = 0.05;

    TrainSession<float> s(TrainMode::self_supervised, tiny_config(), tcfg, tiny_weights(), synth);
    s.set_data(&data, nullptr);
    s.set_check_stop_gradient(true); // throws on violation
    s.run();
    REQUIRE(s.step() == 3);
    for (double l : s.step_losses()) REQUIRE(std::isfinite(l));
}

TEST_CASE("swapped inputs give the occlusion mask aligned with the target pyramid") {
    auto data = tiny_dataset(1, 24, 17);
    const auto& pair = data[0];
    ModelConfig cfg = tiny_config();
    auto params = ModelParams<float>::init(cfg, 4);
    auto fwd = model_forward(pair.source, pair.target, params, cfg);
    auto bwd = model_forward(pair.target, pair.source, params, cfg);
    // The backward pass's source pyramid samples the target cloud with the
    // same seed, so the masks line up point-for-point with T^l.
    for (int l = 0; l < cfg.levels; ++l) {
        REQUIRE(bwd.source.levels[l].positions.v == fwd.target.levels[l].positions.v);
        REQUIRE(bwd.source.levels[l].sample_indices == fwd.target.levels[l].sample_indices);
        REQUIRE(bwd.at_level(l).occlusion.shape() ==
                Shape{fwd.target.levels[l].size(), 1});
    }
}

TEST_CASE("checkpoint round trip and resume") {
    auto data = tiny_dataset(6, 32, 55);
    TrainConfig tcfg;
    tcfg.epochs = 4;
    tcfg.batch_size = 2;
    tcfg.max_steps = 6;
    tcfg.rng_seed = 11;
    const std::string path_a = temp_path("ogflow_ck_a.ogck");
    const std::string path_b = temp_path("ogflow_ck_b.ogck");
    const std::string path_c = temp_path("ogflow_ck_c.ogck");

    SECTION("save -> load -> save produces identical bytes") {
        TrainSession<float> s(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        s.set_data(&data, nullptr);
        for (int i = 0; i < 3; ++i) s.step_once();
        s.save(path_a);
        TrainSession<float> t(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        t.set_data(&data, nullptr);
        t.load(path_a);
        t.save(path_b);
        REQUIRE(file_bytes(path_a) == file_bytes(path_b));
    }
    SECTION("resume-at-step equals the straight-through run") {
        TrainSession<float> full(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        full.set_data(&data, nullptr);
        full.run();
        full.save(path_a);

        TrainSession<float> half(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        half.set_data(&data, nullptr);
        for (int i = 0; i < 3; ++i) half.step_once();
        half.save(path_b);

        TrainSession<float> resumed(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        resumed.set_data(&data, nullptr);
        resumed.load(path_b);
        resumed.run();
        resumed.save(path_c);
        REQUIRE(file_bytes(path_a) == file_bytes(path_c));
    }
    SECTION("mismatched model config rejected") {
        TrainSession<float> s(TrainMode::supervised, tiny_config(), tcfg, tiny_weights());
        s.set_data(&data, nullptr);
        s.save(path_a);
        ModelConfig other = tiny_config();
        other.k1 = 6;
        TrainSession<float> t(TrainMode::supervised, other, tcfg, tiny_weights());
        t.set_data(&data, nullptr);
        REQUIRE_THROWS_AS(t.load(path_a), ConfigError);
    }
    std::remove(path_a.c_str());
    std::remove(path_b.c_str());
    std::remove(path_c.c_str());
}
