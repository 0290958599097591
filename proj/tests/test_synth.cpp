#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include "uniperc/synth.hpp"

using namespace uniperc;
namespace fs = std::filesystem;

namespace {

synth::SceneConfig small_config() {
    synth::SceneConfig c;
    c.width = 32;
    c.height = 24;
    c.static_boxes = 3;
    c.moving_boxes = 1;
    c.cam_speed = 0.2;
    c.wall_z = 12.0;
    return c;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("uniperc_synth_" + std::to_string(std::rand()) + std::to_string(std::rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.data == b.data;
}

}  // namespace

TEST_CASE("generated scenes pass their built-in consistency check") {
    auto cfg = small_config();
    for (std::uint64_t seed : {1ull, 7ull, 23ull}) {
        auto s = synth::generate_scene(seed, cfg);
        CHECK_NOTHROW(s.verify());
    }
}

TEST_CASE("scene generation is deterministic in the seed") {
    auto cfg = small_config();
    auto a = synth::generate_scene(5, cfg);
    auto b = synth::generate_scene(5, cfg);
    auto c = synth::generate_scene(6, cfg);
    CHECK(tensors_equal(a.frames[1], b.frames[1]));
    CHECK(tensors_equal(a.depths[1], b.depths[1]));
    CHECK(tensors_equal(a.semantic, b.semantic));
    CHECK_FALSE(tensors_equal(a.frames[1], c.frames[1]));
}

TEST_CASE("scene invariants: depth positivity, label ranges, pair structure") {
    auto s = synth::generate_scene(9, small_config());
    for (const auto& d : s.depths)
        for (double v : d.data) CHECK(v > 0);
    for (const auto& f : s.frames)
        for (double v : f.data) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    for (double v : s.semantic.data) {
        CHECK(v >= 0);
        CHECK(v < s.config.semantic_classes);
    }
    REQUIRE(s.pairs.size() == 2);
    CHECK(s.pairs[0].target == s.target_frame());
    CHECK(s.pairs[1].target == s.target_frame());
    CHECK(s.pairs[0].source + s.pairs[1].source == 2 * s.target_frame());
    // mask is binary and marks some pixels when a box moves
    double moving = 0;
    for (double v : s.pair(0).motion_mask.data) {
        CHECK((v == 0.0 || v == 1.0));
        moving += v;
    }
    CHECK(moving > 0);
}

TEST_CASE("flow identity holds exactly on ground truth") {
    auto s = synth::generate_scene(13, small_config());
    for (const auto& pr : s.pairs) {
        const int H = s.config.height, W = s.config.width;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    double fi = pr.motion_mask.at(0, y, x) *
                                (pr.flow_complete.at(c, y, x) - pr.flow_rigid.at(c, y, x));
                    CHECK(pr.flow_independent.at(c, y, x) == doctest::Approx(fi).epsilon(1e-12));
                    CHECK(pr.flow_final.at(c, y, x) ==
                          doctest::Approx(pr.flow_rigid.at(c, y, x) + fi).epsilon(1e-12));
                }
    }
}

TEST_CASE("static pixels have equal rigid and complete flow") {
    auto s = synth::generate_scene(17, small_config());
    const auto& pr = s.pair(0);
    for (int y = 0; y < s.config.height; ++y)
        for (int x = 0; x < s.config.width; ++x)
            if (pr.motion_mask.at(0, y, x) == 0.0)
                for (int c = 0; c < 3; ++c)
                    CHECK(pr.flow_complete.at(c, y, x) ==
                          doctest::Approx(pr.flow_rigid.at(c, y, x)).epsilon(1e-9));
}

TEST_CASE("ground plane is oriented toward the camera and explains ground pixels") {
    auto s = synth::generate_scene(21, small_config());
    CHECK(s.ground_plane.height({0, 0, 0}) > 0);
    // unproject ground-labeled pixels: they must sit on the plane
    const auto& K = s.intrinsics;
    int checked = 0;
    for (int y = 0; y < s.config.height && checked < 50; ++y)
        for (int x = 0; x < s.config.width && checked < 50; ++x)
            if (s.semantic.at(0, y, x) == 0.0) {  // class 0 = ground
                double z = s.depths[s.target_frame()].at(0, y, x);
                std::array<double, 3> p{(x - K.cx) / K.fx * z, (y - K.cy) / K.fy * z, z};
                CHECK(std::abs(s.ground_plane.height(p)) < 1e-6);
                ++checked;
            }
    CHECK(checked > 0);
}

TEST_CASE("build_triples centers each triple on its middle frame") {
    auto s = synth::generate_scene(25, small_config());
    auto triples = synth::build_triples(s.frames, s.intrinsics);
    REQUIRE(triples.size() == 1);  // 3 frames -> one triple
    CHECK(tensors_equal(triples[0].target, s.frames[1]));
    CHECK(tensors_equal(triples[0].source_prev, s.frames[0]));
    CHECK(tensors_equal(triples[0].source_next, s.frames[2]));
}

TEST_CASE("crop_bottom removes rows and keeps the principal point") {
    auto s = synth::generate_scene(29, small_config());
    auto crop = synth::crop_bottom({s.frames[1], s.depths[1]}, s.intrinsics, 0.25);
    int kept = s.config.height - static_cast<int>(s.config.height * 0.25);
    REQUIRE(crop.maps.size() == 2);
    CHECK(crop.maps[0].dim(1) == kept);
    CHECK(crop.intrinsics.height == kept);
    CHECK(crop.intrinsics.cx == s.intrinsics.cx);
    CHECK(crop.intrinsics.cy == s.intrinsics.cy);
    for (int y = 0; y < kept; ++y)
        for (int x = 0; x < s.config.width; ++x)
            CHECK(crop.maps[0].at(0, y, x) == s.frames[1].at(0, y, x));
}

TEST_CASE("steering dataset shape and determinism") {
    auto cfg = small_config();
    auto seqs = synth::make_steering_dataset(3, 12, cfg, 15.0);
    REQUIRE(seqs.size() == 12);
    for (const auto& sq : seqs) {
        CHECK(sq.frames.size() == 16);
        CHECK(std::abs(sq.angle_deg) <= 15.0);
        for (const auto& f : sq.frames) {
            CHECK(f.dim(1) == cfg.height);
            CHECK(f.dim(2) == cfg.width);
        }
    }
    // angles are not all identical
    bool varied = false;
    for (const auto& sq : seqs) varied = varied || sq.angle_deg != seqs[0].angle_deg;
    CHECK(varied);

    auto seqs2 = synth::make_steering_dataset(3, 12, cfg, 15.0);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        CHECK(seqs[i].angle_deg == seqs2[i].angle_deg);
        CHECK(tensors_equal(seqs[i].frames[7], seqs2[i].frames[7]));
    }
}

TEST_CASE("scene save/load round-trip preserves ground truth") {
    TempDir tmp;
    auto s = synth::generate_scene(31, small_config());
    synth::save_scene(tmp.path / "scene_a", s);
    auto r = synth::load_scene(tmp.path / "scene_a");

    CHECK(r.seed == s.seed);
    CHECK(r.intrinsics.fx == s.intrinsics.fx);
    CHECK(r.config.width == s.config.width);
    REQUIRE(r.frames.size() == s.frames.size());
    for (std::size_t t = 0; t < s.frames.size(); ++t) {
        // images pass through 8-bit png quantization: half a level of error
        for (std::int64_t i = 0; i < s.frames[t].numel(); ++i)
            CHECK(std::abs(r.frames[t][i] - s.frames[t][i]) <= 0.5 / 255.0 + 1e-12);
        CHECK(tensors_equal(r.depths[t], s.depths[t]));
    }
    CHECK(tensors_equal(r.semantic, s.semantic));
    CHECK(tensors_equal(r.instance, s.instance));
    REQUIRE(r.pairs.size() == s.pairs.size());
    for (std::size_t i = 0; i < s.pairs.size(); ++i) {
        CHECK(tensors_equal(r.pairs[i].flow_final, s.pairs[i].flow_final));
        CHECK(tensors_equal(r.pairs[i].motion_mask, s.pairs[i].motion_mask));
        CHECK(r.pairs[i].pose_t_to_s.rotation == s.pairs[i].pose_t_to_s.rotation);
        CHECK(r.pairs[i].pose_t_to_s.translation == s.pairs[i].pose_t_to_s.translation);
    }
    CHECK(r.ground_plane.normal == s.ground_plane.normal);
    CHECK_NOTHROW(r.verify(35.0));
}

TEST_CASE("manifest round-trip") {
    TempDir tmp;
    synth::DatasetManifest m;
    m.train_scenes = {"scene_0000", "scene_0001"};
    m.val_scenes = {"scene_0002"};
    synth::save_manifest(tmp.path, m, {{"seed", 5}});
    auto r = synth::load_manifest(tmp.path);
    CHECK(r.train_scenes == m.train_scenes);
    CHECK(r.val_scenes == m.val_scenes);
}

TEST_CASE("value noise is deterministic, bounded and seed-dependent") {
    double a = synth::value_noise(0.3, 1.7, 2.9, 11);
    CHECK(a == synth::value_noise(0.3, 1.7, 2.9, 11));
    CHECK(a != synth::value_noise(0.3, 1.7, 2.9, 12));
    for (int i = 0; i < 200; ++i) {
        double v = synth::value_noise(0.13 * i, 0.31 * i, 0.07 * i, 3);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("config validation rejects degenerate settings") {
    auto cfg = small_config();
    cfg.width = 0;
    CHECK_THROWS(cfg.validate());
    cfg = small_config();
    cfg.static_boxes = -1;
    CHECK_THROWS(cfg.validate());
    cfg = small_config();
    cfg.semantic_classes = 2;
    CHECK_THROWS(cfg.validate());
}
