#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "uniperc/train.hpp"

using namespace uniperc;

namespace {

synth::SceneConfig tiny_scene_config() {
    synth::SceneConfig sc;
    sc.width = 32;
    sc.height = 32;
    sc.static_boxes = 3;
    sc.cam_speed = 0.3;
    sc.wall_z = 8.0;
    return sc;
}

nets::NetConfig tiny_net_config() {
    nets::NetConfig nc;
    nc.width = 32;
    nc.height = 32;
    nc.d_min = 0.05;
    nc.d_max = 20.0;
    return nc;
}

std::vector<synth::SyntheticScene> tiny_scenes(int n, std::uint64_t seed0 = 500,
                                               int moving = 0) {
    synth::SceneConfig sc = tiny_scene_config();
    sc.moving_boxes = moving;
    std::vector<synth::SyntheticScene> out;
    for (int i = 0; i < n; ++i) out.push_back(synth::generate_scene(seed0 + i, sc));
    return out;
}

train::TrainConfig tiny_train_config(std::vector<train::Stage> stages) {
    train::TrainConfig cfg;
    cfg.seed = 11;
    cfg.net = tiny_net_config();
    cfg.schedule.stages = std::move(stages);
    cfg.schedule.scale = 1.0;
    return cfg;
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() / ("uniperc_test_" + tag);
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("batch composer covers every item once per epoch") {
    train::BatchComposer comp(7, 42);
    std::map<int, int> counts;
    for (int step = 0; step < 7; ++step)
        for (int i : comp.next(3)) ++counts[i];
    // 21 draws = 3 epochs of 7
    REQUIRE(counts.size() == 7);
    for (const auto& [idx, c] : counts) {
        CHECK(idx >= 0);
        CHECK(idx < 7);
        CHECK(c == 3);
    }
}

TEST_CASE("batch composer is seed-deterministic") {
    train::BatchComposer a(9, 3), b(9, 3), c(9, 4);
    std::vector<int> da, db, dc;
    for (int i = 0; i < 5; ++i) {
        auto xa = a.next(4), xb = b.next(4), xc = c.next(4);
        da.insert(da.end(), xa.begin(), xa.end());
        db.insert(db.end(), xb.begin(), xb.end());
        dc.insert(dc.end(), xc.begin(), xc.end());
    }
    CHECK(da == db);
    CHECK(da != dc);
}

TEST_CASE("fold plan is disjoint, covering and deterministic") {
    auto plan = train::FoldPlan::make(25, 10, 77);
    REQUIRE(plan.test_indices.size() == 10);
    std::set<int> seen;
    for (const auto& fold : plan.test_indices) {
        CHECK(fold.size() >= 2);
        CHECK(fold.size() <= 3);
        for (int i : fold) CHECK(seen.insert(i).second);  // disjoint
    }
    CHECK(seen.size() == 25);  // covering

    auto plan2 = train::FoldPlan::make(25, 10, 77);
    CHECK(plan.test_indices == plan2.test_indices);

    auto train_idx = plan.train_indices(3);
    CHECK(train_idx.size() == 25 - plan.test_indices[3].size());
    for (int i : plan.test_indices[3])
        CHECK(std::find(train_idx.begin(), train_idx.end(), i) == train_idx.end());

    CHECK_THROWS(train::FoldPlan::make(5, 10, 1));
}

TEST_CASE("stage schedule defaults and scaling") {
    auto s = train::StageSchedule::student_default();
    REQUIRE(s.stages.size() == 4);
    CHECK(s.stages[0].steps == 60000);
    CHECK(s.stages[1].steps == 40000);
    CHECK(s.stages[2].steps == 40000);
    CHECK(s.stages[3].steps == 250000);
    CHECK(s.stages[1].components == std::vector<std::string>{"flow"});
    CHECK(s.scale == doctest::Approx(0.01));
    CHECK(s.scaled_steps(0) == 600);
    CHECK(s.scaled_steps(3) == 2500);
    s.scale = 1e-7;
    CHECK(s.scaled_steps(0) == 1);  // never rounds to zero

    auto t = train::StageSchedule::teacher_default();
    REQUIRE(t.stages.size() == 3);
    // every stage must name valid components for its network
    for (const auto& st : s.stages) nets::Model::component_prefixes(st.components);
    for (const auto& st : t.stages) nets::Teacher::component_prefixes(st.components);
}

TEST_CASE("train config json round-trip") {
    train::TrainConfig cfg = tiny_train_config({{{"encoder", "depth", "pose"}, 3}});
    cfg.seed = 99;
    cfg.lr = 3e-4;
    cfg.use_seg = false;
    cfg.batch_triples = 2;
    auto j = cfg.to_json();
    auto back = train::TrainConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.seed == 99);
    CHECK(back.lr == doctest::Approx(3e-4));
    CHECK_FALSE(back.use_seg);
    CHECK(back.schedule.stages.size() == 1);

    train::TrainConfig bad = cfg;
    bad.batch_triples = 0;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.photometric_scales = 5;
    CHECK_THROWS(bad.validate());
    bad = cfg;
    bad.schedule.stages.clear();
    CHECK_THROWS(bad.validate());
}

TEST_CASE("stagewise freezing is exact across checkpoints") {
    auto scenes = tiny_scenes(2);
    TempDir dir("freeze");
    train::TrainConfig cfg = tiny_train_config(
        {{{"encoder", "depth", "pose"}, 2}, {{"flow"}, 2}, {{"mask"}, 2}});
    train::train_student(scenes, cfg, nullptr, dir.path);

    auto m1 = nets::Model::load(dir.path / "checkpoints" / "stage1.ckpt");
    auto m2 = nets::Model::load(dir.path / "checkpoints" / "stage2.ckpt");
    auto m3 = nets::Model::load(dir.path / "checkpoints" / "stage3.ckpt");

    // stage 2 trains only the flow decoder: everything else is bit-frozen
    for (const auto& c : {"encoder", "depth", "pose", "mask", "seg", "steering"})
        CHECK(train::component_checksum(m1, {c}) == train::component_checksum(m2, {c}));
    CHECK(train::component_checksum(m1, {"flow"}) != train::component_checksum(m2, {"flow"}));

    // stage 3 trains only the mask decoder
    for (const auto& c : {"encoder", "depth", "pose", "flow", "seg", "steering"})
        CHECK(train::component_checksum(m2, {c}) == train::component_checksum(m3, {c}));
    CHECK(train::component_checksum(m2, {"mask"}) != train::component_checksum(m3, {"mask"}));

    CHECK(std::filesystem::exists(dir.path / "logs" / "steps.jsonl"));
}

TEST_CASE("training is seed-deterministic") {
    auto scenes = tiny_scenes(2);
    train::TrainConfig cfg = tiny_train_config({{{"encoder", "depth", "pose", "seg"}, 2}});
    auto a = train::train_student(scenes, cfg, nullptr);
    auto b = train::train_student(scenes, cfg, nullptr);
    CHECK(nn::checksum_all(a.reg) == nn::checksum_all(b.reg));

    cfg.seed = 12;
    auto c = train::train_student(scenes, cfg, nullptr);
    CHECK(nn::checksum_all(a.reg) != nn::checksum_all(c.reg));
}

TEST_CASE("zero distillation weight reproduces the teacher-free run exactly") {
    auto scenes = tiny_scenes(2, 900, 1);
    train::TrainConfig cfg = tiny_train_config({{{"flow", "mask"}, 2}});
    nets::Teacher teacher(cfg.net, 321);

    auto without = train::train_student(scenes, cfg, nullptr);
    cfg.weights.lambda3 = 0.0;
    auto with_zero = train::train_student(scenes, cfg, &teacher);
    CHECK(nn::checksum_all(without.reg) == nn::checksum_all(with_zero.reg));

    // a real distillation weight must change the outcome
    cfg.weights.lambda3 = 1.0;
    auto with_kd = train::train_student(scenes, cfg, &teacher);
    CHECK(nn::checksum_all(without.reg) != nn::checksum_all(with_kd.reg));
}

TEST_CASE("teacher weights stay fixed while distilling into the student") {
    auto scenes = tiny_scenes(2, 900, 1);
    train::TrainConfig cfg = tiny_train_config({{{"encoder", "flow", "mask"}, 2}});
    nets::Teacher teacher(cfg.net, 321);
    std::uint64_t before = nn::checksum_all(teacher.reg);
    train::train_student(scenes, cfg, &teacher);
    CHECK(nn::checksum_all(teacher.reg) == before);
}

TEST_CASE("teacher training writes its checkpoint and round-trips") {
    auto scenes = tiny_scenes(2);
    TempDir dir("teacher");
    train::TrainConfig cfg = tiny_train_config({{{"enc_depth_seg", "depth", "seg"}, 1},
                                                {{"enc_flow", "flow"}, 1}});
    auto teacher = train::train_teacher(scenes, cfg, dir.path);
    REQUIRE(std::filesystem::exists(dir.path / "teacher.ckpt"));
    auto loaded = nets::Teacher::load(dir.path / "teacher.ckpt");
    CHECK(nn::checksum_all(loaded.reg) == nn::checksum_all(teacher.reg));
}

TEST_CASE("scene validation rejects mismatched inputs") {
    auto scenes = tiny_scenes(1);
    train::TrainConfig cfg = tiny_train_config({{{"encoder", "depth", "pose"}, 1}});
    cfg.net.width = 64;  // scenes are 32 wide
    CHECK_THROWS(train::train_student(scenes, cfg, nullptr));
    CHECK_THROWS(train::train_student({}, tiny_train_config({{{"depth"}, 1}}), nullptr));
}

TEST_CASE("depth and segmentation evaluation produce sane metrics") {
    auto scenes = tiny_scenes(2);
    nets::Model model(tiny_net_config(), 5);
    auto dm = train::evaluate_depth(model, scenes, true);
    CHECK(dm.median_scaled);
    CHECK(dm.abs_rel > 0);
    CHECK(std::isfinite(dm.rmse_log));
    CHECK(dm.d1 >= 0);
    CHECK(dm.d1 <= 1);

    for (const auto& task : {"semantic", "instance", "panoptic"}) {
        auto sm = train::evaluate_seg(model, scenes, task);
        CHECK(sm.iou >= 0);
        CHECK(sm.iou <= 1);
        CHECK(sm.pq >= 0);
        CHECK(sm.pq <= 1);
        CHECK(sm.task == task);
    }
}

TEST_CASE("steering constant baseline matches a hand computation") {
    synth::SceneConfig sc = tiny_scene_config();
    auto seqs = synth::make_steering_dataset(4, 10, sc);
    REQUIRE(seqs.size() == 10);

    train::FoldPlan plan;
    for (int f = 0; f < 10; ++f) plan.test_indices.push_back({f});
    auto report = train::steering_constant_baseline(seqs, plan);

    // fold 0: prediction is the mean angle of sequences 1..9
    double mean = 0;
    for (int i = 1; i < 10; ++i) mean += seqs[i].angle_deg;
    mean /= 9.0;
    double test_mse = (seqs[0].angle_deg - mean) * (seqs[0].angle_deg - mean);
    CHECK(report.fold_test[0] == doctest::Approx(test_mse));
    double train_mse = 0;
    for (int i = 1; i < 10; ++i)
        train_mse += (seqs[i].angle_deg - mean) * (seqs[i].angle_deg - mean);
    CHECK(report.fold_train[0] == doctest::Approx(train_mse / 9.0));
}

TEST_CASE("frozen steering fine-tune keeps the perception weights bit-exact") {
    synth::SceneConfig sc = tiny_scene_config();
    auto seqs = synth::make_steering_dataset(4, 10, sc);
    nets::Model model(tiny_net_config(), 5);
    std::uint64_t pretrained_sum = train::component_checksum(
        model, {"encoder", "depth", "pose", "flow", "mask", "seg"});

    auto plan = train::FoldPlan::make(static_cast<int>(seqs.size()), 10, 8);
    train::SteeringOptions opt;
    opt.steps = 3;
    opt.batch = 2;
    auto res = train::finetune_steering(model, seqs, plan, opt, 17);

    REQUIRE(res.frozen_before.size() == 10);
    REQUIRE(res.frozen_after.size() == 10);
    for (std::size_t f = 0; f < 10; ++f) {
        CHECK(res.frozen_before[f] == pretrained_sum);
        CHECK(res.frozen_after[f] == pretrained_sum);
    }
    CHECK(res.report.fold_test.size() == 10);
    for (double v : res.report.fold_test) CHECK(std::isfinite(v));

    // unfrozen fine-tuning must actually move the encoder
    opt.freeze_encoder = false;
    opt.steps = 2;
    auto res2 = train::finetune_steering(model, seqs, plan, opt, 17);
    for (std::size_t f = 0; f < 10; ++f)
        CHECK(res2.frozen_before[f] != res2.frozen_after[f]);
}
