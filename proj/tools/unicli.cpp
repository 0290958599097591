// unicli: dataset generation, training, distillation and evaluation driver
// for the unified multi-task perception encoder.
//
// exit codes: 0 success, 1 runtime failure, 2 usage error

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "uniperc/gradcheck.hpp"
#include "uniperc/train.hpp"

using namespace uniperc;

namespace {

std::string zero_pad(int v, int width) {
    std::string s = std::to_string(v);
    while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
    return s;
}

nlohmann::json scene_config_json(const synth::SceneConfig& c) {
    return {{"width", c.width},
            {"height", c.height},
            {"frames", c.frames},
            {"static_boxes", c.static_boxes},
            {"moving_boxes", c.moving_boxes},
            {"motion_amplitude", c.motion_amplitude},
            {"cam_speed", c.cam_speed},
            {"cam_yaw_rate", c.cam_yaw_rate},
            {"ground_y", c.ground_y},
            {"wall_z", c.wall_z},
            {"texture_freq", c.texture_freq},
            {"semantic_classes", c.semantic_classes}};
}

synth::SceneConfig scene_config_from_json(const nlohmann::json& j) {
    synth::SceneConfig c;
    auto opt = [&](const char* k, auto& out) {
        if (j.contains(k)) out = j.at(k).get<std::decay_t<decltype(out)>>();
    };
    opt("width", c.width);
    opt("height", c.height);
    opt("frames", c.frames);
    opt("static_boxes", c.static_boxes);
    opt("moving_boxes", c.moving_boxes);
    opt("motion_amplitude", c.motion_amplitude);
    opt("cam_speed", c.cam_speed);
    opt("cam_yaw_rate", c.cam_yaw_rate);
    opt("ground_y", c.ground_y);
    opt("wall_z", c.wall_z);
    opt("texture_freq", c.texture_freq);
    opt("semantic_classes", c.semantic_classes);
    return c;
}

struct Dataset {
    std::vector<synth::SyntheticScene> train, val;
    synth::SceneConfig scene_config;
};

Dataset load_dataset(const std::filesystem::path& root) {
    synth::DatasetManifest man = synth::load_manifest(root);
    Dataset ds;
    for (const auto& id : man.train_scenes)
        ds.train.push_back(synth::load_scene(root / "scenes" / id));
    for (const auto& id : man.val_scenes)
        ds.val.push_back(synth::load_scene(root / "scenes" / id));
    if (ds.train.empty()) throw std::runtime_error("dataset has no training scenes");
    ds.scene_config = ds.train.front().config;
    return ds;
}

std::uint64_t env_seed_default() {
    if (const char* env = std::getenv("UNIPERC_SEED"))
        return std::strtoull(env, nullptr, 10);
    return 0;
}

nlohmann::json read_json_file(const std::filesystem::path& p) {
    std::ifstream is(p);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    return nlohmann::json::parse(is);
}

void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << "\n";
}

// --- gen-data ---

int cmd_gen_data(const std::string& out, int n_train, int n_val, std::uint64_t seed,
                 const synth::SceneConfig& sc, bool verify) {
    std::filesystem::path root(out);
    synth::DatasetManifest man;
    for (int i = 0; i < n_train + n_val; ++i) {
        std::string id = "scene_" + zero_pad(i, 4);
        synth::SyntheticScene scene =
            synth::generate_scene(train::derive_seed(seed, static_cast<std::uint64_t>(i)), sc);
        if (verify) scene.verify();
        synth::save_scene(root / "scenes" / id, scene);
        (i < n_train ? man.train_scenes : man.val_scenes).push_back(id);
    }
    nlohmann::json extra = {{"seed", seed}, {"scene_config", scene_config_json(sc)}};
    synth::save_manifest(root, man, extra);
    std::cout << "wrote " << n_train << " train + " << n_val << " val scenes to " << out
              << "\n";
    return 0;
}

// --- train / distill ---

struct TrainCli {
    std::string data, run, config, teacher;
    std::uint64_t seed = 0;
    double scale = -1, lr = -1, d_min = -1, d_max = -1;
    int stages = -1, batch_triples = -1, batch_supervised = -1, photometric_scales = -1;
    long steering_steps = -1;
    bool no_seg = false, no_flow_mask = false, no_ground = false, no_distill = false;
    bool naive_pose = false;
    bool seed_given = false, data_given = false;
};

train::TrainConfig resolve_train_config(const TrainCli& o, nlohmann::json* stored,
                                        bool teacher_mode) {
    train::TrainConfig cfg;
    if (!teacher_mode) cfg.schedule = train::StageSchedule::student_default();
    else cfg.schedule = train::StageSchedule::teacher_default();

    std::string data = o.data, teacher = o.teacher;
    if (!o.config.empty()) {
        nlohmann::json j = read_json_file(o.config);
        if (j.contains("train")) cfg = train::TrainConfig::from_json(j.at("train"));
        if (!o.data_given && j.contains("data")) data = j.at("data").get<std::string>();
        if (o.teacher.empty() && j.contains("teacher"))
            teacher = j.at("teacher").get<std::string>();
    }
    if (o.seed_given || o.config.empty()) cfg.seed = o.seed;
    if (o.scale > 0) cfg.schedule.scale = o.scale;
    if (o.lr > 0) cfg.lr = o.lr;
    if (o.batch_triples > 0) cfg.batch_triples = o.batch_triples;
    if (o.batch_supervised > 0) cfg.batch_supervised = o.batch_supervised;
    if (o.photometric_scales > 0) cfg.photometric_scales = o.photometric_scales;
    if (o.stages > 0) {
        if (o.stages > static_cast<int>(cfg.schedule.stages.size()))
            throw std::runtime_error("--stages exceeds the schedule length");
        cfg.schedule.stages.resize(static_cast<std::size_t>(o.stages));
    }
    if (o.no_seg) cfg.use_seg = false;
    if (o.no_flow_mask) cfg.use_flow_mask = false;
    if (o.no_ground) cfg.use_ground = false;
    if (o.naive_pose) cfg.net.multiscale_pose = false;
    if (o.d_min > 0) cfg.net.d_min = o.d_min;
    if (o.d_max > 0) cfg.net.d_max = o.d_max;
    if (o.no_distill) teacher.clear();

    if (data.empty()) throw std::runtime_error("no dataset given (--data or config file)");
    (*stored)["data"] = data;
    (*stored)["teacher"] = teacher;
    return cfg;
}

int cmd_train(const TrainCli& o, bool teacher_mode) {
    nlohmann::json stored;
    train::TrainConfig cfg = resolve_train_config(o, &stored, teacher_mode);

    Dataset ds = load_dataset(stored.at("data").get<std::string>());
    // network resolution follows the data unless a config file pinned it
    if (o.config.empty()) {
        cfg.net.width = ds.scene_config.width;
        cfg.net.height = ds.scene_config.height;
    }
    cfg.validate();

    std::filesystem::path run_dir(o.run);
    std::filesystem::create_directories(run_dir);
    stored["command"] = teacher_mode ? "distill" : "train";
    stored["train"] = cfg.to_json();
    write_json_file(run_dir / "config.json", stored);

    train::TrainHooks hooks;
    hooks.on_step = [](int stage, long step, const losses::LossReport& r) {
        if (step % 100 == 0)
            std::cout << "stage " << stage << " step " << step << " total " << r.total
                      << std::endl;
    };

    if (teacher_mode) {
        train::train_teacher(ds.train, cfg, run_dir, hooks);
        std::cout << "teacher checkpoint: " << (run_dir / "teacher.ckpt").string() << "\n";
        return 0;
    }

    std::optional<nets::Teacher> teacher_net;
    nets::Teacher* teacher = nullptr;
    std::string teacher_path = stored.at("teacher").get<std::string>();
    if (!teacher_path.empty()) {
        teacher_net.emplace(nets::Teacher::load(teacher_path));
        teacher = &*teacher_net;
    }

    nets::Model model = train::train_student(ds.train, cfg, teacher, run_dir, hooks);
    const auto& eval_scenes = ds.val.empty() ? ds.train : ds.val;
    metrics::DepthMetrics dm = train::evaluate_depth(model, eval_scenes, true);
    std::cout << "held-out depth: " << dm.to_json().dump() << "\n";
    return 0;
}

// --- evaluation ---

std::vector<synth::SyntheticScene>* split_of(Dataset& ds, const std::string& split) {
    if (split == "train") return &ds.train;
    if (split == "val") return &ds.val;
    throw std::runtime_error("unknown split: " + split);
}

int cmd_eval_depth(const std::string& ckpt, const std::string& data, const std::string& split,
                   bool median_scale, double max_depth, bool csv) {
    nets::Model model = nets::Model::load(ckpt);
    Dataset ds = load_dataset(data);
    auto* scenes = split_of(ds, split);
    if (scenes->empty()) throw std::runtime_error("split '" + split + "' is empty");
    metrics::DepthMetrics m = train::evaluate_depth(model, *scenes, median_scale, max_depth);
    if (csv)
        std::cout << metrics::DepthMetrics::csv_header() << "\n" << m.csv_row() << "\n";
    else
        std::cout << m.to_json().dump(2) << "\n";
    return 0;
}

int cmd_eval_seg(const std::string& ckpt, const std::string& data, const std::string& split,
                 const std::string& task, bool csv) {
    nets::Model model = nets::Model::load(ckpt);
    Dataset ds = load_dataset(data);
    auto* scenes = split_of(ds, split);
    if (scenes->empty()) throw std::runtime_error("split '" + split + "' is empty");
    metrics::SegMetrics m = train::evaluate_seg(model, *scenes, task);
    if (csv)
        std::cout << metrics::SegMetrics::csv_header() << "\n" << m.csv_row() << "\n";
    else
        std::cout << m.to_json().dump(2) << "\n";
    return 0;
}

int cmd_eval_steering(const std::string& ckpt, const std::string& data, const std::string& run,
                      int sequences, std::uint64_t seed, const train::SteeringOptions& opt,
                      bool random_init, double max_angle) {
    nets::Model loaded = nets::Model::load(ckpt);
    nets::Model model = random_init
                            ? nets::Model(loaded.cfg, train::derive_seed(seed, 0xF00D))
                            : std::move(loaded);

    Dataset ds = load_dataset(data);
    synth::SceneConfig sc = ds.scene_config;
    auto seqs = synth::make_steering_dataset(train::derive_seed(seed, 0xCAB), sequences, sc,
                                             max_angle);
    auto plan = train::FoldPlan::make(static_cast<int>(seqs.size()), 10,
                                      train::derive_seed(seed, 0xF01D));
    auto res = train::finetune_steering(model, seqs, plan, opt, seed);
    auto baseline = train::steering_constant_baseline(seqs, plan);

    bool frozen_ok = true;
    for (std::size_t f = 0; f < res.frozen_before.size(); ++f)
        frozen_ok = frozen_ok && res.frozen_before[f] == res.frozen_after[f];

    nlohmann::json report = {{"finetuned", res.report.to_json()},
                             {"constant_baseline", baseline.to_json()},
                             {"frozen", opt.freeze_encoder},
                             {"frozen_exact", frozen_ok},
                             {"random_init", random_init},
                             {"sequences", sequences},
                             {"seed", seed}};
    if (!run.empty())
        write_json_file(std::filesystem::path(run) / "reports" / "steering_cv.json", report);
    std::cout << "test mse "
              << metrics::SteeringReport::format_mean_std(res.report.mean_test,
                                                          res.report.std_test)
              << " (constant baseline "
              << metrics::SteeringReport::format_mean_std(baseline.mean_test,
                                                          baseline.std_test)
              << ")\n";
    if (opt.freeze_encoder && !frozen_ok)
        throw std::runtime_error("frozen weights changed during steering fine-tune");
    return 0;
}

int cmd_grad_check(std::uint64_t seed, const std::string& flip) {
    auto results = gradcheck::run_all(seed, flip);
    bool all_pass = true;
    for (const auto& r : results) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << r.max_rel_err
                  << "\n";
        all_pass = all_pass && r.pass;
    }
    std::cout << (all_pass ? "all gradients match" : "gradient mismatch detected") << "\n";
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unified multi-task perception encoder toolkit"};
    app.require_subcommand(1);

    int rc = 0;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic driving-scene dataset");
    std::string gen_out;
    int gen_train = 8, gen_val = 4;
    std::uint64_t gen_seed = env_seed_default();
    bool gen_no_verify = false;
    synth::SceneConfig gen_sc;
    gen->add_option("--out", gen_out, "output dataset directory")->required();
    gen->add_option("--scenes", gen_train, "number of training scenes");
    gen->add_option("--val", gen_val, "number of held-out scenes");
    gen->add_option("--seed", gen_seed, "master seed (default: UNIPERC_SEED or 0)");
    gen->add_option("--width", gen_sc.width, "image width");
    gen->add_option("--height", gen_sc.height, "image height");
    gen->add_option("--static-boxes", gen_sc.static_boxes, "static boxes per scene");
    gen->add_option("--moving-boxes", gen_sc.moving_boxes, "moving boxes per scene");
    gen->add_option("--cam-speed", gen_sc.cam_speed, "camera forward speed per frame");
    gen->add_option("--cam-yaw-rate", gen_sc.cam_yaw_rate, "camera yaw rate per frame");
    gen->add_option("--wall-z", gen_sc.wall_z, "back wall distance");
    gen->add_option("--ground-y", gen_sc.ground_y, "ground height below the camera");
    gen->add_option("--texture-freq", gen_sc.texture_freq, "texture base frequency");
    gen->add_option("--motion-amplitude", gen_sc.motion_amplitude,
                    "per-frame translation of moving boxes");
    gen->add_flag("--no-verify", gen_no_verify, "skip the per-scene self-check");
    gen->callback(
        [&] { rc = cmd_gen_data(gen_out, gen_train, gen_val, gen_seed, gen_sc, !gen_no_verify); });

    // train / distill share their options
    TrainCli tr;
    auto add_train_opts = [&](CLI::App* sub, bool teacher_mode) {
        auto* data_opt = sub->add_option("--data", tr.data, "dataset directory");
        auto* seed_opt = sub->add_option("--seed", tr.seed,
                                         "run seed (default: UNIPERC_SEED or 0)");
        sub->add_option("--run", tr.run, "run directory for checkpoints/logs")->required();
        sub->add_option("--config", tr.config, "existing config.json to rerun from");
        sub->add_option("--scale", tr.scale, "desk-scale factor for all stage step counts");
        sub->add_option("--stages", tr.stages, "train only the first N stages");
        sub->add_option("--lr", tr.lr, "learning rate");
        sub->add_option("--batch-triples", tr.batch_triples, "scenes per step (view synthesis)");
        sub->add_option("--batch-supervised", tr.batch_supervised,
                        "scenes per step (segmentation)");
        sub->add_option("--photometric-scales", tr.photometric_scales,
                        "pyramid scales for the reconstruction loss");
        sub->add_option("--d-min", tr.d_min, "minimum representable depth");
        sub->add_option("--d-max", tr.d_max, "maximum representable depth");
        sub->add_flag("--no-seg", tr.no_seg, "disable the segmentation objective");
        sub->add_flag("--no-flow-mask", tr.no_flow_mask,
                      "disable the scene-flow and motion-mask decoders");
        sub->add_flag("--no-ground", tr.no_ground, "disable the ground-plane hinge");
        sub->add_flag("--naive-pose", tr.naive_pose, "coarsest-level pose head variant");
        if (!teacher_mode) {
            sub->add_option("--teacher", tr.teacher, "teacher checkpoint to distill from");
            sub->add_flag("--no-distill", tr.no_distill, "ignore any configured teacher");
        }
        sub->callback([&, data_opt, seed_opt, teacher_mode] {
            tr.data_given = data_opt->count() > 0;
            tr.seed_given = seed_opt->count() > 0;
            if (!tr.seed_given) tr.seed = env_seed_default();
            rc = cmd_train(tr, teacher_mode);
        });
    };
    add_train_opts(app.add_subcommand("train", "train the unified student"), false);
    add_train_opts(
        app.add_subcommand("distill", "train the separate-encoder teacher"), true);

    // eval-depth
    auto* ed = app.add_subcommand("eval-depth", "depth metrics of a checkpoint");
    std::string ed_ckpt, ed_data, ed_split = "val";
    bool ed_no_median = false, ed_csv = false;
    double ed_max_depth = 0;
    ed->add_option("--ckpt", ed_ckpt, "model checkpoint")->required();
    ed->add_option("--data", ed_data, "dataset directory")->required();
    ed->add_option("--split", ed_split, "train or val");
    ed->add_option("--max-depth", ed_max_depth, "clamp depths before scoring (0: off)");
    ed->add_flag("--no-median-scale", ed_no_median, "skip median scale alignment");
    ed->add_flag("--csv", ed_csv, "CSV output");
    ed->callback([&] {
        rc = cmd_eval_depth(ed_ckpt, ed_data, ed_split, !ed_no_median, ed_max_depth, ed_csv);
    });

    // eval-seg
    auto* es = app.add_subcommand("eval-seg", "segmentation metrics of a checkpoint");
    std::string es_ckpt, es_data, es_split = "val", es_task = "panoptic";
    bool es_csv = false;
    es->add_option("--ckpt", es_ckpt, "model checkpoint")->required();
    es->add_option("--data", es_data, "dataset directory")->required();
    es->add_option("--split", es_split, "train or val");
    es->add_option("--task", es_task, "panoptic, instance or semantic")
        ->check(CLI::IsMember({"panoptic", "instance", "semantic"}));
    es->add_flag("--csv", es_csv, "CSV output");
    es->callback([&] { rc = cmd_eval_seg(es_ckpt, es_data, es_split, es_task, es_csv); });

    // eval-steering
    auto* est = app.add_subcommand("eval-steering",
                                   "tenfold steering fine-tune on frozen features");
    std::string est_ckpt, est_data, est_run;
    int est_sequences = 20;
    std::uint64_t est_seed = env_seed_default();
    double est_max_angle = 20.0;
    bool est_unfrozen = false, est_random = false;
    train::SteeringOptions est_opt;
    est->add_option("--ckpt", est_ckpt, "model checkpoint")->required();
    est->add_option("--data", est_data, "dataset directory (scene parameters)")->required();
    est->add_option("--run", est_run, "run directory for reports/steering_cv.json");
    est->add_option("--sequences", est_sequences, "number of 16-frame sequences");
    est->add_option("--seed", est_seed, "seed (default: UNIPERC_SEED or 0)");
    est->add_option("--steps", est_opt.steps, "fine-tune steps per fold");
    est->add_option("--batch", est_opt.batch, "sequences per step");
    est->add_option("--lr", est_opt.lr, "learning rate");
    est->add_option("--max-angle", est_max_angle, "steering angle range in degrees");
    est->add_flag("--unfrozen", est_unfrozen, "also fine-tune the encoder");
    est->add_flag("--random-init", est_random,
                  "replace the checkpoint weights with a random initialization");
    est->callback([&] {
        est_opt.freeze_encoder = !est_unfrozen;
        rc = cmd_eval_steering(est_ckpt, est_data, est_run, est_sequences, est_seed, est_opt,
                               est_random, est_max_angle);
    });

    // grad-check
    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
    std::uint64_t gc_seed = env_seed_default();
    std::string gc_flip;
    gc->add_option("--seed", gc_seed, "seed (default: UNIPERC_SEED or 0)");
    gc->add_option("--flip", gc_flip,
                   "negate the analytic gradient of the named check (self-test)");
    gc->callback([&] { rc = cmd_grad_check(gc_seed, gc_flip); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
