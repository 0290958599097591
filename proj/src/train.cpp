#include "uniperc/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace uniperc::train {

namespace {

constexpr double kContrastTemperature = 0.07;
// scene convention: class 0 is ground, 1 the back wall, boxes start at 2
constexpr int kFirstThingClass = 2;

const std::vector<std::string> kSegTasks = {"panoptic", "instance", "semantic"};

Var zero_scalar() { return Var::scalar(0.0); }

Var average(const std::vector<Var>& xs) {
    if (xs.empty()) return zero_scalar();
    Var s = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) s = ag::add(s, xs[i]);
    return ag::mul_scalar(s, 1.0 / static_cast<double>(xs.size()));
}

// one encoder per perception task; the student aliases all three pointers
struct Heads {
    nets::Encoder* enc_ds = nullptr;
    nets::Encoder* enc_pose = nullptr;
    nets::Encoder* enc_flow = nullptr;
    nets::DepthDecoder* depth = nullptr;
    nets::PoseDecoder* pose = nullptr;
    nets::RecurrentDecoder* flow = nullptr;
    nets::RecurrentDecoder* mask = nullptr;
    nets::SegDecoder* seg = nullptr;
};

// which parts run in training mode this stage; everything else runs in eval
// mode so frozen normalization statistics stay frozen
struct Flags {
    bool enc_ds = false, enc_pose = false, enc_flow = false;
    bool depth = false, pose = false, flow = false, mask = false, seg = false;
};

Flags flags_from(const std::vector<std::string>& comps, bool is_teacher) {
    Flags f;
    for (const auto& c : comps) {
        if (!is_teacher && c == "encoder") f.enc_ds = f.enc_pose = f.enc_flow = true;
        else if (is_teacher && c == "enc_depth_seg") f.enc_ds = true;
        else if (is_teacher && c == "enc_pose") f.enc_pose = true;
        else if (is_teacher && c == "enc_flow") f.enc_flow = true;
        else if (c == "depth") f.depth = true;
        else if (c == "pose") f.pose = true;
        else if (c == "flow") f.flow = true;
        else if (c == "mask") f.mask = true;
        else if (c == "seg") f.seg = true;
    }
    return f;
}

// memoizes encoder forwards within one step so aliased encoders run once
struct PyrCache {
    std::map<std::pair<nets::Encoder*, int>, nets::FeaturePyramid> cache;

    const nets::FeaturePyramid& get(nets::Encoder* enc, int frame, const Tensor& image,
                                    bool training) {
        auto key = std::make_pair(enc, frame);
        auto it = cache.find(key);
        if (it == cache.end())
            it = cache.emplace(key, enc->forward(Var::constant(image), training)).first;
        return it->second;
    }
};

struct PairForward {
    int source = 0;
    Var pose6;
    Var flow_complete;  // undefined when the flow/mask path is off
    Var mask;
};

struct SceneSsup {
    Var recon, smooth, consistency, sparsity, ground;
    std::vector<PairForward> pairs;
};

SceneSsup scene_ssup(const Heads& h, const Flags& fl, const synth::SyntheticScene& scene,
                     const TrainConfig& cfg, bool flow_mask_on, std::uint64_t ground_seed,
                     PyrCache& cache) {
    const auto& K = scene.intrinsics;
    const auto& w = cfg.weights;
    const int t = scene.target_frame();
    const int H = K.height, W = K.width;

    const auto& pyr_t_ds = cache.get(h.enc_ds, t, scene.frames[t], fl.enc_ds);
    nets::DepthMaps dm = h.depth->forward(pyr_t_ds, fl.depth);

    // photometric terms live on an image pyramid: scale k warps the /2^k
    // image with the natively predicted /2^k depth under scaled intrinsics,
    // so coarse scales keep a wide basin of attraction for the sampling
    std::vector<geom::CameraIntrinsics> K_scaled;
    std::vector<Var> img_t_scaled;
    for (int k = 0; k < cfg.photometric_scales; ++k) {
        double s = static_cast<double>(1 << k);
        geom::CameraIntrinsics Kk = K;
        Kk.fx = K.fx / s;
        Kk.fy = K.fy / s;
        Kk.cx = (K.cx + 0.5) / s - 0.5;  // pixel-center convention
        Kk.cy = (K.cy + 0.5) / s - 0.5;
        Kk.width = W >> k;
        Kk.height = H >> k;
        K_scaled.push_back(Kk);
        Var img = Var::constant(scene.frames[t]);
        img_t_scaled.push_back(k == 0 ? img : ag::resize_bilinear(img, H >> k, W >> k));
    }

    Var inv_depth = ag::div(Var::constant(Tensor::full(dm.depth[0].value().shape, 1.0)),
                            dm.depth[0]);

    SceneSsup out;
    std::vector<Var> recon_terms, cons_terms, spars_terms, smooth_terms;
    for (const auto& pr : scene.pairs) {
        const int s = pr.source;
        const auto& pyr_s_pose = cache.get(h.enc_pose, s, scene.frames[s], fl.enc_pose);
        const auto& pyr_t_pose = cache.get(h.enc_pose, t, scene.frames[t], fl.enc_pose);
        Var pose6 = h.pose->forward(pyr_s_pose, pyr_t_pose, fl.pose);

        PairForward pf;
        pf.source = s;
        pf.pose6 = pose6;
        Var fc, m;
        if (flow_mask_on) {
            const auto& pyr_s_f = cache.get(h.enc_flow, s, scene.frames[s], fl.enc_flow);
            const auto& pyr_t_f = cache.get(h.enc_flow, t, scene.frames[t], fl.enc_flow);
            fc = h.flow->forward(pyr_s_f, pyr_t_f, pose6, fl.flow);
            m = h.mask->forward(pyr_s_f, pyr_t_f, pose6, fl.mask);
            pf.flow_complete = fc;
            pf.mask = m;
        }

        Var img_s = Var::constant(scene.frames[s]);
        Var rigid0;
        for (int k = 0; k < cfg.photometric_scales; ++k) {
            const auto& Kk = K_scaled[static_cast<std::size_t>(k)];
            const Var& depth_k = dm.depth[static_cast<std::size_t>(k)];
            Var rigid = geom::rigid_flow(depth_k, pose6, Kk);
            if (k == 0) rigid0 = rigid;
            Var final_flow = rigid;
            if (flow_mask_on) {
                Var fck = k == 0 ? fc : ag::resize_bilinear(fc, Kk.height, Kk.width);
                Var mk = k == 0 ? m : ag::resize_bilinear(m, Kk.height, Kk.width);
                final_flow = geom::compose_flows(rigid, fck, mk).final_flow;
            }
            Var img_s_k =
                k == 0 ? img_s : ag::resize_bilinear(img_s, Kk.height, Kk.width);
            auto warp = geom::warp_synthesize(img_s_k, depth_k, final_flow, Kk);
            // a scale whose warp lands entirely outside the source image
            // contributes no photometric constraint
            double valid_count = 0;
            for (double v : warp.valid.data) valid_count += v;
            if (valid_count > 0)
                recon_terms.push_back(losses::photometric_loss(
                    warp.image, img_t_scaled[static_cast<std::size_t>(k)], warp.valid,
                    w.alpha));
        }
        if (flow_mask_on) {
            cons_terms.push_back(losses::motion_consistency_loss(fc, rigid0, m));
            Tensor disc = losses::flow_discrepancy(fc.value(), rigid0.value());
            spars_terms.push_back(losses::motion_sparsity_loss(m, disc));
        }
        smooth_terms.push_back(losses::smoothness_loss(inv_depth, fc, m, scene.frames[t], w));
        out.pairs.push_back(std::move(pf));
    }
    out.recon = average(recon_terms);
    out.smooth = average(smooth_terms);
    out.consistency = average(cons_terms);
    out.sparsity = average(spars_terms);

    if (cfg.use_ground) {
        Var points = geom::unproject(dm.depth[0], K);
        // fit on the lower image half where the ground dominates; the hinge
        // still penalizes every point that falls below the fitted plane
        std::vector<std::array<double, 3>> fit_pts;
        const Tensor& P = points.value();
        for (int y = H / 2; y < H; y += 2)
            for (int x = 0; x < W; x += 2)
                fit_pts.push_back({P.at(0, y, x), P.at(1, y, x), P.at(2, y, x)});
        geom::Plane plane = geom::fit_ground_plane(fit_pts, geom::RansacParams{}, ground_seed)
                                .oriented_toward({0, 0, 0});
        out.ground = losses::above_ground_loss(points, plane);
    } else {
        out.ground = zero_scalar();
    }
    return out;
}

// rows of a {R,C} matrix gathered into a {B,C} matrix, differentiably
Var gather_rows(const Var& mat, const std::vector<int>& rows) {
    const int r = mat.value().dim(0), c = mat.value().dim(1);
    Var x3 = ag::flatten(mat, {r, 1, c});
    std::vector<Var> picked;
    for (int i : rows) picked.push_back(ag::slice_ch(x3, i, 1));
    return ag::flatten(ag::concat_ch(picked), {static_cast<int>(rows.size()), c});
}

losses::SegTargets build_seg_targets(const synth::SyntheticScene& scene,
                                     const std::string& task, int mh, int mw,
                                     int max_targets) {
    const Tensor& sem = scene.semantic;
    const Tensor& inst = scene.instance;
    const int sy = sem.dim(1) / mh, sx = sem.dim(2) / mw;

    std::map<std::pair<int, int>, std::vector<int>> segs;  // (class, instance) -> pixels
    for (int y = 0; y < mh; ++y)
        for (int x = 0; x < mw; ++x) {
            int c = static_cast<int>(std::lround(sem.at(0, y * sy, x * sx)));
            int i = static_cast<int>(std::lround(inst.at(0, y * sy, x * sx)));
            std::pair<int, int> key;
            if (task == "semantic") key = {c, 0};
            else if (task == "instance") {
                if (i == 0) continue;
                key = {c, i};
            } else if (task == "panoptic") key = {c, i};
            else throw std::invalid_argument("build_seg_targets: unknown task " + task);
            segs[key].push_back(y * mw + x);
        }

    std::vector<std::pair<std::pair<int, int>, const std::vector<int>*>> ordered;
    for (const auto& [key, pix] : segs) ordered.push_back({key, &pix});
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.second->size() != b.second->size()) return a.second->size() > b.second->size();
        return a.first < b.first;
    });
    if (static_cast<int>(ordered.size()) > max_targets)
        ordered.resize(static_cast<std::size_t>(max_targets));

    losses::SegTargets targets;
    for (const auto& [key, pix] : ordered) {
        targets.classes.push_back(key.first);
        Tensor m({1, mh, mw});
        for (int p : *pix) m[p] = 1.0;
        targets.masks.push_back(std::move(m));
    }
    return targets;
}

struct SupTerms {
    Var cls, bce, dice, contrast;
};

SupTerms scene_sup(const Heads& h, const Flags& fl, const synth::SyntheticScene& scene,
                   const std::string& task, const losses::LossWeights& w, PyrCache& cache) {
    const int t = scene.target_frame();
    const auto& pyr = cache.get(h.enc_ds, t, scene.frames[t], fl.enc_ds);
    nets::SegOutput so = h.seg->forward(pyr, task, fl.seg);

    const int mh = so.mask_logits.value().dim(1), mw = so.mask_logits.value().dim(2);
    const int q = so.class_logits.value().dim(0);
    losses::SegTargets targets = build_seg_targets(scene, task, mh, mw, q);

    SupTerms out{zero_scalar(), zero_scalar(), zero_scalar(), zero_scalar()};
    losses::MatchResult match =
        losses::hungarian_match(so.class_logits.value(), so.mask_logits.value(), targets, w);
    out.cls = losses::seg_classification_loss(so.class_logits, targets, match);
    if (!targets.classes.empty()) {
        auto [bce, dice] = losses::seg_mask_losses(so.mask_logits, targets, match);
        out.bce = bce;
        out.dice = dice;
        std::vector<int> qrows, crows;
        for (std::size_t i = 0; i < targets.classes.size(); ++i) {
            qrows.push_back(match.query_for_target[i]);
            crows.push_back(targets.classes[i]);
        }
        out.contrast = losses::seg_contrastive_loss(
            gather_rows(so.query_embeddings, qrows),
            gather_rows(h.seg->text_embeddings(), crows), kContrastTemperature);
    }
    return out;
}

std::vector<std::string> filter_components(const std::vector<std::string>& comps,
                                           const TrainConfig& cfg) {
    std::vector<std::string> out;
    for (const auto& c : comps) {
        if (!cfg.use_seg && c == "seg") continue;
        if (!cfg.use_flow_mask && (c == "flow" || c == "mask" || c == "enc_flow")) continue;
        out.push_back(c);
    }
    return out;
}

bool trains_flow_or_mask(const std::vector<std::string>& comps) {
    for (const auto& c : comps)
        if (c == "flow" || c == "mask") return true;
    return false;
}

void check_scenes(const std::vector<synth::SyntheticScene>& scenes, const TrainConfig& cfg) {
    if (scenes.empty()) throw std::invalid_argument("training needs at least one scene");
    for (const auto& s : scenes) {
        if (s.intrinsics.width != cfg.net.width || s.intrinsics.height != cfg.net.height)
            throw std::invalid_argument("scene resolution does not match the network config");
        if (s.config.semantic_classes > cfg.net.num_classes)
            throw std::invalid_argument("scene has more classes than the network config");
    }
}

// shared stage loop; NetT is nets::Model or nets::Teacher
template <typename NetT>
void run_training(NetT& net, const Heads& heads, bool is_teacher,
                  const std::vector<synth::SyntheticScene>& scenes, const TrainConfig& cfg,
                  nets::Teacher* teacher, const std::filesystem::path& run_dir,
                  const TrainHooks& hooks) {
    const auto& w = cfg.weights;
    const int n = static_cast<int>(scenes.size());
    BatchComposer triples(n, derive_seed(cfg.seed, 2));
    BatchComposer supervised(n, derive_seed(cfg.seed, 3));

    std::ofstream log;
    if (!run_dir.empty()) {
        std::filesystem::create_directories(run_dir / "logs");
        std::filesystem::create_directories(run_dir / "checkpoints");
        log.open(run_dir / "logs" / "steps.jsonl", std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open step log in " + run_dir.string());
    }

    long global_step = 0;
    for (std::size_t stage = 0; stage < cfg.schedule.stages.size(); ++stage) {
        std::vector<std::string> comps =
            filter_components(cfg.schedule.stages[stage].components, cfg);
        const long steps = cfg.schedule.scaled_steps(stage);
        const bool last_stage = stage + 1 == cfg.schedule.stages.size();

        if (!comps.empty()) {
            std::vector<std::string> active = net.param_names(comps);
            Flags fl = flags_from(comps, is_teacher);
            // the flow/mask path (and with it distillation) joins the loss in
            // stages that train the flow or mask decoder
            const bool flow_mask_on = cfg.use_flow_mask && trains_flow_or_mask(comps);
            const bool distill_on = teacher != nullptr && flow_mask_on;

            nn::AdamOptimizer opt(cfg.lr);
            for (long step = 0; step < steps; ++step, ++global_step) {
                if (last_stage && steps >= 4 && step == (steps * 3) / 4)
                    opt.set_lr(cfg.lr * 0.5);

                PyrCache cache;
                std::vector<Var> recon, smooth, cons, spars, grnd, distil_terms;
                for (int pick : triples.next(cfg.batch_triples)) {
                    const auto& scene = scenes[static_cast<std::size_t>(pick)];
                    std::uint64_t gseed =
                        derive_seed(cfg.seed, 0x600DULL + static_cast<std::uint64_t>(
                                                              global_step * n + pick));
                    SceneSsup ss =
                        scene_ssup(heads, fl, scene, cfg, flow_mask_on, gseed, cache);
                    recon.push_back(ss.recon);
                    smooth.push_back(ss.smooth);
                    cons.push_back(ss.consistency);
                    spars.push_back(ss.sparsity);
                    grnd.push_back(ss.ground);

                    if (distill_on) {
                        const int t = scene.target_frame();
                        for (const auto& pf : ss.pairs) {
                            const auto& tp_s = cache.get(&teacher->enc_pose, pf.source,
                                                         scene.frames[pf.source], false);
                            const auto& tp_t =
                                cache.get(&teacher->enc_pose, t, scene.frames[t], false);
                            const auto& tf_s = cache.get(&teacher->enc_flow, pf.source,
                                                         scene.frames[pf.source], false);
                            const auto& tf_t =
                                cache.get(&teacher->enc_flow, t, scene.frames[t], false);
                            Var tpose = teacher->pose.forward(tp_s, tp_t, false);
                            Var tflow = teacher->flow.forward(tf_s, tf_t, tpose, false);
                            Var tmask = teacher->mask.forward(tf_s, tf_t, tpose, false);
                            distil_terms.push_back(losses::distill_loss(
                                pf.flow_complete, tflow.value(), pf.mask, tmask.value(),
                                w.beta1, w.beta2));
                        }
                    }
                }
                losses::WeightedSum ssup = losses::ssup_total(
                    average(recon), average(smooth), average(cons), average(spars),
                    average(grnd), w);

                std::vector<Var> cls, bce, dice, contrast;
                if (cfg.use_seg && heads.seg != nullptr) {
                    const std::string& task =
                        kSegTasks[static_cast<std::size_t>(global_step % 3)];
                    for (int pick : supervised.next(cfg.batch_supervised)) {
                        SupTerms st = scene_sup(heads, fl,
                                                scenes[static_cast<std::size_t>(pick)], task,
                                                w, cache);
                        cls.push_back(st.cls);
                        bce.push_back(st.bce);
                        dice.push_back(st.dice);
                        contrast.push_back(st.contrast);
                    }
                }
                losses::WeightedSum sup = losses::sup_total(
                    average(cls), average(bce), average(dice), average(contrast), w);

                Var distil = average(distil_terms);
                losses::WeightedSum total = losses::total_loss(sup, ssup, distil, w);
                if (!std::isfinite(total.report.total))
                    throw std::runtime_error("non-finite loss at stage " +
                                             std::to_string(stage + 1) + " step " +
                                             std::to_string(step));

                total.total.backward();
                double gnorm = opt.step(net.reg.params(), active, cfg.clip_norm);
                net.reg.zero_grads();
                if (!std::isfinite(gnorm))
                    throw std::runtime_error("non-finite gradient at stage " +
                                             std::to_string(stage + 1) + " step " +
                                             std::to_string(step));

                if (log.is_open()) {
                    nlohmann::json j = total.report.to_json();
                    for (const auto& [k, v] : ssup.report.components) j["ssup." + k] = v;
                    for (const auto& [k, v] : sup.report.components) j["sup." + k] = v;
                    j["stage"] = stage + 1;
                    j["step"] = global_step;
                    j["grad_norm"] = gnorm;
                    j["lr"] = opt.lr();
                    log << j.dump() << "\n";
                }
                if (hooks.on_step)
                    hooks.on_step(static_cast<int>(stage + 1), step, total.report);
            }
        }
        if (!run_dir.empty())
            net.save(run_dir / "checkpoints" / ("stage" + std::to_string(stage + 1) + ".ckpt"));
    }
    if (log.is_open()) log.flush();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

nlohmann::json Stage::to_json() const { return {{"components", components}, {"steps", steps}}; }

Stage Stage::from_json(const nlohmann::json& j) {
    Stage s;
    s.components = j.at("components").get<std::vector<std::string>>();
    s.steps = j.at("steps").get<long>();
    return s;
}

StageSchedule StageSchedule::student_default() {
    StageSchedule s;
    s.stages = {{{"encoder", "depth", "pose", "seg"}, 60000},
                {{"flow"}, 40000},
                {{"pose", "flow", "mask"}, 40000},
                {{"encoder", "depth", "pose", "flow", "mask", "seg"}, 250000}};
    return s;
}

StageSchedule StageSchedule::teacher_default() {
    StageSchedule s;
    s.stages = {{{"enc_depth_seg", "depth", "seg", "enc_pose", "pose"}, 60000},
                {{"enc_flow", "flow"}, 40000},
                {{"pose", "enc_flow", "flow", "mask"}, 40000}};
    return s;
}

long StageSchedule::scaled_steps(std::size_t stage) const {
    const Stage& s = stages.at(stage);
    return std::max(1L, std::lround(static_cast<double>(s.steps) * scale));
}

void StageSchedule::validate() const {
    if (stages.empty()) throw std::invalid_argument("schedule needs at least one stage");
    if (!(scale > 0)) throw std::invalid_argument("schedule scale must be positive");
    for (const auto& s : stages) {
        if (s.components.empty())
            throw std::invalid_argument("every stage needs at least one component");
        if (s.steps <= 0) throw std::invalid_argument("stage step counts must be positive");
    }
}

nlohmann::json StageSchedule::to_json() const {
    nlohmann::json st = nlohmann::json::array();
    for (const auto& s : stages) st.push_back(s.to_json());
    return {{"stages", st}, {"scale", scale}};
}

StageSchedule StageSchedule::from_json(const nlohmann::json& j) {
    StageSchedule s;
    s.stages.clear();
    for (const auto& js : j.at("stages")) s.stages.push_back(Stage::from_json(js));
    s.scale = j.at("scale").get<double>();
    s.validate();
    return s;
}

void TrainConfig::validate() const {
    net.validate();
    weights.validate();
    schedule.validate();
    if (batch_triples < 1 || batch_supervised < 1)
        throw std::invalid_argument("batch sizes must be positive");
    if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
    if (clip_norm < 0) throw std::invalid_argument("clip norm must be non-negative");
    if (photometric_scales < 1 || photometric_scales > 4)
        throw std::invalid_argument("photometric scales must be in [1,4]");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"seed", seed},
            {"net", net.to_json()},
            {"weights", weights.to_json()},
            {"schedule", schedule.to_json()},
            {"batch_triples", batch_triples},
            {"batch_supervised", batch_supervised},
            {"lr", lr},
            {"clip_norm", clip_norm},
            {"use_seg", use_seg},
            {"use_flow_mask", use_flow_mask},
            {"use_ground", use_ground},
            {"photometric_scales", photometric_scales}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto opt = [&](const char* k, auto& out) {
        if (j.contains(k)) out = j.at(k).get<std::decay_t<decltype(out)>>();
    };
    opt("seed", c.seed);
    if (j.contains("net")) c.net = nets::NetConfig::from_json(j.at("net"));
    if (j.contains("weights")) c.weights = losses::LossWeights::from_json(j.at("weights"));
    if (j.contains("schedule")) c.schedule = StageSchedule::from_json(j.at("schedule"));
    opt("batch_triples", c.batch_triples);
    opt("batch_supervised", c.batch_supervised);
    opt("lr", c.lr);
    opt("clip_norm", c.clip_norm);
    opt("use_seg", c.use_seg);
    opt("use_flow_mask", c.use_flow_mask);
    opt("use_ground", c.use_ground);
    opt("photometric_scales", c.photometric_scales);
    c.validate();
    return c;
}

BatchComposer::BatchComposer(int n_items, std::uint64_t seed) : rng_(seed) {
    if (n_items <= 0) throw std::invalid_argument("BatchComposer: need items");
    order_.resize(static_cast<std::size_t>(n_items));
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
}

void BatchComposer::reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
}

std::vector<int> BatchComposer::next(int count) {
    if (count <= 0) throw std::invalid_argument("BatchComposer: need a positive count");
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        if (pos_ == order_.size()) reshuffle();
        out.push_back(order_[pos_++]);
    }
    return out;
}

nets::Model train_student(const std::vector<synth::SyntheticScene>& scenes,
                          const TrainConfig& cfg, nets::Teacher* teacher,
                          const std::filesystem::path& run_dir, const TrainHooks& hooks) {
    cfg.validate();
    check_scenes(scenes, cfg);
    for (const auto& st : cfg.schedule.stages)
        nets::Model::component_prefixes(st.components);  // reject unknown names early

    nets::Model model(cfg.net, derive_seed(cfg.seed, 0));
    Heads heads;
    heads.enc_ds = heads.enc_pose = heads.enc_flow = &model.encoder;
    heads.depth = &model.depth;
    heads.pose = &model.pose;
    heads.flow = &model.flow;
    heads.mask = &model.mask;
    heads.seg = &model.seg;
    run_training(model, heads, /*is_teacher=*/false, scenes, cfg, teacher, run_dir, hooks);
    return model;
}

nets::Teacher train_teacher(const std::vector<synth::SyntheticScene>& scenes,
                            const TrainConfig& cfg, const std::filesystem::path& run_dir,
                            const TrainHooks& hooks) {
    cfg.validate();
    check_scenes(scenes, cfg);
    for (const auto& st : cfg.schedule.stages)
        nets::Teacher::component_prefixes(st.components);

    nets::Teacher teacher(cfg.net, derive_seed(cfg.seed, 10));
    Heads heads;
    heads.enc_ds = &teacher.enc_depth_seg;
    heads.enc_pose = &teacher.enc_pose;
    heads.enc_flow = &teacher.enc_flow;
    heads.depth = &teacher.depth;
    heads.pose = &teacher.pose;
    heads.flow = &teacher.flow;
    heads.mask = &teacher.mask;
    heads.seg = &teacher.seg;
    run_training(teacher, heads, /*is_teacher=*/true, scenes, cfg, nullptr, run_dir, hooks);
    if (!run_dir.empty()) teacher.save(run_dir / "teacher.ckpt");
    return teacher;
}

std::uint64_t component_checksum(const nets::Model& m,
                                 const std::vector<std::string>& components) {
    return nn::checksum_prefixed(m.reg, nets::Model::component_prefixes(components));
}

std::uint64_t component_checksum(const nets::Teacher& t,
                                 const std::vector<std::string>& components) {
    return nn::checksum_prefixed(t.reg, nets::Teacher::component_prefixes(components));
}

metrics::DepthMetrics evaluate_depth(nets::Model& model,
                                     const std::vector<synth::SyntheticScene>& scenes,
                                     bool median_scale, double max_depth) {
    if (scenes.empty()) throw std::invalid_argument("evaluate_depth: no scenes");
    metrics::DepthMetrics acc;
    for (const auto& scene : scenes) {
        const int t = scene.target_frame();
        auto pyr = model.encoder.forward(Var::constant(scene.frames[t]), false);
        auto dm = model.depth.forward(pyr, false);
        Tensor valid = Tensor::full(scene.depths[t].shape, 1.0);
        metrics::DepthMetrics m = metrics::depth_metrics(dm.depth[0].value(), scene.depths[t],
                                                         valid, median_scale, max_depth);
        acc.abs_rel += m.abs_rel;
        acc.sq_rel += m.sq_rel;
        acc.rmse += m.rmse;
        acc.rmse_log += m.rmse_log;
        acc.d1 += m.d1;
        acc.d2 += m.d2;
        acc.d3 += m.d3;
    }
    const double n = static_cast<double>(scenes.size());
    acc.abs_rel /= n;
    acc.sq_rel /= n;
    acc.rmse /= n;
    acc.rmse_log /= n;
    acc.d1 /= n;
    acc.d2 /= n;
    acc.d3 /= n;
    acc.median_scaled = median_scale;
    return acc;
}

namespace {

// per-pixel argmax assembly of the query predictions at quarter resolution
void seg_prediction_maps(const nets::SegOutput& so, int num_classes, Tensor* labels,
                         Tensor* instances) {
    const Tensor& cl = so.class_logits.value();
    const Tensor& ml = so.mask_logits.value();
    const int q = cl.dim(0), mh = ml.dim(1), mw = ml.dim(2);

    std::vector<int> query_class(static_cast<std::size_t>(q));
    for (int i = 0; i < q; ++i) {
        int best = 0;
        for (int c = 1; c < num_classes; ++c)
            if (cl.m(i, c) > cl.m(i, best)) best = c;
        query_class[static_cast<std::size_t>(i)] = best;
    }

    *labels = Tensor({1, mh, mw});
    *instances = Tensor({1, mh, mw});
    for (int y = 0; y < mh; ++y)
        for (int x = 0; x < mw; ++x) {
            int best_q = 0;
            for (int i = 1; i < q; ++i)
                if (ml.at(i, y, x) > ml.at(best_q, y, x)) best_q = i;
            int cls = query_class[static_cast<std::size_t>(best_q)];
            labels->at(0, y, x) = cls;
            instances->at(0, y, x) = cls >= kFirstThingClass ? best_q + 1 : 0;
        }
}

}  // namespace

metrics::SegMetrics evaluate_seg(nets::Model& model,
                                 const std::vector<synth::SyntheticScene>& scenes,
                                 const std::string& task) {
    if (scenes.empty()) throw std::invalid_argument("evaluate_seg: no scenes");
    metrics::SegMetrics acc;
    acc.task = task;
    for (const auto& scene : scenes) {
        const int t = scene.target_frame();
        auto pyr = model.encoder.forward(Var::constant(scene.frames[t]), false);
        nets::SegOutput so = model.seg.forward(pyr, task, false);

        Tensor pred_labels, pred_instances;
        seg_prediction_maps(so, model.cfg.num_classes, &pred_labels, &pred_instances);

        const int mh = pred_labels.dim(1), mw = pred_labels.dim(2);
        const int sy = scene.semantic.dim(1) / mh, sx = scene.semantic.dim(2) / mw;
        Tensor gt_labels({1, mh, mw}), gt_instances({1, mh, mw});
        for (int y = 0; y < mh; ++y)
            for (int x = 0; x < mw; ++x) {
                gt_labels.at(0, y, x) = scene.semantic.at(0, y * sy, x * sx);
                gt_instances.at(0, y, x) = scene.instance.at(0, y * sy, x * sx);
            }

        metrics::SegMetrics m =
            metrics::seg_metrics(pred_labels, gt_labels, pred_instances, gt_instances, task);
        acc.iou += m.iou;
        acc.pq += m.pq;
        acc.ap += m.ap;
    }
    const double n = static_cast<double>(scenes.size());
    acc.iou /= n;
    acc.pq /= n;
    acc.ap /= n;
    return acc;
}

FoldPlan FoldPlan::make(int n_items, int n_folds, std::uint64_t seed) {
    if (n_folds <= 0 || n_items < n_folds)
        throw std::invalid_argument("FoldPlan: need at least one item per fold");
    std::vector<int> idx(static_cast<std::size_t>(n_items));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);

    FoldPlan plan;
    for (int f = 0; f < n_folds; ++f) {
        std::size_t lo = static_cast<std::size_t>(f) * idx.size() / static_cast<std::size_t>(n_folds);
        std::size_t hi =
            static_cast<std::size_t>(f + 1) * idx.size() / static_cast<std::size_t>(n_folds);
        plan.test_indices.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(lo),
                                       idx.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return plan;
}

std::vector<int> FoldPlan::train_indices(std::size_t fold) const {
    std::vector<int> out;
    for (std::size_t f = 0; f < test_indices.size(); ++f) {
        if (f == fold) continue;
        out.insert(out.end(), test_indices[f].begin(), test_indices[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

SteeringRunResult finetune_steering(nets::Model& pretrained,
                                    const std::vector<synth::SteeringSequence>& sequences,
                                    const FoldPlan& plan, const SteeringOptions& opt,
                                    std::uint64_t seed) {
    if (plan.test_indices.size() != 10)
        throw std::invalid_argument("steering fine-tune needs a tenfold plan");
    if (sequences.empty()) throw std::invalid_argument("steering fine-tune needs sequences");

    // with everything but the head frozen the feature pyramids are constants,
    // so compute them once (eval mode) and reuse across folds and steps
    std::vector<std::vector<nets::FeaturePyramid>> frozen_pyrs;
    if (opt.freeze_encoder) {
        for (const auto& seq : sequences) {
            std::vector<nets::FeaturePyramid> per_frame;
            for (const auto& img : seq.frames) {
                auto p = pretrained.encoder.forward(Var::constant(img), false);
                nets::FeaturePyramid detached;
                for (const auto& lv : p.levels)
                    detached.levels.push_back(Var::constant(lv.value()));
                per_frame.push_back(std::move(detached));
            }
            frozen_pyrs.push_back(std::move(per_frame));
        }
    }

    std::vector<std::string> frozen_comps = {"encoder", "depth", "pose", "flow", "mask", "seg"};
    std::vector<std::pair<double, double>> fold_mse;
    SteeringRunResult out;

    for (std::size_t fold = 0; fold < plan.test_indices.size(); ++fold) {
        // fresh head initialization on top of the pretrained perception weights
        nets::Model m(pretrained.cfg, derive_seed(seed, 100 + fold));
        for (const auto& [name, v] : pretrained.reg.params())
            if (name.rfind("steer.", 0) != 0)
                const_cast<Var&>(m.reg.params().at(name)).value_mut() = v.value();
        for (const auto& [name, buf] : pretrained.reg.buffers())
            if (name.rfind("steer.", 0) != 0) *m.reg.buffers().at(name) = *buf;

        out.frozen_before.push_back(component_checksum(m, frozen_comps));

        std::vector<int> train_idx = plan.train_indices(fold);
        if (opt.freeze_encoder && opt.standardize_tokens) {
            // per-channel statistics of the coarsest features over the
            // training fold, frozen into the head before fine-tuning
            int C = m.cfg.enc_widths[4];
            Tensor mu({C}), sq({C});
            double count = 0;
            for (int si : train_idx)
                for (const auto& pyr : frozen_pyrs[static_cast<std::size_t>(si)]) {
                    const Tensor& f = pyr.levels[4].value();
                    std::int64_t hw = f.dim(1) * f.dim(2);
                    for (int c = 0; c < C; ++c)
                        for (std::int64_t i = 0; i < hw; ++i) {
                            double v = f[c * hw + i];
                            mu[c] += v;
                            sq[c] += v * v;
                        }
                    count += static_cast<double>(hw);
                }
            Tensor isig({C});
            for (int c = 0; c < C; ++c) {
                mu[c] /= count;
                double var = sq[c] / count - mu[c] * mu[c];
                isig[c] = 1.0 / std::sqrt(std::max(var, 0.0) + 1e-8);
            }
            m.steering.set_token_norm(mu, isig);
        }

        std::vector<std::string> active_comps = {"steering"};
        if (!opt.freeze_encoder) active_comps.push_back("encoder");
        std::vector<std::string> active = m.param_names(active_comps);

        auto predict = [&](int si, bool training) -> Var {
            if (opt.freeze_encoder)
                return m.steering.forward(frozen_pyrs[static_cast<std::size_t>(si)], training);
            std::vector<nets::FeaturePyramid> pyrs;
            for (const auto& img : sequences[static_cast<std::size_t>(si)].frames)
                pyrs.push_back(m.encoder.forward(Var::constant(img), training));
            return m.steering.forward(pyrs, training);
        };

        BatchComposer composer(static_cast<int>(train_idx.size()),
                               derive_seed(seed, 200 + fold));
        nn::AdamOptimizer adam(opt.lr);
        for (long step = 0; step < opt.steps; ++step) {
            std::vector<int> picks = composer.next(opt.batch);
            std::vector<Var> preds;
            Tensor targets({static_cast<int>(picks.size())});
            for (std::size_t b = 0; b < picks.size(); ++b) {
                int si = train_idx[static_cast<std::size_t>(picks[b])];
                preds.push_back(ag::flatten(predict(si, true), {1, 1, 1}));
                targets[static_cast<std::int64_t>(b)] =
                    sequences[static_cast<std::size_t>(si)].angle_deg;
            }
            Var pv = ag::flatten(ag::concat_ch(preds), {static_cast<int>(picks.size())});
            Var loss = losses::steering_loss(pv, targets, opt.lambda_steer);
            if (!std::isfinite(loss.item()))
                throw std::runtime_error("non-finite steering loss at fold " +
                                         std::to_string(fold));
            loss.backward();
            adam.step(m.reg.params(), active, opt.clip_norm);
            if (opt.weight_decay > 0)
                for (const auto& name : active) {
                    Tensor& v = const_cast<Var&>(m.reg.params().at(name)).value_mut();
                    for (auto& x : v.data) x *= 1.0 - opt.lr * opt.weight_decay;
                }
            m.reg.zero_grads();
        }

        auto mse_over = [&](const std::vector<int>& idx) {
            double acc = 0;
            for (int si : idx) {
                double d = predict(si, false).item() -
                           sequences[static_cast<std::size_t>(si)].angle_deg;
                acc += d * d;
            }
            return acc / static_cast<double>(idx.size());
        };
        fold_mse.emplace_back(mse_over(train_idx), mse_over(plan.test_indices[fold]));
        out.frozen_after.push_back(component_checksum(m, frozen_comps));
    }
    out.report = metrics::steering_report(fold_mse);
    return out;
}

metrics::SteeringReport steering_constant_baseline(
    const std::vector<synth::SteeringSequence>& sequences, const FoldPlan& plan) {
    std::vector<std::pair<double, double>> fold_mse;
    for (std::size_t fold = 0; fold < plan.test_indices.size(); ++fold) {
        std::vector<int> train_idx = plan.train_indices(fold);
        double mean = 0;
        for (int si : train_idx) mean += sequences[static_cast<std::size_t>(si)].angle_deg;
        mean /= static_cast<double>(train_idx.size());
        auto mse_over = [&](const std::vector<int>& idx) {
            double acc = 0;
            for (int si : idx) {
                double d = sequences[static_cast<std::size_t>(si)].angle_deg - mean;
                acc += d * d;
            }
            return acc / static_cast<double>(idx.size());
        };
        fold_mse.emplace_back(mse_over(train_idx), mse_over(plan.test_indices[fold]));
    }
    return metrics::steering_report(fold_mse);
}

}  // namespace uniperc::train
