#include "uniperc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "uniperc/checkpoint.hpp"
#include "uniperc/png_io.hpp"

namespace uniperc::synth {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double lattice(std::int64_t ix, std::int64_t iy, std::int64_t iz, std::uint64_t seed) {
    std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(ix) * 0x8da6b343 +
                                               static_cast<std::uint64_t>(iy) * 0xd8163841 +
                                               static_cast<std::uint64_t>(iz) * 0xcb1ab31f));
    return static_cast<double>(h >> 11) / 9007199254740992.0;  // [0,1)
}

double smooth(double t) { return t * t * (3 - 2 * t); }

double noise_octave(double x, double y, double z, std::uint64_t seed) {
    double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
    auto ix = static_cast<std::int64_t>(fx);
    auto iy = static_cast<std::int64_t>(fy);
    auto iz = static_cast<std::int64_t>(fz);
    double tx = smooth(x - fx), ty = smooth(y - fy), tz = smooth(z - fz);
    double acc = 0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) * (dz ? tz : 1 - tz);
                acc += w * lattice(ix + dx, iy + dy, iz + dz, seed);
            }
    return acc;
}

struct Box {
    std::array<double, 3> lo{}, hi{};   // at frame 0, world coords
    std::array<double, 3> velocity{};   // per frame
    bool moving = false;
    int semantic_class = 2;
    int instance_id = 1;
    std::uint64_t tex_seed = 0;
    double base_brightness = 0.5;
};

struct World {
    SceneConfig cfg;
    std::vector<Box> boxes;
    std::uint64_t ground_seed = 0, wall_seed = 0;

    std::array<double, 3> box_offset(const Box& b, double frame) const {
        return {b.velocity[0] * frame, b.velocity[1] * frame, b.velocity[2] * frame};
    }
};

struct Hit {
    double t = -1;       // camera-frame depth (z)
    int object = -1;     // -1 none, -2 ground, -3 wall, >=0 box index
    std::array<double, 3> world{};  // hit position in world coords
};

struct CameraState {
    std::array<double, 3> pos{};
    double yaw = 0;

    std::array<double, 3> to_world_dir(const std::array<double, 3>& d) const {
        double c = std::cos(yaw), s = std::sin(yaw);
        return {c * d[0] + s * d[2], d[1], -s * d[0] + c * d[2]};
    }
    geom::RigidPose world_from_cam() const {
        return geom::RigidPose{{0, yaw, 0}, pos};
    }
};

Hit raycast(const World& w, const CameraState& cam, double u, double v,
            const geom::CameraIntrinsics& K, double frame) {
    std::array<double, 3> dc = {(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0};
    std::array<double, 3> d = cam.to_world_dir(dc);
    const auto& o = cam.pos;
    Hit best;
    auto consider = [&](double t, int obj) {
        if (t > 0.05 && (best.t < 0 || t < best.t)) {
            best.t = t;
            best.object = obj;
        }
    };
    if (d[1] > 1e-9) consider((w.cfg.ground_y - o[1]) / d[1], -2);
    if (d[2] > 1e-9) consider((w.cfg.wall_z - o[2]) / d[2], -3);
    for (std::size_t i = 0; i < w.boxes.size(); ++i) {
        const Box& b = w.boxes[i];
        auto off = w.box_offset(b, frame);
        double tmin = 0.05, tmax = 1e18;
        bool ok = true;
        for (int a = 0; a < 3 && ok; ++a) {
            double lo = b.lo[a] + off[a], hi = b.hi[a] + off[a];
            if (std::abs(d[a]) < 1e-12) {
                if (o[a] < lo || o[a] > hi) ok = false;
            } else {
                double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
                if (t0 > t1) std::swap(t0, t1);
                tmin = std::max(tmin, t0);
                tmax = std::min(tmax, t1);
                if (tmin > tmax) ok = false;
            }
        }
        if (ok) consider(tmin, static_cast<int>(i));
    }
    if (best.object != -1)
        for (int a = 0; a < 3; ++a) best.world[a] = o[a] + best.t * d[a];
    return best;
}

double shade(const World& w, const Hit& hit, double frame) {
    // attenuate frequency with distance so far surfaces stay band-limited
    // relative to the pixel footprint; depends only on the material point,
    // so shading is consistent across views
    double f = w.cfg.texture_freq / (1.0 + 0.10 * std::abs(hit.world[2]));
    double n;
    double base;
    if (hit.object == -2) {
        n = noise_octave(hit.world[0] * f, hit.world[2] * f, 0.0, w.ground_seed) * 0.7 +
            noise_octave(hit.world[0] * f * 2.2, hit.world[2] * f * 2.2, 5.0, w.ground_seed) *
                0.3;
        base = 0.45;
    } else if (hit.object == -3) {
        n = noise_octave(hit.world[0] * f, hit.world[1] * f, 11.0, w.wall_seed) * 0.7 +
            noise_octave(hit.world[0] * f * 2.2, hit.world[1] * f * 2.2, 17.0, w.wall_seed) *
                0.3;
        base = 0.65;
    } else {
        const Box& b = w.boxes[static_cast<std::size_t>(hit.object)];
        auto off = w.box_offset(b, frame);
        double qx = hit.world[0] - off[0], qy = hit.world[1] - off[1],
               qz = hit.world[2] - off[2];
        n = noise_octave(qx * f * 1.7, qy * f * 1.7, qz * f * 1.7, b.tex_seed) * 0.7 +
            noise_octave(qx * f * 2.6, qy * f * 2.6, qz * f * 2.6, b.tex_seed + 1) * 0.3;
        base = b.base_brightness;
    }
    return std::clamp(0.55 * base + 0.65 * (n - 0.5) + 0.35, 0.02, 0.98);
}

World build_world(std::uint64_t seed, const SceneConfig& cfg) {
    World w;
    w.cfg = cfg;
    w.ground_seed = splitmix(seed ^ 0xA11CE);
    w.wall_seed = splitmix(seed ^ 0xB0B);
    std::mt19937_64 rng(splitmix(seed));
    std::uniform_real_distribution<double> ux(-3.5, 3.5), uz(4.0, 16.0), usz(0.7, 1.8),
        uh(0.8, 2.2), u01(0.0, 1.0);
    int total = cfg.static_boxes + cfg.moving_boxes;
    for (int i = 0; i < total; ++i) {
        Box b;
        bool moving = i >= cfg.static_boxes;
        double cx = moving ? ux(rng) * 0.6 : ux(rng);
        double cz = moving ? 5.0 + u01(rng) * 6.0 : uz(rng);
        double sx = usz(rng), szd = usz(rng), h = uh(rng);
        b.lo = {cx - sx / 2, cfg.ground_y - h, cz - szd / 2};
        b.hi = {cx + sx / 2, cfg.ground_y, cz + szd / 2};
        b.moving = moving;
        if (moving) {
            double sign = u01(rng) < 0.5 ? -1.0 : 1.0;
            b.velocity = {sign * cfg.motion_amplitude * (0.7 + 0.6 * u01(rng)), 0.0,
                          cfg.motion_amplitude * 0.3 * (u01(rng) - 0.5)};
        }
        int box_classes = std::max(1, cfg.semantic_classes - 2);
        b.semantic_class = 2 + static_cast<int>(rng() % static_cast<std::uint64_t>(box_classes));
        b.instance_id = i + 1;
        b.tex_seed = splitmix(seed ^ (0xC0FFEE + static_cast<std::uint64_t>(i) * 977));
        b.base_brightness = 0.25 + 0.6 * u01(rng);
        w.boxes.push_back(b);
    }
    return w;
}

CameraState camera_at(const SceneConfig& cfg, int frame) {
    CameraState cam;
    // constant yaw rate, constant speed; integrate position along the heading
    double yaw = 0;
    std::array<double, 3> pos{0, 0, 0};
    for (int k = 0; k < frame; ++k) {
        pos[0] += cfg.cam_speed * std::sin(yaw);
        pos[2] += cfg.cam_speed * std::cos(yaw);
        yaw += cfg.cam_yaw_rate;
    }
    cam.pos = pos;
    cam.yaw = yaw;
    return cam;
}

Tensor render(const World& w, const CameraState& cam, const geom::CameraIntrinsics& K,
              double frame, Tensor* depth, Tensor* semantic, Tensor* instance) {
    Tensor img({1, K.height, K.width});
    if (depth) *depth = Tensor({1, K.height, K.width});
    if (semantic) *semantic = Tensor({1, K.height, K.width});
    if (instance) *instance = Tensor({1, K.height, K.width});
    for (int y = 0; y < K.height; ++y)
        for (int x = 0; x < K.width; ++x) {
            Hit h = raycast(w, cam, x, y, K, frame);
            if (h.object == -1) throw std::logic_error("render: open sky ray");
            img.at(0, y, x) = shade(w, h, frame);
            if (depth) depth->at(0, y, x) = h.t;
            if (semantic)
                semantic->at(0, y, x) =
                    h.object == -2 ? 0 : (h.object == -3 ? 1
                                                         : w.boxes[static_cast<std::size_t>(
                                                                       h.object)]
                                                               .semantic_class);
            if (instance)
                instance->at(0, y, x) =
                    h.object >= 0 ? w.boxes[static_cast<std::size_t>(h.object)].instance_id : 0;
        }
    return img;
}

double bilinear(const Tensor& img, double u, double v) {
    int W = img.dim(2), H = img.dim(1);
    u = std::clamp(u, 0.0, W - 1.0);
    v = std::clamp(v, 0.0, H - 1.0);
    int x0 = std::min(static_cast<int>(u), W - 2 < 0 ? 0 : W - 2);
    int y0 = std::min(static_cast<int>(v), H - 2 < 0 ? 0 : H - 2);
    double fx = u - x0, fy = v - y0;
    return (1 - fy) * ((1 - fx) * img.at(0, y0, x0) + fx * img.at(0, y0, x0 + 1)) +
           fy * ((1 - fx) * img.at(0, y0 + 1, x0) + fx * img.at(0, y0 + 1, x0 + 1));
}

PairGroundTruth make_pair_gt(const World& w, const geom::CameraIntrinsics& K, int t, int s,
                             const std::vector<CameraState>& cams, const Tensor& depth_t,
                             const Tensor& depth_s) {
    PairGroundTruth gt;
    gt.target = t;
    gt.source = s;
    geom::RigidPose world_from_t = cams[static_cast<std::size_t>(t)].world_from_cam();
    geom::RigidPose world_from_s = cams[static_cast<std::size_t>(s)].world_from_cam();
    geom::RigidPose s_from_world = world_from_s.inverse();
    gt.pose_t_to_s = s_from_world.compose(world_from_t);

    int H = K.height, W = K.width;
    gt.flow_rigid = Tensor({3, H, W});
    gt.flow_complete = Tensor({3, H, W});
    gt.flow_independent = Tensor({3, H, W});
    gt.flow_final = Tensor({3, H, W});
    gt.motion_mask = Tensor({1, H, W});
    gt.visible = Tensor({1, H, W});

    // object-id map of the source frame, for the visibility footprint check
    std::vector<int> src_id(static_cast<std::size_t>(H) * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            src_id[static_cast<std::size_t>(y) * W + x] =
                raycast(w, cams[static_cast<std::size_t>(s)], x, y, K, s).object;

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double d = depth_t.at(0, y, x);
            std::array<double, 3> p = {(x - K.cx) * d / K.fx, (y - K.cy) * d / K.fy, d};
            auto rigid = gt.pose_t_to_s.apply(p);

            // which object does this pixel see?
            Hit h = raycast(w, cams[static_cast<std::size_t>(t)], x, y, K, t);
            bool moving = h.object >= 0 && w.boxes[static_cast<std::size_t>(h.object)].moving;
            std::array<double, 3> f_r = {rigid[0] - p[0], rigid[1] - p[1], rigid[2] - p[2]};
            std::array<double, 3> f_c = f_r;  // static points: complete flow is the rigid flow
            if (moving) {
                const Box& b = w.boxes[static_cast<std::size_t>(h.object)];
                std::array<double, 3> w_s = {h.world[0] + b.velocity[0] * (s - t),
                                             h.world[1] + b.velocity[1] * (s - t),
                                             h.world[2] + b.velocity[2] * (s - t)};
                auto complete = s_from_world.apply(w_s);
                f_c = {complete[0] - p[0], complete[1] - p[1], complete[2] - p[2]};
            }
            double m = moving ? 1.0 : 0.0;
            for (int a = 0; a < 3; ++a) {
                gt.flow_rigid.at(a, y, x) = f_r[a];
                gt.flow_complete.at(a, y, x) = f_c[a];
                double fi = m * (f_c[a] - f_r[a]);
                gt.flow_independent.at(a, y, x) = fi;
                gt.flow_final.at(a, y, x) = f_r[a] + fi;
            }
            gt.motion_mask.at(0, y, x) = m;

            // visibility: the displaced point, seen from the source camera
            std::array<double, 3> q = {p[0] + gt.flow_final.at(0, y, x),
                                       p[1] + gt.flow_final.at(1, y, x),
                                       p[2] + gt.flow_final.at(2, y, x)};
            bool vis = q[2] > 1e-6;
            if (vis) {
                double u = K.fx * q[0] / q[2] + K.cx;
                double v = K.fy * q[1] / q[2] + K.cy;
                vis = u >= 1 && u <= W - 2 && v >= 1 && v <= H - 2;
                if (vis) {
                    // the whole bilinear footprint must see this pixel's
                    // surface, otherwise interpolation straddles an edge
                    int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
                    for (int dy = 0; dy < 2 && vis; ++dy)
                        for (int dx = 0; dx < 2 && vis; ++dx) {
                            double ds = depth_s.at(0, y0 + dy, x0 + dx);
                            vis = std::abs(ds - q[2]) < 0.02 * q[2] + 0.05 &&
                                  src_id[static_cast<std::size_t>(y0 + dy) * W + x0 + dx] ==
                                      h.object;
                        }
                }
            }
            gt.visible.at(0, y, x) = vis ? 1.0 : 0.0;
        }
    return gt;
}

}  // namespace

void SceneConfig::validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("scene config: empty image");
    if (frames < 1) throw std::invalid_argument("scene config: need at least one frame");
    if (static_boxes < 0 || moving_boxes < 0)
        throw std::invalid_argument("scene config: negative box count");
    if (semantic_classes < 3 || semantic_classes > 8)
        throw std::invalid_argument("scene config: semantic_classes must be in [3,8]");
}

const PairGroundTruth& SyntheticScene::pair(int source) const {
    for (const auto& p : pairs)
        if (p.source == source) return p;
    throw std::out_of_range("no ground truth for source frame " + std::to_string(source));
}

void SyntheticScene::verify(double min_psnr) const {
    for (const auto& d : depths) {
        for (double v : d.data)
            if (!(v > 0) || !std::isfinite(v)) throw std::logic_error("scene: bad depth");
    }
    for (const auto& gt : pairs) {
        for (std::int64_t i = 0; i < gt.flow_final.numel(); ++i) {
            double lhs = gt.flow_final[i] - gt.flow_rigid[i];
            std::int64_t hw = gt.motion_mask.numel();
            double m = gt.motion_mask[i % hw];
            double rhs = m * (gt.flow_complete[i] - gt.flow_rigid[i]);
            if (std::abs(lhs - rhs) > 1e-12) throw std::logic_error("scene: flow identity");
        }
        // warp source by the true final flow and compare against the target
        const Tensor& I_t = frames[static_cast<std::size_t>(gt.target)];
        const Tensor& I_s = frames[static_cast<std::size_t>(gt.source)];
        const Tensor& d = depths[static_cast<std::size_t>(gt.target)];
        double se = 0;
        std::int64_t n = 0;
        for (int y = 0; y < intrinsics.height; ++y)
            for (int x = 0; x < intrinsics.width; ++x) {
                if (gt.visible.at(0, y, x) < 0.5) continue;
                double dep = d.at(0, y, x);
                double px = (x - intrinsics.cx) * dep / intrinsics.fx +
                            gt.flow_final.at(0, y, x);
                double py = (y - intrinsics.cy) * dep / intrinsics.fy +
                            gt.flow_final.at(1, y, x);
                double pz = dep + gt.flow_final.at(2, y, x);
                double u = intrinsics.fx * px / pz + intrinsics.cx;
                double v = intrinsics.fy * py / pz + intrinsics.cy;
                double diff = bilinear(I_s, u, v) - I_t.at(0, y, x);
                se += diff * diff;
                ++n;
            }
        if (n == 0) throw std::logic_error("scene: no visible pixels");
        double psnr = 10.0 * std::log10(1.0 / (se / static_cast<double>(n)));
        if (psnr < min_psnr)
            throw std::logic_error("scene: warp PSNR " + std::to_string(psnr) + " below " +
                                   std::to_string(min_psnr));
    }
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config) {
    config.validate();
    SyntheticScene sc;
    sc.config = config;
    sc.seed = seed;
    sc.intrinsics = geom::CameraIntrinsics{
        0.58 * config.width, 0.87 * config.height, config.width / 2.0, config.height / 2.0,
        config.width, config.height};

    World w = build_world(seed, config);
    std::vector<CameraState> cams;
    for (int k = 0; k < config.frames; ++k) cams.push_back(camera_at(config, k));

    int target = config.frames >= 3 ? 1 : 0;
    for (int k = 0; k < config.frames; ++k) {
        Tensor depth, sem, inst;
        Tensor img = render(w, cams[static_cast<std::size_t>(k)], sc.intrinsics, k, &depth,
                            k == target ? &sem : nullptr, k == target ? &inst : nullptr);
        sc.frames.push_back(std::move(img));
        sc.depths.push_back(std::move(depth));
        sc.cam_from_world.push_back(cams[static_cast<std::size_t>(k)].world_from_cam().inverse());
        if (k == target) {
            sc.semantic = std::move(sem);
            sc.instance = std::move(inst);
        }
    }

    // ground plane in the target camera frame, normal toward the camera
    {
        const CameraState& cam = cams[static_cast<std::size_t>(target)];
        geom::RigidPose cam_from_world = cam.world_from_cam().inverse();
        // world plane: y = ground_y, normal (0,-1,0) toward sky
        std::array<double, 3> n_world = {0, -1, 0};
        std::array<double, 3> p_world = {0, config.ground_y, 0};
        auto R = cam_from_world.rotation_matrix();
        std::array<double, 3> n_cam{};
        for (int i = 0; i < 3; ++i)
            n_cam[i] = R[i * 3 + 0] * n_world[0] + R[i * 3 + 1] * n_world[1] +
                       R[i * 3 + 2] * n_world[2];
        auto p_cam = cam_from_world.apply(p_world);
        double off = n_cam[0] * p_cam[0] + n_cam[1] * p_cam[1] + n_cam[2] * p_cam[2];
        sc.ground_plane = geom::Plane{n_cam, off}.oriented_toward({0, 0, 0});
    }

    if (config.frames >= 2) {
        std::vector<int> sources;
        if (target - 1 >= 0) sources.push_back(target - 1);
        if (target + 1 < config.frames) sources.push_back(target + 1);
        for (int s : sources)
            sc.pairs.push_back(make_pair_gt(w, sc.intrinsics, target, s, cams,
                                            sc.depths[static_cast<std::size_t>(target)],
                                            sc.depths[static_cast<std::size_t>(s)]));
        sc.verify();
    }
    return sc;
}

std::vector<FrameTriple> build_triples(const std::vector<Tensor>& frames,
                                       const geom::CameraIntrinsics& K) {
    std::vector<FrameTriple> out;
    if (frames.size() < 3) return out;
    for (std::size_t t = 1; t + 1 < frames.size(); ++t)
        out.push_back({frames[t - 1], frames[t], frames[t + 1], K});
    return out;
}

CropResult crop_bottom(const std::vector<Tensor>& maps, const geom::CameraIntrinsics& K,
                       double fraction) {
    if (fraction < 0 || fraction >= 1)
        throw std::invalid_argument("crop_bottom: fraction must be in [0,1)");
    int drop = static_cast<int>(std::floor(K.height * fraction));
    int new_h = K.height - drop;
    CropResult res;
    res.intrinsics = K;
    res.intrinsics.height = new_h;
    for (const auto& m : maps) {
        if (m.dim(1) != K.height || m.dim(2) != K.width)
            throw std::invalid_argument("crop_bottom: map shape mismatch");
        Tensor out({m.dim(0), new_h, m.dim(2)});
        for (int c = 0; c < m.dim(0); ++c)
            for (int y = 0; y < new_h; ++y)
                for (int x = 0; x < m.dim(2); ++x) out.at(c, y, x) = m.at(c, y, x);
        res.maps.push_back(std::move(out));
    }
    return res;
}

std::vector<SteeringSequence> make_steering_dataset(std::uint64_t seed, int n_sequences,
                                                    const SceneConfig& base,
                                                    double max_angle_deg) {
    if (n_sequences < 10)
        throw std::invalid_argument("make_steering_dataset: need at least 10 sequences");
    std::mt19937_64 rng(splitmix(seed ^ 0x57EE7));
    std::uniform_real_distribution<double> jitter(-0.5, 0.5);
    std::vector<SteeringSequence> out;
    for (int i = 0; i < n_sequences; ++i) {
        // stratified angles so every dataset spans the configured range
        double frac = n_sequences > 1 ? static_cast<double>(i) / (n_sequences - 1) : 0.5;
        double angle = -max_angle_deg + 2 * max_angle_deg * frac;
        angle += jitter(rng) * 2 * max_angle_deg / n_sequences;
        angle = std::clamp(angle, -max_angle_deg, max_angle_deg);

        SceneConfig cfg = base;
        cfg.frames = 16;
        cfg.cam_yaw_rate = angle * (3.14159265358979323846 / 180.0) / 8.0;
        cfg.wall_z = std::max(cfg.wall_z, 16.0 * cfg.cam_speed + 20.0);
        SyntheticScene sc = generate_scene(splitmix(seed + static_cast<std::uint64_t>(i) * 7919),
                                           cfg);
        SteeringSequence seq;
        seq.frames = std::move(sc.frames);
        seq.angle_deg = angle;
        seq.intrinsics = sc.intrinsics;
        out.push_back(std::move(seq));
    }
    // deterministic shuffle so folds see the whole range
    std::shuffle(out.begin(), out.end(), rng);
    return out;
}

void save_scene(const std::filesystem::path& dir, const SyntheticScene& sc) {
    std::filesystem::create_directories(dir);
    for (std::size_t k = 0; k < sc.frames.size(); ++k)
        png::write_gray(dir / ("frame_" + std::to_string(k) + ".png"), sc.frames[k]);

    TensorArchive arc;
    arc.meta["kind"] = "scene_gt";
    for (std::size_t k = 0; k < sc.depths.size(); ++k)
        arc.tensors["depth_" + std::to_string(k)] = sc.depths[k];
    arc.tensors["semantic"] = sc.semantic;
    arc.tensors["instance"] = sc.instance;
    for (const auto& gt : sc.pairs) {
        std::string p = "pair_" + std::to_string(gt.source) + ".";
        arc.tensors[p + "flow_rigid"] = gt.flow_rigid;
        arc.tensors[p + "flow_complete"] = gt.flow_complete;
        arc.tensors[p + "flow_independent"] = gt.flow_independent;
        arc.tensors[p + "flow_final"] = gt.flow_final;
        arc.tensors[p + "motion_mask"] = gt.motion_mask;
        arc.tensors[p + "visible"] = gt.visible;
    }
    arc.save(dir / "gt.nta");

    nlohmann::json meta;
    meta["seed"] = sc.seed;
    meta["intrinsics"] = {{"fx", sc.intrinsics.fx}, {"fy", sc.intrinsics.fy},
                          {"cx", sc.intrinsics.cx}, {"cy", sc.intrinsics.cy},
                          {"width", sc.intrinsics.width}, {"height", sc.intrinsics.height}};
    meta["ground_plane"] = {{"normal", sc.ground_plane.normal}, {"offset", sc.ground_plane.offset}};
    meta["config"] = {{"width", sc.config.width},
                      {"height", sc.config.height},
                      {"frames", sc.config.frames},
                      {"static_boxes", sc.config.static_boxes},
                      {"moving_boxes", sc.config.moving_boxes},
                      {"motion_amplitude", sc.config.motion_amplitude},
                      {"cam_speed", sc.config.cam_speed},
                      {"cam_yaw_rate", sc.config.cam_yaw_rate},
                      {"ground_y", sc.config.ground_y},
                      {"wall_z", sc.config.wall_z},
                      {"texture_freq", sc.config.texture_freq},
                      {"semantic_classes", sc.config.semantic_classes}};
    nlohmann::json poses = nlohmann::json::array();
    for (const auto& p : sc.cam_from_world)
        poses.push_back({{"rotation", p.rotation}, {"translation", p.translation}});
    meta["cam_from_world"] = poses;
    nlohmann::json pair_meta = nlohmann::json::array();
    for (const auto& gt : sc.pairs)
        pair_meta.push_back({{"target", gt.target},
                             {"source", gt.source},
                             {"rotation", gt.pose_t_to_s.rotation},
                             {"translation", gt.pose_t_to_s.translation}});
    meta["pairs"] = pair_meta;
    std::ofstream os(dir / "meta.json");
    os << meta.dump(2) << "\n";
}

SyntheticScene load_scene(const std::filesystem::path& dir) {
    std::ifstream is(dir / "meta.json");
    if (!is) throw std::runtime_error("cannot read " + (dir / "meta.json").string());
    nlohmann::json meta = nlohmann::json::parse(is);

    SyntheticScene sc;
    sc.seed = meta["seed"].get<std::uint64_t>();
    const auto& km = meta["intrinsics"];
    sc.intrinsics = {km["fx"], km["fy"], km["cx"], km["cy"], km["width"], km["height"]};
    const auto& cm = meta["config"];
    sc.config = SceneConfig{cm["width"], cm["height"], cm["frames"], cm["static_boxes"],
                            cm["moving_boxes"], cm["motion_amplitude"], cm["cam_speed"],
                            cm["cam_yaw_rate"], cm["ground_y"], cm["wall_z"],
                            cm["texture_freq"], cm["semantic_classes"]};
    sc.ground_plane.normal = meta["ground_plane"]["normal"];
    sc.ground_plane.offset = meta["ground_plane"]["offset"];
    for (const auto& p : meta["cam_from_world"]) {
        geom::RigidPose pose;
        pose.rotation = p["rotation"];
        pose.translation = p["translation"];
        sc.cam_from_world.push_back(pose);
    }

    for (int k = 0; k < sc.config.frames; ++k)
        sc.frames.push_back(png::read_gray(dir / ("frame_" + std::to_string(k) + ".png")));

    TensorArchive arc = TensorArchive::load(dir / "gt.nta");
    for (int k = 0; k < sc.config.frames; ++k)
        sc.depths.push_back(arc.tensors.at("depth_" + std::to_string(k)));
    sc.semantic = arc.tensors.at("semantic");
    sc.instance = arc.tensors.at("instance");
    for (const auto& pm : meta["pairs"]) {
        PairGroundTruth gt;
        gt.target = pm["target"];
        gt.source = pm["source"];
        gt.pose_t_to_s.rotation = pm["rotation"];
        gt.pose_t_to_s.translation = pm["translation"];
        std::string p = "pair_" + std::to_string(gt.source) + ".";
        gt.flow_rigid = arc.tensors.at(p + "flow_rigid");
        gt.flow_complete = arc.tensors.at(p + "flow_complete");
        gt.flow_independent = arc.tensors.at(p + "flow_independent");
        gt.flow_final = arc.tensors.at(p + "flow_final");
        gt.motion_mask = arc.tensors.at(p + "motion_mask");
        gt.visible = arc.tensors.at(p + "visible");
        sc.pairs.push_back(std::move(gt));
    }
    return sc;
}

void save_manifest(const std::filesystem::path& root, const DatasetManifest& m,
                   const nlohmann::json& extra) {
    nlohmann::json j;
    j["train_scenes"] = m.train_scenes;
    j["val_scenes"] = m.val_scenes;
    j["extra"] = extra;
    std::filesystem::create_directories(root);
    std::ofstream os(root / "manifest.json");
    os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& root) {
    std::ifstream is(root / "manifest.json");
    if (!is) throw std::runtime_error("cannot read manifest in " + root.string());
    nlohmann::json j = nlohmann::json::parse(is);
    DatasetManifest m;
    m.train_scenes = j["train_scenes"].get<std::vector<std::string>>();
    m.val_scenes = j["val_scenes"].get<std::vector<std::string>>();
    return m;
}

double value_noise(double x, double y, double z, std::uint64_t seed) {
    return noise_octave(x, y, z, seed);
}

}  // namespace uniperc::synth
