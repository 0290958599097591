#pragma once

#include <filesystem>
#include <optional>

#include <nlohmann/json.hpp>

#include "uniperc/geom.hpp"
#include "uniperc/tensor.hpp"

namespace uniperc::synth {

// World layout: camera axes x-right / y-down / z-forward. A textured ground
// plane sits below the camera, a textured back wall caps the scene, and
// axis-aligned boxes stand on the ground; some of them translate with a
// constant per-frame velocity. Everything is raycast, so depth, labels and
// correspondences are analytic.
struct SceneConfig {
    int width = 96;
    int height = 64;
    int frames = 3;
    int static_boxes = 5;
    int moving_boxes = 0;
    double motion_amplitude = 0.12;  // per-frame translation of moving boxes
    double cam_speed = 0.15;         // forward translation per frame
    double cam_yaw_rate = 0.0;       // radians per frame (positive = left turn)
    double ground_y = 1.5;           // ground plane height below the camera
    double wall_z = 28.0;            // back wall distance at frame 0
    double texture_freq = 0.45;      // value-noise base frequency
    int semantic_classes = 4;        // ground, wall, plus box classes

    void validate() const;
};

// Ground truth of one (target, source) frame pair. Flow fields are per-pixel
// 3D displacements taking the target-frame point to its source-camera-frame
// position; the flow identity F_F = F_R + M*(F_C - F_R) holds exactly.
struct PairGroundTruth {
    int target = 0, source = 0;
    geom::RigidPose pose_t_to_s;
    Tensor flow_rigid;        // {3,H,W}
    Tensor flow_complete;     // {3,H,W}
    Tensor flow_independent;  // {3,H,W}
    Tensor flow_final;        // {3,H,W}
    Tensor motion_mask;       // {1,H,W} binary
    Tensor visible;           // {1,H,W} 1 where the point is unoccluded in source
};

struct SyntheticScene {
    SceneConfig config;
    std::uint64_t seed = 0;
    geom::CameraIntrinsics intrinsics;
    std::vector<Tensor> frames;  // {1,H,W} in [0,1]
    std::vector<Tensor> depths;  // {1,H,W}
    std::vector<geom::RigidPose> cam_from_world;  // per frame
    Tensor semantic;   // {1,H,W} class ids, target frame
    Tensor instance;   // {1,H,W} instance ids (0 = stuff), target frame
    geom::Plane ground_plane;  // oriented toward the camera (sky side positive)
    std::vector<PairGroundTruth> pairs;  // (1,0) and (1,2) for the middle frame

    int target_frame() const { return config.frames / 2 == 0 ? 0 : 1; }
    const PairGroundTruth& pair(int source) const;
    // Flow identity + warp PSNR self-check; throws on violation.
    void verify(double min_psnr = 40.0) const;
};

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config);

struct FrameTriple {
    Tensor source_prev, target, source_next;  // {1,H,W}
    geom::CameraIntrinsics intrinsics;
};
std::vector<FrameTriple> build_triples(const std::vector<Tensor>& frames,
                                       const geom::CameraIntrinsics& K);

// Removes the bottom `fraction` rows from the image and all aligned maps.
// The principal point is unchanged; only the height shrinks.
struct CropResult {
    std::vector<Tensor> maps;
    geom::CameraIntrinsics intrinsics;
};
CropResult crop_bottom(const std::vector<Tensor>& maps, const geom::CameraIntrinsics& K,
                       double fraction);

struct SteeringSequence {
    std::vector<Tensor> frames;  // exactly 16
    double angle_deg = 0;
    geom::CameraIntrinsics intrinsics;
};
// 16-frame sequences under constant-curvature trajectories; the target is the
// signed yaw rate scaled to degrees.
std::vector<SteeringSequence> make_steering_dataset(std::uint64_t seed, int n_sequences,
                                                    const SceneConfig& base,
                                                    double max_angle_deg = 20.0);

// --- on-disk dataset ---
// layout: <root>/scenes/<id>/frame_<t>.png, gt.nta, meta.json; <root>/manifest.json
void save_scene(const std::filesystem::path& scene_dir, const SyntheticScene& scene);
SyntheticScene load_scene(const std::filesystem::path& scene_dir);

struct DatasetManifest {
    std::vector<std::string> train_scenes;
    std::vector<std::string> val_scenes;
};
void save_manifest(const std::filesystem::path& root, const DatasetManifest& m,
                   const nlohmann::json& extra);
DatasetManifest load_manifest(const std::filesystem::path& root);

// deterministic procedural texture used by the renderer (exposed for tests)
double value_noise(double x, double y, double z, std::uint64_t seed);

}  // namespace uniperc::synth
