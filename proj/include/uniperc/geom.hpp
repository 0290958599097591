#pragma once

#include <array>
#include <random>

#include "uniperc/autograd.hpp"

namespace uniperc::geom {

struct CameraIntrinsics {
    double fx = 1, fy = 1, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const;
};

// SE(3) transform T_{t->s}: x_s = R x_t + t. Axis-angle rotation (radians),
// |rotation| < pi.
struct RigidPose {
    std::array<double, 3> rotation{0, 0, 0};
    std::array<double, 3> translation{0, 0, 0};

    std::array<double, 9> rotation_matrix() const;  // row-major
    RigidPose inverse() const;
    RigidPose compose(const RigidPose& other) const;  // this after other
    std::array<double, 3> apply(const std::array<double, 3>& p) const;
};

enum class FlowRole { rigid, complete, independent, final_flow, discrepancy };

struct Plane {
    std::array<double, 3> normal{0, 1, 0};  // unit
    double offset = 0;                      // n . p = offset on the plane

    // Same plane, normal flipped if needed so that `p` sits on the positive side.
    Plane oriented_toward(const std::array<double, 3>& p) const;
    double height(const std::array<double, 3>& p) const {
        return normal[0] * p[0] + normal[1] * p[1] + normal[2] * p[2] - offset;
    }
};

// --- differentiable geometry (Var-based; wrap Tensors with Var::constant) ---

// depth {1,H,W} -> camera-frame points {3,H,W}
Var unproject(const Var& depth, const CameraIntrinsics& K);

// points {3,H,W} -> pixel coords {2,H,W} (u,v); validity 0/1 written to *valid
// where z > eps and (u,v) lands inside the image.
Var project(const Var& points, const CameraIntrinsics& K, Tensor* valid,
            double z_eps = 1e-6);

// axis-angle+translation {6} applied to points {3,H,W}: R x + t
Var apply_pose(const Var& points, const Var& pose6);

// F_R = (R x + t) - x from depth and pose
Var rigid_flow(const Var& depth, const Var& pose6, const CameraIntrinsics& K);

struct ComposedFlows {
    Var independent;  // M * (F_C - F_R)
    Var final_flow;   // F_R + independent
};
ComposedFlows compose_flows(const Var& flow_rigid, const Var& flow_complete, const Var& mask);

struct WarpResult {
    Var image;      // {C,H,W}
    Tensor valid;   // {1,H,W} 0/1
};
// Displaces each target pixel's 3D point by final_flow, projects into the
// source view and bilinearly samples source there (inverse warping).
WarpResult warp_synthesize(const Var& source, const Var& depth_t, const Var& final_flow,
                           const CameraIntrinsics& K);

// heights {1,H,W} of a point grid over a fixed plane (differentiable in points)
Var signed_height_above(const Var& points, const Plane& plane);

// --- plain geometry ---

struct RansacParams {
    int iterations = 100;
    double inlier_threshold = 0.0;  // <= 0: 1% of the median point depth (z)
};

// RANSAC + least-squares refit over inliers. Deterministic for a fixed seed;
// the normal is canonicalized so its largest-magnitude component is positive.
Plane fit_ground_plane(const std::vector<std::array<double, 3>>& points,
                       const RansacParams& params, std::uint64_t seed);

double signed_height_above(const std::array<double, 3>& p, const Plane& plane);

// point grid {3,H,W} -> flat list, optionally strided
std::vector<std::array<double, 3>> grid_to_points(const Tensor& points, int stride = 1);

}  // namespace uniperc::geom
