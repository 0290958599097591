#include "uniperc/geom.hpp"

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>

namespace uniperc::geom {

void CameraIntrinsics::validate() const {
    if (fx <= 0 || fy <= 0) throw std::invalid_argument("intrinsics: nonpositive focal length");
    if (width <= 0 || height <= 0) throw std::invalid_argument("intrinsics: empty image");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
        throw std::invalid_argument("intrinsics: principal point outside image");
}

std::array<double, 9> RigidPose::rotation_matrix() const {
    Eigen::Vector3d r(rotation[0], rotation[1], rotation[2]);
    double theta = r.norm();
    Eigen::Matrix3d R;
    if (theta < 1e-14) {
        R = Eigen::Matrix3d::Identity();
    } else {
        R = Eigen::AngleAxisd(theta, r / theta).toRotationMatrix();
    }
    std::array<double, 9> out;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) out[i * 3 + j] = R(i, j);
    return out;
}

RigidPose RigidPose::inverse() const {
    auto R = rotation_matrix();
    RigidPose inv;
    for (int i = 0; i < 3; ++i) inv.rotation[i] = -rotation[i];
    // t' = -R^T t
    for (int i = 0; i < 3; ++i)
        inv.translation[i] =
            -(R[0 * 3 + i] * translation[0] + R[1 * 3 + i] * translation[1] +
              R[2 * 3 + i] * translation[2]);
    return inv;
}

RigidPose RigidPose::compose(const RigidPose& other) const {
    auto Ra = rotation_matrix();
    auto Rb = other.rotation_matrix();
    Eigen::Matrix3d A, B;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            A(i, j) = Ra[i * 3 + j];
            B(i, j) = Rb[i * 3 + j];
        }
    Eigen::Matrix3d C = A * B;
    Eigen::AngleAxisd aa(C);
    RigidPose out;
    Eigen::Vector3d rv = aa.angle() * aa.axis();
    Eigen::Vector3d t = A * Eigen::Vector3d(other.translation[0], other.translation[1],
                                            other.translation[2]) +
                        Eigen::Vector3d(translation[0], translation[1], translation[2]);
    for (int i = 0; i < 3; ++i) {
        out.rotation[i] = rv(i);
        out.translation[i] = t(i);
    }
    return out;
}

std::array<double, 3> RigidPose::apply(const std::array<double, 3>& p) const {
    auto R = rotation_matrix();
    std::array<double, 3> out;
    for (int i = 0; i < 3; ++i)
        out[i] = R[i * 3 + 0] * p[0] + R[i * 3 + 1] * p[1] + R[i * 3 + 2] * p[2] +
                 translation[i];
    return out;
}

Plane Plane::oriented_toward(const std::array<double, 3>& p) const {
    if (height(p) >= 0) return *this;
    return Plane{{-normal[0], -normal[1], -normal[2]}, -offset};
}

Var unproject(const Var& depth, const CameraIntrinsics& K) {
    K.validate();
    const Tensor& d = depth.value();
    if (d.rank() != 3 || d.dim(0) != 1 || d.dim(1) != K.height || d.dim(2) != K.width)
        throw std::invalid_argument("unproject: depth " + d.shape_str() +
                                    " does not match intrinsics");
    int H = K.height, W = K.width;
    // per-pixel multipliers (u-cx)/fx and (v-cy)/fy are constants
    Tensor mx({1, H, W}), my({1, H, W}), ones({1, H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            mx.at(0, y, x) = (x - K.cx) / K.fx;
            my.at(0, y, x) = (y - K.cy) / K.fy;
            ones.at(0, y, x) = 1.0;
        }
    Var px = ag::mul_const(depth, mx);
    Var py = ag::mul_const(depth, my);
    Var pz = ag::mul_const(depth, ones);
    return ag::concat_ch({px, py, pz});
}

Var project(const Var& points, const CameraIntrinsics& K, Tensor* valid, double z_eps) {
    K.validate();
    const Tensor& p = points.value();
    if (p.rank() != 3 || p.dim(0) != 3)
        throw std::invalid_argument("project: need {3,H,W} points");
    int H = p.dim(1), W = p.dim(2);
    Var x = ag::slice_ch(points, 0, 1);
    Var y = ag::slice_ch(points, 1, 1);
    Var z = ag::slice_ch(points, 2, 1);
    Var zc = ag::clamp_min(z, z_eps);
    Var u = ag::add_scalar(ag::mul_scalar(ag::div(x, zc), K.fx), K.cx);
    Var v = ag::add_scalar(ag::mul_scalar(ag::div(y, zc), K.fy), K.cy);
    if (valid) {
        *valid = Tensor({1, H, W});
        for (int yy = 0; yy < H; ++yy)
            for (int xx = 0; xx < W; ++xx) {
                double zz = p.at(2, yy, xx);
                double uu = u.value().at(0, yy, xx);
                double vv = v.value().at(0, yy, xx);
                bool ok = zz > z_eps && uu >= 0 && uu <= K.width - 1 && vv >= 0 &&
                          vv <= K.height - 1;
                valid->at(0, yy, xx) = ok ? 1.0 : 0.0;
            }
    }
    return ag::concat_ch({u, v});
}

namespace {

Var vec_elem(const Var& v, int i) {
    // {N} vector -> scalar {1}
    Var chw = ag::flatten(v, {static_cast<int>(v.value().numel()), 1, 1});
    return ag::flatten(ag::slice_ch(chw, i, 1), {1});
}

}  // namespace

Var apply_pose(const Var& points, const Var& pose6) {
    const Tensor& p = points.value();
    if (p.rank() != 3 || p.dim(0) != 3)
        throw std::invalid_argument("apply_pose: need {3,H,W} points");
    if (pose6.value().numel() != 6)
        throw std::invalid_argument("apply_pose: pose must have 6 values");
    int H = p.dim(1), W = p.dim(2);

    Var rx = vec_elem(pose6, 0), ry = vec_elem(pose6, 1), rz = vec_elem(pose6, 2);
    Var tx = vec_elem(pose6, 3), ty = vec_elem(pose6, 4), tz = vec_elem(pose6, 5);

    using namespace ag;
    Var t2 = add(add(square(rx), square(ry)), square(rz));
    Var A, B, C;  // sin(th)/th, (1-cos th)/th^2, cos th
    if (t2.item() > 1e-16) {
        Var th = vsqrt(t2);
        A = div(vsin(th), th);
        B = div(sub(Var::scalar(1.0), vcos(th)), t2);
        C = vcos(th);
    } else {
        // Taylor around zero keeps the graph smooth at the identity
        A = sub(Var::scalar(1.0), mul_scalar(t2, 1.0 / 6.0));
        B = sub(Var::scalar(0.5), mul_scalar(t2, 1.0 / 24.0));
        C = sub(Var::scalar(1.0), mul_scalar(t2, 0.5));
    }

    // R_ij = C*delta_ij + A*K_ij + B*r_i*r_j with K the cross-product matrix
    std::array<Var, 3> r = {rx, ry, rz};
    std::array<std::array<Var, 3>, 3> K;
    Var zero = Var::scalar(0.0);
    K[0] = {zero, neg(rz), ry};
    K[1] = {rz, zero, neg(rx)};
    K[2] = {neg(ry), rx, zero};

    std::array<Var, 3> xin = {slice_ch(points, 0, 1), slice_ch(points, 1, 1),
                              slice_ch(points, 2, 1)};
    std::array<Var, 3> t = {tx, ty, tz};
    std::vector<Var> out_ch;
    for (int i = 0; i < 3; ++i) {
        Var acc;
        for (int j = 0; j < 3; ++j) {
            Var Rij = add(mul(A, K[i][j]), mul(B, mul(r[i], r[j])));
            if (i == j) Rij = add(Rij, C);
            Var term = scale_by(Rij, xin[j]);
            acc = acc.defined() ? add(acc, term) : term;
        }
        acc = shift_by(t[i], acc);
        out_ch.push_back(acc);
    }
    (void)H;
    (void)W;
    return concat_ch(out_ch);
}

Var rigid_flow(const Var& depth, const Var& pose6, const CameraIntrinsics& K) {
    Var pts = unproject(depth, K);
    return ag::sub(apply_pose(pts, pose6), pts);
}

ComposedFlows compose_flows(const Var& flow_rigid, const Var& flow_complete, const Var& mask) {
    require_same_shape(flow_rigid.value(), flow_complete.value(), "compose_flows");
    const Tensor& m = mask.value();
    if (m.rank() != 3 || m.dim(0) != 1 || m.dim(1) != flow_rigid.value().dim(1) ||
        m.dim(2) != flow_rigid.value().dim(2))
        throw std::invalid_argument("compose_flows: mask shape mismatch");
    Var indep = ag::mul_bcast_ch(ag::sub(flow_complete, flow_rigid), mask);
    return {indep, ag::add(flow_rigid, indep)};
}

WarpResult warp_synthesize(const Var& source, const Var& depth_t, const Var& final_flow,
                           const CameraIntrinsics& K) {
    const Tensor& s = source.value();
    if (s.rank() != 3 || s.dim(1) != K.height || s.dim(2) != K.width)
        throw std::invalid_argument("warp_synthesize: source shape mismatch");
    require_same_shape(final_flow.value(),
                       Tensor::zeros({3, K.height, K.width}), "warp_synthesize flow");
    Var pts = unproject(depth_t, K);
    Var moved = ag::add(pts, final_flow);
    Tensor valid;
    Var coords = project(moved, K, &valid);
    Var img = ag::grid_sample(source, coords);
    return {img, valid};
}

Var signed_height_above(const Var& points, const Plane& plane) {
    Var x = ag::slice_ch(points, 0, 1);
    Var y = ag::slice_ch(points, 1, 1);
    Var z = ag::slice_ch(points, 2, 1);
    using namespace ag;
    return add_scalar(add(add(mul_scalar(x, plane.normal[0]), mul_scalar(y, plane.normal[1])),
                          mul_scalar(z, plane.normal[2])),
                      -plane.offset);
}

double signed_height_above(const std::array<double, 3>& p, const Plane& plane) {
    return plane.height(p);
}

std::vector<std::array<double, 3>> grid_to_points(const Tensor& points, int stride) {
    if (points.rank() != 3 || points.dim(0) != 3)
        throw std::invalid_argument("grid_to_points: need {3,H,W}");
    std::vector<std::array<double, 3>> out;
    for (int y = 0; y < points.dim(1); y += stride)
        for (int x = 0; x < points.dim(2); x += stride)
            out.push_back({points.at(0, y, x), points.at(1, y, x), points.at(2, y, x)});
    return out;
}

namespace {

Plane plane_from_3(const std::array<double, 3>& a, const std::array<double, 3>& b,
                   const std::array<double, 3>& c, bool* ok) {
    Eigen::Vector3d pa(a[0], a[1], a[2]), pb(b[0], b[1], b[2]), pc(c[0], c[1], c[2]);
    Eigen::Vector3d n = (pb - pa).cross(pc - pa);
    double nn = n.norm();
    if (nn < 1e-12) {
        *ok = false;
        return {};
    }
    n /= nn;
    *ok = true;
    return Plane{{n(0), n(1), n(2)}, n.dot(pa)};
}

Plane canonicalize(Plane p) {
    int k = 0;
    for (int i = 1; i < 3; ++i)
        if (std::abs(p.normal[i]) > std::abs(p.normal[k])) k = i;
    if (p.normal[k] < 0) {
        for (auto& v : p.normal) v = -v;
        p.offset = -p.offset;
    }
    return p;
}

Plane lsq_refit(const std::vector<std::array<double, 3>>& pts,
                const std::vector<int>& idx) {
    Eigen::Vector3d mean = Eigen::Vector3d::Zero();
    for (int i : idx) mean += Eigen::Vector3d(pts[i][0], pts[i][1], pts[i][2]);
    mean /= static_cast<double>(idx.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (int i : idx) {
        Eigen::Vector3d d = Eigen::Vector3d(pts[i][0], pts[i][1], pts[i][2]) - mean;
        cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
    Eigen::Vector3d n = es.eigenvectors().col(0);  // smallest eigenvalue
    n.normalize();
    return canonicalize(Plane{{n(0), n(1), n(2)}, n.dot(mean)});
}

}  // namespace

Plane fit_ground_plane(const std::vector<std::array<double, 3>>& points,
                       const RansacParams& params, std::uint64_t seed) {
    const int n = static_cast<int>(points.size());
    if (n < 3) throw std::invalid_argument("fit_ground_plane: need at least 3 points");

    double thresh = params.inlier_threshold;
    if (thresh <= 0) {
        std::vector<double> zs(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) zs[i] = points[i][2];
        std::nth_element(zs.begin(), zs.begin() + zs.size() / 2, zs.end());
        thresh = 0.01 * std::abs(zs[zs.size() / 2]);
        if (thresh <= 0) thresh = 1e-3;
    }

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    Plane best{};
    int best_count = -1;
    for (int it = 0; it < params.iterations; ++it) {
        int ia = pick(rng), ib = pick(rng), ic = pick(rng);
        if (ia == ib || ib == ic || ia == ic) continue;
        bool ok = false;
        Plane cand = plane_from_3(points[ia], points[ib], points[ic], &ok);
        if (!ok) continue;
        int count = 0;
        for (const auto& p : points)
            if (std::abs(cand.height(p)) <= thresh) ++count;
        if (count > best_count) {
            best_count = count;
            best = cand;
        }
    }
    if (best_count < 3) throw std::invalid_argument("fit_ground_plane: degenerate input");

    std::vector<int> inliers;
    for (int i = 0; i < n; ++i)
        if (std::abs(best.height(points[i])) <= thresh) inliers.push_back(i);
    return lsq_refit(points, inliers);
}

}  // namespace uniperc::geom
