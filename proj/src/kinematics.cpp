#include "quadprior/kinematics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <string>

#include "quadprior/error.hpp"

namespace quadprior::kinematics {
namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;
constexpr double kRadToDeg = 180.0 / std::numbers::pi;

// Posed and rest frames of a bone's parent; the root counts as a parent whose
// rest frame is the identity.
struct ParentFrames {
    Mat3 posed;
    Mat3 rest;
};

ParentFrames parent_frames(const SkeletonRig& rig, std::size_t bone, const std::vector<Mat3>& posed,
                           const Mat3& root_rotation) {
    const int parent = rig.bones()[bone].parent;
    if (parent < 0) return {root_rotation, Mat3::Identity()};
    const auto p = static_cast<std::size_t>(parent);
    return {posed[p], rig.rest_frame(p)};
}

}  // namespace

std::size_t keypoint_index(std::string_view name) {
    for (std::size_t i = 0; i < kKeypointNames.size(); ++i) {
        if (kKeypointNames[i] == name) return i;
    }
    throw UsageError("unknown keypoint '" + std::string(name) + "'");
}

Mat3 frame_from_direction(const Vec3& direction, const Vec3& lateral) {
    const Vec3 z = direction.normalized();
    Vec3 x = lateral - lateral.dot(z) * z;
    if (x.norm() < 1e-6) {
        // Bone parallel to the lateral reference: fall back to world up, then forward.
        const Vec3 fallback = std::abs(z.z()) < 0.9 ? Vec3::UnitZ() : Vec3::UnitX();
        x = fallback - fallback.dot(z) * z;
    }
    x.normalize();
    const Vec3 y = z.cross(x);
    Mat3 frame;
    frame.col(0) = x;
    frame.col(1) = y;
    frame.col(2) = z;
    return frame;
}

Mat3 euler_xyz(double a_deg, double b_deg, double c_deg) {
    using Eigen::AngleAxisd;
    return (AngleAxisd(a_deg * kDegToRad, Vec3::UnitX()) * AngleAxisd(b_deg * kDegToRad, Vec3::UnitY()) *
            AngleAxisd(c_deg * kDegToRad, Vec3::UnitZ()))
        .toRotationMatrix();
}

std::array<double, 3> decompose_xyz(const Mat3& r) {
    const double b = std::asin(std::clamp(r(0, 2), -1.0, 1.0));
    const double a = std::atan2(-r(1, 2), r(2, 2));
    const double c = std::atan2(-r(0, 1), r(0, 0));
    return {a * kRadToDeg, b * kRadToDeg, c * kRadToDeg};
}

SkeletonRig::SkeletonRig(std::vector<Bone> bones, std::vector<KeypointSource> keypoints, Vec3 lateral_reference)
    : bones_(std::move(bones)), lateral_(std::move(lateral_reference)) {
    if (!(lateral_.norm() > 0.0)) throw ConfigError("rig lateral reference must be non-zero");
    lateral_.normalize();
    // Store keypoints in AP10K order.
    keypoints_.resize(kKeypointCount);
    std::set<std::string> seen;
    for (auto& kp : keypoints) {
        if (!seen.insert(kp.name).second) throw ConfigError("rig keypoint '" + kp.name + "' listed twice");
        std::size_t slot = 0;
        try {
            slot = keypoint_index(kp.name);
        } catch (const UsageError&) {
            throw ConfigError("rig keypoint '" + kp.name + "' is not an AP10K keypoint");
        }
        keypoints_[slot] = std::move(kp);
    }
    if (seen.size() != kKeypointCount) throw ConfigError("rig must map exactly 17 keypoints");

    joint_bones_.fill(bones_.size());
    for (std::size_t b = 0; b < bones_.size(); ++b) {
        rest_frames_.push_back(frame_from_direction(bones_[b].rest_direction, lateral_));
        const int joint = bones_[b].joint;
        if (joint < 0) continue;
        if (static_cast<std::size_t>(joint) >= vae::kJointCount)
            throw ConfigError("bone '" + bones_[b].name + "' has joint index out of range");
        if (joint_bones_[static_cast<std::size_t>(joint)] != bones_.size())
            throw ConfigError("joint " + std::string(vae::kJointNames[static_cast<std::size_t>(joint)]) +
                              " drives two bones");
        joint_bones_[static_cast<std::size_t>(joint)] = b;
    }
    validate();
}

void SkeletonRig::validate() const {
    if (bones_.empty()) throw ConfigError("rig has no bones");
    for (std::size_t b = 0; b < bones_.size(); ++b) {
        const auto& bone = bones_[b];
        if (bone.parent >= static_cast<int>(b))
            throw ConfigError("bone '" + bone.name + "' precedes its parent");
        if (std::abs(bone.rest_direction.norm() - 1.0) > 1e-9)
            throw ConfigError("bone '" + bone.name + "' rest direction is not unit length");
        if (!(bone.length > 0.0)) throw ConfigError("bone '" + bone.name + "' needs a positive length");
        if (!(bone.thickness > 0.0)) throw ConfigError("bone '" + bone.name + "' needs a positive thickness");
    }
    for (std::size_t j = 0; j < vae::kJointCount; ++j) {
        if (joint_bones_[j] >= bones_.size())
            throw ConfigError("no bone is driven by joint " + std::string(vae::kJointNames[j]));
    }
    for (const auto& kp : keypoints_) {
        if (kp.bone >= bones_.size()) throw ConfigError("keypoint '" + kp.name + "' references a missing bone");
    }
}

Pose3D forward_kinematics(const SkeletonRig& rig, const vae::PoseAngles& pose, const RigidTransform& root) {
    pose.validate();
    const auto& bones = rig.bones();
    Pose3D out;
    out.root = root;
    out.heads.resize(bones.size());
    out.tails.resize(bones.size());
    out.frames.resize(bones.size());
    for (std::size_t b = 0; b < bones.size(); ++b) {
        const auto& bone = bones[b];
        const auto parent = parent_frames(rig, b, out.frames, root.rotation);
        Mat3 frame = parent.posed * (parent.rest.transpose() * rig.rest_frame(b));
        if (bone.joint >= 0) {
            const auto j = static_cast<std::size_t>(bone.joint);
            frame = frame * euler_xyz(pose.component(j, 0), pose.component(j, 1), pose.component(j, 2));
        }
        out.frames[b] = frame;
        out.heads[b] = bone.parent < 0 ? root.translation : out.tails[static_cast<std::size_t>(bone.parent)];
        out.tails[b] = out.heads[b] + bone.length * frame.col(2);
    }
    return out;
}

vae::PoseAngles extract_angles(const SkeletonRig& rig, const Pose3D& posed) {
    const auto& bones = rig.bones();
    if (posed.heads.size() != bones.size() || posed.tails.size() != bones.size() ||
        posed.frames.size() != bones.size()) {
        throw DegenerateInputError("posed skeleton does not match the rig's bone count");
    }
    for (std::size_t b = 0; b < bones.size(); ++b) {
        const Vec3 span = posed.tails[b] - posed.heads[b];
        const double length = span.norm();
        if (!(length > 1e-12)) throw DegenerateInputError("bone '" + bones[b].name + "' has zero length");
        if ((span / length - posed.frames[b].col(2)).norm() > 1e-6)
            throw DegenerateInputError("bone '" + bones[b].name + "' frame disagrees with its endpoints");
    }
    vae::PoseAngles angles;
    for (std::size_t j = 0; j < vae::kJointCount; ++j) {
        const std::size_t b = rig.joint_bone(j);
        const auto parent = parent_frames(rig, b, posed.frames, posed.root.rotation);
        const Mat3 aligned = parent.posed * (parent.rest.transpose() * rig.rest_frame(b));
        const auto euler = decompose_xyz(aligned.transpose() * posed.frames[b]);
        for (std::size_t k = 0; k < 3; ++k) angles.component(j, k) = euler[k];
    }
    return angles;
}

std::array<Vec3, kKeypointCount> keypoint_positions(const SkeletonRig& rig, const Pose3D& posed) {
    std::array<Vec3, kKeypointCount> out;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        const auto& src = rig.keypoints()[k];
        out[k] = src.end == BoneEnd::Head ? posed.heads.at(src.bone) : posed.tails.at(src.bone);
    }
    return out;
}

void Camera::validate() const {
    if (!(focal_px > 0.0)) throw ConfigError("camera focal_px must be positive");
    if (width == 0 || height == 0) throw ConfigError("camera image size must be positive");
    const double cx = principal_point.x(), cy = principal_point.y();
    if (!(cx >= 0.0 && cx <= static_cast<double>(width) && cy >= 0.0 && cy <= static_cast<double>(height)))
        throw ConfigError("camera principal point lies outside the image");
    if ((extrinsic.rotation * extrinsic.rotation.transpose() - Mat3::Identity()).norm() > 1e-6)
        throw ConfigError("camera rotation is not orthonormal");
}

ProjectedKeypoint project_point(const Camera& cam, const Vec3& world) {
    const Vec3 p = cam.extrinsic.apply(world);
    ProjectedKeypoint out;
    out.depth = p.z();
    if (!(p.z() > 0.0)) return out;
    out.x = cam.focal_px * p.x() / p.z() + cam.principal_point.x();
    out.y = cam.focal_px * p.y() / p.z() + cam.principal_point.y();
    out.in_frame = out.x >= 0.0 && out.x < static_cast<double>(cam.width) && out.y >= 0.0 &&
                   out.y < static_cast<double>(cam.height);
    return out;
}

Projection project_keypoints(const Pose3D& posed, const SkeletonRig& rig, const Camera& cam) {
    const auto points = keypoint_positions(rig, posed);
    Projection out;
    for (std::size_t k = 0; k < kKeypointCount; ++k) out[k] = project_point(cam, points[k]);
    return out;
}

std::size_t KeypointAnnotation::labeled_count() const {
    return static_cast<std::size_t>(
        std::count_if(keypoints.begin(), keypoints.end(), [](const Keypoint& k) { return k.visibility > 0; }));
}

KeypointAnnotation make_annotation(const Projection& projected, const ImageMeta& image, const BinaryMask* occluder) {
    if (occluder != nullptr && (occluder->width != image.width || occluder->height != image.height))
        throw UsageError("occlusion mask size does not match the image");
    KeypointAnnotation ann;
    ann.image_id = image.id;
    double min_x = INFINITY, min_y = INFINITY, max_x = -INFINITY, max_y = -INFINITY;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        const auto& p = projected[k];
        const bool inside = p.in_frame && p.x >= 0.0 && p.y >= 0.0 && p.x < static_cast<double>(image.width) &&
                            p.y < static_cast<double>(image.height);
        if (!inside) continue;
        const auto px = static_cast<std::size_t>(p.x);
        const auto py = static_cast<std::size_t>(p.y);
        const bool covered = occluder != nullptr && occluder->at(px, py);
        ann.keypoints[k] = {p.x, p.y, covered ? 1 : 2};
        min_x = std::min(min_x, p.x);
        min_y = std::min(min_y, p.y);
        max_x = std::max(max_x, p.x);
        max_y = std::max(max_y, p.y);
    }
    if (ann.labeled_count() == 0) throw EmptyAnnotationError("no keypoint of image " + std::to_string(image.id) +
                                                             " projects into the frame");
    auto padded = [](double lo, double hi, double limit) {
        double pad = 0.05 * (hi - lo);
        if (hi - lo + 2.0 * pad < 1.0) pad = 0.5 * (1.0 - (hi - lo));
        return std::pair{std::max(0.0, lo - pad), std::min(limit, hi + pad)};
    };
    const auto [x0, x1] = padded(min_x, max_x, static_cast<double>(image.width));
    const auto [y0, y1] = padded(min_y, max_y, static_cast<double>(image.height));
    ann.bbox = {x0, y0, x1 - x0, y1 - y0};
    return ann;
}

}  // namespace quadprior::kinematics
