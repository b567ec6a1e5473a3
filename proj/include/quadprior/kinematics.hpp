#pragma once

// Quadruped skeleton, forward kinematics from leg joint angles, the inverse
// angle extraction, pinhole projection and keypoint annotations.
//
// Frame convention (serialized in the rig file as "euler": "XYZ-intrinsic",
// "bone_axis": "Z"): every bone owns an orthonormal frame whose Z axis points
// along the bone. X is the lateral reference projected orthogonal to Z, and
// Y = Z x X. A leg bone's posed frame is
//
//     R_bone = R_parent * (R_parent_rest^T * R_bone_rest) * Rx(a) * Ry(b) * Rz(c)
//
// so (a, b, c) = (0, 0, 0) reproduces the rest pose, a is flexion about the
// lateral axis, b abduction and c twist about the bone.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quadprior/error.hpp"
#include "quadprior/image.hpp"
#include "quadprior/vae.hpp"

namespace quadprior::kinematics {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr std::size_t kKeypointCount = 17;

/// AP10K keypoint order.
inline constexpr std::array<std::string_view, kKeypointCount> kKeypointNames = {
    "left_eye",       "right_eye", "nose",      "neck",          "root_of_tail", "left_shoulder",
    "left_elbow",     "left_front_paw", "right_shoulder", "right_elbow", "right_front_paw", "left_hip",
    "left_knee",      "left_back_paw",  "right_hip",      "right_knee",  "right_back_paw",
};

/// AP10K skeleton edges, 1-based as in the COCO category record.
inline constexpr std::array<std::array<int, 2>, 17> kSkeletonEdges = {{
    {1, 2}, {1, 3}, {2, 3}, {3, 4}, {4, 5}, {4, 6}, {6, 7}, {7, 8}, {4, 9},
    {9, 10}, {10, 11}, {5, 12}, {12, 13}, {13, 14}, {5, 15}, {15, 16}, {16, 17},
}};

std::size_t keypoint_index(std::string_view name);

struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    [[nodiscard]] Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    /// this * other.
    [[nodiscard]] RigidTransform compose(const RigidTransform& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }
};

struct Bone {
    std::string name;
    int parent = -1;                  // -1: attached to the root transform origin
    Vec3 rest_direction = Vec3::UnitX();  // unit, in the rest (root) frame
    double length = 1.0;              // meters
    double thickness = 0.05;          // meters, used only by the silhouette renderer
    int joint = -1;                   // leg joint index into vae::kJointNames, or -1
};

enum class BoneEnd { Head, Tail };

struct KeypointSource {
    std::string name;
    std::size_t bone = 0;
    BoneEnd end = BoneEnd::Tail;
};

class SkeletonRig {
public:
    SkeletonRig() = default;
    SkeletonRig(std::vector<Bone> bones, std::vector<KeypointSource> keypoints,
                Vec3 lateral_reference = Vec3::UnitY());

    [[nodiscard]] const std::vector<Bone>& bones() const noexcept { return bones_; }
    /// In AP10K order.
    [[nodiscard]] const std::vector<KeypointSource>& keypoints() const noexcept { return keypoints_; }
    [[nodiscard]] const Vec3& lateral_reference() const noexcept { return lateral_; }
    /// Rest frame of a bone (columns X, Y, Z; Z along the bone).
    [[nodiscard]] const Mat3& rest_frame(std::size_t bone) const { return rest_frames_.at(bone); }
    /// Bone driven by leg joint `joint`.
    [[nodiscard]] std::size_t joint_bone(std::size_t joint) const { return joint_bones_.at(joint); }

    /// Topological order, unit directions, positive lengths, all twelve joints
    /// mapped once, 17 distinct AP10K keypoints. Throws ConfigError.
    void validate() const;

private:
    std::vector<Bone> bones_;
    std::vector<KeypointSource> keypoints_;
    Vec3 lateral_ = Vec3::UnitY();
    std::vector<Mat3> rest_frames_;
    std::array<std::size_t, vae::kJointCount> joint_bones_{};
};

/// Orthonormal frame with Z along `direction` and X toward `lateral`.
Mat3 frame_from_direction(const Vec3& direction, const Vec3& lateral);

/// Intrinsic X-Y-Z rotation Rx(a) Ry(b) Rz(c), angles in degrees.
Mat3 euler_xyz(double a_deg, double b_deg, double c_deg);
/// Inverse of euler_xyz on the principal branch b in [-90, 90].
std::array<double, 3> decompose_xyz(const Mat3& r);

struct Pose3D {
    std::vector<Vec3> heads;   // bone start points, meters
    std::vector<Vec3> tails;   // bone end points
    std::vector<Mat3> frames;  // posed bone frames
    RigidTransform root;
};

Pose3D forward_kinematics(const SkeletonRig& rig, const vae::PoseAngles& pose, const RigidTransform& root = {});

/// Joint angles of a posed skeleton relative to each parent's rest-aligned
/// frame. Throws DegenerateInputError on a zero-length bone or a frame that
/// disagrees with its bone's endpoints.
vae::PoseAngles extract_angles(const SkeletonRig& rig, const Pose3D& posed);

/// Keypoint positions in world coordinates, AP10K order.
std::array<Vec3, kKeypointCount> keypoint_positions(const SkeletonRig& rig, const Pose3D& posed);

struct Camera {
    double focal_px = 500.0;
    Eigen::Vector2d principal_point{256.0, 256.0};
    std::size_t width = 512;
    std::size_t height = 512;
    RigidTransform extrinsic;  // world -> camera; camera looks along +Z, image y points down

    void validate() const;
};

struct ProjectedKeypoint {
    double x = 0.0;
    double y = 0.0;
    double depth = 0.0;
    bool in_frame = false;
};

using Projection = std::array<ProjectedKeypoint, kKeypointCount>;

/// Pinhole projection of a world point.
ProjectedKeypoint project_point(const Camera& cam, const Vec3& world);
Projection project_keypoints(const Pose3D& posed, const SkeletonRig& rig, const Camera& cam);

struct ImageMeta {
    std::int64_t id = 0;
    std::string file_name;
    std::size_t width = 0;
    std::size_t height = 0;
};

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    int visibility = 0;  // 0 absent, 1 labeled but occluded, 2 visible
};

struct BoundingBox {
    double x = 0.0;
    double y = 0.0;
    double width = 0.0;
    double height = 0.0;
};

struct KeypointAnnotation {
    std::int64_t id = 0;
    std::int64_t image_id = 0;
    std::array<Keypoint, kKeypointCount> keypoints{};
    BoundingBox bbox;

    [[nodiscard]] std::size_t labeled_count() const;
};

class EmptyAnnotationError : public Error {
public:
    using Error::Error;
};

/// Visibility 2 for in-frame points, 1 where `occluder` covers them, 0 (and
/// zeroed coordinates) out of frame. The box is the tight box of labeled points
/// padded by 5% of its size on each side and clipped to the image. Throws
/// EmptyAnnotationError when no keypoint is in frame.
KeypointAnnotation make_annotation(const Projection& projected, const ImageMeta& image,
                                   const BinaryMask* occluder = nullptr);

/// COCO keypoint file with one category in the AP10K layout.
struct CocoDataset {
    std::string category = "zebra";
    std::vector<ImageMeta> images;
    std::vector<KeypointAnnotation> annotations;
};

nlohmann::json to_json(const CocoDataset& data);
/// Throws ParseError naming the JSON path of the first bad field.
CocoDataset coco_from_json(const nlohmann::json& doc, std::string_view source = "annotations");
/// Checks the written schema: ids, 51-value keypoint arrays, boxes inside images.
void validate_coco(const nlohmann::json& doc);

// Rig and camera files.
SkeletonRig rig_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const SkeletonRig& rig);
SkeletonRig load_rig(const std::filesystem::path& path);
Camera camera_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const Camera& cam);
Camera load_camera(const std::filesystem::path& path);

/// Leg poses sampled from a phase-driven gait model (walk, trot, gallop,
/// standing shifts) with per-sample jitter, pushed through forward
/// kinematics and read back with extract_angles. Stand-in for angles
/// extracted from animated models.
std::vector<vae::PoseAngles> synthesize_gait_poses(const SkeletonRig& rig, std::size_t count, std::uint64_t seed);

}  // namespace quadprior::kinematics
