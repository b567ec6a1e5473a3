#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/kinematics.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::kinematics {
namespace {

using nlohmann::json;

constexpr std::string_view kEulerTag = "XYZ-intrinsic";
constexpr std::string_view kBoneAxisTag = "Z";

Vec3 vec3_from(const json& v, const std::string& where) {
    if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number())
        throw ParseError(where + ": expected three numbers");
    return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

json vec3_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

template <typename T>
T field(const json& obj, const char* key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key)) throw ParseError(where + ": missing '" + key + "'");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ParseError(where + "." + key + ": wrong type");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// COCO

json to_json(const CocoDataset& data) {
    json images = json::array();
    for (const auto& im : data.images) {
        images.push_back({{"id", im.id}, {"file_name", im.file_name}, {"width", im.width}, {"height", im.height}});
    }
    json annotations = json::array();
    for (const auto& ann : data.annotations) {
        json kps = json::array();
        for (const auto& k : ann.keypoints) {
            kps.push_back(k.visibility > 0 ? k.x : 0.0);
            kps.push_back(k.visibility > 0 ? k.y : 0.0);
            kps.push_back(k.visibility);
        }
        annotations.push_back({
            {"id", ann.id},
            {"image_id", ann.image_id},
            {"category_id", 1},
            {"keypoints", std::move(kps)},
            {"num_keypoints", ann.labeled_count()},
            {"bbox", {ann.bbox.x, ann.bbox.y, ann.bbox.width, ann.bbox.height}},
            {"area", ann.bbox.width * ann.bbox.height},
            {"iscrowd", 0},
        });
    }
    json names = json::array();
    for (auto n : kKeypointNames) names.push_back(n);
    json edges = json::array();
    for (const auto& e : kSkeletonEdges) edges.push_back({e[0], e[1]});
    return {
        {"images", std::move(images)},
        {"annotations", std::move(annotations)},
        {"categories",
         json::array({{{"id", 1}, {"name", data.category}, {"supercategory", "animal"}, {"keypoints", names},
                       {"skeleton", edges}}})},
    };
}

CocoDataset coco_from_json(const json& doc, std::string_view source) {
    const std::string src(source);
    if (!doc.is_object()) throw ParseError(src + ": expected a JSON object");
    CocoDataset data;
    const auto images = field<json>(doc, "images", src);
    const auto annotations = field<json>(doc, "annotations", src);
    if (!images.is_array()) throw ParseError(src + ".images: expected an array");
    if (!annotations.is_array()) throw ParseError(src + ".annotations: expected an array");
    if (doc.contains("categories") && doc["categories"].is_array() && !doc["categories"].empty() &&
        doc["categories"][0].contains("name") && doc["categories"][0]["name"].is_string()) {
        data.category = doc["categories"][0]["name"].get<std::string>();
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string where = src + ".images[" + std::to_string(i) + "]";
        ImageMeta im;
        im.id = field<std::int64_t>(images[i], "id", where);
        im.file_name = images[i].contains("file_name") ? field<std::string>(images[i], "file_name", where) : "";
        im.width = field<std::size_t>(images[i], "width", where);
        im.height = field<std::size_t>(images[i], "height", where);
        data.images.push_back(std::move(im));
    }
    for (std::size_t i = 0; i < annotations.size(); ++i) {
        const std::string where = src + ".annotations[" + std::to_string(i) + "]";
        const auto& a = annotations[i];
        KeypointAnnotation ann;
        ann.id = field<std::int64_t>(a, "id", where);
        ann.image_id = field<std::int64_t>(a, "image_id", where);
        const auto kps = field<json>(a, "keypoints", where);
        if (!kps.is_array() || kps.size() != 3 * kKeypointCount)
            throw ParseError(where + ".keypoints: expected 51 numbers");
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            for (std::size_t c = 0; c < 3; ++c) {
                if (!kps[3 * k + c].is_number())
                    throw ParseError(where + ".keypoints[" + std::to_string(3 * k + c) + "]: not a number");
            }
            const double v = kps[3 * k + 2].get<double>();
            if (v != 0.0 && v != 1.0 && v != 2.0)
                throw ParseError(where + ".keypoints[" + std::to_string(3 * k + 2) + "]: visibility must be 0, 1 or 2");
            ann.keypoints[k] = {kps[3 * k].get<double>(), kps[3 * k + 1].get<double>(), static_cast<int>(v)};
        }
        const auto box = field<std::vector<double>>(a, "bbox", where);
        if (box.size() != 4) throw ParseError(where + ".bbox: expected four numbers");
        ann.bbox = {box[0], box[1], box[2], box[3]};
        data.annotations.push_back(ann);
    }
    return data;
}

void validate_coco(const json& doc) {
    const auto data = coco_from_json(doc, "annotations");
    std::map<std::int64_t, const ImageMeta*> images;
    for (const auto& im : data.images) {
        if (!images.emplace(im.id, &im).second) throw ParseError("duplicate image id " + std::to_string(im.id));
        if (im.width == 0 || im.height == 0) throw ParseError("image " + std::to_string(im.id) + " has zero size");
    }
    std::set<std::int64_t> ids;
    for (const auto& ann : data.annotations) {
        const std::string where = "annotation " + std::to_string(ann.id);
        if (!ids.insert(ann.id).second) throw ParseError("duplicate " + where);
        const auto it = images.find(ann.image_id);
        if (it == images.end()) throw ParseError(where + " references missing image " + std::to_string(ann.image_id));
        const double w = static_cast<double>(it->second->width), h = static_cast<double>(it->second->height);
        const auto& b = ann.bbox;
        if (!(b.width > 0.0 && b.height > 0.0 && b.x >= 0.0 && b.y >= 0.0 && b.x + b.width <= w + 1e-9 &&
              b.y + b.height <= h + 1e-9))
            throw ParseError(where + " bbox lies outside its image");
        for (const auto& k : ann.keypoints) {
            if (k.visibility == 0 && (k.x != 0.0 || k.y != 0.0))
                throw ParseError(where + " has coordinates on an unlabeled keypoint");
            if (k.visibility > 0 && !(k.x >= b.x - 1e-9 && k.x <= b.x + b.width + 1e-9 && k.y >= b.y - 1e-9 &&
                                      k.y <= b.y + b.height + 1e-9))
                throw ParseError(where + " has a labeled keypoint outside its bbox");
        }
    }
}

// ---------------------------------------------------------------------------
// Rig and camera

SkeletonRig rig_from_json(const json& doc) {
    if (!doc.is_object()) throw ParseError("rig: expected a JSON object");
    if (doc.contains("euler") && doc["euler"] != kEulerTag)
        throw ConfigError("rig: only euler order " + std::string(kEulerTag) + " is supported");
    if (doc.contains("bone_axis") && doc["bone_axis"] != kBoneAxisTag)
        throw ConfigError("rig: only bone_axis " + std::string(kBoneAxisTag) + " is supported");
    const Vec3 lateral = doc.contains("lateral") ? vec3_from(doc["lateral"], "rig.lateral") : Vec3::UnitY();

    const auto bones_doc = field<json>(doc, "bones", "rig");
    if (!bones_doc.is_array()) throw ParseError("rig.bones: expected an array");
    std::vector<Bone> bones;
    std::map<std::string, int> by_name;
    for (std::size_t i = 0; i < bones_doc.size(); ++i) {
        const std::string where = "rig.bones[" + std::to_string(i) + "]";
        const auto& b = bones_doc[i];
        Bone bone;
        bone.name = field<std::string>(b, "name", where);
        if (by_name.contains(bone.name)) throw ConfigError(where + ": duplicate bone name '" + bone.name + "'");
        if (b.contains("parent") && !b["parent"].is_null()) {
            if (b["parent"].is_string()) {
                const auto it = by_name.find(b["parent"].get<std::string>());
                if (it == by_name.end())
                    throw ConfigError(where + ": parent '" + b["parent"].get<std::string>() + "' is not defined earlier");
                bone.parent = it->second;
            } else if (b["parent"].is_number_integer()) {
                bone.parent = b["parent"].get<int>();
            } else {
                throw ParseError(where + ".parent: expected a bone name or index");
            }
        }
        const Vec3 dir = vec3_from(field<json>(b, "direction", where), where + ".direction");
        if (!(dir.norm() > 1e-12)) throw ConfigError(where + ": direction must be non-zero");
        bone.rest_direction = dir.normalized();
        bone.length = field<double>(b, "length", where);
        if (b.contains("thickness")) bone.thickness = field<double>(b, "thickness", where);
        if (b.contains("joint") && !b["joint"].is_null()) {
            try {
                bone.joint = static_cast<int>(vae::joint_index(field<std::string>(b, "joint", where)));
            } catch (const UsageError& e) {
                throw ConfigError(where + ": " + e.what());
            }
        }
        by_name.emplace(bone.name, static_cast<int>(bones.size()));
        bones.push_back(std::move(bone));
    }

    const auto kps_doc = field<json>(doc, "keypoints", "rig");
    if (!kps_doc.is_array()) throw ParseError("rig.keypoints: expected an array");
    std::vector<KeypointSource> keypoints;
    for (std::size_t i = 0; i < kps_doc.size(); ++i) {
        const std::string where = "rig.keypoints[" + std::to_string(i) + "]";
        KeypointSource kp;
        kp.name = field<std::string>(kps_doc[i], "name", where);
        const auto bone = field<std::string>(kps_doc[i], "bone", where);
        const auto it = by_name.find(bone);
        if (it == by_name.end()) throw ConfigError(where + ": unknown bone '" + bone + "'");
        kp.bone = static_cast<std::size_t>(it->second);
        const auto end = kps_doc[i].contains("end") ? field<std::string>(kps_doc[i], "end", where) : "tail";
        if (end == "head") kp.end = BoneEnd::Head;
        else if (end == "tail") kp.end = BoneEnd::Tail;
        else throw ParseError(where + ".end: expected 'head' or 'tail'");
        keypoints.push_back(std::move(kp));
    }
    return SkeletonRig(std::move(bones), std::move(keypoints), lateral);
}

json to_json(const SkeletonRig& rig) {
    json bones = json::array();
    for (const auto& b : rig.bones()) {
        json entry = {
            {"name", b.name},
            {"parent", b.parent < 0 ? json(nullptr) : json(rig.bones()[static_cast<std::size_t>(b.parent)].name)},
            {"direction", vec3_json(b.rest_direction)},
            {"length", b.length},
            {"thickness", b.thickness},
        };
        if (b.joint >= 0) entry["joint"] = vae::kJointNames[static_cast<std::size_t>(b.joint)];
        bones.push_back(std::move(entry));
    }
    json keypoints = json::array();
    for (const auto& k : rig.keypoints()) {
        keypoints.push_back(
            {{"name", k.name}, {"bone", rig.bones()[k.bone].name}, {"end", k.end == BoneEnd::Head ? "head" : "tail"}});
    }
    return {
        {"euler", kEulerTag},     {"bone_axis", kBoneAxisTag}, {"lateral", vec3_json(rig.lateral_reference())},
        {"bones", std::move(bones)}, {"keypoints", std::move(keypoints)},
    };
}

SkeletonRig load_rig(const std::filesystem::path& path) {
    try {
        return rig_from_json(read_json_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

Camera camera_from_json(const json& doc) {
    if (!doc.is_object()) throw ParseError("camera: expected a JSON object");
    Camera cam;
    cam.focal_px = field<double>(doc, "focal_px", "camera");
    cam.width = field<std::size_t>(doc, "width", "camera");
    cam.height = field<std::size_t>(doc, "height", "camera");
    if (doc.contains("principal_point")) {
        const auto pp = field<std::vector<double>>(doc, "principal_point", "camera");
        if (pp.size() != 2) throw ParseError("camera.principal_point: expected two numbers");
        cam.principal_point = {pp[0], pp[1]};
    } else {
        cam.principal_point = {0.5 * static_cast<double>(cam.width), 0.5 * static_cast<double>(cam.height)};
    }
    const auto rows = field<json>(doc, "rotation", "camera");
    if (!rows.is_array() || rows.size() != 3) throw ParseError("camera.rotation: expected three rows");
    for (int r = 0; r < 3; ++r) {
        const Vec3 row = vec3_from(rows[static_cast<std::size_t>(r)], "camera.rotation[" + std::to_string(r) + "]");
        cam.extrinsic.rotation.row(r) = row.transpose();
    }
    if (doc.contains("translation") == doc.contains("center"))
        throw ParseError("camera: give exactly one of 'translation' or 'center'");
    if (doc.contains("translation")) {
        cam.extrinsic.translation = vec3_from(doc["translation"], "camera.translation");
    } else {
        cam.extrinsic.translation = -(cam.extrinsic.rotation * vec3_from(doc["center"], "camera.center"));
    }
    cam.validate();
    return cam;
}

json to_json(const Camera& cam) {
    json rows = json::array();
    for (int r = 0; r < 3; ++r) rows.push_back(vec3_json(cam.extrinsic.rotation.row(r).transpose()));
    return {
        {"focal_px", cam.focal_px},
        {"principal_point", {cam.principal_point.x(), cam.principal_point.y()}},
        {"width", cam.width},
        {"height", cam.height},
        {"rotation", std::move(rows)},
        {"translation", vec3_json(cam.extrinsic.translation)},
    };
}

Camera load_camera(const std::filesystem::path& path) {
    try {
        return camera_from_json(read_json_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Gait synthesis

namespace {

struct JointWave {
    double center;
    double amplitude;
    double lag;  // radians behind the leg phase
};

// Per leg: proximal, middle, distal joint. Front legs then hind legs.
constexpr std::array<JointWave, 3> kFrontWave = {{{70.0, 24.0, 0.0}, {-50.0, 45.0, 0.6}, {35.0, 48.0, 1.2}}};
constexpr std::array<JointWave, 3> kHindWave = {{{-90.0, 24.0, 0.0}, {40.0, 32.0, 0.6}, {-60.0, 50.0, 1.2}}};

struct Gait {
    double amplitude_scale;
    // Phase offsets of front-right, front-left, hind-right, hind-left.
    std::array<double, 4> offsets;
};

constexpr std::array<Gait, 4> kGaits = {{
    {0.8, {0.75, 0.25, 0.5, 0.0}},   // lateral-sequence walk
    {1.0, {0.0, 0.5, 0.5, 0.0}},     // trot
    {1.25, {0.1, 0.0, 0.6, 0.5}},    // rotary gallop
    {0.15, {0.0, 0.0, 0.0, 0.0}},    // standing weight shifts
}};

constexpr double kFlexionJitter = 3.0;
constexpr double kOffAxisJitter = 4.0;

}  // namespace

std::vector<vae::PoseAngles> synthesize_gait_poses(const SkeletonRig& rig, std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_gait(0, kGaits.size() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> flex_noise(0.0, kFlexionJitter);
    std::normal_distribution<double> off_noise(0.0, kOffAxisJitter);

    std::vector<vae::PoseAngles> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const Gait& gait = kGaits[pick_gait(rng)];
        const double phase = unit(rng);
        vae::PoseAngles pose;
        for (std::size_t leg = 0; leg < 4; ++leg) {
            const auto& wave = leg < 2 ? kFrontWave : kHindWave;
            const double leg_phase = 2.0 * std::numbers::pi * (phase + gait.offsets[leg]);
            for (std::size_t k = 0; k < 3; ++k) {
                const std::size_t joint = 3 * leg + k;
                const auto& w = wave[k];
                pose.component(joint, 0) =
                    w.center + gait.amplitude_scale * w.amplitude * std::sin(leg_phase - w.lag) + flex_noise(rng);
                pose.component(joint, 1) = off_noise(rng);
                pose.component(joint, 2) = off_noise(rng);
            }
        }
        out.push_back(extract_angles(rig, forward_kinematics(rig, pose)));
    }
    return out;
}

}  // namespace quadprior::kinematics
