#pragma once

// PCK scoring of keypoint predictions against COCO-style ground truth.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quadprior/kinematics.hpp"

namespace quadprior::eval {

using kinematics::kKeypointCount;

struct PredictedKeypoint {
    double x = 0.0;
    double y = 0.0;
    double confidence = 0.0;
};

using Prediction = std::array<PredictedKeypoint, kKeypointCount>;

struct EvalPair {
    std::int64_t image_id = 0;
    kinematics::KeypointAnnotation gt;
    Prediction pred{};
};

/// Joins one ground-truth annotation per image with one prediction per image.
/// A null document counts as empty. Throws ParseError for malformed arrays,
/// duplicate ids, predictions without ground truth and ground truth without
/// a prediction.
std::vector<EvalPair> pairs_from_json(const nlohmann::json& gt, const nlohmann::json& pred,
                                      std::string_view gt_source = "gt", std::string_view pred_source = "pred");
std::vector<EvalPair> load_dataset(const std::filesystem::path& gt_file, const std::filesystem::path& pred_file);

/// Prediction file body: [{image_id, keypoints: 51 numbers}].
nlohmann::json predictions_to_json(std::span<const EvalPair> pairs);

enum class Normalizer {
    BboxMax,       // max(bbox width, bbox height)
    BboxDiagonal,  // bbox diagonal
    TorsoLength,   // neck to root of tail; images lacking either are skipped
};

struct PckOptions {
    double alpha = 0.05;
    Normalizer normalizer = Normalizer::BboxMax;
    bool count_occluded = true;  // count v = 1 as well as v = 2
};

struct PckResult {
    PckOptions options;
    std::array<std::uint64_t, kKeypointCount> correct{};
    std::array<std::uint64_t, kKeypointCount> counted{};
    std::array<double, kKeypointCount> per_keypoint{};  // NaN where nothing was counted
    double mean = 0.0;                                   // pooled over every counted keypoint
};

/// A keypoint is counted when its ground truth is labeled, and correct when
/// the prediction lies within alpha * normalizer (inclusive). Throws
/// UsageError for alpha <= 0 or when nothing is counted.
PckResult pck(std::span<const EvalPair> pairs, const PckOptions& options = {});

enum class ReportFormat { Text, Csv, Json };

std::string report(const PckResult& result, ReportFormat format);
nlohmann::json to_json(const PckResult& result);

std::string_view normalizer_name(Normalizer n);
Normalizer parse_normalizer(std::string_view name);
ReportFormat parse_format(std::string_view name);

}  // namespace quadprior::eval
