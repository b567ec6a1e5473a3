#include "quadprior/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <mutex>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/parallel.hpp"

namespace quadprior::eval {
namespace {

constexpr std::size_t kNeck = 3;
constexpr std::size_t kTailRoot = 4;

std::string fixed1(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string full_precision(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double normalizer_length(const kinematics::KeypointAnnotation& gt, Normalizer n) {
    switch (n) {
        case Normalizer::BboxMax: return std::max(gt.bbox.width, gt.bbox.height);
        case Normalizer::BboxDiagonal: return std::sqrt(gt.bbox.width * gt.bbox.width + gt.bbox.height * gt.bbox.height);
        case Normalizer::TorsoLength: {
            const auto& a = gt.keypoints[kNeck];
            const auto& b = gt.keypoints[kTailRoot];
            if (a.visibility == 0 || b.visibility == 0) return 0.0;
            return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y));
        }
    }
    return 0.0;
}

}  // namespace

std::vector<EvalPair> pairs_from_json(const nlohmann::json& gt_doc, const nlohmann::json& pred_doc,
                                      std::string_view gt_source, std::string_view pred_source) {
    const std::string psrc(pred_source);
    std::map<std::int64_t, kinematics::KeypointAnnotation> gt;
    if (!gt_doc.is_null()) {
        const auto data = kinematics::coco_from_json(gt_doc, gt_source);
        for (const auto& ann : data.annotations) {
            if (!gt.emplace(ann.image_id, ann).second)
                throw ParseError(std::string(gt_source) + ": image_id " + std::to_string(ann.image_id) +
                                 " has more than one annotation");
        }
    }
    std::map<std::int64_t, Prediction> pred;
    if (!pred_doc.is_null()) {
        if (!pred_doc.is_array()) throw ParseError(psrc + ": expected a JSON array of predictions");
        for (std::size_t i = 0; i < pred_doc.size(); ++i) {
            const std::string where = psrc + "[" + std::to_string(i) + "]";
            const auto& e = pred_doc[i];
            if (!e.is_object() || !e.contains("image_id") || !e["image_id"].is_number_integer())
                throw ParseError(where + ".image_id: expected an integer");
            if (!e.contains("keypoints") || !e["keypoints"].is_array() || e["keypoints"].size() != 3 * kKeypointCount)
                throw ParseError(where + ".keypoints: expected 51 numbers");
            Prediction p{};
            const auto& kps = e["keypoints"];
            for (std::size_t k = 0; k < 3 * kKeypointCount; ++k) {
                if (!kps[k].is_number()) throw ParseError(where + ".keypoints[" + std::to_string(k) + "]: not a number");
            }
            for (std::size_t k = 0; k < kKeypointCount; ++k)
                p[k] = {kps[3 * k].get<double>(), kps[3 * k + 1].get<double>(), kps[3 * k + 2].get<double>()};
            const auto id = e["image_id"].get<std::int64_t>();
            if (!gt.contains(id)) throw ParseError(where + ": image_id " + std::to_string(id) + " has no ground truth");
            if (!pred.emplace(id, p).second)
                throw ParseError(where + ": image_id " + std::to_string(id) + " predicted twice");
        }
    }
    std::vector<EvalPair> pairs;
    pairs.reserve(gt.size());
    for (const auto& [id, ann] : gt) {
        const auto it = pred.find(id);
        if (it == pred.end()) throw ParseError(psrc + ": no prediction for image_id " + std::to_string(id));
        pairs.push_back({id, ann, it->second});
    }
    return pairs;
}

std::vector<EvalPair> load_dataset(const std::filesystem::path& gt_file, const std::filesystem::path& pred_file) {
    return pairs_from_json(read_json_file(gt_file), read_json_file(pred_file), gt_file.string(), pred_file.string());
}

nlohmann::json predictions_to_json(std::span<const EvalPair> pairs) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& p : pairs) {
        nlohmann::json kps = nlohmann::json::array();
        for (const auto& k : p.pred) {
            kps.push_back(k.x);
            kps.push_back(k.y);
            kps.push_back(k.confidence);
        }
        doc.push_back({{"image_id", p.image_id}, {"keypoints", std::move(kps)}});
    }
    return doc;
}

PckResult pck(std::span<const EvalPair> pairs, const PckOptions& options) {
    if (!(options.alpha > 0.0) || !std::isfinite(options.alpha)) throw UsageError("alpha must be positive");
    PckResult result;
    result.options = options;
    std::mutex merge;
    parallel_for(pairs.size(), [&](std::size_t begin, std::size_t end) {
        std::array<std::uint64_t, kKeypointCount> correct{}, counted{};
        for (std::size_t i = begin; i < end; ++i) {
            const auto& pair = pairs[i];
            const double norm = normalizer_length(pair.gt, options.normalizer);
            if (!(norm > 0.0)) continue;
            const double threshold = options.alpha * norm;
            for (std::size_t k = 0; k < kKeypointCount; ++k) {
                const auto& g = pair.gt.keypoints[k];
                if (g.visibility == 0 || (g.visibility == 1 && !options.count_occluded)) continue;
                ++counted[k];
                const double dx = pair.pred[k].x - g.x;
                const double dy = pair.pred[k].y - g.y;
                if (dx * dx + dy * dy <= threshold * threshold) ++correct[k];
            }
        }
        std::lock_guard lock(merge);
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            result.correct[k] += correct[k];
            result.counted[k] += counted[k];
        }
    });
    std::uint64_t total_correct = 0, total_counted = 0;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        total_correct += result.correct[k];
        total_counted += result.counted[k];
        result.per_keypoint[k] = result.counted[k] == 0
                                     ? std::numeric_limits<double>::quiet_NaN()
                                     : static_cast<double>(result.correct[k]) / static_cast<double>(result.counted[k]);
    }
    if (total_counted == 0) throw UsageError("no labeled keypoints to score");
    result.mean = static_cast<double>(total_correct) / static_cast<double>(total_counted);
    return result;
}

nlohmann::json to_json(const PckResult& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        rows.push_back({
            {"keypoint", kinematics::kKeypointNames[k]},
            {"pck", r.counted[k] == 0 ? nlohmann::json(nullptr) : nlohmann::json(r.per_keypoint[k])},
            {"correct", r.correct[k]},
            {"counted", r.counted[k]},
        });
    }
    std::uint64_t correct = 0, counted = 0;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        correct += r.correct[k];
        counted += r.counted[k];
    }
    return {
        {"alpha", r.options.alpha},
        {"normalizer", normalizer_name(r.options.normalizer)},
        {"count_occluded", r.options.count_occluded},
        {"per_keypoint", std::move(rows)},
        {"mean", {{"pck", r.mean}, {"correct", correct}, {"counted", counted}}},
    };
}

std::string report(const PckResult& r, ReportFormat format) {
    std::uint64_t correct = 0, counted = 0;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        correct += r.correct[k];
        counted += r.counted[k];
    }
    std::string out;
    switch (format) {
        case ReportFormat::Json: return to_json(r).dump(2) + "\n";
        case ReportFormat::Csv: {
            out = "keypoint,pck,correct,counted\n";
            for (std::size_t k = 0; k < kKeypointCount; ++k) {
                out += std::string(kinematics::kKeypointNames[k]) + "," +
                       (r.counted[k] == 0 ? std::string() : full_precision(r.per_keypoint[k])) + "," +
                       std::to_string(r.correct[k]) + "," + std::to_string(r.counted[k]) + "\n";
            }
            out += "mean," + full_precision(r.mean) + "," + std::to_string(correct) + "," + std::to_string(counted) + "\n";
            return out;
        }
        case ReportFormat::Text: {
            char line[96];
            std::snprintf(line, sizeof line, "PCK@%g  normalizer: %s  counted: %s\n", r.options.alpha,
                          std::string(normalizer_name(r.options.normalizer)).c_str(),
                          r.options.count_occluded ? "visibility 1 and 2" : "visibility 2 only");
            out = line;
            std::snprintf(line, sizeof line, "%-16s %7s %9s\n", "keypoint", "pck(%)", "counted");
            out += line;
            for (std::size_t k = 0; k < kKeypointCount; ++k) {
                const std::string value = r.counted[k] == 0 ? "n/a" : fixed1(100.0 * r.per_keypoint[k]);
                std::snprintf(line, sizeof line, "%-16s %7s %9llu\n", std::string(kinematics::kKeypointNames[k]).c_str(),
                              value.c_str(), static_cast<unsigned long long>(r.counted[k]));
                out += line;
            }
            std::snprintf(line, sizeof line, "%-16s %7s %9llu\n", "mean", fixed1(100.0 * r.mean).c_str(),
                          static_cast<unsigned long long>(counted));
            out += line;
            return out;
        }
    }
    return out;
}

std::string_view normalizer_name(Normalizer n) {
    switch (n) {
        case Normalizer::BboxMax: return "bbox-max";
        case Normalizer::BboxDiagonal: return "bbox-diagonal";
        case Normalizer::TorsoLength: return "torso-length";
    }
    return "?";
}

Normalizer parse_normalizer(std::string_view name) {
    if (name == "bbox-max") return Normalizer::BboxMax;
    if (name == "bbox-diagonal") return Normalizer::BboxDiagonal;
    if (name == "torso-length") return Normalizer::TorsoLength;
    throw UsageError("normalizer must be bbox-max, bbox-diagonal or torso-length");
}

ReportFormat parse_format(std::string_view name) {
    if (name == "text") return ReportFormat::Text;
    if (name == "csv") return ReportFormat::Csv;
    if (name == "json") return ReportFormat::Json;
    throw UsageError("format must be text, csv or json");
}

}  // namespace quadprior::eval
