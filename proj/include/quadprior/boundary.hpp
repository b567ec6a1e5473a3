#pragma once

// Conditioning-image preparation for a boundary-conditioned diffusion model:
// soft edges, foreground compositing, the animal/background boundary merge,
// and the job manifest handed to the external runner.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quadprior/image.hpp"

namespace quadprior::boundary {

struct SoftEdgeOptions {
    double sigma = 0.5;        // Gaussian pre-blur, pixels
    double percentile = 99.0;  // normalizer
};

/// Scharr gradient magnitude of the blurred luminance, divided by its
/// percentile value (the maximum when that percentile is zero) and clamped to
/// [0, 1]. Borders replicate the edge pixel.
BoundaryMap soft_edges(const Image& image, const SoftEdgeOptions& options = {});

/// Separable Gaussian blur with replicated borders, radius ceil(3 sigma).
std::vector<double> gaussian_blur(const std::vector<double>& plane, std::size_t width, std::size_t height,
                                  double sigma);

/// Linear-interpolated percentile (0-100) of the values.
double percentile(std::vector<double> values, double pct);

struct Placement {
    double offset_x = 0.0;  // output position of the animal image's top-left corner
    double offset_y = 0.0;
    double scale = 1.0;
    double min_visible_fraction = 0.5;  // of the placed animal's alpha bounding box
};

struct Composite {
    Image image;       // background channel count
    BinaryMask mask;   // placed alpha > 0.5
};

/// Alpha-over of a resampled RGBA animal onto an RGB(A) background. Sampling
/// is bilinear on premultiplied colour, so integer offsets at scale 1 copy
/// pixels exactly. Throws UsageError when the placed animal's bounding box is
/// less than min_visible_fraction inside the frame.
Composite composite_foreground(const Image& animal_rgba, const Image& background, const Placement& placement);

/// Disk dilation: a pixel is set when some set pixel lies within `radius`.
BinaryMask dilate(const BinaryMask& mask, std::size_t radius);

/// animal inside the mask, max(animal, background) outside it.
BoundaryMap merge_boundaries(const BoundaryMap& animal, const BinaryMask& mask, const BoundaryMap& background);

// ---------------------------------------------------------------------------
// Job manifest

inline constexpr int kManifestVersion = 1;

struct JobEntry {
    std::string job_id;
    std::string conditioning_map_path;  // relative to the manifest's directory
    std::string prompt_text;
    std::string negative_prompt;
    std::uint32_t sampler_seed = 0;
    std::string output_path;
    std::string annotation_ref;  // "<annotation file>#<annotation id>"

    bool operator==(const JobEntry&) const = default;
};

struct JobManifest {
    int version = kManifestVersion;
    std::uint64_t master_seed = 0;
    std::vector<JobEntry> entries;

    bool operator==(const JobManifest&) const = default;
};

nlohmann::json to_json(const JobManifest& manifest);
/// Throws ParseError naming the JSON path of the first bad field.
JobManifest manifest_from_json(const nlohmann::json& doc, std::string_view source = "manifest");
/// Unique job ids and every conditioning map present under base_dir. Throws
/// ParseError listing each problem.
void validate_manifest(const JobManifest& manifest, const std::filesystem::path& base_dir);
JobManifest load_manifest(const std::filesystem::path& path);

struct PromptVocabulary {
    std::string species = "zebra";
    std::vector<std::string> environments = {"mountain", "grassland", "savanna", "forest edge", "riverbank"};
    std::vector<std::string> weather = {"sunny", "overcast", "golden hour", "light mist"};
    std::string negative = "blurry, deformed anatomy, extra limbs, cartoon, text, watermark";
};

/// "a photo of a <species> in a <environment> landscape, <weather>, ..." with
/// the environment and weather chosen by `seed`.
std::string make_prompt(const PromptVocabulary& vocab, std::uint64_t seed);

/// Per-job diffusion seed.
std::uint32_t job_seed(std::uint64_t master_seed, std::uint64_t index);

struct ExportItem {
    BoundaryMap map;
    std::string annotation_ref;
};

/// Writes conditioning/<job>.png for every item and manifest.json into
/// out_dir, and returns the manifest. Item order fixes job ids and seeds;
/// maps are written in parallel. Throws IoError when out_dir is unwritable.
JobManifest export_jobs(const std::vector<ExportItem>& items, const PromptVocabulary& vocab,
                        std::uint64_t master_seed, const std::filesystem::path& out_dir);

}  // namespace quadprior::boundary
