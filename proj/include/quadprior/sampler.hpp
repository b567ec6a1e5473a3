#pragma once

// Angle-range pose filter, histogram pre-test over the prior, and rejection
// sampling of refined poses.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quadprior/vae.hpp"

namespace quadprior::sampler {

struct JointRange {
    std::string joint;
    double min = 0.0;  // degrees, inclusive
    double max = 0.0;
};

/// One range per joint, in PoseAngles joint order.
struct AngleRangeTable {
    std::array<JointRange, vae::kJointCount> ranges;

    [[nodiscard]] const JointRange& at(std::string_view joint) const;
    /// Names match vae::kJointNames in order and min < max. Throws ConfigError.
    void validate() const;
};

/// The quadruped table the filter was published with.
AngleRangeTable paper_ranges();

/// Same ranges with a margin added on both sides.
AngleRangeTable widened(const AngleRangeTable& table, double margin_deg);

enum class FilterMode {
    Primary,        // first (flexion) component of each joint
    AllComponents,  // all three components of each joint against the joint's range
};

struct FilterVerdict {
    std::optional<std::size_t> rejected_joint;

    [[nodiscard]] bool accepted() const noexcept { return !rejected_joint; }
};

/// Rejects on the first joint in layout order whose filtered component lies
/// outside its closed interval.
FilterVerdict filter_pose(const vae::PoseAngles& pose, const AngleRangeTable& table,
                          FilterMode mode = FilterMode::Primary);

struct JointHistogram {
    std::string joint;
    std::vector<double> bin_edges;  // strictly increasing, counts.size() + 1 entries
    std::vector<std::uint64_t> counts;
    std::uint64_t sample_count = 0;

    void validate() const;
};

/// Histograms of each joint's primary component. Bins span the observed
/// range; a joint with a single distinct value gets one unit-wide bin centred
/// on it.
std::vector<JointHistogram> histogram_poses(std::span<const vae::PoseAngles> poses, std::size_t bins = 200);

/// Decodes n draws of z ~ N(0, I) and histograms them.
std::vector<JointHistogram> pretest(const vae::VaePrior& prior, std::size_t n, std::uint64_t seed,
                                    std::size_t bins = 200);

/// Per joint, the [trim, 1 - trim] quantiles of the histogram, with linear
/// interpolation inside a bin. trim = 0 gives the outer bin edges.
AngleRangeTable derive_ranges(std::span<const JointHistogram> histograms, double trim_fraction = 0.01);

struct SampleReport {
    std::uint64_t requested = 0;
    std::uint64_t accepted = 0;
    std::uint64_t rejected = 0;
    double dropout_rate = 0.0;
    std::array<std::uint64_t, vae::kJointCount> rejections_by_joint{};

    [[nodiscard]] std::uint64_t draws() const noexcept { return accepted + rejected; }
};

struct SampleOptions {
    double variance_scale = 2.0;
    std::uint64_t seed = 0;
    FilterMode mode = FilterMode::Primary;
    std::uint64_t draw_cap = 1'000'000;
    double min_acceptance = 1e-4;
};

struct SampleResult {
    std::vector<vae::PoseAngles> poses;
    SampleReport report;
};

/// Latent draw `index` of a sampling run: z ~ N(0, variance_scale * I) from
/// a generator seeded with derive_seed(seed, index).
vae::Latent latent_draw(std::uint64_t seed, std::uint64_t index, double variance_scale);

/// Draws, decodes and filters until n_accepted poses pass. Draws are
/// evaluated in parallel but consumed in index order, so the result does not
/// depend on the thread count. Throws DegenerateInputError once draw_cap
/// draws have been made with an acceptance rate below min_acceptance.
SampleResult sample_refined(const vae::VaePrior& prior, const AngleRangeTable& table, std::size_t n_accepted,
                            const SampleOptions& options);

/// Filter outcome over a fixed number of draws.
SampleReport measure_dropout(const vae::VaePrior& prior, const AngleRangeTable& table, std::size_t draws,
                             const SampleOptions& options);

// Files. A range table is a JSON list of {joint, min, max}.
nlohmann::json to_json(const AngleRangeTable& table);
AngleRangeTable ranges_from_json(const nlohmann::json& doc, std::string_view source = "ranges");
/// `paper` selects paper_ranges(); anything else is a file path.
AngleRangeTable load_ranges(const std::string& path_or_paper);
void save_ranges(const std::filesystem::path& path, const AngleRangeTable& table);

nlohmann::json to_json(const SampleReport& report);
nlohmann::json to_json(std::span<const JointHistogram> histograms);

std::string_view mode_name(FilterMode mode);
FilterMode parse_mode(std::string_view name);

}  // namespace quadprior::sampler
