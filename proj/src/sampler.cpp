#include "quadprior/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/parallel.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::sampler {
namespace {

using vae::kJointCount;

// Draws decoded per parallel round while sampling.
constexpr std::size_t kRoundSize = 8192;

std::size_t components_checked(FilterMode mode) { return mode == FilterMode::Primary ? 1 : vae::kComponentsPerJoint; }

// Decodes draws [first, first + count) into a 36 x count matrix.
Eigen::MatrixXd decode_draws(const vae::VaePrior& prior, std::uint64_t seed, std::uint64_t first, std::size_t count,
                             double variance_scale) {
    Eigen::MatrixXd z(static_cast<Eigen::Index>(vae::kLatentDim), static_cast<Eigen::Index>(count));
    Eigen::MatrixXd out(static_cast<Eigen::Index>(vae::kPoseDim), static_cast<Eigen::Index>(count));
    parallel_for(count, [&](std::size_t begin, std::size_t end) {
        for (std::size_t j = begin; j < end; ++j) {
            const auto latent = latent_draw(seed, first + j, variance_scale);
            for (std::size_t i = 0; i < vae::kLatentDim; ++i)
                z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = latent[i];
        }
        const auto b = static_cast<Eigen::Index>(begin), n = static_cast<Eigen::Index>(end - begin);
        out.middleCols(b, n) = vae::decode_batch(prior, z.middleCols(b, n));
    });
    return out;
}

vae::PoseAngles column_pose(const Eigen::MatrixXd& m, Eigen::Index col) {
    vae::PoseAngles p;
    for (std::size_t i = 0; i < vae::kPoseDim; ++i) p.values[i] = m(static_cast<Eigen::Index>(i), col);
    return p;
}

void check_options(const SampleOptions& o) {
    if (!(o.variance_scale > 0.0) || !std::isfinite(o.variance_scale))
        throw UsageError("variance_scale must be positive");
    if (o.draw_cap == 0) throw UsageError("draw cap must be positive");
}

}  // namespace

const JointRange& AngleRangeTable::at(std::string_view joint) const { return ranges[vae::joint_index(joint)]; }

void AngleRangeTable::validate() const {
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const auto& r = ranges[j];
        if (r.joint != vae::kJointNames[j])
            throw ConfigError("range " + std::to_string(j) + " is '" + r.joint + "', expected '" +
                              std::string(vae::kJointNames[j]) + "'");
        if (!(std::isfinite(r.min) && std::isfinite(r.max) && r.min < r.max))
            throw ConfigError("range for " + r.joint + " needs finite min < max");
    }
}

AngleRangeTable paper_ranges() {
    constexpr std::array<std::array<double, 2>, kJointCount> bounds = {{
        {40, 100}, {-125, 0}, {-25, 100},   // right front leg
        {40, 100}, {-125, 0}, {-25, 100},   // left front leg
        {-120, -60}, {0, 80}, {-125, 0},    // right hind leg
        {-120, -60}, {0, 80}, {-125, 0},    // left hind leg
    }};
    AngleRangeTable t;
    for (std::size_t j = 0; j < kJointCount; ++j) t.ranges[j] = {std::string(vae::kJointNames[j]), bounds[j][0], bounds[j][1]};
    return t;
}

AngleRangeTable widened(const AngleRangeTable& table, double margin_deg) {
    AngleRangeTable out = table;
    for (auto& r : out.ranges) {
        r.min -= margin_deg;
        r.max += margin_deg;
    }
    out.validate();
    return out;
}

FilterVerdict filter_pose(const vae::PoseAngles& pose, const AngleRangeTable& table, FilterMode mode) {
    const std::size_t checked = components_checked(mode);
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const auto& r = table.ranges[j];
        for (std::size_t c = 0; c < checked; ++c) {
            const double v = pose.component(j, c);
            if (!(v >= r.min && v <= r.max)) return {j};
        }
    }
    return {};
}

void JointHistogram::validate() const {
    if (counts.empty() || bin_edges.size() != counts.size() + 1)
        throw UsageError("histogram for " + joint + " needs one more edge than bins");
    for (std::size_t i = 1; i < bin_edges.size(); ++i) {
        if (!(bin_edges[i] > bin_edges[i - 1])) throw UsageError("histogram edges for " + joint + " must increase");
    }
    std::uint64_t total = 0;
    for (auto c : counts) total += c;
    if (total != sample_count) throw UsageError("histogram counts for " + joint + " do not sum to sample_count");
}

std::vector<JointHistogram> histogram_poses(std::span<const vae::PoseAngles> poses, std::size_t bins) {
    if (bins == 0) throw UsageError("histogram needs at least one bin");
    std::vector<JointHistogram> out(kJointCount);
    for (std::size_t j = 0; j < kJointCount; ++j) {
        auto& h = out[j];
        h.joint = vae::kJointNames[j];
        h.counts.assign(bins, 0);
        h.sample_count = poses.size();
        if (poses.empty()) {
            h.bin_edges.resize(bins + 1);
            for (std::size_t i = 0; i <= bins; ++i) h.bin_edges[i] = static_cast<double>(i);
            continue;
        }
        double lo = poses[0].component(j, 0), hi = lo;
        for (const auto& p : poses) {
            lo = std::min(lo, p.component(j, 0));
            hi = std::max(hi, p.component(j, 0));
        }
        if (!(hi > lo)) {
            lo -= 0.5;
            hi += 0.5;
        }
        h.bin_edges.resize(bins + 1);
        const double width = (hi - lo) / static_cast<double>(bins);
        for (std::size_t i = 0; i < bins; ++i) h.bin_edges[i] = lo + width * static_cast<double>(i);
        h.bin_edges[bins] = hi;
        for (const auto& p : poses) {
            const double v = p.component(j, 0);
            auto bin = static_cast<std::size_t>((v - lo) / width);
            bin = std::min(bin, bins - 1);
            // Guard the floor against rounding at interior edges.
            while (bin > 0 && v < h.bin_edges[bin]) --bin;
            while (bin + 1 < bins && v >= h.bin_edges[bin + 1]) ++bin;
            ++h.counts[bin];
        }
    }
    return out;
}

std::vector<JointHistogram> pretest(const vae::VaePrior& prior, std::size_t n, std::uint64_t seed, std::size_t bins) {
    if (n == 0) throw UsageError("pretest needs at least one draw");
    const Eigen::MatrixXd decoded = decode_draws(prior, seed, 0, n, 1.0);
    std::vector<vae::PoseAngles> poses(n);
    for (std::size_t j = 0; j < n; ++j) poses[j] = column_pose(decoded, static_cast<Eigen::Index>(j));
    return histogram_poses(poses, bins);
}

AngleRangeTable derive_ranges(std::span<const JointHistogram> histograms, double trim_fraction) {
    if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) throw UsageError("trim fraction must lie in [0, 0.5)");
    if (histograms.size() != kJointCount) throw UsageError("expected 12 joint histograms");
    AngleRangeTable table;
    for (std::size_t j = 0; j < kJointCount; ++j) {
        const auto& h = histograms[j];
        h.validate();
        if (h.sample_count == 0) throw UsageError("histogram for " + h.joint + " is empty");
        const double target = trim_fraction * static_cast<double>(h.sample_count);
        const std::size_t bins = h.counts.size();

        // Lower quantile scans from the left, upper from the right, so a
        // mirrored histogram gives a mirrored range.
        double lo = h.bin_edges.front();
        double cum = 0.0;
        for (std::size_t i = 0; i < bins; ++i) {
            const double c = static_cast<double>(h.counts[i]);
            if (c > 0.0 && cum + c > target) {
                lo = h.bin_edges[i] + (target - cum) / c * (h.bin_edges[i + 1] - h.bin_edges[i]);
                break;
            }
            cum += c;
        }
        double hi = h.bin_edges.back();
        cum = 0.0;
        for (std::size_t i = bins; i-- > 0;) {
            const double c = static_cast<double>(h.counts[i]);
            if (c > 0.0 && cum + c > target) {
                hi = h.bin_edges[i + 1] - (target - cum) / c * (h.bin_edges[i + 1] - h.bin_edges[i]);
                break;
            }
            cum += c;
        }
        if (!(lo < hi)) throw DegenerateInputError("trimmed range for " + h.joint + " is empty");
        table.ranges[j] = {std::string(vae::kJointNames[j]), lo, hi};
    }
    return table;
}

vae::Latent latent_draw(std::uint64_t seed, std::uint64_t index, double variance_scale) {
    Rng rng(derive_seed(seed, index));
    std::normal_distribution<double> normal(0.0, std::sqrt(variance_scale));
    vae::Latent z{};
    for (double& v : z) v = normal(rng);
    return z;
}

SampleResult sample_refined(const vae::VaePrior& prior, const AngleRangeTable& table, std::size_t n_accepted,
                            const SampleOptions& options) {
    if (n_accepted == 0) throw UsageError("n_accepted must be at least 1");
    check_options(options);
    table.validate();

    SampleResult result;
    auto& report = result.report;
    report.requested = n_accepted;
    result.poses.reserve(n_accepted);
    std::uint64_t next = 0;
    while (result.poses.size() < n_accepted) {
        const std::size_t round = kRoundSize;
        const Eigen::MatrixXd decoded = decode_draws(prior, options.seed, next, round, options.variance_scale);
        for (std::size_t j = 0; j < round && result.poses.size() < n_accepted; ++j) {
            const auto pose = column_pose(decoded, static_cast<Eigen::Index>(j));
            const auto verdict = filter_pose(pose, table, options.mode);
            if (verdict.accepted()) {
                result.poses.push_back(pose);
                ++report.accepted;
            } else {
                ++report.rejected;
                ++report.rejections_by_joint[*verdict.rejected_joint];
            }
            if (report.draws() == options.draw_cap &&
                static_cast<double>(report.accepted) / static_cast<double>(report.draws()) < options.min_acceptance) {
                throw DegenerateInputError("pose filter accepted " + std::to_string(report.accepted) + " of " +
                                           std::to_string(report.draws()) +
                                           " draws; the prior and the range table barely overlap");
            }
        }
        next += round;
    }
    report.dropout_rate = static_cast<double>(report.rejected) / static_cast<double>(report.draws());
    return result;
}

SampleReport measure_dropout(const vae::VaePrior& prior, const AngleRangeTable& table, std::size_t draws,
                             const SampleOptions& options) {
    if (draws == 0) throw UsageError("need at least one draw");
    check_options(options);
    table.validate();
    SampleReport report;
    report.requested = draws;
    for (std::uint64_t first = 0; first < draws; first += kRoundSize) {
        const std::size_t round = std::min<std::uint64_t>(kRoundSize, draws - first);
        const Eigen::MatrixXd decoded = decode_draws(prior, options.seed, first, round, options.variance_scale);
        for (std::size_t j = 0; j < round; ++j) {
            const auto verdict = filter_pose(column_pose(decoded, static_cast<Eigen::Index>(j)), table, options.mode);
            if (verdict.accepted()) {
                ++report.accepted;
            } else {
                ++report.rejected;
                ++report.rejections_by_joint[*verdict.rejected_joint];
            }
        }
    }
    report.dropout_rate = static_cast<double>(report.rejected) / static_cast<double>(report.draws());
    return report;
}

nlohmann::json to_json(const AngleRangeTable& table) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& r : table.ranges) doc.push_back({{"joint", r.joint}, {"min", r.min}, {"max", r.max}});
    return doc;
}

AngleRangeTable ranges_from_json(const nlohmann::json& doc, std::string_view source) {
    const std::string src(source);
    if (!doc.is_array() || doc.size() != kJointCount) throw ParseError(src + ": expected a list of 12 ranges");
    AngleRangeTable table;
    std::array<bool, kJointCount> seen{};
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const std::string where = src + "[" + std::to_string(i) + "]";
        const auto& e = doc[i];
        if (!e.is_object() || !e.contains("joint") || !e["joint"].is_string() || !e.contains("min") ||
            !e["min"].is_number() || !e.contains("max") || !e["max"].is_number())
            throw ParseError(where + ": expected {joint, min, max}");
        std::size_t j = 0;
        try {
            j = vae::joint_index(e["joint"].get<std::string>());
        } catch (const UsageError& err) {
            throw ParseError(where + ": " + err.what());
        }
        if (seen[j]) throw ParseError(where + ": joint " + std::string(vae::kJointNames[j]) + " listed twice");
        seen[j] = true;
        table.ranges[j] = {std::string(vae::kJointNames[j]), e["min"].get<double>(), e["max"].get<double>()};
    }
    try {
        table.validate();
    } catch (const ConfigError& err) {
        throw ParseError(src + ": " + err.what());
    }
    return table;
}

AngleRangeTable load_ranges(const std::string& path_or_paper) {
    if (path_or_paper == "paper") return paper_ranges();
    return ranges_from_json(read_json_file(path_or_paper), path_or_paper);
}

void save_ranges(const std::filesystem::path& path, const AngleRangeTable& table) {
    write_json_file(path, to_json(table));
}

nlohmann::json to_json(const SampleReport& r) {
    nlohmann::json by_joint = nlohmann::json::object();
    for (std::size_t j = 0; j < kJointCount; ++j) by_joint[std::string(vae::kJointNames[j])] = r.rejections_by_joint[j];
    return {
        {"requested", r.requested},
        {"accepted", r.accepted},
        {"rejected", r.rejected},
        {"dropout_rate", r.dropout_rate},
        {"first_rejecting_joint_counts", std::move(by_joint)},
    };
}

nlohmann::json to_json(std::span<const JointHistogram> histograms) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& h : histograms) {
        doc.push_back(
            {{"joint", h.joint}, {"bin_edges", h.bin_edges}, {"counts", h.counts}, {"sample_count", h.sample_count}});
    }
    return doc;
}

std::string_view mode_name(FilterMode mode) { return mode == FilterMode::Primary ? "primary" : "all-components"; }

FilterMode parse_mode(std::string_view name) {
    if (name == "primary") return FilterMode::Primary;
    if (name == "all-components") return FilterMode::AllComponents;
    throw UsageError("filter mode must be 'primary' or 'all-components'");
}

}  // namespace quadprior::sampler
