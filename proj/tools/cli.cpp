#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "quadprior/boundary.hpp"
#include "quadprior/embed.hpp"
#include "quadprior/error.hpp"
#include "quadprior/eval.hpp"
#include "quadprior/image.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/kinematics.hpp"
#include "quadprior/render.hpp"
#include "quadprior/sampler.hpp"
#include "quadprior/seed.hpp"
#include "quadprior/vae.hpp"

namespace quadprior::cli {
namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Animal-only edges are taken over mid grey so dark and light coat both contrast.
constexpr double kAnimalCanvasGrey = 0.5;

// ---------------------------------------------------------------------------
// Settings: one flat key space shared by the config file and the flags.

enum class Kind { Number, Integer, Boolean, Text, Path, PathList, RangesSource };

struct KeySpec {
    std::string_view key;
    Kind kind;
    bool input;  // paths that must exist before the command runs
    std::string_view commands;
    std::string_view help;
};

// clang-format off
constexpr KeySpec kKeys[] = {
    {"master_seed",      Kind::Integer,      false, "train-prior sample-poses export-jobs tsne pipeline", "root of every derived seed"},
    {"log_level",        Kind::Text,         false, "", "trace, debug, info, warn, error or off"},
    {"rig",              Kind::Path,         true,  "train-prior gen-annotations pipeline", "skeleton rig JSON"},
    {"camera",           Kind::Path,         true,  "gen-annotations pipeline", "camera JSON"},
    {"train_data",       Kind::Path,         true,  "train-prior", "training poses JSON (default: synthesized gait poses)"},
    {"train_count",      Kind::Integer,      false, "train-prior pipeline", "synthesized training poses (default 1000)"},
    {"learning_rate",    Kind::Number,       false, "train-prior pipeline", "Adam step size (default 0.001)"},
    {"w1",               Kind::Number,       false, "train-prior pipeline", "KL weight (default 0.005)"},
    {"w2",               Kind::Number,       false, "train-prior pipeline", "reconstruction weight (default 0.01)"},
    {"epochs",           Kind::Integer,      false, "train-prior pipeline", "training epochs (default 250)"},
    {"batch_size",       Kind::Integer,      false, "train-prior pipeline", "mini-batch size (default 128)"},
    {"model",            Kind::Path,         true,  "sample-poses", "trained prior JSON"},
    {"ranges",           Kind::RangesSource, true,  "sample-poses pipeline", "'paper' or a range table JSON (default paper)"},
    {"count",            Kind::Integer,      false, "sample-poses pipeline", "accepted poses to produce"},
    {"variance_scale",   Kind::Number,       false, "sample-poses pipeline", "latent variance multiplier (default 2)"},
    {"filter_mode",      Kind::Text,         false, "sample-poses pipeline", "primary or all-components (default primary)"},
    {"poses",            Kind::Path,         true,  "gen-annotations", "poses JSON"},
    {"animal_image",     Kind::Path,         true,  "merge-boundaries", "RGBA animal rendering"},
    {"background_image", Kind::Path,         true,  "merge-boundaries", "background photo"},
    {"animal_edges",     Kind::Path,         true,  "merge-boundaries", "precomputed animal edge PNG"},
    {"background_edges", Kind::Path,         true,  "merge-boundaries", "precomputed background edge PNG"},
    {"mask",             Kind::Path,         true,  "merge-boundaries", "animal mask PNG"},
    {"offset_x",         Kind::Number,       false, "merge-boundaries", "animal placement, pixels (default 0)"},
    {"offset_y",         Kind::Number,       false, "merge-boundaries", "animal placement, pixels (default 0)"},
    {"scale",            Kind::Number,       false, "merge-boundaries", "animal scale (default 1)"},
    {"dilation",         Kind::Integer,      false, "merge-boundaries pipeline", "mask dilation radius, pixels (default 2)"},
    {"edge_sigma",       Kind::Number,       false, "merge-boundaries pipeline", "soft-edge pre-blur sigma (default 0.5)"},
    {"mask_out",         Kind::Path,         false, "merge-boundaries", "also write the dilated mask"},
    {"maps",             Kind::PathList,     true,  "export-jobs", "conditioning map PNGs in job order"},
    {"annotations",      Kind::Path,         true,  "export-jobs", "annotation JSON, one annotation per map"},
    {"gt",               Kind::Path,         true,  "eval-pck", "ground-truth annotation JSON"},
    {"pred",             Kind::Path,         true,  "eval-pck", "prediction JSON"},
    {"alpha",            Kind::Number,       false, "eval-pck", "PCK threshold fraction (default 0.05)"},
    {"normalizer",       Kind::Text,         false, "eval-pck", "bbox-max, bbox-diagonal or torso-length (default bbox-max)"},
    {"count_occluded",   Kind::Boolean,      false, "eval-pck", "score visibility-1 keypoints too (default true)"},
    {"format",           Kind::Text,         false, "eval-pck", "text, csv or json (default text)"},
    {"features",         Kind::PathList,     true,  "tsne", "feature CSV or JSON files"},
    {"perplexity",       Kind::Number,       false, "tsne", "target perplexity (default 30)"},
    {"iterations",       Kind::Integer,      false, "tsne", "gradient steps (default 1000)"},
    {"out",              Kind::Path,         false, "train-prior sample-poses gen-annotations merge-boundaries eval-pck tsne", "output file"},
    {"out_dir",          Kind::Path,         false, "export-jobs pipeline", "output directory"},
};
// clang-format on

struct Command {
    std::string_view name;
    std::string_view help;
    std::vector<std::string_view> required;
};

const std::vector<Command>& commands() {
    static const std::vector<Command> list = {
        {"train-prior", "train the pose prior", {"master_seed", "out"}},
        {"sample-poses", "sample and filter poses from a trained prior", {"master_seed", "model", "count", "out"}},
        {"gen-annotations", "project posed skeletons into keypoint annotations", {"rig", "poses", "camera", "out"}},
        {"merge-boundaries", "build one merged conditioning map", {"out"}},
        {"export-jobs", "write conditioning maps and the diffusion job manifest", {"master_seed", "maps", "annotations", "out_dir"}},
        {"eval-pck", "score keypoint predictions with PCK", {"gt", "pred"}},
        {"tsne", "embed feature vectors in 2-D", {"master_seed", "features", "out"}},
        {"pipeline", "train, sample, annotate, merge and export in one run", {"master_seed", "rig", "camera", "count", "out_dir"}},
    };
    return list;
}

bool used_by(const KeySpec& spec, std::string_view command) {
    std::string_view rest = spec.commands;
    while (!rest.empty()) {
        const auto space = rest.find(' ');
        if (rest.substr(0, space) == command) return true;
        if (space == std::string_view::npos) break;
        rest.remove_prefix(space + 1);
    }
    return false;
}

const KeySpec* find_key(std::string_view key) {
    for (const auto& k : kKeys)
        if (k.key == key) return &k;
    return nullptr;
}

std::string flag_name(std::string_view key) {
    std::string f = "--" + std::string(key);
    std::replace(f.begin(), f.end(), '_', '-');
    return f;
}

std::string kind_name(Kind kind) {
    switch (kind) {
        case Kind::Number: return "a number";
        case Kind::Integer: return "a non-negative integer";
        case Kind::Boolean: return "true or false";
        case Kind::PathList: return "a list of paths";
        default: return "a string";
    }
}

fs::path resolve(const fs::path& base, const std::string& raw) {
    const fs::path p(raw);
    return (p.is_absolute() || base.empty() ? p : base / p).lexically_normal();
}

// Converts a config-file value. Returns nullopt when the JSON type is wrong.
std::optional<json> from_file(const KeySpec& spec, const json& v, const fs::path& base) {
    switch (spec.kind) {
        case Kind::Number:
            if (v.is_number()) return json(v.get<double>());
            break;
        case Kind::Integer:
            if (v.is_number_unsigned()) return v;
            break;
        case Kind::Boolean:
            if (v.is_boolean()) return v;
            break;
        case Kind::Text:
            if (v.is_string()) return v;
            break;
        case Kind::RangesSource:
            if (v.is_string()) return v == "paper" ? v : json(resolve(base, v.get<std::string>()).string());
            break;
        case Kind::Path:
            if (v.is_string()) return json(resolve(base, v.get<std::string>()).string());
            break;
        case Kind::PathList:
            if (v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); })) {
                json out = json::array();
                for (const auto& e : v) out.push_back(resolve(base, e.get<std::string>()).string());
                return out;
            }
            break;
    }
    return std::nullopt;
}

std::optional<json> from_flag(const KeySpec& spec, const std::vector<std::string>& raw) {
    if (spec.kind == Kind::PathList) return json(raw);
    const std::string& s = raw.front();
    switch (spec.kind) {
        case Kind::Number: {
            std::size_t used = 0;
            try {
                const double v = std::stod(s, &used);
                if (used == s.size()) return json(v);
            } catch (const std::exception&) {
            }
            return std::nullopt;
        }
        case Kind::Integer: {
            if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
            try {
                return json(static_cast<std::uint64_t>(std::stoull(s)));
            } catch (const std::exception&) {
                return std::nullopt;
            }
        }
        case Kind::Boolean:
            if (s == "true" || s == "1") return json(true);
            if (s == "false" || s == "0") return json(false);
            return std::nullopt;
        default: return json(s);
    }
}

class Settings {
public:
    std::map<std::string, json, std::less<>> values;

    [[nodiscard]] bool has(std::string_view key) const { return values.contains(key); }
    [[nodiscard]] double number(std::string_view key, double fallback) const {
        return has(key) ? at(key).get<double>() : fallback;
    }
    [[nodiscard]] std::uint64_t integer(std::string_view key, std::uint64_t fallback) const {
        return has(key) ? at(key).get<std::uint64_t>() : fallback;
    }
    [[nodiscard]] std::uint64_t integer(std::string_view key) const { return at(key).get<std::uint64_t>(); }
    [[nodiscard]] bool boolean(std::string_view key, bool fallback) const {
        return has(key) ? at(key).get<bool>() : fallback;
    }
    [[nodiscard]] std::string text(std::string_view key, std::string_view fallback) const {
        return has(key) ? at(key).get<std::string>() : std::string(fallback);
    }
    [[nodiscard]] fs::path path(std::string_view key) const { return fs::path(at(key).get<std::string>()); }
    [[nodiscard]] std::vector<fs::path> paths(std::string_view key) const {
        std::vector<fs::path> out;
        for (const auto& p : at(key)) out.emplace_back(p.get<std::string>());
        return out;
    }

private:
    [[nodiscard]] const json& at(std::string_view key) const {
        const auto it = values.find(key);
        if (it == values.end()) throw UsageError(std::string(key) + " is required");
        return it->second;
    }
};

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? std::string(sep) : "") + parts[i];
    return out;
}

void load_config_file(const fs::path& file, Settings& settings, std::vector<std::string>& problems) {
    json doc;
    try {
        doc = read_json_file(file);
    } catch (const Error& e) {
        throw UsageError(std::string("config: ") + e.what());
    }
    if (!doc.is_object()) throw UsageError("config " + file.string() + ": expected a JSON object");
    const fs::path base = file.parent_path();
    for (const auto& [key, value] : doc.items()) {
        const KeySpec* spec = find_key(key);
        if (spec == nullptr) {
            problems.push_back("unknown config key '" + key + "'");
            continue;
        }
        if (auto v = from_file(*spec, value, base)) {
            settings.values[key] = std::move(*v);
        } else {
            problems.push_back("config key '" + key + "' must be " + kind_name(spec->kind));
        }
    }
}

void check_command(std::string_view command, const Settings& s, std::vector<std::string>& problems) {
    const auto& cmds = commands();
    const auto cmd = std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == command; });
    for (const auto key : cmd->required)
        if (!s.has(key)) problems.push_back(std::string(key) + " is required (" + flag_name(key) + ")");
    for (const auto& spec : kKeys) {
        if (!spec.input || !used_by(spec, command) || !s.has(spec.key)) continue;
        const auto& v = s.values.at(std::string(spec.key));
        std::vector<std::string> paths;
        if (v.is_array()) {
            for (const auto& p : v) paths.push_back(p.get<std::string>());
        } else {
            paths.push_back(v.get<std::string>());
        }
        if (spec.kind == Kind::RangesSource && paths.front() == "paper") continue;
        for (const auto& p : paths)
            if (!fs::exists(p)) problems.push_back(std::string(spec.key) + ": no such file " + p);
    }
}

// ---------------------------------------------------------------------------
// Output helpers

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

void ensure_parent(const fs::path& p) {
    if (!p.has_parent_path()) return;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create " + p.parent_path().string() + ": " + ec.message());
}

fs::path beside(const fs::path& out, std::string_view suffix) {
    return out.parent_path() / (out.stem().string() + std::string(suffix));
}

class Artifacts {
public:
    explicit Artifacts(std::ostream& out) : out_(out) {}

    void wrote(const fs::path& p) {
        out_ << "wrote " << p.string() << '\n';
        paths_.push_back(p.string());
    }
    void write_json(const fs::path& p, const json& doc) {
        ensure_parent(p);
        write_json_file(p, doc);
        wrote(p);
    }
    [[nodiscard]] const std::vector<std::string>& paths() const { return paths_; }

private:
    std::ostream& out_;
    std::vector<std::string> paths_;
};

// ---------------------------------------------------------------------------
// Stages

vae::TrainConfig train_config(const Settings& s, std::uint64_t master) {
    vae::TrainConfig cfg;
    cfg.learning_rate = s.number("learning_rate", cfg.learning_rate);
    cfg.w1 = s.number("w1", cfg.w1);
    cfg.w2 = s.number("w2", cfg.w2);
    cfg.epochs = s.integer("epochs", cfg.epochs);
    cfg.batch_size = s.integer("batch_size", cfg.batch_size);
    cfg.seed = derive_seed(master, "train");
    cfg.validate();
    return cfg;
}

std::vector<vae::PoseAngles> training_poses(const Settings& s, const kinematics::SkeletonRig* rig,
                                             std::uint64_t master) {
    if (s.has("train_data")) return vae::load_poses(s.path("train_data"));
    if (rig == nullptr) throw UsageError("train-prior needs --rig or --train-data");
    return kinematics::synthesize_gait_poses(*rig, s.integer("train_count", 1000), derive_seed(master, "train-data"));
}

struct Trained {
    vae::VaePrior model;
    json summary;
};

Trained train_stage(const Settings& s, std::span<const vae::PoseAngles> data, std::uint64_t master) {
    const auto cfg = train_config(s, master);
    spdlog::info("training prior on {} poses for {} epochs", data.size(), cfg.epochs);
    const auto start = Clock::now();
    auto result = vae::train(vae::VaePrior::he_uniform(derive_seed(master, "init")), data, cfg);
    const auto& first = result.history.front();
    const auto& last = result.history.back();
    json summary = {
        {"stage", "train-prior"},
        {"master_seed", master},
        {"train_poses", data.size()},
        {"config", vae::to_json(cfg)},
        {"first_epoch", {{"kl", first.kl}, {"rec", first.rec}, {"total", first.total}}},
        {"final_epoch", {{"kl", last.kl}, {"rec", last.rec}, {"total", last.total}}},
        {"rec_ratio", first.rec > 0.0 ? last.rec / first.rec : 0.0},
        {"seconds", seconds_since(start)},
    };
    spdlog::info("final rec {:.6g} ({:.4g} of epoch 1)", last.rec, summary["rec_ratio"].get<double>());
    return {std::move(result.model), std::move(summary)};
}

struct Sampled {
    std::vector<vae::PoseAngles> poses;
    json report;
};

Sampled sample_stage(const Settings& s, const vae::VaePrior& model, std::uint64_t count, std::uint64_t master) {
    const std::string ranges = s.text("ranges", "paper");
    const auto table = sampler::load_ranges(ranges);
    sampler::SampleOptions opts;
    opts.variance_scale = s.number("variance_scale", 2.0);
    opts.mode = sampler::parse_mode(s.text("filter_mode", "primary"));
    opts.seed = derive_seed(master, "sample");
    const auto start = Clock::now();
    auto result = sampler::sample_refined(model, table, count, opts);
    json report = sampler::to_json(result.report);
    report["stage"] = "sample-poses";
    report["master_seed"] = master;
    report["variance_scale"] = opts.variance_scale;
    report["filter_mode"] = sampler::mode_name(opts.mode);
    report["ranges"] = ranges;
    report["published_dropout_rate"] = 0.68;
    report["seconds"] = seconds_since(start);
    spdlog::info("accepted {} of {} draws (dropout {:.2f}%)", result.report.accepted, result.report.draws(),
                 100.0 * result.report.dropout_rate);
    return {std::move(result.poses), std::move(report)};
}

std::string generated_name(std::size_t index) { return fmt::format("generated/job_{:06d}.png", index + 1); }

struct Annotated {
    kinematics::CocoDataset data;
    std::vector<std::size_t> pose_index;  // pose behind each annotation
    std::vector<std::size_t> skipped;     // poses with no keypoint in frame
};

Annotated annotate_stage(const kinematics::SkeletonRig& rig, const kinematics::Camera& cam,
                         std::span<const vae::PoseAngles> poses) {
    Annotated out;
    for (std::size_t i = 0; i < poses.size(); ++i) {
        const auto posed = kinematics::forward_kinematics(rig, poses[i]);
        const auto projected = kinematics::project_keypoints(posed, rig, cam);
        const auto next = out.data.images.size();
        kinematics::ImageMeta image{static_cast<std::int64_t>(next + 1), generated_name(next), cam.width, cam.height};
        try {
            auto ann = kinematics::make_annotation(projected, image);
            ann.id = image.id;
            ann.image_id = image.id;
            out.data.images.push_back(image);
            out.data.annotations.push_back(ann);
            out.pose_index.push_back(i);
        } catch (const kinematics::EmptyAnnotationError&) {
            spdlog::warn("pose {} has no keypoint in frame; skipped", i);
            out.skipped.push_back(i);
        }
    }
    return out;
}

json annotate_summary(const Annotated& a, std::size_t poses) {
    return {{"stage", "gen-annotations"},
            {"poses", poses},
            {"annotations", a.data.annotations.size()},
            {"skipped_poses", a.skipped}};
}

struct Conditioning {
    BoundaryMap map;
    BinaryMask mask;  // dilated
};

Conditioning conditioning_map(const Image& animal_rgba, const Image& background, const boundary::Placement& placement,
                              std::size_t dilation, double sigma) {
    const boundary::SoftEdgeOptions edges{sigma, 99.0};
    const auto placed = boundary::composite_foreground(animal_rgba, background, placement);
    const Image grey(background.width, background.height, 3, kAnimalCanvasGrey);
    const auto animal_only = boundary::composite_foreground(animal_rgba, grey, placement);
    const auto animal_map = boundary::soft_edges(animal_only.image, edges);
    const auto background_map = boundary::soft_edges(background, edges);
    auto mask = boundary::dilate(placed.mask, dilation);
    return {boundary::merge_boundaries(animal_map, mask, background_map), std::move(mask)};
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_train_prior(const Settings& s, Artifacts& art) {
    const auto master = s.integer("master_seed");
    std::optional<kinematics::SkeletonRig> rig;
    if (s.has("rig")) rig = kinematics::load_rig(s.path("rig"));
    const auto data = training_poses(s, rig ? &*rig : nullptr, master);
    auto trained = train_stage(s, data, master);
    const auto out = s.path("out");
    ensure_parent(out);
    vae::save_model(out, trained.model);
    art.wrote(out);
    art.write_json(beside(out, ".summary.json"), trained.summary);
}

void cmd_sample_poses(const Settings& s, Artifacts& art) {
    const auto master = s.integer("master_seed");
    const auto model = vae::load_model(s.path("model"));
    auto sampled = sample_stage(s, model, s.integer("count"), master);
    const auto out = s.path("out");
    ensure_parent(out);
    vae::save_poses(out, sampled.poses);
    art.wrote(out);
    art.write_json(beside(out, ".report.json"), sampled.report);
}

void cmd_gen_annotations(const Settings& s, Artifacts& art) {
    const auto rig = kinematics::load_rig(s.path("rig"));
    const auto cam = kinematics::load_camera(s.path("camera"));
    const auto poses = vae::load_poses(s.path("poses"));
    const auto annotated = annotate_stage(rig, cam, poses);
    const auto doc = kinematics::to_json(annotated.data);
    kinematics::validate_coco(doc);
    const auto out = s.path("out");
    art.write_json(out, doc);
    art.write_json(beside(out, ".summary.json"), annotate_summary(annotated, poses.size()));
}

void cmd_merge_boundaries(const Settings& s, Artifacts& art) {
    std::optional<BinaryMask> mask;
    std::optional<BoundaryMap> animal_map, background_map;
    const std::size_t dilation = s.integer("dilation", 2);
    const boundary::SoftEdgeOptions edges{s.number("edge_sigma", 0.5), 99.0};
    std::optional<Image> background;
    if (s.has("background_image")) {
        background = read_png(s.path("background_image"));
        background_map = boundary::soft_edges(*background, edges);
    }
    if (s.has("animal_image")) {
        if (!background) throw UsageError("--animal-image needs --background-image to place it on");
        const boundary::Placement placement{s.number("offset_x", 0.0), s.number("offset_y", 0.0),
                                            s.number("scale", 1.0)};
        const auto animal = read_png(s.path("animal_image"));
        mask = boundary::composite_foreground(animal, *background, placement).mask;
        const Image grey(background->width, background->height, 3, kAnimalCanvasGrey);
        animal_map = boundary::soft_edges(boundary::composite_foreground(animal, grey, placement).image, edges);
    }
    if (s.has("animal_edges")) animal_map = read_boundary_png(s.path("animal_edges"));
    if (s.has("background_edges")) background_map = read_boundary_png(s.path("background_edges"));
    if (s.has("mask")) mask = read_mask_png(s.path("mask"));
    std::vector<std::string> missing;
    if (!animal_map) missing.emplace_back("animal edges (--animal-edges or --animal-image)");
    if (!background_map) missing.emplace_back("background edges (--background-edges or --background-image)");
    if (!mask) missing.emplace_back("a mask (--mask or --animal-image)");
    if (!missing.empty()) throw UsageError("merge-boundaries needs " + join(missing, ", "));

    const auto dilated = boundary::dilate(*mask, dilation);
    const auto merged = boundary::merge_boundaries(*animal_map, dilated, *background_map);
    const auto out = s.path("out");
    ensure_parent(out);
    write_png(out, merged);
    art.wrote(out);
    if (s.has("mask_out")) {
        ensure_parent(s.path("mask_out"));
        write_png(s.path("mask_out"), dilated);
        art.wrote(s.path("mask_out"));
    }
    art.write_json(beside(out, ".summary.json"), {{"stage", "merge-boundaries"},
                                                  {"width", merged.width},
                                                  {"height", merged.height},
                                                  {"dilation", dilation},
                                                  {"mask_pixels", dilated.count()}});
}

void cmd_export_jobs(const Settings& s, Artifacts& art) {
    const auto master = s.integer("master_seed");
    const auto maps = s.paths("maps");
    const auto ann_path = s.path("annotations");
    const auto data = kinematics::coco_from_json(read_json_file(ann_path), ann_path.string());
    if (maps.size() != data.annotations.size())
        throw UsageError(fmt::format("{} maps but {} annotations in {}", maps.size(), data.annotations.size(),
                                     ann_path.string()));
    const auto out_dir = s.path("out_dir");
    auto ref = fs::absolute(ann_path).lexically_relative(fs::absolute(out_dir)).generic_string();
    if (ref.empty()) ref = ann_path.generic_string();
    std::vector<boundary::ExportItem> items;
    for (std::size_t i = 0; i < maps.size(); ++i)
        items.push_back({read_boundary_png(maps[i]), ref + "#" + std::to_string(data.annotations[i].id)});
    const auto manifest = boundary::export_jobs(items, {}, master, out_dir);
    boundary::validate_manifest(manifest, out_dir);
    for (const auto& e : manifest.entries) art.wrote(out_dir / e.conditioning_map_path);
    art.wrote(out_dir / "manifest.json");
    art.write_json(out_dir / "export.summary.json",
                   {{"stage", "export-jobs"}, {"master_seed", master}, {"jobs", manifest.entries.size()}});
}

void cmd_eval_pck(const Settings& s, Artifacts& art, std::ostream& out) {
    const auto pairs = eval::load_dataset(s.path("gt"), s.path("pred"));
    eval::PckOptions opts;
    opts.alpha = s.number("alpha", 0.05);
    opts.normalizer = eval::parse_normalizer(s.text("normalizer", "bbox-max"));
    opts.count_occluded = s.boolean("count_occluded", true);
    const auto format = eval::parse_format(s.text("format", "text"));
    const auto result = eval::pck(pairs, opts);
    const auto text = eval::report(result, format);
    if (!s.has("out")) {
        out << text;
        return;
    }
    const auto path = s.path("out");
    ensure_parent(path);
    std::ofstream file(path, std::ios::binary);
    if (!(file << text)) throw IoError("cannot write " + path.string());
    file.close();
    art.wrote(path);
    auto summary = eval::to_json(result);
    summary["stage"] = "eval-pck";
    summary["pairs"] = pairs.size();
    art.write_json(beside(path, ".summary.json"), summary);
}

void cmd_tsne(const Settings& s, Artifacts& art) {
    std::vector<embed::FeatureSet> sets;
    for (const auto& f : s.paths("features")) {
        auto loaded = embed::load_features(f);
        sets.insert(sets.end(), std::make_move_iterator(loaded.begin()), std::make_move_iterator(loaded.end()));
    }
    embed::TsneConfig cfg;
    cfg.perplexity = s.number("perplexity", cfg.perplexity);
    cfg.iterations = static_cast<int>(s.integer("iterations", static_cast<std::uint64_t>(cfg.iterations)));
    const auto master = s.integer("master_seed");
    cfg.seed = derive_seed(master, "tsne");
    const auto start = Clock::now();
    const auto emb = embed::tsne(sets, cfg);
    const auto out = s.path("out");
    ensure_parent(out);
    embed::write_embedding_csv(out, emb);
    art.wrote(out);

    json history = json::array();
    for (const auto& h : emb.kl_history) history.push_back({{"iteration", h.iteration}, {"kl", h.kl}});
    std::map<std::string, std::size_t> per_domain;
    for (const auto& d : emb.domains) ++per_domain[d];
    json summary = {{"stage", "tsne"},     {"master_seed", master},      {"points", emb.domains.size()},
                    {"domains", per_domain}, {"perplexity", cfg.perplexity}, {"iterations", cfg.iterations},
                    {"kl_history", history}, {"seconds", seconds_since(start)}};
    summary["silhouette"] = per_domain.size() >= 2 ? json(embed::silhouette_score(emb)) : json(nullptr);
    art.write_json(beside(out, ".summary.json"), summary);
}

void cmd_pipeline(const Settings& s, Artifacts& art) {
    const auto start = Clock::now();
    const auto master = s.integer("master_seed");
    const auto out_dir = s.path("out_dir");
    const auto rig = kinematics::load_rig(s.path("rig"));
    const auto cam = kinematics::load_camera(s.path("camera"));
    json stages = json::object();

    const auto data = training_poses(s, &rig, master);
    auto trained = train_stage(s, data, master);
    fs::create_directories(out_dir);
    vae::save_model(out_dir / "model.json", trained.model);
    art.wrote(out_dir / "model.json");
    art.write_json(out_dir / "model.summary.json", trained.summary);
    stages["train"] = trained.summary;

    auto sampled = sample_stage(s, trained.model, s.integer("count"), master);
    vae::save_poses(out_dir / "poses.json", sampled.poses);
    art.wrote(out_dir / "poses.json");
    art.write_json(out_dir / "poses.report.json", sampled.report);
    stages["sample"] = sampled.report;

    const auto annotated = annotate_stage(rig, cam, sampled.poses);
    const auto coco = kinematics::to_json(annotated.data);
    kinematics::validate_coco(coco);
    art.write_json(out_dir / "annotations.json", coco);
    stages["annotate"] = annotate_summary(annotated, sampled.poses.size());

    const auto stage_start = Clock::now();
    const std::size_t dilation = s.integer("dilation", 2);
    const double sigma = s.number("edge_sigma", 0.5);
    const auto background_seed = derive_seed(master, "background");
    std::vector<boundary::ExportItem> items;
    for (std::size_t k = 0; k < annotated.data.annotations.size(); ++k) {
        const auto posed = kinematics::forward_kinematics(rig, sampled.poses[annotated.pose_index[k]]);
        const auto animal = render::render_silhouette(rig, posed, cam);
        const auto background = render::procedural_background(cam.width, cam.height, derive_seed(background_seed, k));
        auto cond = conditioning_map(animal, background, {}, dilation, sigma);
        items.push_back({std::move(cond.map), "annotations.json#" + std::to_string(annotated.data.annotations[k].id)});
    }
    stages["conditioning"] = {{"maps", items.size()}, {"dilation", dilation}, {"edge_sigma", sigma},
                              {"seconds", seconds_since(stage_start)}};

    const auto manifest = boundary::export_jobs(items, {}, master, out_dir);
    boundary::validate_manifest(manifest, out_dir);
    for (const auto& e : manifest.entries) art.wrote(out_dir / e.conditioning_map_path);
    art.wrote(out_dir / "manifest.json");
    stages["export"] = {{"jobs", manifest.entries.size()}};

    art.write_json(out_dir / "summary.json", {{"stage", "pipeline"},
                                              {"master_seed", master},
                                              {"stages", stages},
                                              {"artifacts", art.paths()},
                                              {"seconds", seconds_since(start)}});
}

// ---------------------------------------------------------------------------

void configure_logging(const std::string& level) {
    static const std::vector<std::string> levels = {"trace", "debug", "info", "warn", "error", "off"};
    if (std::find(levels.begin(), levels.end(), level) == levels.end())
        throw UsageError("log level must be one of " + join(levels, ", "));
    auto logger = spdlog::get("quadprior");
    if (!logger) {
        logger = spdlog::stderr_logger_mt("quadprior");
        logger->set_pattern("[%l] %v");
    }
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(level));
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

int fail(std::ostream& err, std::string_view command, std::string_view kind, const std::string& message, int code) {
    err << "quadprior " << (command.empty() ? "" : std::string(command) + " ") << "error[" << kind
        << "]: " << one_line(message) << '\n';
    return code;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Pose prior, annotation and conditioning-map pipeline for synthetic quadruped data"};
    app.name("quadprior");
    app.require_subcommand(1, 1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config with flat snake_case keys; flags override it");
    std::vector<std::string> log_level;
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off (default info)");

    struct Bound {
        const KeySpec* spec;
        CLI::Option* option;
        std::vector<std::string> values;
    };
    std::map<std::string, std::vector<std::unique_ptr<Bound>>, std::less<>> bound;
    for (const auto& cmd : commands()) {
        auto* sub = app.add_subcommand(std::string(cmd.name), std::string(cmd.help));
        sub->fallthrough();
        auto& slots = bound[std::string(cmd.name)];
        for (const auto& spec : kKeys) {
            if (!used_by(spec, cmd.name)) continue;
            auto slot = std::make_unique<Bound>(Bound{&spec, nullptr, {}});
            std::string names = flag_name(spec.key);
            if (spec.key == "master_seed") names += ",--seed";
            slot->option = sub->add_option(names, slot->values, std::string(spec.help));
            if (spec.kind != Kind::PathList) slot->option->expected(1);
            slots.push_back(std::move(slot));
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        return fail(err, "", "usage", e.what(), 2);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        Settings settings;
        std::vector<std::string> problems;
        if (!config_path.empty()) load_config_file(config_path, settings, problems);
        if (!log_level.empty()) settings.values["log_level"] = log_level.back();
        for (const auto& slot : bound[command]) {
            if (slot->option->count() == 0) continue;
            if (auto v = from_flag(*slot->spec, slot->values)) {
                settings.values[std::string(slot->spec->key)] = std::move(*v);
            } else {
                problems.push_back(flag_name(slot->spec->key) + " must be " + kind_name(slot->spec->kind) +
                                   ", got '" + slot->values.front() + "'");
            }
        }
        check_command(command, settings, problems);
        if (!problems.empty()) throw UsageError(join(problems, "; "));
        configure_logging(settings.text("log_level", "info"));

        Artifacts artifacts(out);
        if (command == "train-prior") cmd_train_prior(settings, artifacts);
        else if (command == "sample-poses") cmd_sample_poses(settings, artifacts);
        else if (command == "gen-annotations") cmd_gen_annotations(settings, artifacts);
        else if (command == "merge-boundaries") cmd_merge_boundaries(settings, artifacts);
        else if (command == "export-jobs") cmd_export_jobs(settings, artifacts);
        else if (command == "eval-pck") cmd_eval_pck(settings, artifacts, out);
        else if (command == "tsne") cmd_tsne(settings, artifacts);
        else if (command == "pipeline") cmd_pipeline(settings, artifacts);
        out.flush();
        return 0;
    } catch (const UsageError& e) {
        return fail(err, command, "usage", e.what(), 2);
    } catch (const ConfigError& e) {
        return fail(err, command, "config", e.what(), 1);
    } catch (const ParseError& e) {
        return fail(err, command, "parse", e.what(), 1);
    } catch (const IoError& e) {
        return fail(err, command, "io", e.what(), 1);
    } catch (const DegenerateInputError& e) {
        return fail(err, command, "degenerate", e.what(), 1);
    } catch (const NumericalError& e) {
        return fail(err, command, "numerical", e.what(), 1);
    } catch (const std::exception& e) {
        return fail(err, command, "internal", e.what(), 1);
    }
}

}  // namespace quadprior::cli
