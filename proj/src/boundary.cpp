#include "quadprior/boundary.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>

#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/parallel.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::boundary {
namespace {

std::size_t clamp_index(std::ptrdiff_t i, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1));
}

// Premultiplied RGBA sample of the animal at continuous pixel-centre
// coordinates; transparent outside the image.
std::array<double, 4> sample_premultiplied(const Image& img, double u, double v) {
    std::array<double, 4> out{};
    const double fx = std::floor(u), fy = std::floor(v);
    const double tx = u - fx, ty = v - fy;
    const auto x0 = static_cast<std::ptrdiff_t>(fx), y0 = static_cast<std::ptrdiff_t>(fy);
    const bool has_alpha = img.channels == 4 || img.channels == 2;
    const std::size_t colour = img.channels >= 3 ? 3 : 1;
    for (int dy = 0; dy < 2; ++dy) {
        const double wy = dy == 0 ? 1.0 - ty : ty;
        if (wy == 0.0) continue;
        const std::ptrdiff_t y = y0 + dy;
        if (y < 0 || y >= static_cast<std::ptrdiff_t>(img.height)) continue;
        for (int dx = 0; dx < 2; ++dx) {
            const double wx = dx == 0 ? 1.0 - tx : tx;
            if (wx == 0.0) continue;
            const std::ptrdiff_t x = x0 + dx;
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(img.width)) continue;
            const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
            const double a = has_alpha ? img.at(ux, uy, img.channels - 1) : 1.0;
            const double w = wx * wy;
            for (std::size_t c = 0; c < 3; ++c) out[c] += w * a * img.at(ux, uy, colour == 3 ? c : 0);
            out[3] += w * a;
        }
    }
    return out;
}

}  // namespace

std::vector<double> gaussian_blur(const std::vector<double>& plane, std::size_t width, std::size_t height,
                                  double sigma) {
    if (!(sigma > 0.0)) return plane;
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (double& w : kernel) w /= sum;

    std::vector<double> tmp(plane.size()), out(plane.size());
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       plane[y * width + clamp_index(static_cast<std::ptrdiff_t>(x) + i, width)];
            tmp[y * width + x] = acc;
        }
    }
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[clamp_index(static_cast<std::ptrdiff_t>(y) + i, height) * width + x];
            out[y * width + x] = acc;
        }
    }
    return out;
}

double percentile(std::vector<double> values, double pct) {
    if (values.empty()) throw UsageError("percentile of an empty set");
    if (!(pct >= 0.0 && pct <= 100.0)) throw UsageError("percentile must lie in [0, 100]");
    const double pos = pct / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = values[lo];
    if (hi == lo) return a;
    const double b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(hi), values.end());
    return a + (pos - static_cast<double>(lo)) * (b - a);
}

BoundaryMap soft_edges(const Image& image, const SoftEdgeOptions& options) {
    if (image.empty() || image.channels == 0) throw UsageError("soft_edges needs a non-empty image");
    const std::size_t w = image.width, h = image.height;
    std::vector<double> lum(w * h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) lum[y * w + x] = image.luminance(x, y);
    }
    const auto blurred = gaussian_blur(lum, w, h, options.sigma);
    auto px = [&](std::ptrdiff_t x, std::ptrdiff_t y) { return blurred[clamp_index(y, h) * w + clamp_index(x, w)]; };

    BoundaryMap map(w, h);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const auto sx = static_cast<std::ptrdiff_t>(x), sy = static_cast<std::ptrdiff_t>(y);
            const double gx = 3.0 * (px(sx + 1, sy - 1) - px(sx - 1, sy - 1)) + 10.0 * (px(sx + 1, sy) - px(sx - 1, sy)) +
                              3.0 * (px(sx + 1, sy + 1) - px(sx - 1, sy + 1));
            const double gy = 3.0 * (px(sx - 1, sy + 1) - px(sx - 1, sy - 1)) + 10.0 * (px(sx, sy + 1) - px(sx, sy - 1)) +
                              3.0 * (px(sx + 1, sy + 1) - px(sx + 1, sy - 1));
            map.at(x, y) = std::hypot(gx, gy) / 32.0;
        }
    }
    double norm = percentile(map.values, options.percentile);
    if (!(norm > 0.0)) norm = *std::max_element(map.values.begin(), map.values.end());
    if (norm > 0.0) {
        for (double& v : map.values) v = std::min(1.0, v / norm);
    }
    return map;
}

Composite composite_foreground(const Image& animal, const Image& background, const Placement& placement) {
    if (background.empty() || background.channels == 0) throw UsageError("background image is empty");
    if (animal.empty()) throw UsageError("animal image is empty");
    if (!(placement.scale > 0.0) || !std::isfinite(placement.scale)) throw UsageError("placement scale must be positive");
    if (!(placement.min_visible_fraction >= 0.0 && placement.min_visible_fraction <= 1.0))
        throw UsageError("min_visible_fraction must lie in [0, 1]");

    // Alpha bounding box of the animal, in animal pixels.
    const bool has_alpha = animal.channels == 4 || animal.channels == 2;
    std::size_t x0 = animal.width, y0 = animal.height, x1 = 0, y1 = 0;
    for (std::size_t y = 0; y < animal.height; ++y) {
        for (std::size_t x = 0; x < animal.width; ++x) {
            if (has_alpha && !(animal.at(x, y, animal.channels - 1) > 0.0)) continue;
            x0 = std::min(x0, x);
            y0 = std::min(y0, y);
            x1 = std::max(x1, x + 1);
            y1 = std::max(y1, y + 1);
        }
    }
    if (x1 > x0) {
        const double bx0 = placement.offset_x + placement.scale * static_cast<double>(x0);
        const double by0 = placement.offset_y + placement.scale * static_cast<double>(y0);
        const double bx1 = placement.offset_x + placement.scale * static_cast<double>(x1);
        const double by1 = placement.offset_y + placement.scale * static_cast<double>(y1);
        const double ix = std::max(0.0, std::min(bx1, static_cast<double>(background.width)) - std::max(bx0, 0.0));
        const double iy = std::max(0.0, std::min(by1, static_cast<double>(background.height)) - std::max(by0, 0.0));
        const double visible = ix * iy / ((bx1 - bx0) * (by1 - by0));
        if (visible == 0.0) throw UsageError("animal placement is entirely out of frame");
        if (visible < placement.min_visible_fraction)
            throw UsageError("only " + std::to_string(visible) + " of the animal's box is in frame");
    }

    Composite out{background, BinaryMask(background.width, background.height)};
    const std::size_t colour = std::min<std::size_t>(background.channels, 3);
    for (std::size_t y = 0; y < background.height; ++y) {
        for (std::size_t x = 0; x < background.width; ++x) {
            const double u = (static_cast<double>(x) + 0.5 - placement.offset_x) / placement.scale - 0.5;
            const double v = (static_cast<double>(y) + 0.5 - placement.offset_y) / placement.scale - 0.5;
            const auto s = sample_premultiplied(animal, u, v);
            const double a = s[3];
            if (a == 0.0) continue;
            for (std::size_t c = 0; c < colour; ++c) {
                const double fg = colour == 1 ? 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2] : s[c];
                out.image.at(x, y, c) = fg + (1.0 - a) * background.at(x, y, c);
            }
            if (background.channels == 4 || background.channels == 2) {
                const std::size_t ac = background.channels - 1;
                out.image.at(x, y, ac) = a + (1.0 - a) * background.at(x, y, ac);
            }
            out.mask.set(x, y, a > 0.5);
        }
    }
    return out;
}

BinaryMask dilate(const BinaryMask& mask, std::size_t radius) {
    if (radius == 0) return mask;
    BinaryMask out(mask.width, mask.height);
    const auto r = static_cast<std::ptrdiff_t>(radius);
    for (std::size_t y = 0; y < mask.height; ++y) {
        for (std::size_t x = 0; x < mask.width; ++x) {
            if (!mask.at(x, y)) continue;
            for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
                for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
                    if (dx * dx + dy * dy > r * r) continue;
                    const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(x) + dx;
                    const std::ptrdiff_t ny = static_cast<std::ptrdiff_t>(y) + dy;
                    if (nx < 0 || ny < 0 || nx >= static_cast<std::ptrdiff_t>(mask.width) ||
                        ny >= static_cast<std::ptrdiff_t>(mask.height))
                        continue;
                    out.set(static_cast<std::size_t>(nx), static_cast<std::size_t>(ny), true);
                }
            }
        }
    }
    return out;
}

BoundaryMap merge_boundaries(const BoundaryMap& animal, const BinaryMask& mask, const BoundaryMap& background) {
    if (!animal.same_size(mask.width, mask.height) || !background.same_size(mask.width, mask.height))
        throw UsageError("merge_boundaries needs equally sized animal map, mask and background map");
    BoundaryMap out(animal.width, animal.height);
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = mask.bits[i] != 0 ? animal.values[i] : std::max(animal.values[i], background.values[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest

nlohmann::json to_json(const JobManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) {
        entries.push_back({
            {"job_id", e.job_id},
            {"conditioning_map_path", e.conditioning_map_path},
            {"prompt_text", e.prompt_text},
            {"negative_prompt", e.negative_prompt},
            {"sampler_seed", e.sampler_seed},
            {"output_path", e.output_path},
            {"annotation_ref", e.annotation_ref},
        });
    }
    return {{"version", m.version}, {"master_seed", m.master_seed}, {"entries", std::move(entries)}};
}

JobManifest manifest_from_json(const nlohmann::json& doc, std::string_view source) {
    const std::string src(source);
    if (!doc.is_object()) throw ParseError(src + ": expected a JSON object");
    JobManifest m;
    if (!doc.contains("version") || !doc["version"].is_number_integer())
        throw ParseError(src + ".version: expected an integer");
    m.version = doc["version"].get<int>();
    if (m.version != kManifestVersion) throw ParseError(src + ".version: unsupported value " + doc["version"].dump());
    if (!doc.contains("master_seed") || !doc["master_seed"].is_number_unsigned())
        throw ParseError(src + ".master_seed: expected a non-negative integer");
    m.master_seed = doc["master_seed"].get<std::uint64_t>();
    if (!doc.contains("entries") || !doc["entries"].is_array()) throw ParseError(src + ".entries: expected an array");
    const auto& entries = doc["entries"];
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string where = src + ".entries[" + std::to_string(i) + "]";
        const auto& e = entries[i];
        if (!e.is_object()) throw ParseError(where + ": expected an object");
        auto text = [&](const char* key) {
            if (!e.contains(key) || !e[key].is_string()) throw ParseError(where + "." + key + ": expected a string");
            return e[key].get<std::string>();
        };
        JobEntry entry;
        entry.job_id = text("job_id");
        entry.conditioning_map_path = text("conditioning_map_path");
        entry.prompt_text = text("prompt_text");
        entry.negative_prompt = text("negative_prompt");
        entry.output_path = text("output_path");
        entry.annotation_ref = text("annotation_ref");
        if (!e.contains("sampler_seed") || !e["sampler_seed"].is_number_unsigned() ||
            e["sampler_seed"].get<std::uint64_t>() > 0xffffffffULL)
            throw ParseError(where + ".sampler_seed: expected an unsigned 32-bit integer");
        entry.sampler_seed = e["sampler_seed"].get<std::uint32_t>();
        m.entries.push_back(std::move(entry));
    }
    return m;
}

void validate_manifest(const JobManifest& m, const std::filesystem::path& base_dir) {
    std::vector<std::string> problems;
    std::set<std::string> ids;
    for (const auto& e : m.entries) {
        if (e.job_id.empty()) problems.push_back("empty job_id");
        if (!ids.insert(e.job_id).second) problems.push_back("duplicate job_id '" + e.job_id + "'");
        if (!std::filesystem::is_regular_file(base_dir / e.conditioning_map_path))
            problems.push_back("job '" + e.job_id + "': missing conditioning map " + e.conditioning_map_path);
        if (e.output_path.empty()) problems.push_back("job '" + e.job_id + "': empty output_path");
    }
    if (problems.empty()) return;
    std::string msg = "manifest invalid:";
    for (const auto& p : problems) msg += " " + p + ";";
    msg.pop_back();
    throw ParseError(msg);
}

JobManifest load_manifest(const std::filesystem::path& path) {
    return manifest_from_json(read_json_file(path), path.string());
}

std::string make_prompt(const PromptVocabulary& vocab, std::uint64_t seed) {
    if (vocab.environments.empty() || vocab.weather.empty())
        throw UsageError("prompt vocabulary needs at least one environment and one weather term");
    Rng rng(seed);
    const auto& env = vocab.environments[rng() % vocab.environments.size()];
    const auto& weather = vocab.weather[rng() % vocab.weather.size()];
    return "a photo of a " + vocab.species + " in a " + env + " landscape, " + weather +
           ", natural lighting, highly detailed";
}

std::uint32_t job_seed(std::uint64_t master_seed, std::uint64_t index) {
    return static_cast<std::uint32_t>(derive_seed(derive_seed(master_seed, "diffusion"), index) >> 32);
}

JobManifest export_jobs(const std::vector<ExportItem>& items, const PromptVocabulary& vocab, std::uint64_t master_seed,
                        const std::filesystem::path& out_dir) {
    for (const auto& item : items) item.map.validate();
    const auto maps_dir = out_dir / "conditioning";
    std::error_code ec;
    std::filesystem::create_directories(maps_dir, ec);
    if (ec) throw IoError("cannot create " + maps_dir.string() + ": " + ec.message());

    JobManifest m;
    m.master_seed = master_seed;
    m.entries.resize(items.size());
    const std::uint64_t prompt_root = derive_seed(master_seed, "prompt");
    for (std::size_t i = 0; i < items.size(); ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "job_%06zu", i + 1);
        auto& e = m.entries[i];
        e.job_id = id;
        e.conditioning_map_path = "conditioning/" + e.job_id + ".png";
        e.prompt_text = make_prompt(vocab, derive_seed(prompt_root, i));
        e.negative_prompt = vocab.negative;
        e.sampler_seed = job_seed(master_seed, i);
        e.output_path = "generated/" + e.job_id + ".png";
        e.annotation_ref = items[i].annotation_ref;
    }
    parallel_for(items.size(), [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) write_png(out_dir / m.entries[i].conditioning_map_path, items[i].map);
    });
    write_json_file(out_dir / "manifest.json", to_json(m));
    return m;
}

}  // namespace quadprior::boundary
