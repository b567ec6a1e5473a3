#include "quadprior/render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "quadprior/error.hpp"
#include "quadprior/parallel.hpp"
#include "quadprior/seed.hpp"

namespace quadprior::render {
namespace {

constexpr double kStripePeriodPx = 9.0;

struct Capsule {
    Eigen::Vector2d a, b;
    double radius;
};

double segment_distance(const Eigen::Vector2d& p, const Capsule& c) {
    const Eigen::Vector2d ab = c.b - c.a;
    const double len2 = ab.squaredNorm();
    const double t = len2 > 0.0 ? std::clamp((p - c.a).dot(ab) / len2, 0.0, 1.0) : 0.0;
    return (p - (c.a + t * ab)).norm();
}

}  // namespace

Image render_silhouette(const kinematics::SkeletonRig& rig, const kinematics::Pose3D& posed,
                        const kinematics::Camera& camera) {
    camera.validate();
    const auto& bones = rig.bones();
    if (posed.heads.size() != bones.size() || posed.tails.size() != bones.size())
        throw UsageError("posed skeleton does not match the rig");
    std::vector<Capsule> capsules;
    for (std::size_t i = 0; i < bones.size(); ++i) {
        const auto h = kinematics::project_point(camera, posed.heads[i]);
        const auto t = kinematics::project_point(camera, posed.tails[i]);
        if (h.depth <= 0.0 || t.depth <= 0.0) continue;
        const double radius = bones[i].thickness * camera.focal_px / (0.5 * (h.depth + t.depth));
        capsules.push_back({{h.x, h.y}, {t.x, t.y}, radius});
    }

    Image out(camera.width, camera.height, 4, 0.0);
    parallel_for(camera.height, [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            for (std::size_t x = 0; x < camera.width; ++x) {
                const Eigen::Vector2d p(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
                double coverage = 0.0;
                for (const auto& c : capsules)
                    coverage = std::max(coverage, std::clamp(c.radius - segment_distance(p, c) + 0.5, 0.0, 1.0));
                if (coverage == 0.0) continue;
                const double phase = (0.8 * p.x() + 0.35 * p.y()) * 2.0 * std::numbers::pi / kStripePeriodPx;
                const double light = std::clamp(0.5 + 1.5 * std::sin(phase), 0.0, 1.0);
                out.at(x, y, 0) = 0.08 + 0.84 * light;
                out.at(x, y, 1) = 0.08 + 0.82 * light;
                out.at(x, y, 2) = 0.08 + 0.78 * light;
                out.at(x, y, 3) = coverage;
            }
        }
    });
    return out;
}

Image procedural_background(std::size_t width, std::size_t height, std::uint64_t seed) {
    if (width == 0 || height == 0) throw UsageError("background size must be positive");
    Rng rng(derive_seed(seed, "background"));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double w = static_cast<double>(width), h = static_cast<double>(height);

    const double horizon = h * (0.38 + 0.14 * u(rng));
    const double amp1 = h * (0.02 + 0.06 * u(rng)), amp2 = h * 0.02 * u(rng);
    const double f1 = (1.0 + 2.0 * u(rng)) * 2.0 * std::numbers::pi / w, f2 = (4.0 + 6.0 * u(rng)) * 2.0 * std::numbers::pi / w;
    const double ph1 = 2.0 * std::numbers::pi * u(rng), ph2 = 2.0 * std::numbers::pi * u(rng);
    const std::array<double, 3> sky_top{0.35 + 0.2 * u(rng), 0.55 + 0.15 * u(rng), 0.85 + 0.1 * u(rng)};
    const std::array<double, 3> sky_low{0.85, 0.88, 0.9};
    const std::array<double, 3> ground{0.35 + 0.3 * u(rng), 0.4 + 0.2 * u(rng), 0.2 + 0.1 * u(rng)};

    struct Shrub {
        double cx, cy, rx, ry, shade;
    };
    std::vector<Shrub> shrubs(12);
    for (auto& s : shrubs) {
        s.cy = horizon + amp1 + (h - horizon - amp1) * u(rng);
        s.cx = w * u(rng);
        const double perspective = 0.3 + 0.7 * (s.cy - horizon) / std::max(1.0, h - horizon);
        s.rx = w * (0.02 + 0.04 * u(rng)) * perspective;
        s.ry = s.rx * (0.4 + 0.3 * u(rng));
        s.shade = 0.45 + 0.25 * u(rng);
    }

    Image out(width, height, 3, 0.0);
    parallel_for(height, [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
            const double py = static_cast<double>(y) + 0.5;
            for (std::size_t x = 0; x < width; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double ridge = horizon + amp1 * std::sin(f1 * px + ph1) + amp2 * std::sin(f2 * px + ph2);
                std::array<double, 3> c{};
                if (py < ridge) {
                    const double t = std::clamp(py / std::max(1.0, ridge), 0.0, 1.0);
                    for (int k = 0; k < 3; ++k) c[k] = sky_top[k] + (sky_low[k] - sky_top[k]) * t;
                } else {
                    const double t = std::clamp((py - ridge) / std::max(1.0, h - ridge), 0.0, 1.0);
                    const double texture = 0.04 * std::sin(0.05 * px + 0.11 * py) * std::sin(0.07 * py);
                    for (int k = 0; k < 3; ++k) c[k] = ground[k] * (0.8 + 0.3 * t) + texture;
                    for (const auto& s : shrubs) {
                        const double dx = (px - s.cx) / s.rx, dy = (py - s.cy) / s.ry;
                        if (dx * dx + dy * dy <= 1.0)
                            for (int k = 0; k < 3; ++k) c[k] = ground[k] * s.shade;
                    }
                }
                for (std::size_t k = 0; k < 3; ++k) out.at(x, y, k) = std::clamp(c[k], 0.0, 1.0);
            }
        }
    });
    return out;
}

}  // namespace quadprior::render
