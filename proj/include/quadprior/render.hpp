#pragma once

// Stand-in imagery for the synthetic pipeline: a capsule rendering of the
// posed skeleton and a procedural landscape behind it.

#include <cstdint>

#include "quadprior/image.hpp"
#include "quadprior/kinematics.hpp"

namespace quadprior::render {

/// RGBA image at the camera resolution. Each bone is a capsule of its rig
/// thickness; alpha is the anti-aliased coverage of the union, colour a
/// striped coat. Bones with an endpoint behind the camera are skipped.
Image render_silhouette(const kinematics::SkeletonRig& rig, const kinematics::Pose3D& posed,
                        const kinematics::Camera& camera);

/// RGB sky, ridge line and ground with scattered shrubs, fixed by `seed`.
Image procedural_background(std::size_t width, std::size_t height, std::uint64_t seed);

}  // namespace quadprior::render
