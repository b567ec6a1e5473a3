#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace quadprior {

/// Interleaved image with channel values in [0, 1].
struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;
    std::vector<double> data;

    Image() = default;
    Image(std::size_t w, std::size_t h, std::size_t c, double fill = 0.0)
        : width(w), height(h), channels(c), data(w * h * c, fill) {}

    [[nodiscard]] bool empty() const noexcept { return width == 0 || height == 0; }
    double& at(std::size_t x, std::size_t y, std::size_t c) { return data[(y * width + x) * channels + c]; }
    [[nodiscard]] double at(std::size_t x, std::size_t y, std::size_t c) const {
        return data[(y * width + x) * channels + c];
    }
    /// Rec. 601 luma for 3+ channels, the first channel otherwise.
    [[nodiscard]] double luminance(std::size_t x, std::size_t y) const;
};

/// Single-channel soft edge map, values in [0, 1].
struct BoundaryMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> values;

    BoundaryMap() = default;
    BoundaryMap(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

    double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
    [[nodiscard]] double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
    [[nodiscard]] bool same_size(std::size_t w, std::size_t h) const noexcept { return width == w && height == h; }
    /// Throws UsageError on zero size or values outside [0, 1].
    void validate() const;
};

struct BinaryMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t w, std::size_t h, bool fill = false) : width(w), height(h), bits(w * h, fill ? 1 : 0) {}

    [[nodiscard]] bool at(std::size_t x, std::size_t y) const { return bits[y * width + x] != 0; }
    void set(std::size_t x, std::size_t y, bool v) { bits[y * width + x] = v ? 1 : 0; }
    [[nodiscard]] std::size_t count() const;
};

// 8-bit PNG interchange. Reads keep the file's channel count (1-4).
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
/// Quantizes to round(255 v).
void write_png(const std::filesystem::path& path, const BoundaryMap& map);
/// Luminance of any PNG, scaled to [0, 1].
BoundaryMap read_boundary_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const BinaryMask& mask);
/// Pixels with luminance >= 0.5 are set.
BinaryMask read_mask_png(const std::filesystem::path& path);

}  // namespace quadprior
