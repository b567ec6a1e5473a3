#include "quadprior/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "quadprior/error.hpp"

namespace quadprior {
namespace {

std::uint8_t quantize(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

png_uint_32 format_for(std::size_t channels) {
    switch (channels) {
        case 1: return PNG_FORMAT_GRAY;
        case 2: return PNG_FORMAT_GA;
        case 3: return PNG_FORMAT_RGB;
        case 4: return PNG_FORMAT_RGBA;
        default: throw UsageError("PNG images need 1 to 4 channels, got " + std::to_string(channels));
    }
}

void write_bytes(const std::filesystem::path& path, std::size_t w, std::size_t h, std::size_t channels,
                 const std::vector<std::uint8_t>& bytes) {
    if (w == 0 || h == 0) throw UsageError("cannot write empty image " + path.string());
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(w);
    img.height = static_cast<png_uint_32>(h);
    img.format = format_for(channels);
    if (png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr) == 0) {
        std::string why = img.message;
        png_image_free(&img);
        throw IoError("cannot write " + path.string() + ": " + why);
    }
}

}  // namespace

double Image::luminance(std::size_t x, std::size_t y) const {
    if (channels >= 3) return 0.299 * at(x, y, 0) + 0.587 * at(x, y, 1) + 0.114 * at(x, y, 2);
    return at(x, y, 0);
}

void BoundaryMap::validate() const {
    if (width == 0 || height == 0) throw UsageError("boundary map has zero size");
    if (values.size() != width * height) throw UsageError("boundary map storage does not match its size");
    for (double v : values) {
        if (!(v >= 0.0 && v <= 1.0)) throw UsageError("boundary map value outside [0, 1]");
    }
}

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

Image read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (png_image_begin_read_from_file(&img, path.c_str()) == 0) {
        std::string why = img.message;
        png_image_free(&img);
        throw IoError("cannot read " + path.string() + ": " + why);
    }
    std::size_t channels = PNG_IMAGE_SAMPLE_CHANNELS(img.format);
    img.format = format_for(channels);
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr) == 0) {
        std::string why = img.message;
        png_image_free(&img);
        throw IoError("cannot decode " + path.string() + ": " + why);
    }
    Image out(img.width, img.height, channels);
    std::transform(bytes.begin(), bytes.end(), out.data.begin(), [](std::uint8_t b) { return b / 255.0; });
    return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> bytes(image.data.size());
    std::transform(image.data.begin(), image.data.end(), bytes.begin(), quantize);
    write_bytes(path, image.width, image.height, image.channels, bytes);
}

void write_png(const std::filesystem::path& path, const BoundaryMap& map) {
    std::vector<std::uint8_t> bytes(map.values.size());
    std::transform(map.values.begin(), map.values.end(), bytes.begin(), quantize);
    write_bytes(path, map.width, map.height, 1, bytes);
}

BoundaryMap read_boundary_png(const std::filesystem::path& path) {
    Image img = read_png(path);
    BoundaryMap map(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) map.at(x, y) = std::clamp(img.luminance(x, y), 0.0, 1.0);
    return map;
}

void write_png(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> bytes(mask.bits.size());
    std::transform(mask.bits.begin(), mask.bits.end(), bytes.begin(),
                   [](std::uint8_t b) -> std::uint8_t { return b ? 255 : 0; });
    write_bytes(path, mask.width, mask.height, 1, bytes);
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
    Image img = read_png(path);
    BinaryMask mask(img.width, img.height);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) mask.set(x, y, img.luminance(x, y) >= 0.5);
    return mask;
}

}  // namespace quadprior
