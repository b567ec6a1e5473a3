#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "quadprior/boundary.hpp"
#include "quadprior/error.hpp"
#include "quadprior/json_file.hpp"

using namespace quadprior;
using namespace quadprior::boundary;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("quadprior_test_boundary_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Direct 2-D convolution with a full (outer-product) Gaussian kernel, a 3x3
// Scharr correlation and a sort-based percentile.
BoundaryMap soft_edges_oracle(const Image& img, double sigma, double pct) {
    const long w = static_cast<long>(img.width), h = static_cast<long>(img.height);
    auto clampi = [](long v, long n) { return std::min(std::max(v, 0L), n - 1); };
    const long r = static_cast<long>(std::ceil(3 * sigma));
    double norm = 0.0;
    for (long i = -r; i <= r; ++i) norm += std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    std::vector<double> blurred(static_cast<std::size_t>(w * h));
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double acc = 0.0;
            for (long dy = -r; dy <= r; ++dy) {
                for (long dx = -r; dx <= r; ++dx) {
                    const double k = std::exp(-0.5 * static_cast<double>(dx * dx) / (sigma * sigma)) *
                                     std::exp(-0.5 * static_cast<double>(dy * dy) / (sigma * sigma)) / (norm * norm);
                    acc += k * img.luminance(static_cast<std::size_t>(clampi(x + dx, w)),
                                             static_cast<std::size_t>(clampi(y + dy, h)));
                }
            }
            blurred[static_cast<std::size_t>(y * w + x)] = acc;
        }
    }
    const int kx[3][3] = {{-3, 0, 3}, {-10, 0, 10}, {-3, 0, 3}};
    BoundaryMap out(img.width, img.height);
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            double gx = 0.0, gy = 0.0;
            for (int j = 0; j < 3; ++j) {
                for (int i = 0; i < 3; ++i) {
                    const double v = blurred[static_cast<std::size_t>(clampi(y + j - 1, h) * w + clampi(x + i - 1, w))];
                    gx += kx[j][i] * v;
                    gy += kx[i][j] * v;
                }
            }
            out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = std::sqrt(gx * gx + gy * gy) / 32.0;
        }
    }
    auto sorted = out.values;
    std::sort(sorted.begin(), sorted.end());
    const double pos = pct / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    double scale = lo + 1 < sorted.size() ? sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo])
                                          : sorted[lo];
    if (scale <= 0.0) scale = sorted.back();
    if (scale > 0.0) {
        for (double& v : out.values) v = std::min(1.0, v / scale);
    }
    return out;
}

BoundaryMap random_map(std::mt19937_64& rng, std::size_t w, std::size_t h, double zero_fraction = 0.3) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    BoundaryMap m(w, h);
    for (double& v : m.values) v = u(rng) < zero_fraction ? 0.0 : u(rng);
    return m;
}

BinaryMask random_mask(std::mt19937_64& rng, std::size_t w, std::size_t h) {
    BinaryMask m(w, h);
    for (auto& b : m.bits) b = static_cast<std::uint8_t>(rng() % 2);
    return m;
}

Image flat(std::size_t w, std::size_t h, std::size_t c, std::vector<double> px) {
    Image img(w, h, c);
    for (std::size_t i = 0; i < w * h; ++i) {
        for (std::size_t k = 0; k < c; ++k) img.data[i * c + k] = px[k];
    }
    return img;
}

}  // namespace

TEST_CASE("soft edges of a constant image vanish") {
    const auto map = soft_edges(flat(16, 12, 3, {0.3, 0.6, 0.1}));
    for (double v : map.values) CHECK(v == 0.0);
    CHECK_THROWS_AS(soft_edges(Image{}), UsageError);
}

TEST_CASE("soft edges peak on a step edge") {
    Image img(32, 20, 1);
    for (std::size_t y = 0; y < 20; ++y) {
        for (std::size_t x = 16; x < 32; ++x) img.at(x, y, 0) = 1.0;
    }
    const auto map = soft_edges(img);
    CHECK_NOTHROW(map.validate());
    for (std::size_t y = 0; y < 20; ++y) {
        CHECK(map.at(15, y) == 1.0);
        CHECK(map.at(16, y) == 1.0);
        CHECK(map.at(13, y) < 0.01);
        CHECK(map.at(18, y) < 0.01);
        CHECK(map.at(2, y) == 0.0);
    }
}

TEST_CASE("soft edges match a direct convolution oracle on the fixture photo") {
    const auto photo = read_png(fs::path(QUADPRIOR_TEST_DATA_DIR) / "fixture_photo.png");
    REQUIRE(photo.channels == 3);
    const auto got = soft_edges(photo);
    const auto want = soft_edges_oracle(photo, 0.5, 99.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < got.values.size(); ++i) worst = std::max(worst, std::abs(got.values[i] - want.values[i]));
    CHECK(worst < 1e-6);
}

TEST_CASE("sparse edges fall back to the maximum as normalizer") {
    Image img(40, 40, 1);
    img.at(20, 20, 0) = 1.0;  // response covers well under 1% of pixels
    const auto map = soft_edges(img);
    CHECK(*std::max_element(map.values.begin(), map.values.end()) == 1.0);
}

TEST_CASE("percentile interpolates") {
    CHECK(percentile({4, 1, 3, 2}, 50.0) == doctest::Approx(2.5));
    CHECK(percentile({4, 1, 3, 2}, 100.0) == 4.0);
    CHECK(percentile({7}, 99.0) == 7.0);
    CHECK_THROWS_AS(percentile({}, 50.0), UsageError);
}

TEST_CASE("compositing") {
    const auto bg = flat(10, 8, 3, {0.2, 0.4, 0.6});

    SUBCASE("transparent animal leaves the background") {
        const auto out = composite_foreground(flat(5, 5, 4, {1, 1, 1, 0}), bg, {2, 2});
        CHECK(out.image.data == bg.data);
        CHECK(out.mask.count() == 0);
    }
    SUBCASE("opaque animal covering the frame") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Image animal(10, 8, 4);
        for (std::size_t i = 0; i < animal.data.size(); ++i) animal.data[i] = i % 4 == 3 ? 1.0 : u(rng);
        const auto out = composite_foreground(animal, bg, {});
        for (std::size_t y = 0; y < 8; ++y) {
            for (std::size_t x = 0; x < 10; ++x) {
                for (std::size_t c = 0; c < 3; ++c) CHECK(out.image.at(x, y, c) == animal.at(x, y, c));
            }
        }
        CHECK(out.mask.count() == 80);
    }
    SUBCASE("half alpha blends exactly") {
        const auto out = composite_foreground(flat(10, 8, 4, {0.9, 0.3, 0.5, 0.5}), bg, {});
        CHECK(out.image.at(4, 4, 0) == 0.5 * 0.9 + 0.5 * 0.2);
        CHECK(out.image.at(4, 4, 1) == 0.5 * 0.3 + 0.5 * 0.4);
        CHECK(out.mask.count() == 0);  // alpha must exceed 0.5
    }
    SUBCASE("binary alpha at an integer offset copies source pixels") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        Image animal(4, 3, 4);
        for (std::size_t i = 0; i < animal.data.size(); ++i) animal.data[i] = i % 4 == 3 ? double(rng() % 2) : u(rng);
        animal.at(0, 0, 3) = 1.0;
        const auto out = composite_foreground(animal, bg, {3, 2});
        for (std::size_t y = 0; y < 8; ++y) {
            for (std::size_t x = 0; x < 10; ++x) {
                const bool inside = x >= 3 && x < 7 && y >= 2 && y < 5;
                const bool opaque = inside && animal.at(x - 3, y - 2, 3) == 1.0;
                for (std::size_t c = 0; c < 3; ++c)
                    CHECK(out.image.at(x, y, c) == (opaque ? animal.at(x - 3, y - 2, c) : bg.at(x, y, c)));
                CHECK(out.mask.at(x, y) == opaque);
            }
        }
    }
    SUBCASE("placement limits") {
        const auto animal = flat(4, 4, 4, {1, 1, 1, 1});
        CHECK_THROWS_AS(composite_foreground(animal, bg, {20, 0}), UsageError);
        CHECK_THROWS_AS(composite_foreground(animal, bg, {9, 0}), UsageError);  // 1/4 visible
        CHECK_NOTHROW(composite_foreground(animal, bg, {8, 0}));               // exactly 1/2 visible
        Placement loose{9, 0};
        loose.min_visible_fraction = 0.25;
        CHECK_NOTHROW(composite_foreground(animal, bg, loose));
        CHECK_THROWS_AS(composite_foreground(animal, bg, {0, 0, 0.0}), UsageError);
    }
    SUBCASE("scaling doubles the footprint") {
        const auto out = composite_foreground(flat(2, 2, 4, {1, 0, 0, 1}), bg, {2, 2, 2.0});
        CHECK(out.mask.count() >= 9);
        CHECK(out.mask.count() <= 16);
        CHECK(out.mask.at(3, 3));
    }
}

TEST_CASE("disk dilation") {
    BinaryMask m(9, 9);
    m.set(4, 4, true);
    CHECK(dilate(m, 0).count() == 1);
    CHECK(dilate(m, 1).count() == 5);
    CHECK(dilate(m, 2).count() == 13);
    BinaryMask corner(5, 5);
    corner.set(0, 0, true);
    CHECK(dilate(corner, 1).count() == 3);
}

TEST_CASE("merge follows the per-pixel rule") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t w = 5 + rng() % 30, h = 5 + rng() % 30;
        const auto animal = random_map(rng, w, h);
        const auto background = random_map(rng, w, h);
        const auto mask = random_mask(rng, w, h);
        const auto merged = merge_boundaries(animal, mask, background);
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double expect = mask.at(x, y) ? animal.at(x, y) : std::max(animal.at(x, y), background.at(x, y));
                CHECK(merged.at(x, y) == expect);
                CHECK(merged.at(x, y) <= std::max(animal.at(x, y), background.at(x, y)));
                if (mask.at(x, y)) CHECK(merged.at(x, y) >= animal.at(x, y));
            }
        }
        const auto identity = merge_boundaries(animal, mask, BoundaryMap(w, h));
        CHECK(identity.values == animal.values);
        const auto only_bg = merge_boundaries(BoundaryMap(w, h), BinaryMask(w, h), background);
        CHECK(only_bg.values == background.values);
    }
    CHECK_THROWS_AS(merge_boundaries(BoundaryMap(4, 4), BinaryMask(4, 5), BoundaryMap(4, 4)), UsageError);
}

TEST_CASE("background edge crossing the animal is cut inside the mask") {
    BoundaryMap background(12, 12), animal(12, 12);
    for (std::size_t x = 0; x < 12; ++x) background.at(x, 6) = 0.8;  // horizon line
    BinaryMask mask(12, 12);
    for (std::size_t y = 3; y < 9; ++y) {
        for (std::size_t x = 4; x < 8; ++x) mask.set(x, y, true);
    }
    for (std::size_t y = 3; y < 9; ++y) animal.at(4, y) = animal.at(7, y) = 1.0;  // silhouette sides
    const auto merged = merge_boundaries(animal, mask, background);
    CHECK(merged.at(0, 6) == 0.8);
    CHECK(merged.at(11, 6) == 0.8);
    CHECK(merged.at(5, 6) == 0.0);
    CHECK(merged.at(4, 6) == 1.0);
}

TEST_CASE("boundary PNG round trip within one quantization step") {
    const auto dir = scratch_dir("png");
    std::mt19937_64 rng(1);
    const auto map = random_map(rng, 23, 17);
    write_png(dir / "m.png", map);
    const auto back = read_boundary_png(dir / "m.png");
    REQUIRE(back.same_size(23, 17));
    for (std::size_t i = 0; i < map.values.size(); ++i) CHECK(std::abs(back.values[i] - map.values[i]) <= 0.5 / 255.0 + 1e-12);
}

TEST_CASE("job export") {
    const auto dir = scratch_dir("export");
    PromptVocabulary vocab;

    SUBCASE("no entries") {
        const auto m = export_jobs({}, vocab, 3, dir);
        CHECK(m.entries.empty());
        const auto back = load_manifest(dir / "manifest.json");
        CHECK(back == m);
        CHECK_NOTHROW(validate_manifest(back, dir));
    }
    SUBCASE("two entries with master seed 7") {
        std::mt19937_64 rng(2);
        std::vector<ExportItem> items = {{random_map(rng, 8, 8), "annotations.json#1"},
                                         {random_map(rng, 8, 8), "annotations.json#2"}};
        const auto m = export_jobs(items, vocab, 7, dir);
        REQUIRE(m.entries.size() == 2);
        CHECK(m.entries[0].sampler_seed != m.entries[1].sampler_seed);
        CHECK(m.entries[0].sampler_seed == job_seed(7, 0));
        CHECK(m.entries[0].job_id == "job_000001");
        CHECK(m.entries[1].annotation_ref == "annotations.json#2");
        CHECK(m.entries[0].prompt_text.find("zebra") != std::string::npos);
        const auto first = read_json_file(dir / "manifest.json").dump();

        const auto again_dir = scratch_dir("export_again");
        const auto again = export_jobs(items, vocab, 7, again_dir);
        CHECK(again == m);
        CHECK(read_json_file(again_dir / "manifest.json").dump() == first);

        const auto back = load_manifest(dir / "manifest.json");
        CHECK(back == m);
        CHECK_NOTHROW(validate_manifest(back, dir));

        auto dup = back;
        dup.entries[1].job_id = dup.entries[0].job_id;
        CHECK_THROWS_AS(validate_manifest(dup, dir), ParseError);
        fs::remove(dir / back.entries[1].conditioning_map_path);
        try {
            validate_manifest(back, dir);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("job_000002") != std::string::npos);
        }
    }
    SUBCASE("unwritable target") {
        std::ofstream(dir / "plain_file") << "x";
        CHECK_THROWS_AS(export_jobs({}, vocab, 1, dir / "plain_file" / "sub"), IoError);
    }
}

TEST_CASE("manifest parse errors name the field") {
    JobManifest m;
    m.master_seed = 5;
    m.entries.push_back({"job_000001", "conditioning/job_000001.png", "p", "n", 42, "generated/job_000001.png", "a#1"});
    auto doc = to_json(m);
    CHECK(manifest_from_json(doc) == m);
    doc["entries"][0]["sampler_seed"] = -1;
    try {
        manifest_from_json(doc, "m.json");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()) == "m.json.entries[0].sampler_seed: expected an unsigned 32-bit integer");
    }
    doc = to_json(m);
    doc["entries"][0].erase("prompt_text");
    CHECK_THROWS_AS(manifest_from_json(doc), ParseError);
    doc = to_json(m);
    doc["version"] = 2;
    CHECK_THROWS_AS(manifest_from_json(doc), ParseError);
}

TEST_CASE("prompts are deterministic in the seed") {
    PromptVocabulary vocab;
    CHECK(make_prompt(vocab, 9) == make_prompt(vocab, 9));
    std::set<std::string> seen;
    for (std::uint64_t s = 0; s < 64; ++s) seen.insert(make_prompt(vocab, s));
    CHECK(seen.size() > 5);
    vocab.weather.clear();
    CHECK_THROWS_AS(make_prompt(vocab, 1), UsageError);
}
