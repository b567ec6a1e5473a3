#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "quadprior/error.hpp"
#include "quadprior/eval.hpp"
#include "quadprior/parallel.hpp"

using namespace quadprior;
using namespace quadprior::eval;
using kinematics::KeypointAnnotation;

namespace {

std::vector<EvalPair> random_pairs(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(20.0, 200.0), noise(-12.0, 12.0), size(40.0, 160.0);
    std::uniform_int_distribution<int> vis(0, 2);
    std::vector<EvalPair> pairs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& p = pairs[i];
        p.image_id = static_cast<std::int64_t>(i + 1);
        p.gt.id = p.image_id;
        p.gt.image_id = p.image_id;
        p.gt.bbox = {10.0, 10.0, size(rng), size(rng)};
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            auto& g = p.gt.keypoints[k];
            g.visibility = vis(rng);
            if (g.visibility > 0) g = {pos(rng), pos(rng), g.visibility};
            p.pred[k] = {g.x + noise(rng), g.y + noise(rng), 0.9};
        }
        p.gt.keypoints[3].visibility = 2;
        p.gt.keypoints[4] = {p.gt.keypoints[3].x + 30.0, p.gt.keypoints[3].y + 40.0, 2};
    }
    return pairs;
}

// Straight-line recount, one keypoint at a time.
struct OracleCount {
    std::array<std::uint64_t, kKeypointCount> correct{}, counted{};
};

OracleCount oracle(const std::vector<EvalPair>& pairs, const PckOptions& o) {
    OracleCount out;
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        for (const auto& p : pairs) {
            double norm = 0.0;
            if (o.normalizer == Normalizer::BboxMax) norm = std::max(p.gt.bbox.width, p.gt.bbox.height);
            if (o.normalizer == Normalizer::BboxDiagonal) norm = std::hypot(p.gt.bbox.width, p.gt.bbox.height);
            if (o.normalizer == Normalizer::TorsoLength)
                norm = std::hypot(p.gt.keypoints[3].x - p.gt.keypoints[4].x, p.gt.keypoints[3].y - p.gt.keypoints[4].y);
            const auto& g = p.gt.keypoints[k];
            if (g.visibility == 0 || (g.visibility == 1 && !o.count_occluded)) continue;
            ++out.counted[k];
            if (std::hypot(p.pred[k].x - g.x, p.pred[k].y - g.y) <= o.alpha * norm) ++out.correct[k];
        }
    }
    return out;
}

// Ground truth and predictions as the on-disk documents.
std::pair<nlohmann::json, nlohmann::json> as_documents(const std::vector<EvalPair>& pairs) {
    kinematics::CocoDataset data;
    for (const auto& p : pairs) {
        data.images.push_back({p.image_id, "img_" + std::to_string(p.image_id) + ".png", 512, 512});
        data.annotations.push_back(p.gt);
    }
    return {kinematics::to_json(data), predictions_to_json(pairs)};
}

}  // namespace

TEST_CASE("pck matches a brute-force recount for every normalizer") {
    const auto pairs = random_pairs(100, 11);
    for (const auto norm : {Normalizer::BboxMax, Normalizer::BboxDiagonal, Normalizer::TorsoLength}) {
        for (const bool occl : {true, false}) {
            for (const double alpha : {0.02, 0.05, 0.1, 0.2}) {
                const PckOptions o{alpha, norm, occl};
                const auto r = pck(pairs, o);
                const auto want = oracle(pairs, o);
                std::uint64_t c = 0, n = 0;
                for (std::size_t k = 0; k < kKeypointCount; ++k) {
                    CHECK(r.correct[k] == want.correct[k]);
                    CHECK(r.counted[k] == want.counted[k]);
                    c += want.correct[k];
                    n += want.counted[k];
                }
                CHECK(r.mean == static_cast<double>(c) / static_cast<double>(n));
            }
        }
    }
}

TEST_CASE("pck result does not depend on the thread count") {
    const auto pairs = random_pairs(300, 5);
    set_thread_count(1);
    const auto a = pck(pairs);
    set_thread_count(4);
    const auto b = pck(pairs);
    set_thread_count(0);
    CHECK(a.correct == b.correct);
    CHECK(a.counted == b.counted);
}

TEST_CASE("pck is invariant to joint translation and scaling") {
    // Dyadic coordinates keep every shifted and scaled value exact.
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> q(0, 1024);
    auto pairs = random_pairs(100, 2);
    for (auto& p : pairs) {
        p.gt.bbox = {q(rng) / 8.0, q(rng) / 8.0, 64.0 + q(rng) / 8.0, 64.0 + q(rng) / 8.0};
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            auto& g = p.gt.keypoints[k];
            if (g.visibility > 0) g.x = q(rng) / 4.0, g.y = q(rng) / 4.0;
            p.pred[k].x = g.x + (q(rng) - 512) / 64.0;
            p.pred[k].y = g.y + (q(rng) - 512) / 64.0;
        }
    }
    const auto base = pck(pairs, {0.05});

    auto shifted = pairs;
    for (auto& p : shifted) {
        p.gt.bbox.x += 96.0;
        p.gt.bbox.y -= 32.0;
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            p.gt.keypoints[k].x += 96.0, p.gt.keypoints[k].y -= 32.0;
            p.pred[k].x += 96.0, p.pred[k].y -= 32.0;
        }
    }
    auto scaled = pairs;
    for (auto& p : scaled) {
        p.gt.bbox = {p.gt.bbox.x * 4, p.gt.bbox.y * 4, p.gt.bbox.width * 4, p.gt.bbox.height * 4};
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            p.gt.keypoints[k].x *= 4, p.gt.keypoints[k].y *= 4;
            p.pred[k].x *= 4, p.pred[k].y *= 4;
        }
    }
    for (const auto* variant : {&shifted, &scaled}) {
        const auto r = pck(*variant, {0.05});
        CHECK(r.correct == base.correct);
        CHECK(r.counted == base.counted);
    }
}

TEST_CASE("pck is monotone in alpha") {
    const auto pairs = random_pairs(100, 9);
    double prev = -1.0;
    for (double alpha = 0.01; alpha <= 0.5; alpha += 0.01) {
        const auto r = pck(pairs, {alpha});
        CHECK(r.mean >= prev);
        prev = r.mean;
    }
    CHECK(pck(pairs, {100.0}).mean == 1.0);
}

TEST_CASE("a prediction exactly at the threshold is correct") {
    EvalPair p;
    p.image_id = 1;
    p.gt.bbox = {0, 0, 100, 50};
    p.gt.keypoints[0] = {10, 10, 2};
    p.pred[0] = {13, 14, 1};  // distance 5 = 0.05 * 100
    const std::vector<EvalPair> pairs{p};
    auto r = pck(pairs, {0.05});
    CHECK(r.correct[0] == 1);
    CHECK(r.counted[0] == 1);
    p.pred[0] = {13, 14.0001, 1};
    r = pck(std::vector<EvalPair>{p}, {0.05});
    CHECK(r.correct[0] == 0);
}

TEST_CASE("pck rejects bad input") {
    const auto pairs = random_pairs(3, 1);
    CHECK_THROWS_AS(pck(pairs, {0.0}), UsageError);
    CHECK_THROWS_AS(pck(pairs, {-0.1}), UsageError);
    CHECK_THROWS_AS(pck(std::vector<EvalPair>{}, {}), UsageError);
    EvalPair unlabeled;
    unlabeled.gt.bbox = {0, 0, 10, 10};
    CHECK_THROWS_AS(pck(std::vector<EvalPair>{unlabeled}, {}), UsageError);
    // Occluded-only ground truth is nothing to count once occluded points are excluded.
    unlabeled.gt.keypoints[5] = {3, 3, 1};
    CHECK(pck(std::vector<EvalPair>{unlabeled}, {0.05}).counted[5] == 1);
    CHECK_THROWS_AS(pck(std::vector<EvalPair>{unlabeled}, {0.05, Normalizer::BboxMax, false}), UsageError);
}

TEST_CASE("dataset join round-trips and names bad ids") {
    const auto pairs = random_pairs(20, 4);
    auto [gt, pred] = as_documents(pairs);
    const auto back = pairs_from_json(gt, pred);
    REQUIRE(back.size() == pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        CHECK(back[i].image_id == pairs[i].image_id);
        for (std::size_t k = 0; k < kKeypointCount; ++k) {
            CHECK(back[i].pred[k].x == pairs[i].pred[k].x);
            CHECK(back[i].gt.keypoints[k].visibility == pairs[i].gt.keypoints[k].visibility);
        }
    }
    CHECK(pck(back).correct == pck(pairs).correct);

    CHECK(pairs_from_json(nullptr, nullptr).empty());
    CHECK(pairs_from_json(nlohmann::json::parse(R"({"images":[],"annotations":[]})"), nlohmann::json::array()).empty());

    auto unknown = pred;
    unknown[0]["image_id"] = 999;
    try {
        pairs_from_json(gt, unknown);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("999") != std::string::npos);
    }
    auto missing = pred;
    missing.erase(missing.begin() + 3);
    CHECK_THROWS_WITH_AS(pairs_from_json(gt, missing), doctest::Contains("no prediction for image_id 4"), ParseError);
    auto twice = pred;
    twice.push_back(pred[0]);
    CHECK_THROWS_WITH_AS(pairs_from_json(gt, twice), doctest::Contains("predicted twice"), ParseError);
    auto short_kps = pred;
    short_kps[1]["keypoints"].erase(0);
    CHECK_THROWS_WITH_AS(pairs_from_json(gt, short_kps), doctest::Contains("pred[1].keypoints"), ParseError);
    CHECK_THROWS_AS(pairs_from_json(gt, nlohmann::json::object()), ParseError);
}

TEST_CASE("load_dataset reads files and treats empty files as empty") {
    const auto dir = std::filesystem::temp_directory_path() / "quadprior_eval_test";
    std::filesystem::create_directories(dir);
    const auto pairs = random_pairs(5, 8);
    const auto [gt, pred] = as_documents(pairs);
    std::ofstream(dir / "gt.json") << gt.dump();
    std::ofstream(dir / "pred.json") << pred.dump();
    std::ofstream(dir / "empty_gt.json");
    std::ofstream(dir / "empty_pred.json");
    CHECK(load_dataset(dir / "gt.json", dir / "pred.json").size() == 5);
    CHECK(load_dataset(dir / "empty_gt.json", dir / "empty_pred.json").empty());
    CHECK_THROWS_WITH_AS(load_dataset(dir / "gt.json", dir / "empty_pred.json"),
                         doctest::Contains("no prediction for image_id 1"), ParseError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("report formats") {
    EvalPair a, b;
    a.image_id = 1;
    b.image_id = 2;
    a.gt.bbox = b.gt.bbox = {0, 0, 100, 100};
    a.gt.keypoints[0] = {10, 10, 2};
    a.pred[0] = {10, 12, 1};  // correct
    b.gt.keypoints[0] = {50, 50, 2};
    b.pred[0] = {60, 50, 1};  // wrong
    a.gt.keypoints[1] = {20, 20, 1};
    a.pred[1] = {20, 20, 1};  // correct
    b.gt.keypoints[1] = {30, 30, 2};
    b.pred[1] = {31, 30, 1};  // correct
    b.gt.keypoints[2] = {40, 40, 2};
    b.pred[2] = {40, 40, 1};  // correct
    const auto r = pck(std::vector<EvalPair>{a, b}, {0.05});

    const std::string text = report(r, ReportFormat::Text);
    std::string expected =
        "PCK@0.05  normalizer: bbox-max  counted: visibility 1 and 2\n"
        "keypoint          pck(%)   counted\n"
        "left_eye            50.0         2\n"
        "right_eye          100.0         2\n"
        "nose               100.0         1\n";
    CHECK(text.substr(0, expected.size()) == expected);
    CHECK(text.find("neck                 n/a         0\n") != std::string::npos);
    CHECK(text.ends_with("mean                80.0         5\n"));

    const std::string csv = report(r, ReportFormat::Csv);
    CHECK(csv.starts_with("keypoint,pck,correct,counted\nleft_eye,0.5,1,2\nright_eye,1,2,2\nnose,1,1,1\nneck,,0,0\n"));
    CHECK(csv.ends_with("mean,0.80000000000000004,4,5\n"));
    // Reparsing the CSV gives back the exact doubles.
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    for (std::size_t k = 0; k < kKeypointCount; ++k) {
        std::getline(lines, line);
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        const std::string field = line.substr(c1 + 1, c2 - c1 - 1);
        if (r.counted[k] == 0) {
            CHECK(field.empty());
        } else {
            CHECK(std::stod(field) == r.per_keypoint[k]);
        }
    }

    const auto j = nlohmann::json::parse(report(r, ReportFormat::Json));
    CHECK(j["alpha"] == 0.05);
    CHECK(j["normalizer"] == "bbox-max");
    CHECK(j["per_keypoint"][0]["pck"] == 0.5);
    CHECK(j["per_keypoint"][3]["pck"].is_null());
    CHECK(j["mean"]["counted"] == 5);

    const auto visible_only = pck(std::vector<EvalPair>{a, b}, {0.05, Normalizer::BboxMax, false});
    CHECK(report(visible_only, ReportFormat::Text).starts_with("PCK@0.05  normalizer: bbox-max  counted: visibility 2 only\n"));
    CHECK(visible_only.counted[1] == 1);
}

TEST_CASE("option names parse") {
    CHECK(parse_normalizer("torso-length") == Normalizer::TorsoLength);
    CHECK(normalizer_name(parse_normalizer("bbox-diagonal")) == "bbox-diagonal");
    CHECK(parse_format("csv") == ReportFormat::Csv);
    CHECK_THROWS_AS(parse_normalizer("bbox"), UsageError);
    CHECK_THROWS_AS(parse_format("xml"), UsageError);
}
