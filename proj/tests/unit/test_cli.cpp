#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "quadprior/boundary.hpp"
#include "quadprior/eval.hpp"
#include "quadprior/image.hpp"
#include "quadprior/json_file.hpp"
#include "quadprior/kinematics.hpp"

using namespace quadprior;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    args.insert(args.begin(), "quadprior");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "quadprior_cli_test" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string fmt_job(int k) {
    char name[32];
    std::snprintf(name, sizeof name, "job_%06d.png", k);
    return name;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::string kData = QUADPRIOR_DATA_DIR;

// A one-image ground truth and a prediction 6 px off on the left eye.
void write_eval_fixture(const fs::path& dir) {
    kinematics::CocoDataset gt;
    gt.images.push_back({1, "a.png", 200, 200});
    kinematics::KeypointAnnotation ann;
    ann.id = 1;
    ann.image_id = 1;
    ann.bbox = {0, 0, 100, 80};
    ann.keypoints[0] = {50, 50, 2};
    ann.keypoints[1] = {60, 50, 2};
    gt.annotations.push_back(ann);
    write_json_file(dir / "gt.json", kinematics::to_json(gt));
    eval::EvalPair pair;
    pair.image_id = 1;
    pair.gt = ann;
    pair.pred[0] = {56, 50, 1};
    pair.pred[1] = {60, 51, 1};
    write_json_file(dir / "pred.json", eval::predictions_to_json(std::vector<eval::EvalPair>{pair}));
}

}  // namespace

TEST_CASE("usage errors exit 2 with one line") {
    for (const auto& args : std::vector<std::vector<std::string>>{{"frobnicate"}, {}, {"eval-pck", "--bogus", "1"}}) {
        const auto r = invoke(args);
        CHECK(r.code == 2);
        CHECK(line_count(r.err) == 1);
        CHECK(r.err.starts_with("quadprior "));
    }
    CHECK(invoke({"--help"}).code == 0);
    CHECK(invoke({"pipeline", "--help"}).code == 0);
}

TEST_CASE("config keys are checked all at once") {
    const auto dir = scratch("config");
    std::ofstream(dir / "bad.json") << R"({"alpah": 0.1, "master_sed": 3, "alpha": "high", "gt": "missing_gt.json"})";
    const auto r = invoke({"--config", (dir / "bad.json").string(), "eval-pck", "--pred", (dir / "nope.json").string()});
    CHECK(r.code == 2);
    CHECK(line_count(r.err) == 1);
    for (const char* needle : {"'alpah'", "'master_sed'", "'alpha' must be a number", "missing_gt.json", "nope.json"})
        CHECK_MESSAGE(r.err.find(needle) != std::string::npos, needle);

    std::ofstream(dir / "syntax.json") << "{";
    CHECK(invoke({"--config", (dir / "syntax.json").string(), "eval-pck"}).code == 2);
    const auto missing = invoke({"tsne"});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("master_seed is required") != std::string::npos);
    CHECK(missing.err.find("features is required") != std::string::npos);
    CHECK(invoke({"pipeline", "--seed", "x1"}).err.find("--master-seed must be a non-negative integer") != std::string::npos);
}

TEST_CASE("flags override the config file and defaults fill the rest") {
    const auto dir = scratch("precedence");
    write_eval_fixture(dir);
    std::ofstream(dir / "cfg.json") << R"({"gt": "gt.json", "pred": "pred.json", "alpha": 0.05})";
    const auto cfg = (dir / "cfg.json").string();

    const auto base = invoke({"--config", cfg, "eval-pck"});
    REQUIRE(base.code == 0);
    CHECK(base.out.starts_with("PCK@0.05  normalizer: bbox-max  counted: visibility 1 and 2\n"));
    CHECK(base.out.find("left_eye             0.0") != std::string::npos);

    const auto over = invoke({"--config", cfg, "eval-pck", "--alpha", "0.1", "--format", "csv"});
    REQUIRE(over.code == 0);
    CHECK(over.out.find("left_eye,1,1,1") != std::string::npos);

    const auto out = invoke({"--config", cfg, "eval-pck", "--format", "json", "--out", (dir / "r" / "pck.json").string()});
    REQUIRE(out.code == 0);
    CHECK(out.out == "wrote " + (dir / "r" / "pck.json").string() + "\nwrote " +
                         (dir / "r" / "pck.summary.json").string() + "\n");
    CHECK(read_json_file(dir / "r" / "pck.json")["alpha"] == 0.05);

    std::ofstream(dir / "pred_bad.json") << R"([{"image_id": 5, "keypoints": []}])";
    const auto bad = invoke({"--config", cfg, "eval-pck", "--pred", (dir / "pred_bad.json").string()});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("error[parse]") != std::string::npos);
    CHECK(invoke({"--config", cfg, "eval-pck", "--normalizer", "head"}).code == 2);
}

TEST_CASE("pipeline smoke run is complete and reproducible") {
    const auto dir = scratch("pipeline");
    const std::vector<std::string> args = {"--config", kData + "/pipeline.json", "--log-level", "warn", "pipeline",
                                           "--epochs", "30", "--train-count", "300"};
    auto first = args;
    first.insert(first.end(), {"--out-dir", (dir / "a").string()});
    auto second = args;
    second.insert(second.end(), {"--out-dir", (dir / "b").string()});
    const auto a = invoke(first);
    REQUIRE_MESSAGE(a.code == 0, a.err);
    const auto b = invoke(second);
    REQUIRE(b.code == 0);

    std::istringstream lines(a.out);
    std::string line;
    std::size_t printed = 0;
    while (std::getline(lines, line)) {
        REQUIRE(line.starts_with("wrote "));
        CHECK(fs::exists(line.substr(6)));
        ++printed;
    }
    CHECK(printed > 10);

    const auto ann = read_json_file(dir / "a" / "annotations.json");
    kinematics::validate_coco(ann);
    CHECK(ann["annotations"].size() == 10);
    std::size_t pngs = 0;
    for (const auto& e : fs::directory_iterator(dir / "a" / "conditioning")) pngs += e.path().extension() == ".png";
    CHECK(pngs == 10);
    const auto manifest = boundary::load_manifest(dir / "a" / "manifest.json");
    CHECK(manifest.entries.size() == 10);
    CHECK_NOTHROW(boundary::validate_manifest(manifest, dir / "a"));
    CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
    CHECK(slurp(dir / "a" / "poses.json") == slurp(dir / "b" / "poses.json"));
    CHECK(slurp(dir / "a" / "conditioning" / "job_000004.png") == slurp(dir / "b" / "conditioning" / "job_000004.png"));
    const auto summary = read_json_file(dir / "a" / "summary.json");
    CHECK(summary["stages"]["export"]["jobs"] == 10);

    {
        // Stages rerun alone reproduce the pipeline's outputs.
        const auto seed = std::to_string(read_json_file(kData + "/pipeline.json")["master_seed"].get<int>());
        const auto s = invoke({"--log-level", "warn", "sample-poses", "--model", (dir / "a" / "model.json").string(),
                            "--count", "10", "--seed", seed, "--out", (dir / "c" / "poses.json").string()});
        REQUIRE(s.code == 0);
        CHECK(slurp(dir / "c" / "poses.json") == slurp(dir / "a" / "poses.json"));
        CHECK(read_json_file(dir / "c" / "poses.report.json")["accepted"] == 10);

        const auto g = invoke({"gen-annotations", "--rig", kData + "/quadruped_rig.json", "--camera", kData + "/camera.json",
                            "--poses", (dir / "c" / "poses.json").string(), "--out",
                            (dir / "c" / "annotations.json").string()});
        REQUIRE(g.code == 0);
        CHECK(slurp(dir / "c" / "annotations.json") == slurp(dir / "a" / "annotations.json"));

        std::vector<std::string> exp = {"export-jobs", "--seed", seed, "--annotations",
                                        (dir / "c" / "annotations.json").string(), "--out-dir", (dir / "c").string(),
                                        "--maps"};
        for (int k = 1; k <= 10; ++k) exp.push_back((dir / "a" / "conditioning" / fmt_job(k)).string());
        const auto e = invoke(exp);
        REQUIRE_MESSAGE(e.code == 0, e.err);
        CHECK(slurp(dir / "c" / "manifest.json") == slurp(dir / "a" / "manifest.json"));
    }
}

TEST_CASE("merge-boundaries from precomputed edges") {
    const auto dir = scratch("merge");
    BoundaryMap animal(8, 6, 0.0), background(8, 6, 0.0);
    BinaryMask mask(8, 6, false);
    for (std::size_t x = 0; x < 8; ++x) background.at(x, 3) = 200.0 / 255.0;
    mask.set(4, 3, true);
    animal.at(4, 3) = 100.0 / 255.0;
    animal.at(0, 3) = 50.0 / 255.0;
    write_png(dir / "a.png", animal);
    write_png(dir / "b.png", background);
    write_png(dir / "m.png", mask);
    const auto r = invoke({"merge-boundaries", "--animal-edges", (dir / "a.png").string(), "--background-edges",
                        (dir / "b.png").string(), "--mask", (dir / "m.png").string(), "--dilation", "1", "--out",
                        (dir / "merged.png").string(), "--mask-out", (dir / "dilated.png").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const auto merged = read_boundary_png(dir / "merged.png");
    CHECK(merged.at(4, 3) == doctest::Approx(100.0 / 255.0));  // animal wins inside the mask
    CHECK(merged.at(3, 3) == 0.0);                              // dilated mask suppresses background
    CHECK(merged.at(0, 3) == doctest::Approx(200.0 / 255.0));   // max outside
    CHECK(read_mask_png(dir / "dilated.png").count() == 5);
    CHECK(read_json_file(dir / "merged.summary.json")["mask_pixels"] == 5);

    const auto missing = invoke({"merge-boundaries", "--animal-edges", (dir / "a.png").string(), "--out",
                              (dir / "x.png").string()});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("background edges") != std::string::npos);
    CHECK(missing.err.find("a mask") != std::string::npos);
}

TEST_CASE("tsne subcommand writes the embedding and its summary") {
    const auto dir = scratch("tsne");
    std::ofstream csv(dir / "f.csv");
    csv << "domain,a,b,c\n";
    for (int i = 0; i < 20; ++i) csv << (i < 10 ? "real" : "synthetic") << "," << (i < 10 ? 0 : 20) + i % 3 << ","
                                     << (i * 7) % 5 << "," << (i * 3) % 4 << "\n";
    csv.close();
    const auto r = invoke({"tsne", "--features", (dir / "f.csv").string(), "--perplexity", "5",
                        "--seed", "3", "--out", (dir / "emb.csv").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(line_count(slurp(dir / "emb.csv")) == 21);
    const auto summary = read_json_file(dir / "emb.summary.json");
    CHECK(summary["points"] == 20);
    CHECK(summary["silhouette"].get<double>() > 0.5);
    CHECK(summary["kl_history"].back()["iteration"] == 1000);
}
