#include <fstream>
#include <numeric>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/pipeline.hpp"
#include "cellpheno/synth.hpp"

using namespace cellpheno;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec() {
    SynthSpec s;
    s.width = 500;
    s.height = 400;
    s.count_min = 4;
    s.count_max = 6;
    s.min_separation = 60;
    return s;
}

PipelineConfig config_in(const testutil::TempDir& dir, const std::string& out = "out") {
    if (!fs::exists(dir / "m.cnn")) TinyCnn(CnnConfig{}, 1).save(dir / "m.cnn");
    PipelineConfig cfg;
    cfg.classifiers = {dir / "m.cnn"};
    cfg.output_dir = dir / out;
    cfg.seed = 3;
    return cfg;
}

std::vector<TileInput> synth_inputs(std::size_t n, std::uint64_t seed) {
    std::vector<TileInput> inputs;
    for (std::size_t i = 0; i < n; ++i) {
        const auto tile = generate_tile(small_spec(), derive_seed(seed, i));
        TileInput in;
        in.id = "tile_" + std::to_string(i);
        in.load = [img = tile.image] { return img; };
        TileGroundTruth gt;
        gt.boxes = tile.gt_boxes;
        for (auto l : tile.gt_labels) gt.labels.push_back(l);
        in.ground_truth = gt;
        inputs.push_back(std::move(in));
    }
    return inputs;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("blank tile gives an empty report and an unchanged overlay") {
    testutil::TempDir dir("pipe_blank");
    const Pipeline p(config_in(dir));
    const Image blank(300, 200, {240, 230, 235});
    const auto r = p.run_tile(blank, "blank");
    CHECK(r.report.cells.empty());
    for (auto c : r.report.counts) CHECK(c == 0);
    for (auto v : r.report.percentages) CHECK(v == 0.0);
    CHECK(r.overlay == blank);
}

TEST_CASE("percentage formatting follows the report convention") {
    TileReport r;
    r.counts = {40, 20, 6, 20, 14};
    r.percentages = population_percentages(r.counts);
    CHECK(format_percentage(r.percentages[index_of(CellType::HOF)]) == "6%");
    CHECK(population_summary(r).find("HOF: 6%") != std::string::npos);
    CHECK(format_percentage(6.5) == "6.5%");
    CHECK(std::accumulate(r.percentages.begin(), r.percentages.end(), 0.0) == doctest::Approx(100.0));
}

TEST_CASE("tile reports are internally consistent") {
    testutil::TempDir dir("pipe_tile");
    const Pipeline p(config_in(dir));
    const auto inputs = synth_inputs(1, 5);
    const auto r = p.run_tile(inputs[0].load(), "t", {}, 9, inputs[0].ground_truth).report;
    REQUIRE_FALSE(r.cells.empty());
    std::array<long long, kNumClasses> counts{};
    for (const auto& c : r.cells) {
        ++counts[index_of(c.label)];
        CHECK(c.confidence >= 0.0);
        CHECK(c.confidence <= 1.0);
    }
    CHECK(counts == r.counts);
    CHECK(std::accumulate(r.percentages.begin(), r.percentages.end(), 0.0) == doctest::Approx(100.0).epsilon(0.001));
    for (int k = 0; k < kNumClasses; ++k)
        CHECK(std::abs(r.percentages[k] - 100.0 * counts[k] / double(r.cells.size())) < 0.1);
    REQUIRE(r.evaluation.has_value());
    CHECK(r.evaluation->gt_count == inputs[0].ground_truth->boxes.size());
    CHECK(r.evaluation->matched == r.evaluation->gt_count);

    const auto back = tile_report_from_json(to_json(r));
    CHECK(to_json(back) == to_json(r));
}

TEST_CASE("edge detections are flagged") {
    testutil::TempDir dir("pipe_edge");
    auto cfg = config_in(dir);
    cfg.detector = DetectorKind::Replay;
    cfg.replay_detections = dir / "dets";
    fs::create_directories(cfg.replay_detections);
    write_json(detections_to_json({{BBox{0, 0, 20, 20}, 0.9}, {BBox{140, 90, 160, 110}, 0.8}}),
               cfg.replay_detections / "t.json");
    const Pipeline p(cfg);
    const auto r = p.run_tile(Image(300, 200, {200, 200, 200}), "t").report;
    REQUIRE(r.cells.size() == 2);
    CHECK(r.cells[0].edge);
    CHECK_FALSE(r.cells[1].edge);
    CHECK(r.edge_count == 1);
}

TEST_CASE("configuration errors surface before any tile is processed") {
    testutil::TempDir dir("pipe_cfg");
    auto cfg = config_in(dir);
    cfg.classifiers = {dir / "absent.cnn"};
    CHECK_THROWS(Pipeline(cfg));
    cfg.classifiers.clear();
    CHECK_THROWS(Pipeline(cfg));
    cfg = config_in(dir);
    cfg.dog.sigma_small = 9;
    CHECK_THROWS(Pipeline(cfg));
}

TEST_CASE("pipeline config json round trip") {
    testutil::TempDir dir("pipe_json");
    auto cfg = config_in(dir);
    cfg.patch_side = 150;
    cfg.dog.threshold = 0.2;
    const auto back = pipeline_config_from_json(to_json(cfg));
    CHECK(to_json(back) == to_json(cfg));
    const auto repro = to_json(cfg, true);
    CHECK_FALSE(repro.contains("output_dir"));
    CHECK_FALSE(repro.contains("jobs"));
    CHECK_THROWS(pipeline_config_from_json(nlohmann::json::parse(R"({"detector": "retinanet"})")));
}

TEST_CASE("aggregate equals the sum of tile reports") {
    testutil::TempDir dir("pipe_agg");
    const Pipeline p(config_in(dir));
    const auto m = p.run_dataset(synth_inputs(4, 6));
    CHECK(m.failed == 0);
    std::array<long long, kNumClasses> sum{};
    long long total = 0;
    for (const auto& t : m.tiles) {
        const auto r = tile_report_from_json(read_json(dir / "out" / t.report_path));
        for (int k = 0; k < kNumClasses; ++k) sum[k] += r.counts[k];
        total += static_cast<long long>(r.cells.size());
        CHECK(fs::exists(dir / "out" / t.overlay_path));
    }
    CHECK(sum == m.counts);
    CHECK(total == m.total);
    CHECK(m.pooled_ap.has_value());
    CHECK(fs::exists(dir / "out" / "manifest.json"));
}

TEST_CASE("single tile aggregate equals its report") {
    testutil::TempDir dir("pipe_one");
    const Pipeline p(config_in(dir));
    const auto m = p.run_dataset(synth_inputs(1, 7));
    const auto r = tile_report_from_json(read_json(dir / "out" / m.tiles[0].report_path));
    CHECK(m.counts == r.counts);
    CHECK(m.percentages == r.percentages);
    CHECK(m.total == static_cast<long long>(r.cells.size()));
    CHECK(m.edge_count == r.edge_count);
}

TEST_CASE("outputs do not depend on the number of jobs") {
    testutil::TempDir dir("pipe_jobs");
    auto c1 = config_in(dir, "j1");
    auto c8 = config_in(dir, "j8");
    c8.jobs = 8;
    const auto inputs = synth_inputs(6, 8);
    const auto m1 = Pipeline(c1).run_dataset(inputs);
    const auto m8 = Pipeline(c8).run_dataset(inputs);
    CHECK(reproducible_view(read_json(dir / "j1" / "manifest.json")) ==
          reproducible_view(read_json(dir / "j8" / "manifest.json")));
    for (const auto& t : m1.tiles) {
        CHECK(slurp(dir / "j1" / t.report_path) == slurp(dir / "j8" / t.report_path));
        CHECK(slurp(dir / "j1" / t.overlay_path) == slurp(dir / "j8" / t.overlay_path));
    }
    CHECK(read_json(dir / "j8" / "manifest.json").at("runtime").at("jobs") == 8);
    CHECK(m8.total == m1.total);
}

TEST_CASE("a failing tile is recorded and the run continues") {
    testutil::TempDir dir("pipe_fail");
    const Pipeline p(config_in(dir));
    auto inputs = synth_inputs(3, 9);
    inputs[1].load = []() -> Image { throw std::runtime_error("corrupt image"); };
    const auto m = p.run_dataset(inputs);
    CHECK(m.failed == 1);
    CHECK_FALSE(m.tiles[1].ok);
    CHECK(m.tiles[1].error.find("corrupt") != std::string::npos);
    CHECK(m.tiles[0].ok);
    CHECK(m.tiles[2].ok);
    CHECK_THROWS(p.run_dataset({}));
}

TEST_CASE("tile seeds are distinct") {
    CHECK(tile_seed(1, 0) != tile_seed(1, 1));
    CHECK(tile_seed(1, 0) != tile_seed(2, 0));
    CHECK(tile_seed(5, 3) == tile_seed(5, 3));
}

TEST_CASE("overlay draws class colours") {
    const Image tile(60, 60, {255, 255, 255});
    CellCall c;
    c.detection = {BBox{10, 10, 30, 30}, 0.9};
    c.label = CellType::HOF;
    const auto o = draw_overlay(tile, {c});
    CHECK(o.rgb(10, 20) == kOverlayPalette[index_of(CellType::HOF)]);
    CHECK(o.rgb(20, 20) == Rgb{255, 255, 255});
}
