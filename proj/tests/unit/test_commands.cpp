#include <fstream>
#include <sstream>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/commands.hpp"
#include "cellpheno/embed.hpp"
#include "cellpheno/via.hpp"

using namespace cellpheno;
namespace fs = std::filesystem;

namespace {

GlobalOptions globals(const testutil::TempDir& dir, const std::string& out) {
    GlobalOptions g;
    g.seed = 4;
    g.config = dir / "config.json";
    g.out = dir / out;
    return g;
}

void write_config(const testutil::TempDir& dir) {
    SynthSpec s;
    s.width = 500;
    s.height = 400;
    s.count_min = 5;
    s.count_max = 7;
    s.min_separation = 60;
    nlohmann::json cfg;
    cfg["synth"] = to_json(s);
    cfg["train"] = {{"epochs", 1}, {"batch_size", 16}};
    cfg["tsne"] = {{"iterations", 100}};
    write_json(cfg, dir / "config.json");
}

}  // namespace

TEST_CASE("command chain on a small synthetic dataset") {
    testutil::TempDir dir("cmd");
    write_config(dir);
    std::ostringstream log;

    SynthOptions so;
    so.tiles = 10;
    REQUIRE(cmd_synth(globals(dir, "data"), so, log) == 0);
    const auto idx = load_dataset_index(dir / "data");
    CHECK(idx.tiles.size() == 10);
    CHECK(fs::exists(idx.tiles[0].image));

    DetectOptions dopt;
    dopt.input = dir / "data";
    REQUIRE(cmd_detect(globals(dir, "det"), dopt, log) == 0);
    CHECK(read_json(dir / "det" / "detect_eval.json").at("pooled_ap").get<double>() >= 0.9);

    EvalMapOptions eo;
    eo.detections = dir / "det" / "detections";
    eo.ground_truth = dir / "data" / "gt";
    REQUIRE(cmd_eval_map(globals(dir, "map"), eo, log) == 0);
    const auto rows = read_json(dir / "map" / "map.json").at("rows");
    CHECK(rows.size() == 4);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i]["map"].get<double>() <= rows[i - 1]["map"].get<double>());

    TrainOptions to;
    to.data = dir / "data";
    to.members = 2;
    REQUIRE(cmd_train(globals(dir, "train"), to, log) == 0);
    const auto report = read_json(dir / "train" / "train_report.json");
    CHECK(report.at("members").size() == 2);
    CHECK(report.at("members")[1].at("cnn").at("conv1_channels") == 12);

    auto gp = globals(dir, "cls");
    gp.config = dir / "train" / "pipeline.json";
    ClassifyOptions co;
    co.data = dir / "data";
    REQUIRE(cmd_classify(gp, co, log) == 0);
    ReportOptions ro;
    ro.predictions = dir / "cls" / "predictions.json";
    REQUIRE(cmd_report(globals(dir, "cls"), ro, log) == 0);
    CHECK(fs::exists(dir / "cls" / "report.txt"));

    gp.out = dir / "emb";
    EmbedOptions eo2;
    eo2.data = dir / "data";
    REQUIRE(cmd_embed(gp, eo2, log) == 0);
    const auto emb = read_embeddings_csv(dir / "emb" / "embeddings.csv");
    CHECK(emb.data.cols == 256);

    TsneOptions tso;
    tso.embeddings = dir / "emb" / "embeddings.csv";
    tso.labels = dir / "emb" / "labels.csv";
    tso.perplexity = 3.0;
    REQUIRE(cmd_tsne(globals(dir, "emb"), tso, log) == 0);
    CHECK(fs::exists(dir / "emb" / "tsne.svg"));

    gp.out = dir / "run";
    RunOptions rn;
    rn.input = dir / "data";
    REQUIRE(cmd_run(gp, rn, log) == 0);
    const auto manifest = read_json(dir / "run" / "manifest.json");
    CHECK(manifest.at("config").at("classifiers").size() == 2);
}

TEST_CASE("tile command writes tiles and an index") {
    testutil::TempDir dir("cmd_tile");
    save_png(testutil::random_image(70, 50, 1), dir / "slide.png");
    TileCommandOptions o;
    o.input = dir / "slide.png";
    o.grid = {30, 20};
    std::ostringstream log;
    GlobalOptions g;
    g.out = dir / "out";
    REQUIRE(cmd_tile(g, o, log) == 0);
    const auto j = read_json(dir / "out" / "tiles.json");
    CHECK(j.at("tiles").size() == 4);
    CHECK(fs::exists(dir / "out" / "tiles" / "slide_x30_y20.png"));
}

TEST_CASE("import-via command") {
    testutil::TempDir dir("cmd_via");
    ViaImage img;
    img.key = "s.png";
    img.filename = "s.png";
    img.boxes = {{1, 2, 11, 22}};
    img.box_labels = {CellType::VAS};
    img.points = {{5, 6, CellType::HOF}};
    std::ofstream(dir / "via.json") << export_via({img});
    ImportViaOptions o;
    o.input = dir / "via.json";
    GlobalOptions g;
    g.out = dir / "out";
    std::ostringstream log;
    REQUIRE(cmd_import_via(g, o, log) == 0);
    const auto gt = load_ground_truth(dir / "out" / "gt" / "s.json");
    CHECK(gt.boxes == img.boxes);
    CHECK(gt.labels[0] == CellType::VAS);
    CHECK(read_json(dir / "out" / "points" / "s.json")[0]["label"] == "HOF");
}

TEST_CASE("ensemble members alternate widths") {
    const auto m = ensemble_members(3, 7);
    CHECK(m[0].cnn.conv1_channels == 8);
    CHECK(m[1].cnn.conv2_channels == 24);
    CHECK(m[2].cnn.conv1_channels == 8);
    CHECK(m[0].init_seed != m[2].init_seed);
}

TEST_CASE("train config parsing rejects bad values") {
    CHECK(train_config_from_json(nlohmann::json::parse(R"({"balance": "weights"})")).balance == Balance::Weights);
    CHECK(train_config_from_json(nlohmann::json::parse(R"({"loss": "focal"})")).loss.kind == LossKind::Focal);
    CHECK_THROWS(train_config_from_json(nlohmann::json::parse(R"({"momentum": 1.5})")));
    CHECK_THROWS(train_config_from_json(nlohmann::json::parse(R"({"loss": "hinge"})")));
}
