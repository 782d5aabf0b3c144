#include <exception>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cellpheno/commands.hpp"

using namespace cellpheno;

namespace {

std::array<double, kNumClasses> parse_mix(const std::string& s) {
    std::array<double, kNumClasses> mix{};
    std::stringstream ss(s);
    std::string part;
    std::size_t k = 0;
    while (std::getline(ss, part, ',')) {
        if (k >= kNumClasses) throw std::invalid_argument("--mix needs exactly 5 comma-separated values");
        mix[k++] = std::stod(part);
    }
    if (k != kNumClasses) throw std::invalid_argument("--mix needs exactly 5 comma-separated values");
    return mix;
}

Split split_arg(const std::string& s) { return parse_split(s); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Nucleus detection, phenotyping and embedding for H&E tiles"};
    app.set_version_flag("--version", CELLPHENO_VERSION);
    app.require_subcommand(1);

    GlobalOptions g;
    std::uint64_t seed = 0;
    std::string out = "out", config;
    auto* seed_opt = app.add_option("--seed", seed, "Global random seed")->capture_default_str();
    app.add_option("--config", config, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::Range(1, 1024))->capture_default_str();
    app.add_option("--out", out, "Output directory")->capture_default_str();

    // synth
    SynthOptions synth;
    std::string mix;
    auto* c_synth = app.add_subcommand("synth", "Generate a labelled synthetic tile dataset");
    c_synth->add_option("--tiles", synth.tiles, "Number of tiles")->capture_default_str();
    c_synth->add_option("--mix", mix, "Class mix CYT,FIB,HOF,SYN,VAS");

    // tile
    TileCommandOptions tile;
    std::string tile_input;
    auto* c_tile = app.add_subcommand("tile", "Cut a slide image into tiles and flag artifacts");
    c_tile->add_option("input", tile_input, "Slide PNG")->required()->check(CLI::ExistingFile);
    c_tile->add_option("--tile-width", tile.grid.tile_width)->capture_default_str();
    c_tile->add_option("--tile-height", tile.grid.tile_height)->capture_default_str();
    c_tile->add_option("--min-blur", tile.artifacts.min_blur_score)->capture_default_str();
    c_tile->add_option("--min-tissue", tile.artifacts.min_tissue_fraction)->capture_default_str();
    c_tile->add_flag("--drop-artifacts", tile.drop_artifacts, "Do not write flagged tiles");

    // detect
    DetectOptions detect;
    std::string detect_input, detect_gt, detect_split;
    auto* c_detect = app.add_subcommand("detect", "Run the DoG nucleus detector");
    c_detect->add_option("input", detect_input, "PNG, directory of PNGs, or synthetic dataset")->required();
    c_detect->add_option("--split", detect_split, "Dataset split (train, validation, test)");
    c_detect->add_option("--gt", detect_gt, "Directory of ground-truth <id>.json");

    // eval-map
    EvalMapOptions evalmap;
    std::string em_det, em_gt, interp = "all_points", aggr = "pooled";
    auto* c_map = app.add_subcommand("eval-map", "mAP over score thresholds");
    c_map->add_option("detections", em_det, "Directory of detection JSON")->required()->check(CLI::ExistingDirectory);
    c_map->add_option("ground_truth", em_gt, "Directory of ground-truth JSON")->required()->check(CLI::ExistingDirectory);
    c_map->add_option("--thresholds", evalmap.thresholds)->delimiter(',');
    c_map->add_option("--nms-iou", evalmap.nms_iou)->capture_default_str();
    c_map->add_option("--interpolation", interp)->check(CLI::IsMember({"all_points", "11_point"}))->capture_default_str();
    c_map->add_option("--aggregation", aggr)->check(CLI::IsMember({"pooled", "per_image_mean"}))->capture_default_str();

    // train
    TrainOptions train;
    std::string train_data, balance, loss;
    int epochs = 0;
    auto* c_train = app.add_subcommand("train", "Train the CNN ensemble on a synthetic dataset");
    c_train->add_option("data", train_data, "Synthetic dataset directory")->required()->check(CLI::ExistingDirectory);
    c_train->add_option("--members", train.members)->capture_default_str();
    auto* epochs_opt = c_train->add_option("--epochs", epochs);
    c_train->add_option("--balance", balance)->check(CLI::IsMember({"bootstrap", "downsample", "weights", "none"}));
    c_train->add_option("--loss", loss)->check(CLI::IsMember({"cross_entropy", "focal"}));

    // classify
    ClassifyOptions classify;
    std::string cls_data, cls_split = "test";
    std::vector<std::string> cls_models;
    auto* c_cls = app.add_subcommand("classify", "Classify ground-truth patches with the ensemble");
    c_cls->add_option("data", cls_data, "Synthetic dataset directory")->required()->check(CLI::ExistingDirectory);
    c_cls->add_option("--split", cls_split)->capture_default_str();
    c_cls->add_option("--model", cls_models, "Model file (repeatable)")->check(CLI::ExistingFile);

    // report
    ReportOptions report;
    std::string rep_pred;
    auto* c_rep = app.add_subcommand("report", "Confusion matrix and per-class metrics");
    c_rep->add_option("predictions", rep_pred, "predictions.json")->required()->check(CLI::ExistingFile);

    // embed
    EmbedOptions embed;
    std::string emb_data, emb_split = "test";
    std::vector<std::string> emb_models;
    auto* c_emb = app.add_subcommand("embed", "Extract ensemble hidden-layer embeddings");
    c_emb->add_option("data", emb_data, "Synthetic dataset directory")->required()->check(CLI::ExistingDirectory);
    c_emb->add_option("--split", emb_split)->capture_default_str();
    c_emb->add_option("--model", emb_models, "Model file (repeatable)")->check(CLI::ExistingFile);

    // tsne
    TsneOptions tsne_o;
    std::string ts_emb, ts_labels;
    double perplexity = 0;
    int iterations = 0;
    auto* c_tsne = app.add_subcommand("tsne", "2-D t-SNE projection of embeddings");
    c_tsne->add_option("embeddings", ts_emb, "embeddings.csv")->required()->check(CLI::ExistingFile);
    c_tsne->add_option("--labels", ts_labels, "id,label CSV")->check(CLI::ExistingFile);
    auto* perp_opt = c_tsne->add_option("--perplexity", perplexity);
    auto* iter_opt = c_tsne->add_option("--iterations", iterations);

    // run
    RunOptions run;
    std::string run_input, run_split = "test", run_gt;
    std::vector<std::string> run_models;
    auto* c_run = app.add_subcommand("run", "Detect, classify and report every tile");
    c_run->add_option("input", run_input, "Directory of tiles or synthetic dataset")->required();
    c_run->add_option("--split", run_split)->capture_default_str();
    c_run->add_option("--gt", run_gt, "Directory of ground-truth <id>.json");
    c_run->add_option("--model", run_models, "Model file (repeatable)")->check(CLI::ExistingFile);

    // import-via
    ImportViaOptions via;
    std::string via_input;
    auto* c_via = app.add_subcommand("import-via", "Convert VIA annotations to ground-truth JSON");
    c_via->add_option("input", via_input, "VIA JSON file")->required()->check(CLI::ExistingFile);
    c_via->add_option("--label-attribute", via.label_attribute)->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*seed_opt) g.seed = seed;
        g.config = config;
        g.out = out;
        auto to_paths = [](const std::vector<std::string>& v) {
            return std::vector<std::filesystem::path>(v.begin(), v.end());
        };
        std::ostream& log = std::cout;

        if (*c_synth) {
            if (!mix.empty()) synth.mix = parse_mix(mix);
            return cmd_synth(g, synth, log);
        }
        if (*c_tile) {
            tile.input = tile_input;
            return cmd_tile(g, tile, log);
        }
        if (*c_detect) {
            detect.input = detect_input;
            detect.ground_truth = detect_gt;
            if (!detect_split.empty()) detect.split = split_arg(detect_split);
            return cmd_detect(g, detect, log);
        }
        if (*c_map) {
            evalmap.detections = em_det;
            evalmap.ground_truth = em_gt;
            evalmap.ap.interpolation = interp == "11_point" ? ApInterpolation::ElevenPoint : ApInterpolation::AllPoints;
            evalmap.ap.aggregation = aggr == "pooled" ? ApAggregation::Pooled : ApAggregation::PerImageMean;
            return cmd_eval_map(g, evalmap, log);
        }
        if (*c_train) {
            train.data = train_data;
            if (*epochs_opt) train.epochs = epochs;
            if (!balance.empty()) train.balance = parse_balance(balance);
            if (!loss.empty()) train.loss = loss == "focal" ? LossKind::Focal : LossKind::CrossEntropy;
            return cmd_train(g, train, log);
        }
        if (*c_cls) {
            classify.data = cls_data;
            classify.split = split_arg(cls_split);
            classify.models = to_paths(cls_models);
            return cmd_classify(g, classify, log);
        }
        if (*c_rep) {
            report.predictions = rep_pred;
            return cmd_report(g, report, log);
        }
        if (*c_emb) {
            embed.data = emb_data;
            embed.split = split_arg(emb_split);
            embed.models = to_paths(emb_models);
            return cmd_embed(g, embed, log);
        }
        if (*c_tsne) {
            tsne_o.embeddings = ts_emb;
            tsne_o.labels = ts_labels;
            if (*perp_opt) tsne_o.perplexity = perplexity;
            if (*iter_opt) tsne_o.iterations = iterations;
            return cmd_tsne(g, tsne_o, log);
        }
        if (*c_run) {
            run.input = run_input;
            run.split = split_arg(run_split);
            run.ground_truth = run_gt;
            run.models = to_paths(run_models);
            return cmd_run(g, run, log);
        }
        if (*c_via) {
            via.input = via_input;
            return cmd_import_via(g, via, log);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
