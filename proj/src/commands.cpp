#include "cellpheno/commands.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "cellpheno/embed.hpp"
#include "cellpheno/parallel.hpp"
#include "cellpheno/rng.hpp"
#include "cellpheno/via.hpp"

namespace cellpheno {

namespace fs = std::filesystem;
using nlohmann::json;

json GlobalOptions::config_json() const {
    if (config.empty()) return json::object();
    auto j = read_json(config);
    if (!j.is_object()) throw std::invalid_argument(config.string() + ": config must be a JSON object");
    return j;
}

json GlobalOptions::section(const std::string& name) const {
    const auto j = config_json();
    return j.contains(name) ? j.at(name) : json::object();
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

LossKind parse_loss_kind(const std::string& s) {
    if (s == "cross_entropy") return LossKind::CrossEntropy;
    if (s == "focal") return LossKind::Focal;
    throw std::invalid_argument("unknown loss '" + s + "' (expected cross_entropy or focal)");
}

std::string_view loss_name(LossKind k) { return k == LossKind::Focal ? "focal" : "cross_entropy"; }

json cnn_config_json(const CnnConfig& c) {
    return {{"input_size", c.input_size}, {"conv1_channels", c.conv1_channels}, {"conv2_channels", c.conv2_channels},
            {"hidden", c.hidden}, {"dropout", c.dropout}};
}

CnnConfig cnn_config_from_json(const json& j) {
    CnnConfig c;
    c.input_size = j.value("input_size", c.input_size);
    c.conv1_channels = j.value("conv1_channels", c.conv1_channels);
    c.conv2_channels = j.value("conv2_channels", c.conv2_channels);
    c.hidden = j.value("hidden", c.hidden);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

json pipeline_section(const GlobalOptions& g) {
    const auto root = g.config_json();
    return root.contains("pipeline") ? root.at("pipeline") : root;
}

fs::path config_dir(const GlobalOptions& g) { return g.config.empty() ? fs::path{} : g.config.parent_path(); }

std::vector<std::unique_ptr<ClassifierBackend>> load_models(const std::vector<fs::path>& paths) {
    if (paths.empty()) throw std::invalid_argument("no classifier models given");
    std::vector<std::unique_ptr<ClassifierBackend>> out;
    for (const auto& p : paths) out.push_back(load_backend(p));
    return out;
}

std::vector<fs::path> model_paths(const GlobalOptions& g, const std::vector<fs::path>& explicit_models) {
    if (!explicit_models.empty()) return explicit_models;
    return pipeline_config_from_json(pipeline_section(g), config_dir(g)).classifiers;
}

std::map<std::string, std::string> read_label_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open labels file " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 || line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected id,label");
        out[line.substr(0, comma)] = line.substr(comma + 1);
    }
    return out;
}

}  // namespace

// ---- synthetic data ----

std::vector<DatasetTile> DatasetIndex::in(Split s) const {
    std::vector<DatasetTile> out;
    for (const auto& t : tiles)
        if (t.split == s) out.push_back(t);
    return out;
}

int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& log) {
    const auto section = g.section("synth");
    const SynthSpec spec = section.empty() ? SynthSpec{} : synth_spec_from_json(section);
    const auto mix = o.mix.value_or(spec.class_mix);
    const std::uint64_t seed = g.seed_or(0);
    const auto ds = generate_dataset(spec, o.tiles, mix, seed);

    fs::create_directories(g.out / "tiles");
    fs::create_directories(g.out / "gt");
    std::vector<std::string> ids(o.tiles);
    for (std::size_t t = 0; t < o.tiles; ++t) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "tile_%04zu", t);
        ids[t] = buf;
    }
    parallel_for(o.tiles, g.jobs, [&](std::size_t t) {
        const auto tile = ds.render(t);
        save_png(tile.image, g.out / "tiles" / (ids[t] + ".png"));
        write_json(gt_to_json(tile.gt_boxes, tile.gt_labels), g.out / "gt" / (ids[t] + ".json"));
    });

    json index;
    index["spec"] = to_json(ds.spec);
    index["seed"] = seed;
    index["mix"] = ds.spec.class_mix;
    auto tiles = json::array();
    for (std::size_t t = 0; t < o.tiles; ++t)
        tiles.push_back({{"id", ids[t]},
                         {"split", std::string(to_string(ds.tile_split[t]))},
                         {"image", "tiles/" + ids[t] + ".png"},
                         {"gt", "gt/" + ids[t] + ".json"},
                         {"nuclei", ds.tile_classes[t].size()}});
    index["tiles"] = tiles;
    write_json(index, g.out / "dataset.json");

    std::array<std::array<long long, kNumClasses>, 3> counts{};
    for (const auto& p : ds.patches) ++counts[static_cast<int>(ds.tile_split[p.tile])][index_of(p.label)];
    log << "synth: " << o.tiles << " tiles, " << ds.patches.size() << " nuclei -> " << g.out.string() << "\n";
    for (auto s : {Split::Train, Split::Validation, Split::Test}) {
        log << "  " << to_string(s) << ":";
        for (auto c : kAllCellTypes) log << " " << to_string(c) << "=" << counts[static_cast<int>(s)][index_of(c)];
        log << "\n";
    }
    return 0;
}

DatasetIndex load_dataset_index(const fs::path& dir) {
    const auto j = read_json(dir / "dataset.json");
    DatasetIndex idx;
    idx.root = dir;
    for (const auto& t : j.at("tiles"))
        idx.tiles.push_back({t.at("id").get<std::string>(), parse_split(t.at("split").get<std::string>()),
                             dir / t.at("image").get<std::string>(), dir / t.at("gt").get<std::string>()});
    return idx;
}

TileGroundTruth load_ground_truth(const fs::path& path) {
    TileGroundTruth gt;
    try {
        gt_from_json(read_json(path), gt.boxes, gt.labels);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
    return gt;
}

PatchSet load_patches(const std::vector<DatasetTile>& tiles, int side, int resize_to, int jobs) {
    std::vector<PatchSet> per_tile(tiles.size());
    parallel_for(tiles.size(), jobs, [&](std::size_t t) {
        const Image img = load_png(tiles[t].image);
        const auto gt = load_ground_truth(tiles[t].ground_truth);
        auto& ps = per_tile[t];
        for (std::size_t k = 0; k < gt.boxes.size(); ++k) {
            if (!gt.labels[k]) continue;
            const auto& b = gt.boxes[k];
            auto p = extract_patch(img, static_cast<int>(std::floor(b.center_x())), static_cast<int>(std::floor(b.center_y())),
                                   side);
            ps.ids.push_back(tiles[t].id + "#" + std::to_string(k));
            ps.patches.push_back(resize_to > 0 ? resize_bilinear(p.pixels, resize_to, resize_to) : std::move(p.pixels));
            ps.labels.push_back(*gt.labels[k]);
        }
    });
    PatchSet all;
    for (auto& ps : per_tile) {
        std::move(ps.ids.begin(), ps.ids.end(), std::back_inserter(all.ids));
        std::move(ps.patches.begin(), ps.patches.end(), std::back_inserter(all.patches));
        all.labels.insert(all.labels.end(), ps.labels.begin(), ps.labels.end());
    }
    return all;
}

// ---- tiling and detection ----

int cmd_tile(const GlobalOptions& g, const TileCommandOptions& o, std::ostream& log) {
    const Image img = load_png(o.input);
    const auto offsets = tile_offsets(img.width(), img.height(), o.grid);
    fs::create_directories(g.out / "tiles");
    const auto stem = o.input.stem().string();
    auto entries = json::array();
    std::size_t kept = 0, flagged = 0;
    for (const auto& off : offsets) {
        const Image tile = crop(img, off.x, off.y, off.width, off.height);
        const auto score = artifact_score(tile, o.artifacts.tissue_luma);
        const bool artifact = is_artifact(score, o.artifacts);
        flagged += artifact;
        const std::string id = stem + "_x" + std::to_string(off.x) + "_y" + std::to_string(off.y);
        json e = {{"id", id},
                  {"x", off.x},
                  {"y", off.y},
                  {"width", off.width},
                  {"height", off.height},
                  {"blur_score", score.blur_score},
                  {"tissue_fraction", score.tissue_fraction},
                  {"artifact", artifact}};
        if (!(artifact && o.drop_artifacts)) {
            save_png(tile, g.out / "tiles" / (id + ".png"));
            e["image"] = "tiles/" + id + ".png";
            ++kept;
        }
        entries.push_back(std::move(e));
    }
    write_json({{"source", o.input.filename().string()},
                {"tile_width", o.grid.tile_width},
                {"tile_height", o.grid.tile_height},
                {"tiles", entries}},
               g.out / "tiles.json");
    log << "tile: " << offsets.size() << " tiles (" << flagged << " flagged as artifacts), " << kept << " written\n";
    return 0;
}

namespace {

struct NamedImage {
    std::string id;
    fs::path image;
    fs::path ground_truth;  // may be empty
};

std::vector<NamedImage> gather_images(const fs::path& input, std::optional<Split> split, const fs::path& gt_dir) {
    std::vector<NamedImage> out;
    if (fs::is_directory(input) && fs::exists(input / "dataset.json")) {
        const auto idx = load_dataset_index(input);
        for (const auto& t : idx.tiles)
            if (!split || t.split == *split) out.push_back({t.id, t.image, t.ground_truth});
        return out;
    }
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        const auto tiles_dir = fs::exists(input / "tiles") && fs::is_directory(input / "tiles") ? input / "tiles" : input;
        files = list_pngs(tiles_dir);
    } else if (fs::is_regular_file(input)) {
        files.push_back(input);
    } else {
        throw std::invalid_argument("input not found: " + input.string());
    }
    for (const auto& f : files) {
        NamedImage n{f.stem().string(), f, {}};
        if (!gt_dir.empty() && fs::exists(gt_dir / (n.id + ".json"))) n.ground_truth = gt_dir / (n.id + ".json");
        out.push_back(n);
    }
    return out;
}

}  // namespace

int cmd_detect(const GlobalOptions& g, const DetectOptions& o, std::ostream& log) {
    const auto pc = pipeline_config_from_json(pipeline_section(g), config_dir(g));
    const StainMatrix m = pc.stain();
    const auto images = gather_images(o.input, o.split, o.ground_truth);
    if (images.empty()) throw std::invalid_argument("no input images found in " + o.input.string());
    fs::create_directories(g.out / "detections");

    std::vector<ImageDetections> evals(images.size());
    std::vector<bool> has_gt(images.size(), false);
    parallel_for(images.size(), g.jobs, [&](std::size_t i) {
        const auto dets = dog_detect(load_png(images[i].image), m, pc.dog, pc.match);
        write_json(detections_to_json(dets), g.out / "detections" / (images[i].id + ".json"));
        if (!images[i].ground_truth.empty()) {
            evals[i] = {dets, load_ground_truth(images[i].ground_truth).boxes};
            has_gt[i] = true;
        }
    });
    std::vector<ImageDetections> with_gt;
    std::size_t n_dets = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (has_gt[i]) with_gt.push_back(evals[i]);
    }
    log << "detect: " << images.size() << " images -> " << (g.out / "detections").string() << "\n";
    if (!with_gt.empty()) {
        for (const auto& e : with_gt) n_dets += e.preds.size();
        const double ap = dataset_average_precision(with_gt, pc.match);
        write_pr_csv(dataset_pr_curve(with_gt, pc.match), g.out / "pr.csv");
        write_json({{"images", with_gt.size()}, {"detections", n_dets}, {"iou_threshold", pc.match.iou_threshold},
                    {"pooled_ap", ap}},
                   g.out / "detect_eval.json");
        log << "  pooled AP@" << pc.match.iou_threshold << " = " << fixed(ap) << " over " << with_gt.size()
            << " images with ground truth\n";
    }
    return 0;
}

int cmd_eval_map(const GlobalOptions& g, const EvalMapOptions& o, std::ostream& log) {
    if (!fs::is_directory(o.detections)) throw std::invalid_argument("detections directory not found: " + o.detections.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(o.detections))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("no detection files in " + o.detections.string());
    std::vector<ImageDetections> images;
    for (const auto& f : files) {
        const auto gt_path = o.ground_truth / f.filename();
        if (!fs::exists(gt_path)) throw std::invalid_argument("missing ground truth for " + f.filename().string());
        images.push_back({detections_from_json(read_json(f)), load_ground_truth(gt_path).boxes});
    }
    auto thresholds = o.thresholds;
    std::sort(thresholds.begin(), thresholds.end());
    const auto pc = pipeline_config_from_json(pipeline_section(g), config_dir(g));
    const auto rows = map_over_thresholds(images, thresholds, pc.match, o.nms_iou, o.ap);

    fs::create_directories(g.out);
    auto arr = json::array();
    std::ostringstream table;
    table << "threshold  mAP\n";
    for (const auto& r : rows) {
        arr.push_back({{"threshold", r.threshold}, {"map", r.map}});
        table << fixed(r.threshold, 2) << "       " << fixed(r.map, 3) << "\n";
        std::vector<ImageDetections> filtered;
        for (const auto& im : images) filtered.push_back({postprocess(im.preds, r.threshold, pc.match, o.nms_iou), im.gts});
        write_pr_csv(dataset_pr_curve(filtered, pc.match), g.out / ("pr_" + fixed(r.threshold, 2) + ".csv"));
    }
    write_json({{"images", images.size()},
                {"iou_threshold", pc.match.iou_threshold},
                {"nms_iou", o.nms_iou},
                {"interpolation", o.ap.interpolation == ApInterpolation::AllPoints ? "all_points" : "11_point"},
                {"aggregation", o.ap.aggregation == ApAggregation::Pooled ? "pooled" : "per_image_mean"},
                {"rows", arr}},
               g.out / "map.json");
    std::ofstream(g.out / "map.txt") << table.str();
    log << table.str();
    return 0;
}

// ---- classification ----

std::vector<MemberSpec> ensemble_members(std::size_t count, std::uint64_t seed, const CnnConfig& base) {
    std::vector<MemberSpec> out;
    for (std::size_t k = 0; k < count; ++k) {
        MemberSpec m;
        m.cnn = base;
        if (k % 2 == 1) {
            m.cnn.conv1_channels = 12;
            m.cnn.conv2_channels = 24;
        } else {
            m.cnn.conv1_channels = 8;
            m.cnn.conv2_channels = 16;
        }
        m.init_seed = derive_seed(seed, 100 + k);
        m.train_seed = derive_seed(seed, 200 + k);
        out.push_back(m);
    }
    return out;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("balance")) c.balance = parse_balance(j.at("balance").get<std::string>());
    c.augment = j.value("augment", c.augment);
    c.max_shear = j.value("max_shear", c.max_shear);
    if (j.contains("stain")) {
        c.stain.scale_low = j.at("stain").value("scale_low", c.stain.scale_low);
        c.stain.scale_high = j.at("stain").value("scale_high", c.stain.scale_high);
        c.stain.per_channel = j.at("stain").value("per_channel", c.stain.per_channel);
    }
    if (j.contains("loss")) c.loss.kind = parse_loss_kind(j.at("loss").get<std::string>());
    if (j.contains("focal")) {
        c.loss.focal.alpha = j.at("focal").value("alpha", c.loss.focal.alpha);
        c.loss.focal.gamma = j.at("focal").value("gamma", c.loss.focal.gamma);
    }
    if (c.epochs < 1 || c.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be positive");
    if (c.learning_rate < 0 || c.momentum < 0 || c.momentum >= 1) throw std::invalid_argument("invalid optimizer settings");
    c.stain.validate();
    return c;
}

namespace {

std::vector<TrainSample> to_samples(const PatchSet& ps) {
    std::vector<TrainSample> out;
    out.reserve(ps.patches.size());
    for (std::size_t i = 0; i < ps.patches.size(); ++i) out.push_back({ps.patches[i], ps.labels[i]});
    return out;
}

std::vector<Posterior> predict_samples(const TinyCnn& model, const std::vector<TrainSample>& data, int jobs) {
    std::vector<CnnInput> inputs(data.size());
    parallel_for(data.size(), jobs, [&](std::size_t i) { inputs[i] = to_cnn_input(data[i].image, model.config().input_size); });
    return model.predict(inputs, jobs);
}

}  // namespace

int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& log) {
    if (o.members == 0) throw std::invalid_argument("need at least one ensemble member");
    const auto section = g.section("train");
    TrainConfig tc = train_config_from_json(section);
    if (o.epochs) tc.epochs = *o.epochs;
    if (o.balance) tc.balance = *o.balance;
    if (o.loss) tc.loss.kind = *o.loss;
    tc.jobs = g.jobs;
    const CnnConfig base = section.contains("cnn") ? cnn_config_from_json(section.at("cnn")) : CnnConfig{};
    const std::uint64_t seed = g.seed_or(0);
    const int side = pipeline_config_from_json(pipeline_section(g), config_dir(g)).patch_side;

    const auto idx = load_dataset_index(o.data);
    const auto train_set = to_samples(load_patches(idx.in(Split::Train), side, base.input_size, g.jobs));
    const auto val_set = to_samples(load_patches(idx.in(Split::Validation), side, base.input_size, g.jobs));
    const auto test_set = to_samples(load_patches(idx.in(Split::Test), side, base.input_size, g.jobs));
    if (train_set.empty() || val_set.empty()) throw std::invalid_argument("training and validation splits must be non-empty");
    log << "train: " << train_set.size() << " train / " << val_set.size() << " validation / " << test_set.size()
        << " test patches; balance=" << to_string(tc.balance) << " loss=" << loss_name(tc.loss.kind) << "\n";

    fs::create_directories(g.out / "models");
    const auto specs = ensemble_members(o.members, seed, base);
    std::vector<std::vector<Posterior>> member_test(specs.size());
    auto members_json = json::array();
    std::vector<fs::path> model_files;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto& s = specs[k];
        auto result = train(TinyCnn(s.cnn, s.init_seed), train_set, val_set, tc, s.train_seed);
        const std::string rel = "models/member_" + std::to_string(k) + ".cnn";
        result.model.save(g.out / rel);
        model_files.push_back(rel);
        member_test[k] = predict_samples(result.model, test_set, g.jobs);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < test_set.size(); ++i) correct += argmax(member_test[k][i]) == index_of(test_set[i].label);
        const double acc = test_set.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test_set.size());
        auto history = json::array();
        for (const auto& e : result.history)
            history.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"train_accuracy", e.train_accuracy},
                               {"validation_accuracy", e.validation_accuracy}});
        members_json.push_back({{"model", rel},
                                {"cnn", cnn_config_json(s.cnn)},
                                {"init_seed", s.init_seed},
                                {"train_seed", s.train_seed},
                                {"best_epoch", result.best_epoch},
                                {"best_validation_accuracy", result.best_validation_accuracy},
                                {"test_accuracy", acc},
                                {"history", history}});
        log << "  member " << k << " (" << s.cnn.conv1_channels << "/" << s.cnn.conv2_channels << "): best epoch "
            << result.best_epoch << ", validation " << fixed(result.best_validation_accuracy) << ", test "
            << fixed(acc) << "\n";
    }

    std::vector<CellType> truth, pred;
    for (std::size_t i = 0; i < test_set.size(); ++i) {
        std::vector<Posterior> rows;
        for (const auto& m : member_test) rows.push_back(m[i]);
        truth.push_back(test_set[i].label);
        pred.push_back(ensemble_predict(rows).label);
    }
    json report = {{"seed", seed},
                   {"epochs", tc.epochs},
                   {"batch_size", tc.batch_size},
                   {"learning_rate", tc.learning_rate},
                   {"momentum", tc.momentum},
                   {"balance", std::string(to_string(tc.balance))},
                   {"loss", std::string(loss_name(tc.loss.kind))},
                   {"counts", {{"train", train_set.size()}, {"validation", val_set.size()}, {"test", test_set.size()}}},
                   {"members", members_json}};
    if (!test_set.empty()) {
        const auto cm = confusion_matrix(truth, pred);
        const auto cr = classification_report(cm);
        report["ensemble"] = {{"test_accuracy", cr.accuracy}, {"report", report_to_json(cr, cm)}};
        log << "  ensemble test accuracy " << fixed(cr.accuracy) << "\n" << report_to_text(cr);
    }
    write_json(report, g.out / "train_report.json");

    PipelineConfig pc = pipeline_config_from_json(pipeline_section(g), config_dir(g));
    pc.classifiers = model_files;
    pc.seed = seed;
    auto pj = to_json(pc);
    pj.erase("output_dir");
    pj.erase("jobs");
    write_json(pj, g.out / "pipeline.json");
    return 0;
}

int cmd_classify(const GlobalOptions& g, const ClassifyOptions& o, std::ostream& log) {
    const auto paths = model_paths(g, o.models);
    const auto models = load_models(paths);
    const int side = pipeline_config_from_json(pipeline_section(g), config_dir(g)).patch_side;
    const auto idx = load_dataset_index(o.data);
    const auto ps = load_patches(idx.in(o.split), side, 0, g.jobs);

    std::vector<std::vector<Posterior>> member(models.size());
    for (std::size_t k = 0; k < models.size(); ++k) member[k] = models[k]->predict_posteriors(ps.patches);

    auto preds = json::array();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ps.patches.size(); ++i) {
        std::vector<Posterior> rows;
        for (const auto& m : member) rows.push_back(m[i]);
        const auto vote = ensemble_predict(rows);
        correct += vote.label == ps.labels[i];
        preds.push_back({{"id", ps.ids[i]},
                         {"truth", std::string(to_string(ps.labels[i]))},
                         {"label", std::string(to_string(vote.label))},
                         {"confidence", vote.confidence},
                         {"member", vote.member},
                         {"posteriors", rows}});
    }
    auto names = json::array();
    for (const auto& m : models) names.push_back(m->name());
    write_json({{"split", std::string(to_string(o.split))}, {"models", names}, {"predictions", preds}},
               g.out / "predictions.json");
    log << "classify: " << ps.patches.size() << " patches, ensemble of " << models.size() << ", accuracy "
        << fixed(ps.patches.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ps.patches.size()))
        << "\n";
    return 0;
}

int cmd_report(const GlobalOptions& g, const ReportOptions& o, std::ostream& log) {
    const auto j = read_json(o.predictions);
    std::vector<CellType> truth, pred;
    std::size_t n = 0;
    for (const auto& p : j.at("predictions")) {
        ++n;
        if (!p.contains("truth"))
            throw std::invalid_argument("prediction " + std::to_string(n) + " has no ground-truth label");
        const auto t = parse_cell_type(p.at("truth").get<std::string>());
        const auto l = parse_cell_type(p.at("label").get<std::string>());
        if (!t || !l) throw std::invalid_argument("prediction " + std::to_string(n) + " has an unknown cell type");
        truth.push_back(*t);
        pred.push_back(*l);
    }
    if (truth.empty()) throw std::invalid_argument("no predictions to report on");
    const auto cm = confusion_matrix(truth, pred);
    const auto cr = classification_report(cm);
    fs::create_directories(g.out);
    write_json(report_to_json(cr, cm), g.out / "report.json");
    const auto text = report_to_text(cr);
    std::ofstream(g.out / "report.txt") << text;
    log << text;
    return 0;
}

// ---- embedding ----

int cmd_embed(const GlobalOptions& g, const EmbedOptions& o, std::ostream& log) {
    const auto models = load_models(model_paths(g, o.models));
    const int side = pipeline_config_from_json(pipeline_section(g), config_dir(g)).patch_side;
    const auto idx = load_dataset_index(o.data);
    const auto ps = load_patches(idx.in(o.split), side, 0, g.jobs);
    if (ps.patches.empty()) throw std::invalid_argument("no patches in split " + std::string(to_string(o.split)));

    std::vector<Matrix> members;
    for (const auto& m : models) members.push_back(Matrix::from_rows(m->embed(ps.patches)));
    EmbeddingMatrix e{concat_member_embeddings(members), ps.ids};
    fs::create_directories(g.out);
    write_embeddings_csv(e, g.out / "embeddings.csv");
    std::ofstream labels(g.out / "labels.csv");
    labels << "id,label\n";
    for (std::size_t i = 0; i < ps.ids.size(); ++i) labels << ps.ids[i] << "," << to_string(ps.labels[i]) << "\n";
    log << "embed: " << e.data.rows << " x " << e.data.cols << " -> " << (g.out / "embeddings.csv").string() << "\n";
    return 0;
}

int cmd_tsne(const GlobalOptions& g, const TsneOptions& o, std::ostream& log) {
    const auto e = read_embeddings_csv(o.embeddings);
    const auto section = g.section("tsne");
    TsneConfig cfg;
    cfg.perplexity = o.perplexity.value_or(section.value("perplexity", cfg.perplexity));
    cfg.iterations = o.iterations.value_or(section.value("iterations", cfg.iterations));
    cfg.learning_rate = section.value("learning_rate", cfg.learning_rate);
    cfg.exaggeration = section.value("exaggeration", cfg.exaggeration);
    cfg.seed = g.seed_or(0);
    const auto result = tsne(e.data, cfg);

    std::vector<std::string> labels(e.ids.size());
    std::optional<double> sil;
    if (!o.labels.empty()) {
        const auto map = read_label_csv(o.labels);
        std::vector<int> codes;
        std::map<std::string, int> code_of;
        for (std::size_t i = 0; i < e.ids.size(); ++i) {
            const auto it = map.find(e.ids[i]);
            if (it == map.end()) throw std::invalid_argument("no label for embedding id '" + e.ids[i] + "'");
            labels[i] = it->second;
            codes.push_back(code_of.emplace(it->second, static_cast<int>(code_of.size())).first->second);
        }
        if (code_of.size() >= 2) sil = silhouette(result.coordinates, codes);
    }
    fs::create_directories(g.out);
    write_tsne_csv(result.coordinates, e.ids, labels, g.out / "tsne.csv");
    std::vector<std::string> order, palette;
    for (auto t : kAllCellTypes) {
        order.emplace_back(to_string(t));
        const auto& c = kOverlayPalette[index_of(t)];
        char hex[8];
        std::snprintf(hex, sizeof hex, "#%02x%02x%02x", c[0], c[1], c[2]);
        palette.emplace_back(hex);
    }
    write_tsne_svg(result.coordinates, labels, order, palette, g.out / "tsne.svg");
    json summary = {{"points", e.data.rows},
                    {"dimensions", e.data.cols},
                    {"perplexity", result.perplexity},
                    {"perplexity_clamped", result.perplexity_clamped},
                    {"initial_kl", result.initial_kl},
                    {"final_kl", result.final_kl}};
    if (sil) summary["silhouette"] = *sil;
    write_json(summary, g.out / "tsne.json");
    log << "tsne: " << e.data.rows << " points, KL " << fixed(result.initial_kl) << " -> " << fixed(result.final_kl);
    if (sil) log << ", silhouette " << fixed(*sil);
    log << "\n";
    return 0;
}

// ---- end to end ----

PipelineConfig resolve_pipeline_config(const GlobalOptions& g, const std::vector<fs::path>& models) {
    auto pc = pipeline_config_from_json(pipeline_section(g), config_dir(g));
    if (!models.empty()) pc.classifiers = models;
    if (g.seed) pc.seed = *g.seed;
    pc.jobs = g.jobs;
    pc.output_dir = g.out;
    return pc;
}

int cmd_run(const GlobalOptions& g, const RunOptions& o, std::ostream& log) {
    const Pipeline pipeline(resolve_pipeline_config(g, o.models));
    const bool dataset = fs::is_directory(o.input) && fs::exists(o.input / "dataset.json");
    const auto images = gather_images(o.input, dataset ? std::optional<Split>(o.split) : std::nullopt, o.ground_truth);
    if (images.empty()) throw std::invalid_argument("no input tiles found in " + o.input.string());

    std::map<std::string, TileOffset> offsets;
    if (fs::is_directory(o.input) && fs::exists(o.input / "tiles.json"))
        for (const auto& t : read_json(o.input / "tiles.json").at("tiles"))
            offsets[t.at("id").get<std::string>()] = {t.at("x").get<int>(), t.at("y").get<int>(), t.at("width").get<int>(),
                                                      t.at("height").get<int>()};

    std::vector<TileInput> inputs;
    for (const auto& im : images) {
        TileInput in;
        in.id = im.id;
        if (auto it = offsets.find(im.id); it != offsets.end()) in.offset = it->second;
        const auto path = im.image;
        in.load = [path] { return load_png(path); };
        if (!im.ground_truth.empty()) in.ground_truth = load_ground_truth(im.ground_truth);
        inputs.push_back(std::move(in));
    }
    const auto m = pipeline.run_dataset(inputs);
    log << "run: " << inputs.size() << " tiles, " << m.total << " detections, " << m.failed << " failed -> "
        << (g.out / "manifest.json").string() << "\n";
    for (auto t : kAllCellTypes)
        log << "  " << to_string(t) << ": " << format_percentage(m.percentages[index_of(t)]) << " (" << m.counts[index_of(t)]
            << ")\n";
    if (m.pooled_ap) log << "  pooled AP@" << pipeline.config().match.iou_threshold << " = " << fixed(*m.pooled_ap) << "\n";
    if (m.label_accuracy) log << "  label accuracy on matched detections = " << fixed(*m.label_accuracy) << "\n";
    for (const auto& t : m.tiles)
        if (!t.ok) log << "  FAILED " << t.tile_id << ": " << t.error << "\n";
    return m.failed > 0 ? 2 : 0;
}

int cmd_import_via(const GlobalOptions& g, const ImportViaOptions& o, std::ostream& log) {
    const auto images = import_via_annotations(o.input, ViaOptions{o.label_attribute});
    fs::create_directories(g.out / "gt");
    std::size_t boxes = 0, points = 0;
    for (const auto& img : images) {
        const auto stem = fs::path(img.filename).stem().string();
        auto arr = boxes_to_json(img.boxes);
        for (std::size_t i = 0; i < img.box_labels.size(); ++i)
            if (img.box_labels[i]) arr[i]["label"] = std::string(to_string(*img.box_labels[i]));
        write_json(arr, g.out / "gt" / (stem + ".json"));
        if (!img.points.empty()) {
            auto pts = json::array();
            for (const auto& p : img.points) pts.push_back({{"x", p.x}, {"y", p.y}, {"label", std::string(to_string(p.label))}});
            write_json(pts, g.out / "points" / (stem + ".json"));
        }
        boxes += img.boxes.size();
        points += img.points.size();
    }
    log << "import-via: " << images.size() << " images, " << boxes << " boxes, " << points << " labelled points\n";
    return 0;
}

}  // namespace cellpheno
