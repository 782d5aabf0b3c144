#include "cellpheno/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "cellpheno/parallel.hpp"
#include "cellpheno/rng.hpp"

namespace cellpheno {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(DetectorKind k) { return k == DetectorKind::Dog ? "dog" : "replay"; }

DetectorKind parse_detector_kind(std::string_view s) {
    if (s == "dog") return DetectorKind::Dog;
    if (s == "replay") return DetectorKind::Replay;
    throw std::invalid_argument("unknown detector '" + std::string(s) + "' (expected dog or replay)");
}

StainMatrix PipelineConfig::stain() const {
    bool all_zero = true;
    for (double v : stain_matrix) all_zero &= v == 0.0;
    return all_zero ? StainMatrix{} : StainMatrix::from_row_major(stain_matrix);
}

void PipelineConfig::validate() const {
    if (patch_side < 8) throw std::invalid_argument("patch_side must be at least 8");
    if (!(edge_padding >= 0.0 && edge_padding <= 1.0)) throw std::invalid_argument("edge_padding must be in [0, 1]");
    if (jobs < 1) throw std::invalid_argument("jobs must be at least 1");
    if (!(match.iou_threshold > 0.0 && match.iou_threshold <= 1.0))
        throw std::invalid_argument("IoU threshold must be in (0, 1]");
    if (match.max_detections == 0) throw std::invalid_argument("max_detections must be positive");
    if (!(dog.sigma_small > 0.0 && dog.sigma_small < dog.sigma_large))
        throw std::invalid_argument("DoG sigmas must satisfy 0 < sigma_small < sigma_large");
    if (!(dog.box_radius > 0.0) || !(dog.score_scale > 0.0)) throw std::invalid_argument("invalid DoG box radius or scale");
    if (detector == DetectorKind::Replay && !fs::is_directory(replay_detections))
        throw std::invalid_argument("replay detections directory not found: " + replay_detections.string());
    if (classifiers.empty()) throw std::invalid_argument("at least one classifier is required");
    for (const auto& c : classifiers)
        if (!fs::is_regular_file(c)) throw std::invalid_argument("classifier file not found: " + c.string());
    (void)stain();
}

namespace {

fs::path resolve(const fs::path& p, const fs::path& base) {
    return p.empty() || p.is_absolute() || base.empty() ? p : base / p;
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base_dir) {
    if (!j.is_object()) throw std::invalid_argument("pipeline config must be a JSON object");
    PipelineConfig c;
    if (j.contains("stain_matrix")) {
        const auto& m = j.at("stain_matrix");
        std::vector<double> flat;
        if (m.is_array() && m.size() == 3 && m[0].is_array()) {
            for (const auto& row : m)
                for (const auto& v : row) flat.push_back(v.get<double>());
        } else {
            flat = m.get<std::vector<double>>();
        }
        if (flat.size() != 9) throw std::invalid_argument("stain_matrix needs 9 values");
        std::copy(flat.begin(), flat.end(), c.stain_matrix.begin());
    }
    if (j.contains("detector")) c.detector = parse_detector_kind(j.at("detector").get<std::string>());
    if (j.contains("dog")) {
        const auto& d = j.at("dog");
        c.dog.sigma_small = d.value("sigma_small", c.dog.sigma_small);
        c.dog.sigma_large = d.value("sigma_large", c.dog.sigma_large);
        c.dog.box_radius = d.value("box_radius", c.dog.box_radius);
        c.dog.threshold = d.value("threshold", c.dog.threshold);
        c.dog.score_scale = d.value("score_scale", c.dog.score_scale);
        c.dog.min_distance = d.value("min_distance", c.dog.min_distance);
        c.dog.nms_iou = d.value("nms_iou", c.dog.nms_iou);
    }
    if (j.contains("replay_detections"))
        c.replay_detections = resolve(j.at("replay_detections").get<std::string>(), base_dir);
    if (j.contains("classifiers"))
        for (const auto& p : j.at("classifiers")) c.classifiers.push_back(resolve(p.get<std::string>(), base_dir));
    c.ensemble = j.value("ensemble", c.ensemble);
    if (j.contains("match")) {
        c.match.iou_threshold = j.at("match").value("iou_threshold", c.match.iou_threshold);
        c.match.max_detections = j.at("match").value("max_detections", c.match.max_detections);
    }
    c.patch_side = j.value("patch_side", c.patch_side);
    c.edge_padding = j.value("edge_padding", c.edge_padding);
    if (j.contains("output_dir")) c.output_dir = resolve(j.at("output_dir").get<std::string>(), base_dir);
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    c.write_overlays = j.value("write_overlays", c.write_overlays);
    return c;
}

json to_json(const PipelineConfig& c, bool reproducible_only) {
    json j;
    j["stain_matrix"] = c.stain_matrix;
    j["detector"] = std::string(to_string(c.detector));
    j["dog"] = {{"sigma_small", c.dog.sigma_small}, {"sigma_large", c.dog.sigma_large},
                {"box_radius", c.dog.box_radius},   {"threshold", c.dog.threshold},
                {"score_scale", c.dog.score_scale}, {"min_distance", c.dog.min_distance},
                {"nms_iou", c.dog.nms_iou}};
    if (c.detector == DetectorKind::Replay) j["replay_detections"] = c.replay_detections.generic_string();
    auto cls = json::array();
    for (const auto& p : c.classifiers) cls.push_back(reproducible_only ? p.filename().generic_string() : p.generic_string());
    j["classifiers"] = cls;
    j["ensemble"] = c.ensemble;
    j["match"] = {{"iou_threshold", c.match.iou_threshold}, {"max_detections", c.match.max_detections}};
    j["patch_side"] = c.patch_side;
    j["edge_padding"] = c.edge_padding;
    j["seed"] = c.seed;
    j["write_overlays"] = c.write_overlays;
    if (!reproducible_only) {
        j["output_dir"] = c.output_dir.generic_string();
        j["jobs"] = c.jobs;
    }
    return j;
}

std::array<double, kNumClasses> population_percentages(const std::array<long long, kNumClasses>& counts) {
    long long total = 0;
    for (auto c : counts) total += c;
    std::array<double, kNumClasses> pct{};
    if (total == 0) return pct;
    for (int k = 0; k < kNumClasses; ++k) pct[k] = 100.0 * static_cast<double>(counts[k]) / static_cast<double>(total);
    return pct;
}

std::string format_percentage(double pct) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", pct);
    std::string s = buf;
    if (s.size() > 2 && s.compare(s.size() - 2, 2, ".0") == 0) s.resize(s.size() - 2);
    return s + "%";
}

namespace {

json counts_json(const std::array<long long, kNumClasses>& counts) {
    json j = json::object();
    for (auto t : kAllCellTypes) j[std::string(to_string(t))] = counts[index_of(t)];
    return j;
}

json percentages_json(const std::array<double, kNumClasses>& pct) {
    json j = json::object();
    for (auto t : kAllCellTypes) j[std::string(to_string(t))] = pct[index_of(t)];
    return j;
}

json evaluation_json(const TileEvaluation& e) {
    return {{"gt_count", e.gt_count}, {"matched", e.matched}, {"labelled", e.labelled}, {"label_correct", e.label_correct}};
}

TileEvaluation evaluation_from_json(const json& j) {
    return {j.at("gt_count").get<std::size_t>(), j.at("matched").get<std::size_t>(), j.at("labelled").get<std::size_t>(),
            j.at("label_correct").get<std::size_t>()};
}

CellType cell_type_field(const json& j, const char* key) {
    const auto name = j.at(key).get<std::string>();
    auto t = parse_cell_type(name);
    if (!t) throw std::invalid_argument("unknown cell type '" + name + "'");
    return *t;
}

}  // namespace

json to_json(const TileReport& r) {
    json j;
    j["tile"] = r.tile_id;
    j["offset"] = {{"x", r.offset.x}, {"y", r.offset.y}, {"width", r.offset.width}, {"height", r.offset.height}};
    j["seed"] = r.seed;
    auto cells = json::array();
    for (const auto& c : r.cells) {
        json e = {{"x", c.detection.box.x_min},
                  {"y", c.detection.box.y_min},
                  {"w", c.detection.box.width()},
                  {"h", c.detection.box.height()},
                  {"score", c.detection.score},
                  {"label", std::string(to_string(c.label))},
                  {"confidence", c.confidence},
                  {"member", c.member},
                  {"edge", c.edge}};
        if (c.truth) e["truth"] = std::string(to_string(*c.truth));
        cells.push_back(std::move(e));
    }
    j["detections"] = cells;
    j["total"] = r.cells.size();
    j["counts"] = counts_json(r.counts);
    j["percentages"] = percentages_json(r.percentages);
    j["edge_count"] = r.edge_count;
    if (r.evaluation) j["evaluation"] = evaluation_json(*r.evaluation);
    return j;
}

TileReport tile_report_from_json(const json& j) {
    TileReport r;
    r.tile_id = j.at("tile").get<std::string>();
    const auto& o = j.at("offset");
    r.offset = {o.at("x").get<int>(), o.at("y").get<int>(), o.at("width").get<int>(), o.at("height").get<int>()};
    r.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("detections")) {
        CellCall c;
        c.detection = {BBox::from_xywh(e.at("x").get<double>(), e.at("y").get<double>(), e.at("w").get<double>(),
                                       e.at("h").get<double>()),
                       e.at("score").get<double>()};
        c.label = cell_type_field(e, "label");
        c.confidence = e.at("confidence").get<double>();
        c.member = e.value("member", std::size_t{0});
        c.edge = e.value("edge", false);
        if (e.contains("truth")) c.truth = cell_type_field(e, "truth");
        ++r.counts[index_of(c.label)];
        r.edge_count += c.edge;
        r.cells.push_back(c);
    }
    r.percentages = population_percentages(r.counts);
    if (j.contains("evaluation")) r.evaluation = evaluation_from_json(j.at("evaluation"));
    return r;
}

std::string population_summary(const TileReport& r) {
    std::ostringstream os;
    for (auto t : kAllCellTypes)
        os << to_string(t) << ": " << format_percentage(r.percentages[index_of(t)]) << " (" << r.counts[index_of(t)]
           << ")\n";
    return os.str();
}

json to_json(const RunManifest& m) {
    json j;
    j["tool"] = "cellpheno";
    j["version"] = CELLPHENO_VERSION;
    j["config"] = m.config;
    j["seed"] = m.seed;
    auto tiles = json::array();
    for (const auto& t : m.tiles) {
        json e = {{"tile", t.tile_id}, {"status", t.ok ? "ok" : "failed"}};
        if (t.ok) {
            e["report"] = t.report_path;
            if (!t.overlay_path.empty()) e["overlay"] = t.overlay_path;
            e["detections"] = t.detections;
        } else {
            e["error"] = t.error;
        }
        tiles.push_back(std::move(e));
    }
    j["tiles"] = tiles;
    j["aggregate"] = {{"total", m.total},
                      {"counts", counts_json(m.counts)},
                      {"percentages", percentages_json(m.percentages)},
                      {"edge_count", m.edge_count},
                      {"failed_tiles", m.failed}};
    if (m.evaluation) {
        json ev = evaluation_json(*m.evaluation);
        if (m.pooled_ap) ev["pooled_ap"] = *m.pooled_ap;
        if (m.label_accuracy) ev["label_accuracy"] = *m.label_accuracy;
        j["evaluation"] = ev;
    }
    j["runtime"] = {{"jobs", m.jobs}, {"wall_seconds", m.wall_seconds}};
    return j;
}

json reproducible_view(json manifest) {
    manifest.erase("runtime");
    return manifest;
}

std::uint64_t tile_seed(std::uint64_t global_seed, std::size_t tile_index) { return derive_seed(global_seed, tile_index); }

Image draw_overlay(const Image& tile, const std::vector<CellCall>& cells) {
    Image out = tile;
    for (const auto& c : cells) {
        const auto& b = c.detection.box;
        draw_box_outline(out, static_cast<int>(std::floor(b.x_min)), static_cast<int>(std::floor(b.y_min)),
                         static_cast<int>(std::ceil(b.x_max)), static_cast<int>(std::ceil(b.y_max)),
                         kOverlayPalette[index_of(c.label)]);
    }
    return out;
}

void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(path.string() + ": malformed JSON: " + e.what());
    }
}

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    stain_ = cfg_.stain();
    const std::size_t n = cfg_.ensemble ? cfg_.classifiers.size() : 1;
    for (std::size_t i = 0; i < n; ++i) {
        try {
            backends_.push_back(load_backend(cfg_.classifiers[i]));
        } catch (const std::exception& e) {
            throw std::runtime_error("failed to load classifier " + cfg_.classifiers[i].string() + ": " + e.what());
        }
    }
}

std::vector<Detection> Pipeline::detect(const Image& tile, const std::string& tile_id) const {
    if (cfg_.detector == DetectorKind::Dog) return dog_detect(tile, stain_, cfg_.dog, cfg_.match);
    const auto path = cfg_.replay_detections / (tile_id + ".json");
    auto dets = detections_from_json(read_json(path));
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    if (dets.size() > cfg_.match.max_detections) dets.resize(cfg_.match.max_detections);
    return dets;
}

TileResult Pipeline::run_tile(const Image& tile, const std::string& tile_id, const TileOffset& offset,
                              std::uint64_t seed, const std::optional<TileGroundTruth>& truth) const {
    TileReport report;
    report.tile_id = tile_id;
    report.offset = offset;
    report.seed = seed;

    const auto dets = detect(tile, tile_id);
    std::vector<Image> patches;
    std::vector<bool> edge;
    patches.reserve(dets.size());
    for (const auto& d : dets) {
        // box centre -> containing pixel
        const int cx = std::clamp(static_cast<int>(std::floor(d.box.center_x())), 0, tile.width() - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(d.box.center_y())), 0, tile.height() - 1);
        auto p = extract_patch(tile, cx, cy, cfg_.patch_side);
        edge.push_back(p.padded_fraction > cfg_.edge_padding);
        patches.push_back(std::move(p.pixels));
    }

    std::vector<std::vector<Posterior>> member_posteriors;
    if (!patches.empty())
        for (const auto& b : backends_) member_posteriors.push_back(b->predict_posteriors(patches));

    std::vector<std::ptrdiff_t> assigned;
    if (truth) assigned = assign_ground_truth(dets, truth->boxes, cfg_.match.iou_threshold);

    for (std::size_t i = 0; i < dets.size(); ++i) {
        std::vector<Posterior> rows;
        for (const auto& m : member_posteriors) rows.push_back(m[i]);
        const auto vote = ensemble_predict(rows);
        CellCall c{dets[i], vote.label, vote.confidence, vote.member, edge[i], std::nullopt};
        if (truth && assigned[i] >= 0 && static_cast<std::size_t>(assigned[i]) < truth->labels.size())
            c.truth = truth->labels[static_cast<std::size_t>(assigned[i])];
        ++report.counts[index_of(c.label)];
        report.edge_count += c.edge;
        report.cells.push_back(c);
    }
    report.percentages = population_percentages(report.counts);

    if (truth) {
        TileEvaluation ev;
        ev.gt_count = truth->boxes.size();
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (assigned[i] < 0) continue;
            ++ev.matched;
            if (const auto& t = report.cells[i].truth) {
                ++ev.labelled;
                ev.label_correct += *t == report.cells[i].label;
            }
        }
        report.evaluation = ev;
    }
    Image overlay = cfg_.write_overlays ? draw_overlay(tile, report.cells) : Image{};
    return {std::move(report), std::move(overlay)};
}

RunManifest Pipeline::run_dataset(const std::vector<TileInput>& tiles) const {
    if (tiles.empty()) throw std::invalid_argument("run needs at least one tile");
    const auto start = std::chrono::steady_clock::now();
    const fs::path out = cfg_.output_dir;
    fs::create_directories(out / "reports");
    if (cfg_.write_overlays) fs::create_directories(out / "overlays");

    std::vector<TileOutcome> outcomes(tiles.size());
    std::vector<std::optional<TileReport>> reports(tiles.size());
    std::vector<ImageDetections> evals(tiles.size());

    parallel_for(tiles.size(), cfg_.jobs, [&](std::size_t i) {
        const auto& in = tiles[i];
        auto& oc = outcomes[i];
        oc.tile_id = in.id;
        try {
            const Image img = in.load();
            TileOffset offset = in.offset;
            if (offset.width == 0 && offset.height == 0) {
                offset.width = img.width();
                offset.height = img.height();
            }
            auto result = run_tile(img, in.id, offset, tile_seed(cfg_.seed, i), in.ground_truth);
            oc.report_path = "reports/" + in.id + ".json";
            write_json(to_json(result.report), out / oc.report_path);
            if (cfg_.write_overlays) {
                oc.overlay_path = "overlays/" + in.id + ".png";
                save_png(result.overlay, out / oc.overlay_path);
            }
            oc.detections = static_cast<long long>(result.report.cells.size());
            if (in.ground_truth) {
                for (const auto& c : result.report.cells) evals[i].preds.push_back(c.detection);
                evals[i].gts = in.ground_truth->boxes;
            }
            reports[i] = std::move(result.report);
            oc.ok = true;
        } catch (const std::exception& e) {
            oc.ok = false;
            oc.error = e.what();
        }
    });

    RunManifest m;
    m.config = to_json(cfg_, true);
    m.seed = cfg_.seed;
    m.tiles = outcomes;
    bool any_truth = false;
    TileEvaluation total_eval;
    std::vector<ImageDetections> eval_set;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (!reports[i]) {
            ++m.failed;
            continue;
        }
        const auto& r = *reports[i];
        for (int k = 0; k < kNumClasses; ++k) m.counts[k] += r.counts[k];
        m.total += static_cast<long long>(r.cells.size());
        m.edge_count += r.edge_count;
        if (r.evaluation) {
            any_truth = true;
            total_eval.gt_count += r.evaluation->gt_count;
            total_eval.matched += r.evaluation->matched;
            total_eval.labelled += r.evaluation->labelled;
            total_eval.label_correct += r.evaluation->label_correct;
            eval_set.push_back(evals[i]);
        }
    }
    m.percentages = population_percentages(m.counts);
    if (any_truth) {
        m.evaluation = total_eval;
        m.pooled_ap = dataset_average_precision(eval_set, cfg_.match);
        if (total_eval.labelled > 0)
            m.label_accuracy = static_cast<double>(total_eval.label_correct) / static_cast<double>(total_eval.labelled);
    }
    m.jobs = cfg_.jobs;
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_json(to_json(m), out / "manifest.json");
    return m;
}

}  // namespace cellpheno
