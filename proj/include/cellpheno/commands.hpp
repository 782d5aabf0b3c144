#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellpheno/classify.hpp"
#include "cellpheno/pipeline.hpp"
#include "cellpheno/synth.hpp"

namespace cellpheno {

/// Options shared by every subcommand.
struct GlobalOptions {
    std::optional<std::uint64_t> seed;
    std::filesystem::path config;  // JSON; optional
    int jobs = 1;
    std::filesystem::path out = "out";

    std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
    /// Parsed config file, or an empty object.
    nlohmann::json config_json() const;
    /// Section of the config file, or an empty object.
    nlohmann::json section(const std::string& name) const;
};

// ---- synthetic data ----

struct SynthOptions {
    std::size_t tiles = 200;
    std::optional<std::array<double, kNumClasses>> mix;
};

/// Writes tiles/<id>.png, gt/<id>.json and dataset.json under out.
int cmd_synth(const GlobalOptions& g, const SynthOptions& o, std::ostream& log);

struct DatasetTile {
    std::string id;
    Split split = Split::Train;
    std::filesystem::path image;
    std::filesystem::path ground_truth;
};

struct DatasetIndex {
    std::filesystem::path root;
    std::vector<DatasetTile> tiles;
    std::vector<DatasetTile> in(Split s) const;
};

DatasetIndex load_dataset_index(const std::filesystem::path& dir);
TileGroundTruth load_ground_truth(const std::filesystem::path& path);

struct PatchSet {
    std::vector<std::string> ids;
    std::vector<Image> patches;
    std::vector<CellType> labels;
};

/// Patches centred on every labelled ground-truth nucleus of the given tiles. When resize_to > 0
/// the patches are stored already resized.
PatchSet load_patches(const std::vector<DatasetTile>& tiles, int side, int resize_to, int jobs);

// ---- tiling and detection ----

struct TileCommandOptions {
    std::filesystem::path input;
    TileGrid grid{};
    ArtifactThresholds artifacts{};
    bool drop_artifacts = false;
};

int cmd_tile(const GlobalOptions& g, const TileCommandOptions& o, std::ostream& log);

struct DetectOptions {
    std::filesystem::path input;  // PNG file, directory of PNGs, or synthetic dataset directory
    std::optional<Split> split;   // for dataset directories
    std::filesystem::path ground_truth;  // optional directory of <id>.json
};

int cmd_detect(const GlobalOptions& g, const DetectOptions& o, std::ostream& log);

struct EvalMapOptions {
    std::filesystem::path detections;
    std::filesystem::path ground_truth;
    std::vector<double> thresholds{0.05, 0.25, 0.35, 0.50};
    double nms_iou = 0.5;
    ApOptions ap{};
};

int cmd_eval_map(const GlobalOptions& g, const EvalMapOptions& o, std::ostream& log);

// ---- classification ----

struct MemberSpec {
    CnnConfig cnn;
    std::uint64_t init_seed = 0;
    std::uint64_t train_seed = 0;
};

/// Seed variants and two width variants (8/16, 12/24), cycling.
std::vector<MemberSpec> ensemble_members(std::size_t count, std::uint64_t seed, const CnnConfig& base = {});

struct TrainOptions {
    std::filesystem::path data;
    std::size_t members = 3;
    std::optional<int> epochs;
    std::optional<Balance> balance;
    std::optional<LossKind> loss;
};

/// Trains the ensemble, writes models/member_<k>.cnn, train_report.json and pipeline.json.
int cmd_train(const GlobalOptions& g, const TrainOptions& o, std::ostream& log);

TrainConfig train_config_from_json(const nlohmann::json& j);

struct ClassifyOptions {
    std::filesystem::path data;
    Split split = Split::Test;
    std::vector<std::filesystem::path> models;  // falls back to the config's classifiers
};

/// Writes predictions.json with the ensemble vote and every member's posterior.
int cmd_classify(const GlobalOptions& g, const ClassifyOptions& o, std::ostream& log);

struct ReportOptions {
    std::filesystem::path predictions;
};

/// Confusion matrix and classification report (JSON + aligned text) from predictions.json.
int cmd_report(const GlobalOptions& g, const ReportOptions& o, std::ostream& log);

// ---- embedding ----

struct EmbedOptions {
    std::filesystem::path data;
    Split split = Split::Test;
    std::vector<std::filesystem::path> models;
};

/// Concatenated hidden-layer activations of every member: embeddings.csv and labels.csv.
int cmd_embed(const GlobalOptions& g, const EmbedOptions& o, std::ostream& log);

struct TsneOptions {
    std::filesystem::path embeddings;
    std::filesystem::path labels;  // optional id,label CSV
    std::optional<double> perplexity;
    std::optional<int> iterations;
};

int cmd_tsne(const GlobalOptions& g, const TsneOptions& o, std::ostream& log);

// ---- end to end ----

struct RunOptions {
    std::filesystem::path input;  // directory of PNG tiles or synthetic dataset directory
    Split split = Split::Test;
    std::filesystem::path ground_truth;  // optional; dataset directories supply their own
    std::vector<std::filesystem::path> models;
};

/// Full pipeline over every tile. Returns 2 when any tile failed.
int cmd_run(const GlobalOptions& g, const RunOptions& o, std::ostream& log);

PipelineConfig resolve_pipeline_config(const GlobalOptions& g, const std::vector<std::filesystem::path>& models);

struct ImportViaOptions {
    std::filesystem::path input;
    std::string label_attribute = "cell_type";
};

/// Writes gt/<image stem>.json (boxes, with labels when present) and points/<image stem>.json.
int cmd_import_via(const GlobalOptions& g, const ImportViaOptions& o, std::ostream& log);

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

}  // namespace cellpheno
