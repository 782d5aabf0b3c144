#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellpheno/cell_type.hpp"
#include "cellpheno/classify.hpp"
#include "cellpheno/detect.hpp"
#include "cellpheno/image.hpp"
#include "cellpheno/stain.hpp"

namespace cellpheno {

enum class DetectorKind { Dog, Replay };

std::string_view to_string(DetectorKind k);
DetectorKind parse_detector_kind(std::string_view s);

struct PipelineConfig {
    std::array<double, 9> stain_matrix{};  // row-major; all zeros selects the default matrix
    DetectorKind detector = DetectorKind::Dog;
    DogParams dog{};
    std::filesystem::path replay_detections;  // directory of <tile id>.json
    std::vector<std::filesystem::path> classifiers;
    bool ensemble = true;
    MatchConfig match{};
    int patch_side = 200;
    double edge_padding = 0.5;  // detections whose patch is more padding than this are flagged
    std::filesystem::path output_dir = "out";
    std::uint64_t seed = 0;
    int jobs = 1;
    bool write_overlays = true;

    StainMatrix stain() const;
    /// Throws if a value is out of range or a referenced file does not exist.
    void validate() const;
};

/// Relative paths are resolved against base_dir.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// Full config; output_dir and jobs are omitted when `reproducible_only` is set.
nlohmann::json to_json(const PipelineConfig& cfg, bool reproducible_only = false);

inline constexpr std::array<Rgb, kNumClasses> kOverlayPalette{{
    {230, 25, 25},   // CYT red
    {20, 170, 40},   // FIB green
    {30, 70, 230},   // HOF blue
    {255, 150, 0},   // SYN orange
    {140, 40, 170},  // VAS purple
}};

struct CellCall {
    Detection detection;
    CellType label = CellType::CYT;
    double confidence = 0.0;
    std::size_t member = 0;
    bool edge = false;
    std::optional<CellType> truth;  // label of the matched ground-truth nucleus, when known
};

struct TileGroundTruth {
    std::vector<BBox> boxes;
    std::vector<std::optional<CellType>> labels;
};

struct TileEvaluation {
    std::size_t gt_count = 0;
    std::size_t matched = 0;
    std::size_t labelled = 0;  // matched detections whose GT carries a label
    std::size_t label_correct = 0;
};

struct TileReport {
    std::string tile_id;
    TileOffset offset;
    std::uint64_t seed = 0;
    std::vector<CellCall> cells;
    std::array<long long, kNumClasses> counts{};
    std::array<double, kNumClasses> percentages{};  // all zero when there are no detections
    long long edge_count = 0;
    std::optional<TileEvaluation> evaluation;
};

/// Class percentages of all calls, summing to 100 when non-empty.
std::array<double, kNumClasses> population_percentages(const std::array<long long, kNumClasses>& counts);
/// "6%" or "6.5%".
std::string format_percentage(double pct);

nlohmann::json to_json(const TileReport& r);
TileReport tile_report_from_json(const nlohmann::json& j);
/// One line per class, e.g. "HOF: 6%".
std::string population_summary(const TileReport& r);

struct TileResult {
    TileReport report;
    Image overlay;
};

struct TileInput {
    std::string id;
    TileOffset offset;
    std::function<Image()> load;
    std::optional<TileGroundTruth> ground_truth;
};

struct TileOutcome {
    std::string tile_id;
    bool ok = false;
    std::string error;
    std::string report_path;   // relative to the output directory
    std::string overlay_path;  // empty when overlays are disabled
    long long detections = 0;
};

struct RunManifest {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::vector<TileOutcome> tiles;
    std::array<long long, kNumClasses> counts{};
    std::array<double, kNumClasses> percentages{};
    long long total = 0;
    long long edge_count = 0;
    std::size_t failed = 0;
    std::optional<double> pooled_ap;        // when ground truth was supplied
    std::optional<double> label_accuracy;   // matched detections with labelled GT
    std::optional<TileEvaluation> evaluation;
    int jobs = 1;
    double wall_seconds = 0.0;
};

/// "runtime" holds jobs and wall time; everything else is reproducible.
nlohmann::json to_json(const RunManifest& m);
/// Manifest JSON without the "runtime" member, for reproducibility comparisons.
nlohmann::json reproducible_view(nlohmann::json manifest);

/// Tile seed derived from the global seed and the tile's position in the run.
std::uint64_t tile_seed(std::uint64_t global_seed, std::size_t tile_index);

class Pipeline {
public:
    /// Loads the stain matrix and every classifier; throws before any tile is processed.
    explicit Pipeline(PipelineConfig cfg);

    const PipelineConfig& config() const { return cfg_; }
    std::size_t member_count() const { return backends_.size(); }

    std::vector<Detection> detect(const Image& tile, const std::string& tile_id) const;
    TileResult run_tile(const Image& tile, const std::string& tile_id, const TileOffset& offset = {},
                        std::uint64_t seed = 0, const std::optional<TileGroundTruth>& truth = std::nullopt) const;

    /// Processes tiles independently on cfg.jobs threads, writes reports/overlays/manifest under
    /// cfg.output_dir, and keeps going past failing tiles.
    RunManifest run_dataset(const std::vector<TileInput>& tiles) const;

private:
    PipelineConfig cfg_;
    StainMatrix stain_;
    std::vector<std::unique_ptr<ClassifierBackend>> backends_;
};

Image draw_overlay(const Image& tile, const std::vector<CellCall>& cells);

void write_json(const nlohmann::json& j, const std::filesystem::path& path);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace cellpheno
