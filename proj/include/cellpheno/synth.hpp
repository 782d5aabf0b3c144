#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellpheno/cell_type.hpp"
#include "cellpheno/classify.hpp"
#include "cellpheno/detect.hpp"
#include "cellpheno/image.hpp"

namespace cellpheno {

/// Rendering style of one synthetic cell class. Semi-axes are in pixels.
struct ClassStyle {
    Rgb colour{};
    int colour_jitter = 10;
    double major_min = 10.0, major_max = 12.0;
    double minor_ratio_min = 0.85, minor_ratio_max = 1.0;  // minor = major * ratio, unless minor_min > 0
    double minor_min = 0.0, minor_max = 0.0;
};

struct SynthSpec {
    int width = 1600;
    int height = 1200;
    int count_min = 20;
    int count_max = 30;
    double min_separation = 150.0;
    Rgb background{236, 214, 226};
    int noise = 4;
    std::array<double, kNumClasses> class_mix{0.2, 0.2, 0.2, 0.2, 0.2};
    std::array<ClassStyle, kNumClasses> styles = default_styles();

    static std::array<ClassStyle, kNumClasses> default_styles();
    double max_semi_axis() const;
    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
};

/// Mixes given as rounded percentages may miss 1 by up to this much; they are renormalised.
inline constexpr double kMixTolerance = 0.02;
std::array<double, kNumClasses> normalize_mix(const std::array<double, kNumClasses>& mix);

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

struct SynthNucleus {
    double cx = 0, cy = 0;
    double major = 0, minor = 0, angle = 0;
    CellType label = CellType::CYT;

    /// Tight analytic bound of the rotated ellipse.
    BBox bounds() const;
};

struct SynthTile {
    Image image;
    std::vector<SynthNucleus> nuclei;
    std::vector<BBox> gt_boxes;
    std::vector<CellType> gt_labels;
    std::vector<std::pair<double, double>> gt_centers;
};

/// Poisson-disk placement by rejection sampling; classes drawn from spec.class_mix unless given.
SynthTile generate_tile(const SynthSpec& spec, std::uint64_t seed,
                        const std::optional<std::vector<CellType>>& classes = std::nullopt);

enum class Split { Train, Validation, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view s);

struct SplitFractions {
    double train = 0.7;
    double validation = 0.15;
};

struct PatchRef {
    std::size_t tile = 0;
    std::size_t nucleus = 0;
    CellType label = CellType::CYT;
    std::string id;
};

/// Everything needed to render a synthetic dataset tile by tile.
struct SynthDataset {
    SynthSpec spec;
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> tile_seeds;
    std::vector<std::vector<CellType>> tile_classes;
    std::vector<Split> tile_split;
    std::vector<PatchRef> patches;

    SynthTile render(std::size_t tile) const;
    std::vector<std::size_t> tiles_in(Split s) const;
};

/// Class labels are assigned by largest remaining deficit over the whole dataset, so per-class
/// totals track class_mix to within one nucleus; splits partition tiles.
SynthDataset generate_dataset(const SynthSpec& spec, std::size_t n_tiles, const std::array<double, kNumClasses>& mix,
                              std::uint64_t seed, const SplitFractions& fractions = {});

LabeledPatch extract_labeled_patch(const SynthTile& tile, const PatchRef& ref, int side);

/// Ground-truth JSON: detection schema without score, plus a "label" field.
nlohmann::json gt_to_json(const std::vector<BBox>& boxes, const std::vector<CellType>& labels);
void gt_from_json(const nlohmann::json& j, std::vector<BBox>& boxes, std::vector<std::optional<CellType>>& labels);

}  // namespace cellpheno
