#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cellpheno/cell_type.hpp"
#include "cellpheno/detect.hpp"

namespace cellpheno {

struct LabeledPoint {
    double x = 0, y = 0;
    CellType label = CellType::CYT;
    friend bool operator==(const LabeledPoint&, const LabeledPoint&) = default;
};

struct ViaImage {
    std::string key;  // top-level object key, usually filename + size
    std::string filename;
    long long size = -1;
    std::vector<BBox> boxes;
    std::vector<std::optional<CellType>> box_labels;
    std::vector<LabeledPoint> points;
    friend bool operator==(const ViaImage&, const ViaImage&) = default;
};

struct ViaOptions {
    std::string label_attribute = "cell_type";
};

/// Parses VIA 1.x/2.x region JSON, or a VIA project with an "_via_img_metadata" member.
/// rect, circle, ellipse and polygon regions become boxes; point regions need a label.
std::vector<ViaImage> parse_via(std::string_view text, const ViaOptions& options = {});
std::vector<ViaImage> import_via_annotations(const std::filesystem::path& path, const ViaOptions& options = {});

std::string export_via(const std::vector<ViaImage>& images, const ViaOptions& options = {});

}  // namespace cellpheno
