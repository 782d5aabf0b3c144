#include "cellpheno/via.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace cellpheno {

namespace {

using ojson = nlohmann::ordered_json;

std::size_t line_at(std::string_view text, std::size_t pos) {
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + std::min(pos, text.size()), '\n'));
}

// Best-effort source line of a region: the n-th "shape_attributes" after the image key.
std::size_t region_line(std::string_view text, const std::string& key, std::size_t region) {
    const std::string quoted = ojson(key).dump();
    std::size_t pos = text.find(quoted);
    if (pos == std::string_view::npos) return 0;
    for (std::size_t k = 0; k <= region; ++k) {
        const auto next = text.find("\"shape_attributes\"", pos + 1);
        if (next == std::string_view::npos) return line_at(text, pos);
        pos = next;
    }
    return line_at(text, pos);
}

[[noreturn]] void fail(std::string_view text, const std::string& key, std::size_t region, const std::string& what) {
    std::ostringstream os;
    os << "VIA annotations, image '" << key << "', region " << region;
    if (auto line = region_line(text, key, region)) os << " (near line " << line << ")";
    os << ": " << what;
    throw std::invalid_argument(os.str());
}

double number(const ojson& shape, const char* field, std::string_view text, const std::string& key, std::size_t r) {
    if (!shape.contains(field) || !shape.at(field).is_number())
        fail(text, key, r, std::string("missing numeric '") + field + "'");
    return shape.at(field).get<double>();
}

std::vector<double> numbers(const ojson& shape, const char* field, std::string_view text, const std::string& key,
                            std::size_t r) {
    if (!shape.contains(field) || !shape.at(field).is_array() || shape.at(field).empty())
        fail(text, key, r, std::string("missing array '") + field + "'");
    std::vector<double> out;
    for (const auto& v : shape.at(field)) {
        if (!v.is_number()) fail(text, key, r, std::string("non-numeric entry in '") + field + "'");
        out.push_back(v.get<double>());
    }
    return out;
}

std::optional<CellType> region_label(const ojson& region, const ViaOptions& options, std::string_view text,
                                     const std::string& key, std::size_t r) {
    if (!region.contains("region_attributes")) return std::nullopt;
    const auto& attrs = region.at("region_attributes");
    if (!attrs.is_object() || !attrs.contains(options.label_attribute)) return std::nullopt;
    const auto& v = attrs.at(options.label_attribute);
    if (!v.is_string()) fail(text, key, r, "label attribute '" + options.label_attribute + "' is not a string");
    const auto name = v.get<std::string>();
    auto t = parse_cell_type(name);
    if (!t) fail(text, key, r, "unknown cell type '" + name + "' (expected CYT, FIB, HOF, SYN or VAS)");
    return t;
}

void parse_region(const ojson& region, std::size_t r, const ViaOptions& options, std::string_view text, ViaImage& img) {
    const auto& key = img.key;
    if (!region.is_object() || !region.contains("shape_attributes") || !region.at("shape_attributes").is_object())
        fail(text, key, r, "region has no shape_attributes object");
    const auto& shape = region.at("shape_attributes");
    if (!shape.contains("name") || !shape.at("name").is_string()) fail(text, key, r, "shape has no name");
    const auto name = shape.at("name").get<std::string>();
    const auto label = region_label(region, options, text, key, r);

    auto add_box = [&](BBox b) {
        if (!b.valid()) fail(text, key, r, "degenerate " + name + " region");
        img.boxes.push_back(b);
        img.box_labels.push_back(label);
    };
    if (name == "rect") {
        add_box(BBox::from_xywh(number(shape, "x", text, key, r), number(shape, "y", text, key, r),
                                number(shape, "width", text, key, r), number(shape, "height", text, key, r)));
    } else if (name == "circle") {
        const double rad = number(shape, "r", text, key, r);
        add_box(BBox::centered(number(shape, "cx", text, key, r), number(shape, "cy", text, key, r), rad, rad));
    } else if (name == "ellipse") {
        // VIA 2 stores an axis-aligned ellipse unless "theta" is present
        const double rx = number(shape, "rx", text, key, r), ry = number(shape, "ry", text, key, r);
        const double theta = shape.contains("theta") ? number(shape, "theta", text, key, r) : 0.0;
        const double c = std::cos(theta), s = std::sin(theta);
        add_box(BBox::centered(number(shape, "cx", text, key, r), number(shape, "cy", text, key, r),
                               std::sqrt(rx * rx * c * c + ry * ry * s * s), std::sqrt(rx * rx * s * s + ry * ry * c * c)));
    } else if (name == "polygon" || name == "polyline") {
        const auto xs = numbers(shape, "all_points_x", text, key, r);
        const auto ys = numbers(shape, "all_points_y", text, key, r);
        if (xs.size() != ys.size()) fail(text, key, r, "polygon coordinate arrays differ in length");
        add_box({*std::min_element(xs.begin(), xs.end()), *std::min_element(ys.begin(), ys.end()),
                 *std::max_element(xs.begin(), xs.end()), *std::max_element(ys.begin(), ys.end())});
    } else if (name == "point") {
        if (!label) fail(text, key, r, "point region has no '" + options.label_attribute + "' label");
        img.points.push_back({number(shape, "cx", text, key, r), number(shape, "cy", text, key, r), *label});
    } else {
        fail(text, key, r, "unknown shape type '" + name + "'");
    }
}

}  // namespace

std::vector<ViaImage> parse_via(std::string_view text, const ViaOptions& options) {
    ojson root;
    try {
        root = ojson::parse(text);
    } catch (const ojson::parse_error& e) {
        throw std::invalid_argument(std::string("malformed VIA JSON: ") + e.what());
    }
    if (root.is_object() && root.contains("_via_img_metadata")) root = root.at("_via_img_metadata");
    if (!root.is_object()) throw std::invalid_argument("VIA annotations must be a JSON object keyed by image");

    std::vector<ViaImage> images;
    for (const auto& [key, entry] : root.items()) {
        ViaImage img;
        img.key = key;
        if (!entry.is_object()) throw std::invalid_argument("VIA annotations, image '" + key + "': entry is not an object");
        img.filename = entry.contains("filename") && entry.at("filename").is_string()
                           ? entry.at("filename").get<std::string>()
                           : key;
        if (entry.contains("size") && entry.at("size").is_number_integer()) img.size = entry.at("size").get<long long>();
        if (entry.contains("regions")) {
            const auto& regions = entry.at("regions");
            if (regions.is_array()) {
                for (std::size_t r = 0; r < regions.size(); ++r) parse_region(regions[r], r, options, text, img);
            } else if (regions.is_object()) {
                std::size_t r = 0;
                for (const auto& [_, region] : regions.items()) parse_region(region, r++, options, text, img);
            } else {
                throw std::invalid_argument("VIA annotations, image '" + key + "': regions must be a list or object");
            }
        }
        images.push_back(std::move(img));
    }
    return images;
}

std::vector<ViaImage> import_via_annotations(const std::filesystem::path& path, const ViaOptions& options) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open VIA file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_via(ss.str(), options);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

std::string export_via(const std::vector<ViaImage>& images, const ViaOptions& options) {
    ojson root = ojson::object();
    for (const auto& img : images) {
        ojson regions = ojson::array();
        for (std::size_t i = 0; i < img.boxes.size(); ++i) {
            const auto& b = img.boxes[i];
            ojson attrs = ojson::object();
            if (i < img.box_labels.size() && img.box_labels[i])
                attrs[options.label_attribute] = std::string(to_string(*img.box_labels[i]));
            regions.push_back({{"shape_attributes",
                                {{"name", "rect"}, {"x", b.x_min}, {"y", b.y_min}, {"width", b.width()}, {"height", b.height()}}},
                               {"region_attributes", attrs}});
        }
        for (const auto& p : img.points)
            regions.push_back({{"shape_attributes", {{"name", "point"}, {"cx", p.x}, {"cy", p.y}}},
                               {"region_attributes", {{options.label_attribute, std::string(to_string(p.label))}}}});
        ojson entry = {{"filename", img.filename}, {"size", img.size}, {"regions", regions}, {"file_attributes", ojson::object()}};
        root[img.key.empty() ? img.filename : img.key] = entry;
    }
    return root.dump(2);
}

}  // namespace cellpheno
