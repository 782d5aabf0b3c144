#include "cellpheno/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "cellpheno/rng.hpp"

namespace cellpheno {

namespace {
constexpr double kPi = 3.14159265358979323846;
constexpr int kSubsamples = 4;  // per axis
}  // namespace

std::array<ClassStyle, kNumClasses> SynthSpec::default_styles() {
    std::array<ClassStyle, kNumClasses> s{};
    s[index_of(CellType::CYT)] = {{100, 30, 120}, 10, 10.0, 12.0, 0.85, 1.0};
    // elongated: fixed minor-axis band instead of a ratio
    s[index_of(CellType::FIB)] = {{60, 60, 150}, 10, 12.5, 14.0, 0.0, 0.0, 7.5, 8.5};
    s[index_of(CellType::HOF)] = {{90, 60, 40}, 10, 10.5, 12.5, 0.85, 1.0};
    s[index_of(CellType::SYN)] = {{60, 30, 60}, 10, 9.5, 11.5, 0.8, 0.95};
    s[index_of(CellType::VAS)] = {{40, 120, 110}, 10, 10.0, 12.0, 0.7, 0.85};
    return s;
}

double SynthSpec::max_semi_axis() const {
    double m = 0.0;
    for (const auto& s : styles) m = std::max(m, s.major_max);
    return m;
}

void SynthSpec::validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("synthetic tile dimensions must be positive");
    if (count_min < 0 || count_max < count_min) throw std::invalid_argument("invalid nuclei count range");
    if (noise < 0) throw std::invalid_argument("noise amplitude must be non-negative");
    normalize_mix(class_mix);
    for (const auto& s : styles) {
        if (!(s.major_min > 0) || s.major_max < s.major_min) throw std::invalid_argument("invalid major-axis range");
        if (s.minor_min > 0) {
            if (s.minor_max < s.minor_min || s.minor_max > s.major_min)
                throw std::invalid_argument("invalid minor-axis range");
        } else if (!(s.minor_ratio_min > 0) || s.minor_ratio_max < s.minor_ratio_min || s.minor_ratio_max > 1.0) {
            throw std::invalid_argument("invalid minor-axis ratio range");
        }
    }
    if (!(min_separation > max_semi_axis())) throw std::invalid_argument("min separation must exceed max ellipse diameter / 2");
    const double margin = max_semi_axis() + 2.0;
    if (count_max > 0 && (width <= 2 * margin || height <= 2 * margin))
        throw std::invalid_argument("tile too small for the nucleus size");
    for (int a = 0; a < kNumClasses; ++a)
        for (int b = a + 1; b < kNumClasses; ++b) {
            const auto& ca = styles[a].colour;
            const auto& cb = styles[b].colour;
            const int band = styles[a].colour_jitter + styles[b].colour_jitter;
            bool disjoint = false;
            for (int k = 0; k < 3; ++k) disjoint |= std::abs(int(ca[k]) - int(cb[k])) > band;
            if (!disjoint) throw std::invalid_argument("class colour bands overlap");
        }
}

std::array<double, kNumClasses> normalize_mix(const std::array<double, kNumClasses>& mix) {
    double sum = 0.0;
    for (double m : mix) {
        if (!(m >= 0)) throw std::invalid_argument("class mix entries must be non-negative");
        sum += m;
    }
    if (std::abs(sum - 1.0) > kMixTolerance)
        throw std::invalid_argument("class mix must sum to 1 (got " + std::to_string(sum) + ")");
    auto out = mix;
    for (auto& m : out) m /= sum;
    return out;
}

nlohmann::json to_json(const SynthSpec& spec) {
    nlohmann::json j;
    j["width"] = spec.width;
    j["height"] = spec.height;
    j["count_min"] = spec.count_min;
    j["count_max"] = spec.count_max;
    j["min_separation"] = spec.min_separation;
    j["background"] = spec.background;
    j["noise"] = spec.noise;
    j["class_mix"] = spec.class_mix;
    auto styles = nlohmann::json::array();
    for (const auto& s : spec.styles)
        styles.push_back({{"colour", s.colour},
                          {"colour_jitter", s.colour_jitter},
                          {"major", {s.major_min, s.major_max}},
                          {"minor_ratio", {s.minor_ratio_min, s.minor_ratio_max}},
                          {"minor", {s.minor_min, s.minor_max}}});
    j["styles"] = styles;
    return j;
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
    SynthSpec s;
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.count_min = j.value("count_min", s.count_min);
    s.count_max = j.value("count_max", s.count_max);
    s.min_separation = j.value("min_separation", s.min_separation);
    s.background = j.value("background", s.background);
    s.noise = j.value("noise", s.noise);
    s.class_mix = j.value("class_mix", s.class_mix);
    if (j.contains("styles")) {
        const auto& arr = j.at("styles");
        if (!arr.is_array() || arr.size() != kNumClasses) throw std::invalid_argument("styles must list 5 classes");
        for (int c = 0; c < kNumClasses; ++c) {
            const auto& e = arr[c];
            auto& st = s.styles[c];
            st.colour = e.at("colour").get<Rgb>();
            st.colour_jitter = e.value("colour_jitter", st.colour_jitter);
            st.major_min = e.at("major")[0];
            st.major_max = e.at("major")[1];
            st.minor_ratio_min = e.at("minor_ratio")[0];
            st.minor_ratio_max = e.at("minor_ratio")[1];
            st.minor_min = e.at("minor")[0];
            st.minor_max = e.at("minor")[1];
        }
    }
    s.validate();
    return s;
}

BBox SynthNucleus::bounds() const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double hx = std::sqrt(major * major * c * c + minor * minor * s * s);
    const double hy = std::sqrt(major * major * s * s + minor * minor * c * c);
    return BBox::centered(cx, cy, hx, hy);
}

namespace {

CellType sample_class(Rng& rng, const std::array<double, kNumClasses>& mix) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        acc += mix[c];
        if (u < acc) return cell_type_from_index(c);
    }
    for (int c = kNumClasses - 1; c >= 0; --c)
        if (mix[c] > 0) return cell_type_from_index(c);
    return CellType::CYT;
}

int count_for(const SynthSpec& spec, Rng& rng) {
    return spec.count_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.count_max - spec.count_min + 1)));
}

void render_nucleus(Image& img, const SynthNucleus& n, Rgb colour) {
    const BBox b = n.bounds();
    const int x0 = std::max(0, static_cast<int>(std::floor(b.x_min)));
    const int y0 = std::max(0, static_cast<int>(std::floor(b.y_min)));
    const int x1 = std::min(img.width(), static_cast<int>(std::ceil(b.x_max)));
    const int y1 = std::min(img.height(), static_cast<int>(std::ceil(b.y_max)));
    const double c = std::cos(n.angle), s = std::sin(n.angle);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            double alpha = 0.0;
            for (int sy = 0; sy < kSubsamples; ++sy)
                for (int sx = 0; sx < kSubsamples; ++sx) {
                    const double px = x + (sx + 0.5) / kSubsamples - n.cx;
                    const double py = y + (sy + 0.5) / kSubsamples - n.cy;
                    const double u = (px * c + py * s) / n.major;
                    const double v = (-px * s + py * c) / n.minor;
                    const double rho2 = u * u + v * v;
                    // haematoxylin-dense centre fading toward the membrane
                    if (rho2 <= 1.0) alpha += std::exp(-1.5 * rho2);
                }
            alpha /= kSubsamples * kSubsamples;
            if (alpha <= 0.0) continue;
            auto* p = img.pixel(x, y);
            for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>(std::lround(p[k] * (1 - alpha) + colour[k] * alpha));
        }
}

}  // namespace

SynthTile generate_tile(const SynthSpec& spec, std::uint64_t seed, const std::optional<std::vector<CellType>>& classes) {
    spec.validate();
    Rng rng(seed);
    const int requested = classes ? static_cast<int>(classes->size()) : count_for(spec, rng);
    SynthTile tile;
    tile.image = Image(spec.width, spec.height, spec.background);

    const double margin = spec.max_semi_axis() + 2.0;
    const int max_attempts = 10 * requested;
    int attempts = 0;
    while (static_cast<int>(tile.nuclei.size()) < requested) {
        if (attempts++ >= max_attempts)
            throw std::runtime_error("could not place " + std::to_string(requested) + " nuclei with separation " +
                                     std::to_string(spec.min_separation) + " in " + std::to_string(max_attempts) +
                                     " attempts; lower the density");
        const double cx = rng.uniform(margin, spec.width - margin);
        const double cy = rng.uniform(margin, spec.height - margin);
        bool ok = true;
        for (const auto& n : tile.nuclei)
            if (std::hypot(n.cx - cx, n.cy - cy) < spec.min_separation) {
                ok = false;
                break;
            }
        if (!ok) continue;
        SynthNucleus n;
        n.cx = cx;
        n.cy = cy;
        n.label = classes ? (*classes)[tile.nuclei.size()] : sample_class(rng, spec.class_mix);
        const auto& st = spec.styles[index_of(n.label)];
        n.major = rng.uniform(st.major_min, st.major_max);
        n.minor = st.minor_min > 0 ? rng.uniform(st.minor_min, st.minor_max)
                                   : n.major * rng.uniform(st.minor_ratio_min, st.minor_ratio_max);
        n.angle = rng.uniform(0.0, kPi);
        tile.nuclei.push_back(n);
    }

    for (const auto& n : tile.nuclei) {
        const auto& st = spec.styles[index_of(n.label)];
        Rgb colour;
        for (int k = 0; k < 3; ++k)
            colour[k] = static_cast<std::uint8_t>(std::clamp(
                int(st.colour[k]) + int(rng.below(2 * st.colour_jitter + 1)) - st.colour_jitter, 0, 255));
        render_nucleus(tile.image, n, colour);
        tile.gt_boxes.push_back(n.bounds());
        tile.gt_labels.push_back(n.label);
        tile.gt_centers.emplace_back(n.cx, n.cy);
    }
    if (spec.noise > 0) {
        const auto span = static_cast<std::uint64_t>(2 * spec.noise + 1);
        for (auto& b : tile.image.bytes())
            b = static_cast<std::uint8_t>(std::clamp(int(b) + int(rng.below(span)) - spec.noise, 0, 255));
    }
    return tile;
}

std::string_view to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "train";
}

Split parse_split(std::string_view s) {
    for (auto v : {Split::Train, Split::Validation, Split::Test})
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown split '" + std::string(s) + "'");
}

SynthTile SynthDataset::render(std::size_t tile) const { return generate_tile(spec, tile_seeds.at(tile), tile_classes.at(tile)); }

std::vector<std::size_t> SynthDataset::tiles_in(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < tile_split.size(); ++i)
        if (tile_split[i] == s) out.push_back(i);
    return out;
}

SynthDataset generate_dataset(const SynthSpec& spec_in, std::size_t n_tiles, const std::array<double, kNumClasses>& mix,
                              std::uint64_t seed, const SplitFractions& fractions) {
    SynthSpec spec = spec_in;
    spec.class_mix = normalize_mix(mix);
    spec.validate();
    if (fractions.train < 0 || fractions.validation < 0 || fractions.train + fractions.validation > 1.0)
        throw std::invalid_argument("invalid split fractions");

    SynthDataset ds;
    ds.spec = spec;
    ds.seed = seed;
    Rng rng(derive_seed(seed, 0));
    std::vector<int> counts(n_tiles);
    for (auto& c : counts) c = count_for(spec, rng);

    std::array<double, kNumClasses> assigned{};
    double total = 0.0;
    for (std::size_t t = 0; t < n_tiles; ++t) {
        std::vector<CellType> classes;
        for (int k = 0; k < counts[t]; ++k) {
            total += 1.0;
            int best = -1;
            double best_deficit = 0.0;
            for (int c = 0; c < kNumClasses; ++c) {
                if (spec.class_mix[c] <= 0) continue;
                const double deficit = spec.class_mix[c] * total - assigned[c];
                if (best < 0 || deficit > best_deficit + 1e-12) {
                    best = c;
                    best_deficit = deficit;
                }
            }
            assigned[best] += 1.0;
            classes.push_back(cell_type_from_index(best));
        }
        rng.shuffle(classes.begin(), classes.end());
        ds.tile_classes.push_back(std::move(classes));
        ds.tile_seeds.push_back(derive_seed(seed, 1 + t));
    }

    std::vector<std::size_t> order(n_tiles);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    const auto n_train = static_cast<std::size_t>(std::lround(fractions.train * static_cast<double>(n_tiles)));
    const auto n_val = static_cast<std::size_t>(std::lround(fractions.validation * static_cast<double>(n_tiles)));
    ds.tile_split.assign(n_tiles, Split::Test);
    for (std::size_t k = 0; k < n_tiles; ++k)
        ds.tile_split[order[k]] = k < n_train ? Split::Train : (k < n_train + n_val ? Split::Validation : Split::Test);

    for (std::size_t t = 0; t < n_tiles; ++t)
        for (std::size_t k = 0; k < ds.tile_classes[t].size(); ++k) {
            char id[32];
            std::snprintf(id, sizeof id, "t%04zu_n%02zu", t, k);
            ds.patches.push_back({t, k, ds.tile_classes[t][k], id});
        }
    return ds;
}

LabeledPatch extract_labeled_patch(const SynthTile& tile, const PatchRef& ref, int side) {
    const auto& n = tile.nuclei.at(ref.nucleus);
    return {extract_patch(tile.image, static_cast<int>(std::floor(n.cx)), static_cast<int>(std::floor(n.cy)), side),
            n.label, ref.id};
}

nlohmann::json gt_to_json(const std::vector<BBox>& boxes, const std::vector<CellType>& labels) {
    auto arr = boxes_to_json(boxes);
    for (std::size_t i = 0; i < labels.size() && i < arr.size(); ++i) arr[i]["label"] = std::string(to_string(labels[i]));
    return arr;
}

void gt_from_json(const nlohmann::json& j, std::vector<BBox>& boxes, std::vector<std::optional<CellType>>& labels) {
    boxes = boxes_from_json(j);
    labels.clear();
    for (const auto& e : j) {
        if (!e.contains("label")) {
            labels.push_back(std::nullopt);
            continue;
        }
        const auto name = e.at("label").get<std::string>();
        auto t = parse_cell_type(name);
        if (!t) throw std::invalid_argument("unknown cell type '" + name + "' in ground truth");
        labels.push_back(t);
    }
}

}  // namespace cellpheno
