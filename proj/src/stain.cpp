#include "cellpheno/stain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cellpheno/rng.hpp"

namespace cellpheno {

namespace {

const std::array<double, 256>& od_table() {
    static const std::array<double, 256> table = [] {
        std::array<double, 256> t{};
        for (int v = 0; v < 256; ++v) t[v] = -std::log10((v + 1) / 256.0);
        return t;
    }();
    return table;
}

double det3(const Mat3& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

double frobenius(const Mat3& m) {
    double s = 0;
    for (const auto& r : m)
        for (double v : r) s += v * v;
    return std::sqrt(s);
}

// row vector times matrix
Vec3 mul(const Vec3& v, const Mat3& m) {
    return {v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0], v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
            v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2]};
}

}  // namespace

StainMatrix::StainMatrix() : StainMatrix(Mat3{Vec3{0.650, 0.704, 0.286}, Vec3{0.072, 0.990, 0.105},
                                              Vec3{0.268, 0.570, 0.776}}) {}

StainMatrix::StainMatrix(const Mat3& rows) {
    for (int r = 0; r < 3; ++r) {
        const double n = std::sqrt(rows[r][0] * rows[r][0] + rows[r][1] * rows[r][1] + rows[r][2] * rows[r][2]);
        if (!(n > 0) || !std::isfinite(n)) throw std::invalid_argument("stain matrix row has zero or non-finite norm");
        for (int c = 0; c < 3; ++c) rows_[r][c] = rows[r][c] / n;
    }
    const double det = det3(rows_);
    if (std::abs(det) < 1e-12) throw std::invalid_argument("stain matrix is singular");
    const auto& m = rows_;
    inverse_[0] = {(m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det, (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                   (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det};
    inverse_[1] = {(m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det, (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                   (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det};
    inverse_[2] = {(m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det, (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                   (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det};
    // Frobenius product bounds the 2-norm condition number from above.
    condition_ = frobenius(rows_) * frobenius(inverse_);
    if (!(condition_ < 1e6)) throw std::invalid_argument("stain matrix is ill-conditioned");
}

StainMatrix StainMatrix::from_row_major(std::span<const double> values) {
    if (values.size() != 9) throw std::invalid_argument("stain matrix needs exactly 9 values");
    Mat3 m{};
    for (int i = 0; i < 9; ++i) m[i / 3][i % 3] = values[i];
    return StainMatrix(m);
}

StainMatrix StainMatrix::load_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open stain matrix file " + path.string());
    const auto j = nlohmann::json::parse(in);
    if (!j.is_array()) throw std::invalid_argument("stain matrix JSON must be an array of 9 numbers");
    const auto values = j.get<std::vector<double>>();
    return from_row_major(values);
}

double optical_density(std::uint8_t value) { return od_table()[value]; }

double intensity_from_od(double od) { return 256.0 * std::pow(10.0, -od) - 1.0; }

HedImage rgb_to_hed(const Image& image, const StainMatrix& m) {
    HedImage hed;
    hed.width = image.width();
    hed.height = image.height();
    for (auto& p : hed.planes) p = Plane(image.width(), image.height());
    const auto& table = od_table();
    const auto& inv = m.inverse();
    const auto bytes = image.bytes();
    for (std::size_t i = 0; i < image.pixel_count(); ++i) {
        const Vec3 od{table[bytes[3 * i]], table[bytes[3 * i + 1]], table[bytes[3 * i + 2]]};
        const Vec3 c = mul(od, inv);
        for (int k = 0; k < 3; ++k) hed.planes[k].values[i] = c[k];
    }
    return hed;
}

Image hed_to_rgb(const HedImage& hed, const StainMatrix& m, bool clamp_negative) {
    Image out(hed.width, hed.height);
    auto bytes = out.bytes();
    const std::size_t n = static_cast<std::size_t>(hed.width) * hed.height;
    for (std::size_t i = 0; i < n; ++i) {
        Vec3 c{hed.planes[0].values[i], hed.planes[1].values[i], hed.planes[2].values[i]};
        if (clamp_negative)
            for (auto& v : c) v = std::max(v, 0.0);
        const Vec3 od = mul(c, m.rows());
        for (int k = 0; k < 3; ++k) {
            const double v = std::clamp(intensity_from_od(od[k]), 0.0, 255.0);
            bytes[3 * i + k] = static_cast<std::uint8_t>(std::lround(v));
        }
    }
    return out;
}

void StainTransformConfig::validate() const {
    if (!(scale_low > 0) || !(scale_low <= scale_high) || !std::isfinite(scale_high))
        throw std::invalid_argument("stain transform needs 0 < scale_low <= scale_high");
}

Image stain_scale(const Image& image, const Vec3& factors, const StainMatrix& m, bool clamp_negative) {
    HedImage hed = rgb_to_hed(image, m);
    for (int k = 0; k < 3; ++k)
        for (auto& v : hed.planes[k].values) v *= factors[k];
    return hed_to_rgb(hed, m, clamp_negative);
}

Image stain_transform(const Image& image, const StainTransformConfig& cfg, std::uint64_t seed, const StainMatrix& m) {
    cfg.validate();
    Rng rng(seed);
    Vec3 factors;
    factors[0] = rng.uniform(cfg.scale_low, cfg.scale_high);
    if (cfg.per_channel) {
        factors[1] = rng.uniform(cfg.scale_low, cfg.scale_high);
        factors[2] = rng.uniform(cfg.scale_low, cfg.scale_high);
    } else {
        factors[1] = factors[2] = factors[0];
    }
    return stain_scale(image, factors, m, cfg.clamp_negative);
}

Plane hematoxylin_concentration(const Image& image, const StainMatrix& m) {
    const auto& table = od_table();
    const auto& inv = m.inverse();
    const auto bytes = image.bytes();
    Plane h(image.width(), image.height());
    for (std::size_t i = 0; i < image.pixel_count(); ++i)
        h.values[i] = table[bytes[3 * i]] * inv[0][0] + table[bytes[3 * i + 1]] * inv[1][0] +
                      table[bytes[3 * i + 2]] * inv[2][0];
    return h;
}

Plane hematoxylin_channel(const Image& image, const StainMatrix& m) {
    Plane h = hematoxylin_concentration(image, m);
    if (h.values.empty()) return h;
    const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
    const double low = *lo, range = *hi - *lo;
    if (!(range > 0)) {
        std::fill(h.values.begin(), h.values.end(), 0.0);
        return h;
    }
    for (auto& v : h.values) v = (v - low) / range;
    return h;
}

double mean_optical_density(const Image& image) {
    const auto& table = od_table();
    double s = 0;
    for (auto b : image.bytes()) s += table[b];
    return image.empty() ? 0.0 : s / static_cast<double>(image.bytes().size());
}

}  // namespace cellpheno
