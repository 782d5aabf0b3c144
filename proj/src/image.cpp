#include "cellpheno/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>

#include "cellpheno/rng.hpp"

namespace cellpheno {

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
    if (width < 0 || height < 0) throw std::invalid_argument("negative image dimensions");
    data_.resize(3 * static_cast<std::size_t>(width) * height);
    for (std::size_t i = 0; i < data_.size(); i += 3) {
        data_[i] = fill[0];
        data_[i + 1] = fill[1];
        data_[i + 2] = fill[2];
    }
}

double Plane::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }

Image load_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.c_str()))
        throw std::runtime_error("cannot read PNG " + path.string() + ": " + png.message);
    png.format = PNG_FORMAT_RGB;
    Image image(static_cast<int>(png.width), static_cast<int>(png.height));
    if (!png_image_finish_read(&png, nullptr, image.bytes().data(), 0, nullptr)) {
        std::string msg = png.message;
        png_image_free(&png);
        throw std::runtime_error("cannot decode PNG " + path.string() + ": " + msg);
    }
    return image;
}

void save_png(const Image& image, const std::filesystem::path& path) {
    if (image.empty()) throw std::invalid_argument("cannot write empty image " + path.string());
    png_image png;
    std::memset(&png, 0, sizeof png);
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(image.width());
    png.height = static_cast<png_uint_32>(image.height());
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.c_str(), 0, image.bytes().data(), 0, nullptr))
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + png.message);
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

double luma(Rgb c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

Plane luma_plane(const Image& image) {
    Plane out(image.width(), image.height());
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < image.width(); ++x) out.at(x, y) = luma(image.rgb(x, y));
    return out;
}

Image crop(const Image& image, int x, int y, int width, int height) {
    if (x < 0 || y < 0 || width < 0 || height < 0 || x + width > image.width() || y + height > image.height())
        throw std::out_of_range("crop rectangle outside image");
    Image out(width, height);
    for (int row = 0; row < height; ++row)
        std::memcpy(out.pixel(0, row), image.pixel(x, y + row), 3 * static_cast<std::size_t>(width));
    return out;
}

namespace {

struct FilterTap {
    int first = 0;
    std::vector<double> weights;
};

// Triangle filter widened by the scale factor when shrinking; taps outside the source are dropped
// and the rest renormalised.
std::vector<FilterTap> triangle_taps(int src, int dst) {
    const double scale = static_cast<double>(src) / dst;
    const double support = std::max(1.0, scale);
    std::vector<FilterTap> taps(dst);
    for (int o = 0; o < dst; ++o) {
        const double center = (o + 0.5) * scale;
        const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
        const int hi = std::min(src - 1, static_cast<int>(std::ceil(center + support)));
        auto& t = taps[o];
        t.first = lo;
        double total = 0.0;
        for (int i = lo; i <= hi; ++i) {
            const double w = std::max(0.0, 1.0 - std::abs(i + 0.5 - center) / support);
            t.weights.push_back(w);
            total += w;
        }
        for (auto& w : t.weights) w /= total;
    }
    return taps;
}

}  // namespace

Image resize_bilinear(const Image& image, int width, int height) {
    if (image.empty()) throw std::invalid_argument("cannot resize empty image");
    if (width <= 0 || height <= 0) throw std::invalid_argument("resize target must be positive");
    if (width == image.width() && height == image.height()) return image;
    const auto xt = triangle_taps(image.width(), width);
    const auto yt = triangle_taps(image.height(), height);
    std::vector<double> rows(static_cast<std::size_t>(image.height()) * width * 3);
    for (int y = 0; y < image.height(); ++y)
        for (int x = 0; x < width; ++x) {
            double acc[3] = {0, 0, 0};
            const auto& t = xt[x];
            for (std::size_t k = 0; k < t.weights.size(); ++k) {
                const auto* p = image.pixel(t.first + static_cast<int>(k), y);
                for (int c = 0; c < 3; ++c) acc[c] += t.weights[k] * p[c];
            }
            for (int c = 0; c < 3; ++c) rows[(static_cast<std::size_t>(y) * width + x) * 3 + c] = acc[c];
        }
    Image out(width, height);
    for (int y = 0; y < height; ++y) {
        const auto& t = yt[y];
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (std::size_t k = 0; k < t.weights.size(); ++k)
                    acc += t.weights[k] * rows[((t.first + k) * width + x) * 3 + c];
                out.pixel(x, y)[c] = static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
            }
    }
    return out;
}

Plane gaussian_blur(const Plane& plane, double sigma) {
    if (sigma <= 0) throw std::invalid_argument("gaussian_blur: sigma must be positive");
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    for (int k = -radius; k <= radius; ++k) kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
    const double norm = std::accumulate(kernel.begin(), kernel.end(), 0.0);
    for (auto& k : kernel) k /= norm;

    const int w = plane.width, h = plane.height;
    Plane tmp(w, h), out(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * plane.at(reflect_index(x + k, w), y);
            tmp.at(x, y) = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(x, reflect_index(y + k, h));
            out.at(x, y) = acc;
        }
    return out;
}

std::vector<TileOffset> tile_offsets(int image_width, int image_height, const TileGrid& grid) {
    if (grid.tile_width <= 0 || grid.tile_height <= 0) throw std::invalid_argument("tile dimensions must be positive");
    if (grid.tile_width > image_width || grid.tile_height > image_height)
        throw std::invalid_argument("tile " + std::to_string(grid.tile_width) + "x" + std::to_string(grid.tile_height) +
                                    " larger than image " + std::to_string(image_width) + "x" +
                                    std::to_string(image_height));
    std::vector<TileOffset> offsets;
    for (int ty = 0; ty + grid.tile_height <= image_height; ty += grid.tile_height)
        for (int tx = 0; tx + grid.tile_width <= image_width; tx += grid.tile_width)
            offsets.push_back({tx, ty, grid.tile_width, grid.tile_height});
    return offsets;
}

std::vector<Tile> split_tiles(const Image& image, const TileGrid& grid) {
    std::vector<Tile> tiles;
    for (const auto& off : tile_offsets(image.width(), image.height(), grid))
        tiles.push_back({off, crop(image, off.x, off.y, off.width, off.height)});
    return tiles;
}

Patch extract_patch(const Image& image, int center_x, int center_y, int side) {
    if (side <= 0) throw std::invalid_argument("patch side must be positive");
    if (center_x < 0 || center_y < 0 || center_x >= image.width() || center_y >= image.height())
        throw std::out_of_range("patch centre (" + std::to_string(center_x) + "," + std::to_string(center_y) +
                                ") outside image");
    Patch patch;
    patch.side = side;
    patch.center_x = center_x;
    patch.center_y = center_y;
    patch.pixels = Image(side, side);
    const int x0 = center_x - side / 2;
    const int y0 = center_y - side / 2;
    std::size_t padded = 0;
    for (int y = 0; y < side; ++y) {
        const int sy = y0 + y;
        const bool row_out = sy < 0 || sy >= image.height();
        const int ry = reflect_index(sy, image.height());
        for (int x = 0; x < side; ++x) {
            const int sx = x0 + x;
            const bool out = row_out || sx < 0 || sx >= image.width();
            padded += out;
            const auto* src = image.pixel(reflect_index(sx, image.width()), ry);
            std::memcpy(patch.pixels.pixel(x, y), src, 3);
        }
    }
    patch.padded_fraction = static_cast<double>(padded) / (static_cast<double>(side) * side);
    return patch;
}

ArtifactScore artifact_score(const Image& tile, double tissue_luma) {
    if (tile.empty()) throw std::invalid_argument("artifact_score: empty tile");
    const Plane l = luma_plane(tile);
    const int w = l.width, h = l.height;
    double sum = 0, sum_sq = 0;
    std::size_t tissue = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double c = l.at(x, y);
            const double lap = l.at(reflect_index(x - 1, w), y) + l.at(reflect_index(x + 1, w), y) +
                               l.at(x, reflect_index(y - 1, h)) + l.at(x, reflect_index(y + 1, h)) - 4 * c;
            sum += lap;
            sum_sq += lap * lap;
            tissue += c < tissue_luma;
        }
    const double n = static_cast<double>(l.values.size());
    const double mean = sum / n;
    return {std::max(0.0, sum_sq / n - mean * mean), static_cast<double>(tissue) / n};
}

bool is_artifact(const ArtifactScore& score, const ArtifactThresholds& thresholds) {
    return score.blur_score < thresholds.min_blur_score || score.tissue_fraction < thresholds.min_tissue_fraction;
}

namespace {

Image flip(const Image& in, bool horizontal) {
    Image out(in.width(), in.height());
    for (int y = 0; y < in.height(); ++y)
        for (int x = 0; x < in.width(); ++x) {
            const int sx = horizontal ? in.width() - 1 - x : x;
            const int sy = horizontal ? y : in.height() - 1 - y;
            std::memcpy(out.pixel(x, y), in.pixel(sx, sy), 3);
        }
    return out;
}

Image rotate90_ccw(const Image& in) {
    Image out(in.height(), in.width());
    // out(x, y) = in(W - 1 - y, x)
    for (int y = 0; y < out.height(); ++y)
        for (int x = 0; x < out.width(); ++x) std::memcpy(out.pixel(x, y), in.pixel(in.width() - 1 - y, x), 3);
    return out;
}

Image shear_horizontal(const Image& in, double s) {
    Image out(in.width(), in.height());
    const double cy = (in.height() - 1) / 2.0;
    for (int y = 0; y < in.height(); ++y) {
        const double shift = s * (y - cy);
        for (int x = 0; x < in.width(); ++x) {
            const double fx = x - shift;
            const int x0 = static_cast<int>(std::floor(fx));
            const double wx = fx - x0;
            const auto* a = in.pixel(reflect_index(x0, in.width()), y);
            const auto* b = in.pixel(reflect_index(x0 + 1, in.width()), y);
            for (int c = 0; c < 3; ++c)
                out.pixel(x, y)[c] = static_cast<std::uint8_t>(std::lround(a[c] * (1 - wx) + b[c] * wx));
        }
    }
    return out;
}

}  // namespace

Image augment_geometric(const Image& image, const GeometricSpec& spec) {
    const int k = ((spec.rot90_k % 4) + 4) % 4;
    if (k % 2 == 1 && image.width() != image.height())
        throw std::invalid_argument("odd quarter-turn rotation needs a square image");
    Image out = image;
    if (spec.hflip) out = flip(out, true);
    if (spec.vflip) out = flip(out, false);
    for (int i = 0; i < k; ++i) out = rotate90_ccw(out);
    if (spec.shear != 0.0) out = shear_horizontal(out, spec.shear);
    return out;
}

GeometricSpec sample_geometric_spec(Rng& rng, double max_shear) {
    GeometricSpec spec;
    spec.hflip = rng.coin();
    spec.vflip = rng.coin();
    spec.rot90_k = static_cast<int>(rng.below(4));
    spec.shear = rng.uniform(-max_shear, max_shear);
    return spec;
}

Image augment_geometric(const Image& image, double max_shear, std::uint64_t seed) {
    Rng rng(seed);
    auto spec = sample_geometric_spec(rng, max_shear);
    if (image.width() != image.height()) spec.rot90_k &= ~1;
    return augment_geometric(image, spec);
}

void draw_box_outline(Image& image, int x0, int y0, int x1, int y1, Rgb colour, int thickness) {
    auto put = [&](int x, int y) {
        if (x >= 0 && y >= 0 && x < image.width() && y < image.height()) image.set(x, y, colour);
    };
    for (int t = 0; t < thickness; ++t) {
        for (int x = x0; x < x1; ++x) {
            put(x, y0 + t);
            put(x, y1 - 1 - t);
        }
        for (int y = y0; y < y1; ++y) {
            put(x0 + t, y);
            put(x1 - 1 - t, y);
        }
    }
}

}  // namespace cellpheno
