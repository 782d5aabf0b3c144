#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace cellpheno {

class Rng;

using Rgb = std::array<std::uint8_t, 3>;

/// 8-bit RGB raster, row-major, interleaved channels.
class Image {
public:
    Image() = default;
    Image(int width, int height, Rgb fill = {0, 0, 0});

    int width() const { return width_; }
    int height() const { return height_; }
    bool empty() const { return width_ == 0 || height_ == 0; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

    std::uint8_t* pixel(int x, int y) { return data_.data() + 3 * (static_cast<std::size_t>(y) * width_ + x); }
    const std::uint8_t* pixel(int x, int y) const {
        return data_.data() + 3 * (static_cast<std::size_t>(y) * width_ + x);
    }
    Rgb rgb(int x, int y) const {
        const auto* p = pixel(x, y);
        return {p[0], p[1], p[2]};
    }
    void set(int x, int y, Rgb c) {
        auto* p = pixel(x, y);
        p[0] = c[0];
        p[1] = c[1];
        p[2] = c[2];
    }

    std::span<std::uint8_t> bytes() { return data_; }
    std::span<const std::uint8_t> bytes() const { return data_; }

    friend bool operator==(const Image&, const Image&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> data_;
};

/// Real-valued single-channel raster.
struct Plane {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    Plane() = default;
    Plane(int w, int h, double fill = 0.0)
        : width(w), height(h), values(static_cast<std::size_t>(w) * h, fill) {}

    double& at(int x, int y) { return values[static_cast<std::size_t>(y) * width + x]; }
    double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
    double sum() const;
};

Image load_png(const std::filesystem::path& path);
void save_png(const Image& image, const std::filesystem::path& path);

/// Mirror index into [0, n) without repeating the edge sample (numpy "reflect").
int reflect_index(int i, int n);

double luma(Rgb c);
Plane luma_plane(const Image& image);

Image crop(const Image& image, int x, int y, int width, int height);
/// Bilinear (triangle) resampling on half-pixel centres; when shrinking, the filter widens with the
/// scale factor so every source pixel contributes.
Image resize_bilinear(const Image& image, int width, int height);

/// Separable Gaussian blur with reflect borders, kernel truncated at 4 sigma.
Plane gaussian_blur(const Plane& plane, double sigma);

struct TileGrid {
    int tile_width = 1600;
    int tile_height = 1200;
};

struct TileOffset {
    int x = 0;
    int y = 0;
    int width = 0;
    int height = 0;
    friend bool operator==(const TileOffset&, const TileOffset&) = default;
};

struct Tile {
    TileOffset offset;
    Image image;
};

/// Row-major tiling; partial tiles at the right/bottom edges are dropped.
std::vector<TileOffset> tile_offsets(int image_width, int image_height, const TileGrid& grid);
std::vector<Tile> split_tiles(const Image& image, const TileGrid& grid);

struct Patch {
    int side = 0;
    int center_x = 0;
    int center_y = 0;
    double padded_fraction = 0.0;  // share of patch pixels that came from reflect padding
    Image pixels;
};

/// side x side crop centred on (center_x, center_y); out-of-bounds area is reflect padded.
Patch extract_patch(const Image& image, int center_x, int center_y, int side);

struct ArtifactScore {
    double blur_score = 0.0;
    double tissue_fraction = 0.0;
};

struct ArtifactThresholds {
    double min_blur_score = 50.0;
    double min_tissue_fraction = 0.05;
    double tissue_luma = 220.0;  // pixels darker than this count as tissue
};

ArtifactScore artifact_score(const Image& tile, double tissue_luma = ArtifactThresholds{}.tissue_luma);
bool is_artifact(const ArtifactScore& score, const ArtifactThresholds& thresholds);

struct GeometricSpec {
    bool hflip = false;
    bool vflip = false;
    int rot90_k = 0;  // counter-clockwise quarter turns
    double shear = 0.0;
};

/// Applies flips, then rotation, then horizontal shear about the image centre.
/// Odd rotations require a square image so that the dimensions are preserved.
Image augment_geometric(const Image& image, const GeometricSpec& spec);
GeometricSpec sample_geometric_spec(Rng& rng, double max_shear = 0.2);
Image augment_geometric(const Image& image, double max_shear, std::uint64_t seed);

void draw_box_outline(Image& image, int x0, int y0, int x1, int y1, Rgb colour, int thickness = 2);

}  // namespace cellpheno
