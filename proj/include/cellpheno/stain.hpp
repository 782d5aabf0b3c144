#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>

#include "cellpheno/image.hpp"

namespace cellpheno {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

/// Unit-length stain optical-density vectors, one per row: haematoxylin, eosin, DAB/residual.
class StainMatrix {
public:
    /// Ruifrok & Johnston H&E-DAB vectors.
    StainMatrix();
    /// Rows are normalised to unit length; throws if a row is zero or the matrix is ill-conditioned.
    explicit StainMatrix(const Mat3& rows);

    static StainMatrix from_row_major(std::span<const double> values);
    static StainMatrix load_json(const std::filesystem::path& path);

    const Mat3& rows() const { return rows_; }
    const Mat3& inverse() const { return inverse_; }
    double condition_number() const { return condition_; }

private:
    Mat3 rows_{};
    Mat3 inverse_{};
    double condition_ = 0.0;
};

/// Stain concentration planes after colour deconvolution.
struct HedImage {
    int width = 0;
    int height = 0;
    std::array<Plane, 3> planes;  // H, E, D
};

/// -log10((v + 1) / 256)
double optical_density(std::uint8_t value);
/// Inverse of optical_density before rounding.
double intensity_from_od(double od);

HedImage rgb_to_hed(const Image& image, const StainMatrix& m = {});
/// With clamp_negative, concentrations below zero are zeroed before recomposition.
Image hed_to_rgb(const HedImage& hed, const StainMatrix& m = {}, bool clamp_negative = false);

struct StainTransformConfig {
    double scale_low = 0.95;
    double scale_high = 1.05;
    bool per_channel = false;
    bool clamp_negative = false;

    void validate() const;
};

/// Scales stain concentrations by factor(s) drawn from U(scale_low, scale_high).
Image stain_transform(const Image& image, const StainTransformConfig& cfg, std::uint64_t seed,
                      const StainMatrix& m = {});
Image stain_scale(const Image& image, const Vec3& factors, const StainMatrix& m = {}, bool clamp_negative = false);

/// Raw haematoxylin concentration plane.
Plane hematoxylin_concentration(const Image& image, const StainMatrix& m = {});
/// Haematoxylin concentration, min-max normalised to [0, 1]; constant input gives zeros.
Plane hematoxylin_channel(const Image& image, const StainMatrix& m = {});

/// Mean optical density over all channels and pixels.
double mean_optical_density(const Image& image);

}  // namespace cellpheno
