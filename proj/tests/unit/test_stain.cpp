#include <cmath>
#include <fstream>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/stain.hpp"

using namespace cellpheno;

namespace {

int max_abs_diff(const Image& a, const Image& b) {
    int worst = 0;
    for (std::size_t i = 0; i < a.bytes().size(); ++i)
        worst = std::max(worst, std::abs(int(a.bytes()[i]) - int(b.bytes()[i])));
    return worst;
}

}  // namespace

TEST_CASE("optical density of white is zero") {
    CHECK(optical_density(255) == doctest::Approx(0.0));
    CHECK(optical_density(0) == doctest::Approx(std::log10(256.0)));
    for (int v : {0, 17, 128, 254}) CHECK(intensity_from_od(optical_density(v)) == doctest::Approx(v));
    const auto hed = rgb_to_hed(Image(4, 4, {255, 255, 255}));
    for (const auto& p : hed.planes)
        for (double v : p.values) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("stain matrix rows are normalised and singular matrices rejected") {
    const StainMatrix m(Mat3{Vec3{2, 0, 0}, Vec3{0, 3, 0}, Vec3{0, 0, 4}});
    CHECK(m.rows()[1][1] == doctest::Approx(1.0));
    CHECK_THROWS(StainMatrix(Mat3{Vec3{1, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 0, 1}}));
    CHECK_THROWS(StainMatrix(Mat3{Vec3{0, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}}));
}

TEST_CASE("pure haematoxylin pixel deconvolves to the H plane") {
    const StainMatrix m;
    const double c = 0.6;
    Rgb px{};
    for (int k = 0; k < 3; ++k)
        px[k] = static_cast<std::uint8_t>(std::lround(std::clamp(intensity_from_od(c * m.rows()[0][k]), 0.0, 255.0)));
    const auto hed = rgb_to_hed(Image(1, 1, px), m);
    CHECK(hed.planes[0].values[0] > 0.5);
    CHECK(std::abs(hed.planes[1].values[0]) < 0.02);
}

TEST_CASE("rgb to hed round trip on random images") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto img = testutil::random_image(32, 32, 100 + s);
        CHECK(max_abs_diff(hed_to_rgb(rgb_to_hed(img)), img) <= 2);
    }
}

TEST_CASE("stain transform") {
    const auto img = testutil::random_image(32, 32, 5);
    StainTransformConfig unit{1.0, 1.0};
    CHECK(max_abs_diff(stain_transform(img, unit, 1), img) <= 2);
    StainTransformConfig cfg;
    cfg.per_channel = true;
    CHECK(stain_transform(img, cfg, 42) == stain_transform(img, cfg, 42));
    CHECK_THROWS((StainTransformConfig{1.1, 0.9}.validate()));
    CHECK_THROWS((StainTransformConfig{-0.1, 0.9}.validate()));
}

TEST_CASE("over-staining raises mean optical density") {
    const Image tissue(16, 16, {150, 90, 160});
    const auto darker = stain_scale(tissue, {1.05, 1.05, 1.05});
    CHECK(mean_optical_density(darker) > mean_optical_density(tissue));
}

TEST_CASE("haematoxylin channel") {
    const auto white = hematoxylin_channel(Image(16, 16, {255, 255, 255}));
    for (double v : white.values) CHECK(v == 0.0);

    Image disk(64, 64, {240, 235, 240});
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            if ((x - 40) * (x - 40) + (y - 20) * (y - 20) <= 36) disk.set(x, y, {70, 40, 140});
    const auto h = hematoxylin_channel(disk);
    double lo = 1e9, hi = -1e9;
    int ax = 0, ay = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            lo = std::min(lo, h.at(x, y));
            if (h.at(x, y) > hi) {
                hi = h.at(x, y);
                ax = x;
                ay = y;
            }
        }
    CHECK(lo == doctest::Approx(0.0));
    CHECK(hi == doctest::Approx(1.0));
    CHECK((ax - 40) * (ax - 40) + (ay - 20) * (ay - 20) <= 36);
}

TEST_CASE("stain matrix json") {
    testutil::TempDir dir("stain");
    {
        std::ofstream(dir / "m.json") << "[0.65,0.70,0.29,0.07,0.99,0.11,0.27,0.57,0.78]";
    }
    const auto m = StainMatrix::load_json(dir / "m.json");
    CHECK(m.rows()[0][0] > 0.6);
    {
        std::ofstream(dir / "bad.json") << "[1,2]";
    }
    CHECK_THROWS(StainMatrix::load_json(dir / "bad.json"));
}
