#include <cmath>
#include <fstream>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/embed.hpp"

using namespace cellpheno;

namespace {

Matrix gaussian_clusters(std::size_t per_cluster, std::size_t dims, double spread, double gap, std::uint64_t seed,
                         std::vector<int>& labels) {
    Rng rng(seed);
    Matrix x(2 * per_cluster, dims);
    labels.clear();
    for (std::size_t i = 0; i < x.rows; ++i) {
        const int c = i < per_cluster ? 0 : 1;
        labels.push_back(c);
        for (std::size_t d = 0; d < dims; ++d) x(i, d) = rng.normal(d == 0 ? c * gap : 0.0, spread);
    }
    return x;
}

Matrix random_matrix(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Matrix x(n, d);
    for (auto& v : x.values) v = rng.normal();
    return x;
}

}  // namespace

TEST_CASE("member embeddings concatenate row-wise") {
    const std::vector<Matrix> members{random_matrix(4, 128, 1), random_matrix(4, 128, 2), random_matrix(4, 128, 3)};
    const auto e = concat_member_embeddings(members);
    CHECK(e.rows == 4);
    CHECK(e.cols == 384);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t m = 0; m < 3; ++m)
            for (std::size_t c = 0; c < 128; ++c) CHECK(e(r, 128 * m + c) == members[m](r, c));
    CHECK(concat_member_embeddings(std::vector<Matrix>{members[0]}).values == members[0].values);
    CHECK_THROWS(concat_member_embeddings(std::vector<Matrix>{members[0], random_matrix(5, 128, 4)}));
}

TEST_CASE("affinity matrix invariants") {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto x = random_matrix(40, 6, 10 + s);
        const auto a = pairwise_affinities(x, 10.0);
        double sum = 0;
        for (std::size_t i = 0; i < 40; ++i) {
            CHECK(a.p(i, i) == 0.0);
            CHECK(std::abs(std::pow(2.0, a.row_entropy[i]) - 10.0) < 1e-3);
            for (std::size_t j = 0; j < 40; ++j) {
                CHECK(a.p(i, j) == a.p(j, i));
                CHECK(a.p(i, j) >= 0.0);
                sum += a.p(i, j);
            }
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("equidistant points have equal affinities") {
    Matrix x(3, 3);
    x(0, 0) = x(1, 1) = x(2, 2) = 1.0;
    const auto a = pairwise_affinities(x, 2.0);
    CHECK(a.p(0, 1) == doctest::Approx(a.p(0, 2)));
    CHECK(a.p(1, 2) == doctest::Approx(a.p(0, 1)));
}

TEST_CASE("duplicate points do not break calibration") {
    Matrix x(6, 3);
    for (std::size_t i = 3; i < 6; ++i) x(i, 0) = 1.0;
    const auto a = pairwise_affinities(x, 1.5);
    for (double v : a.p.values) CHECK(std::isfinite(v));
}

TEST_CASE("perplexity is clamped for small inputs") {
    CHECK(effective_perplexity(30.0, 1000) == 30.0);
    CHECK(effective_perplexity(30.0, 31) == doctest::Approx(10.0));
}

TEST_CASE("kl divergence is non-negative") {
    const auto x = random_matrix(20, 5, 3);
    const auto p = pairwise_affinities(x, 5.0).p;
    for (std::uint64_t s = 0; s < 5; ++s) CHECK(kl_divergence(p, random_matrix(20, 2, 30 + s)) >= 0.0);
}

TEST_CASE("tsne separates two clusters and is seeded") {
    std::vector<int> labels;
    const auto x = gaussian_clusters(30, 10, 0.1, 10.0, 4, labels);
    TsneConfig cfg;
    cfg.perplexity = 10;
    cfg.seed = 5;
    const auto a = tsne(x, cfg);
    CHECK(a.coordinates.rows == 60);
    CHECK(a.coordinates.cols == 2);
    CHECK(a.final_kl < a.initial_kl);
    CHECK(silhouette(a.coordinates, labels) >= 0.5);
    CHECK(tsne(x, cfg).coordinates.values == a.coordinates.values);
    CHECK_THROWS(tsne(random_matrix(3, 2, 1), cfg));
}

TEST_CASE("silhouette") {
    std::vector<int> labels;
    const auto far = gaussian_clusters(20, 2, 0.01, 100.0, 6, labels);
    CHECK(silhouette(far, labels) > 0.9);

    Rng rng(7);
    Matrix mixed(200, 2);
    std::vector<int> alternating;
    for (std::size_t i = 0; i < 200; ++i) {
        mixed(i, 0) = rng.normal();
        mixed(i, 1) = rng.normal();
        alternating.push_back(int(i % 2));
    }
    CHECK(std::abs(silhouette(mixed, alternating)) < 0.05);

    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto pts = random_matrix(15, 2, 40 + s);
        std::vector<int> lab;
        for (int i = 0; i < 15; ++i) lab.push_back(i % 3);
        const double v = silhouette(pts, lab);
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS(silhouette(far, std::vector<int>(far.rows, 0)));
}

TEST_CASE("embedding and tsne files") {
    testutil::TempDir dir("embed");
    EmbeddingMatrix e{random_matrix(3, 4, 8), {"a", "b", "c"}};
    write_embeddings_csv(e, dir / "e.csv");
    const auto back = read_embeddings_csv(dir / "e.csv");
    CHECK(back.ids == e.ids);
    CHECK(back.data.values == e.data.values);

    const std::vector<std::string> ids{"a", "b", "c"}, labels{"CYT", "FIB", "CYT"}, order{"CYT", "FIB"},
        palette{"#e61919", "#14aa28"};
    const auto coords = random_matrix(3, 2, 9);
    write_tsne_csv(coords, ids, labels, dir / "t.csv");
    write_tsne_svg(coords, labels, order, palette, dir / "t.svg");
    std::ifstream svg(dir / "t.svg");
    const std::string text((std::istreambuf_iterator<char>(svg)), {});
    CHECK(text.find("<svg") != std::string::npos);
    CHECK(text.find("#14aa28") != std::string::npos);
}
