#include <algorithm>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "unit/helpers.hpp"

#include "cellpheno/detect.hpp"
#include "cellpheno/synth.hpp"

using namespace cellpheno;

namespace {

BBox box(double x0, double y0, double x1, double y1) { return {x0, y0, x1, y1}; }

// Independent evaluator: sorted scan, right-to-left precision envelope, sum over recall steps.
double oracle_ap(std::vector<std::pair<double, bool>> scored, std::size_t n_gt) {
    if (n_gt == 0) return scored.empty() ? 1.0 : 0.0;
    std::stable_sort(scored.begin(), scored.end(), [](auto& a, auto& b) { return a.first > b.first; });
    std::vector<double> prec, rec;
    double tp = 0;
    for (std::size_t i = 0; i < scored.size(); ++i) {
        tp += scored[i].second;
        prec.push_back(tp / double(i + 1));
        rec.push_back(tp / double(n_gt));
    }
    for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
    double ap = 0, last_r = 0;
    for (std::size_t i = 0; i < prec.size(); ++i) {
        ap += (rec[i] - last_r) * prec[i];
        last_r = rec[i];
    }
    return ap;
}

// Maximum number of predictions that can be paired with distinct GTs at IoU >= thr.
std::size_t max_cardinality(const std::vector<Detection>& preds, const std::vector<BBox>& gts, double thr) {
    std::size_t best = 0;
    std::vector<bool> used(gts.size(), false);
    std::function<void(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t count) {
        if (i == preds.size()) {
            best = std::max(best, count);
            return;
        }
        go(i + 1, count);
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (used[g] || iou(preds[i].box, gts[g]) < thr) continue;
            used[g] = true;
            go(i + 1, count + 1);
            used[g] = false;
        }
    };
    go(0, 0);
    return best;
}

}  // namespace

TEST_CASE("iou") {
    const auto a = box(0, 0, 10, 10);
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, box(20, 20, 30, 30)) == 0.0);
    CHECK(iou(a, box(5, 0, 15, 10)) == doctest::Approx(50.0 / 150.0));
    CHECK(iou(box(5, 0, 15, 10), a) == iou(a, box(5, 0, 15, 10)));
    CHECK(iou(a, box(10, 0, 20, 10)) == 0.0);
}

TEST_CASE("iou properties on random boxes") {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        auto r = [&] {
            const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
            return box(x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30));
        };
        const auto a = r(), b = r();
        const double v = iou(a, b);
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        CHECK(v == iou(b, a));
    }
}

TEST_CASE("postprocess") {
    MatchConfig cfg;
    const auto dup = postprocess({{box(0, 0, 10, 10), 0.8}, {box(0, 0, 10, 10), 0.9}}, 0.0, cfg, 0.5);
    REQUIRE(dup.size() == 1);
    CHECK(dup[0].score == 0.9);

    std::vector<Detection> tiers;
    double x = 0;
    for (double s : {0.05, 0.25, 0.35, 0.50}) {
        tiers.push_back({box(x, 0, x + 5, 5), s});
        x += 10;
    }
    const auto kept = postprocess(tiers, 0.5, cfg, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].score == 0.5);

    std::vector<Detection> many;
    for (int i = 0; i < 600; ++i) many.push_back({box(10.0 * i, 0, 10.0 * i + 5, 5), (i + 1) / 600.0});
    const auto capped = postprocess(many, 0.0, cfg, 0.5);
    REQUIRE(capped.size() == 500);
    CHECK(capped.back().score == doctest::Approx(101 / 600.0));
}

TEST_CASE("postprocess equal scores keep input order") {
    const auto out = postprocess({{box(0, 0, 10, 10), 0.5}, {box(1, 0, 11, 10), 0.5}}, 0.0, {}, 0.5);
    REQUIRE(out.size() == 1);
    CHECK(out[0].box.x_min == 0.0);
}

TEST_CASE("postprocess properties on random sets") {
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        std::vector<Detection> dets;
        for (int i = 0; i < 40; ++i) {
            const double x = rng.uniform(0, 100), y = rng.uniform(0, 100);
            dets.push_back({box(x, y, x + 12, y + 12), rng.uniform()});
        }
        const auto out = postprocess(dets, 0.2, {}, 0.4);
        for (std::size_t i = 0; i < out.size(); ++i) {
            CHECK(out[i].score >= 0.2);
            if (i) CHECK(out[i - 1].score >= out[i].score);
            for (std::size_t j = i + 1; j < out.size(); ++j) CHECK(iou(out[i].box, out[j].box) <= 0.4);
            CHECK(std::any_of(dets.begin(), dets.end(),
                              [&](const Detection& d) { return d.box == out[i].box && d.score == out[i].score; }));
        }
    }
}

TEST_CASE("average precision worked example") {
    const std::vector<BBox> gts{box(0, 0, 10, 10), box(50, 50, 60, 60)};
    const std::vector<Detection> preds{{gts[0], 0.9}, {box(100, 100, 110, 110), 0.8}, {gts[1], 0.7}};
    const double expected = oracle_ap({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
    CHECK(expected == doctest::Approx(0.5 * 1.0 + 0.5 * 2.0 / 3.0));
    CHECK(average_precision(preds, gts, {}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("average precision edge cases") {
    const std::vector<BBox> gts{box(0, 0, 10, 10), box(20, 0, 30, 10)};
    CHECK(average_precision({{gts[0], 0.3}, {gts[1], 0.6}}, gts, {}) == 1.0);
    CHECK(average_precision({}, gts, {}) == 0.0);
    CHECK(average_precision({}, {}, {}) == 1.0);
    CHECK(average_precision({{gts[0], 0.3}}, {}, {}) == 0.0);
}

TEST_CASE("average precision matches the independent oracle") {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        std::vector<BBox> gts;
        for (int i = 0; i < 6; ++i) gts.push_back(box(40.0 * i, 0, 40.0 * i + 20, 20));
        std::vector<Detection> preds;
        std::vector<std::pair<double, bool>> scored;
        for (int i = 0; i < 8; ++i) {
            const bool hit = i < 6 && rng.coin(0.7);
            const BBox b = hit ? gts[i] : box(1000.0 + 40 * i, 0, 1020.0 + 40 * i, 20);
            const double s = rng.uniform();
            preds.push_back({b, s});
            scored.push_back({s, hit});
        }
        CHECK(average_precision(preds, gts, {}) == doctest::Approx(oracle_ap(scored, gts.size())).epsilon(1e-12));
    }
}

TEST_CASE("greedy matching equals exhaustive matching on non-conflicting instances") {
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        const int n_gt = 1 + int(rng.below(5)), n_pred = 1 + int(rng.below(5));
        std::vector<BBox> gts;
        for (int g = 0; g < n_gt; ++g) gts.push_back(box(50.0 * g, 0, 50.0 * g + 20, 20));
        std::vector<Detection> preds;
        for (int p = 0; p < n_pred; ++p) {
            // each prediction jitters around one GT (or lands far away); spacing keeps overlaps unambiguous
            const int g = int(rng.below(n_gt + 1));
            const double dx = rng.uniform(-4, 4);
            const BBox b = g == n_gt ? box(1000.0 + 50 * p, 0, 1020.0 + 50 * p, 20)
                                     : box(gts[g].x_min + dx, 0, gts[g].x_max + dx, 20);
            preds.push_back({b, 1.0 - 0.1 * p});
        }
        const auto matched = match_predictions(preds, gts, 0.5);
        std::size_t tp = 0;
        for (const auto& m : matched) tp += m.true_positive;
        CHECK(tp == max_cardinality(preds, gts, 0.5));
    }
}

TEST_CASE("assign_ground_truth reports indices in input order") {
    const std::vector<BBox> gts{box(0, 0, 10, 10), box(50, 0, 60, 10)};
    const std::vector<Detection> preds{{box(50, 0, 60, 10), 0.2}, {box(0, 0, 10, 10), 0.9}, {box(0, 1, 10, 11), 0.5}};
    const auto a = assign_ground_truth(preds, gts, 0.5);
    CHECK(a == std::vector<std::ptrdiff_t>{1, 0, -1});
}

TEST_CASE("map over thresholds") {
    const std::vector<BBox> gts{box(0, 0, 10, 10), box(20, 0, 30, 10)};
    const std::vector<ImageDetections> perfect{{{{gts[0], 0.9}, {gts[1], 0.8}}, gts}};
    for (const auto& r : map_over_thresholds(perfect, {0.05, 0.25, 0.35, 0.5}, {})) CHECK(r.map == 1.0);

    const std::vector<Detection> preds{{gts[0], 0.3}, {box(40, 0, 50, 10), 0.6}, {gts[1], 0.9}};
    const std::vector<ImageDetections> single{{preds, gts}};
    const auto rows = map_over_thresholds(single, {0.05}, {});
    CHECK(rows[0].map == doctest::Approx(average_precision(preds, gts, {})));
    CHECK_THROWS(map_over_thresholds(single, {0.5, 0.05}, {}));
}

TEST_CASE("map is non-increasing in threshold") {
    Rng rng(5);
    for (int t = 0; t < 30; ++t) {
        std::vector<ImageDetections> images(3);
        for (auto& im : images) {
            for (int g = 0; g < 8; ++g) im.gts.push_back(box(30.0 * g, 0, 30.0 * g + 15, 15));
            for (int p = 0; p < 12; ++p) {
                const double x = rng.uniform(0, 240);
                im.preds.push_back({box(x, 0, x + 15, 15), rng.uniform()});
            }
        }
        const auto rows = map_over_thresholds(images, {0.05, 0.25, 0.35, 0.5}, {});
        for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].map <= rows[i - 1].map + 1e-12);
    }
}

TEST_CASE("per-image aggregation averages image APs") {
    const std::vector<BBox> g1{box(0, 0, 10, 10)}, g2{box(0, 0, 10, 10), box(20, 0, 30, 10)};
    const std::vector<ImageDetections> images{{{{g1[0], 0.9}}, g1}, {{{g2[0], 0.9}}, g2}};
    ApOptions per_image;
    per_image.aggregation = ApAggregation::PerImageMean;
    CHECK(dataset_average_precision(images, {}, per_image) == doctest::Approx(0.75));
}

TEST_CASE("eleven point interpolation") {
    const std::vector<BBox> gts{box(0, 0, 10, 10), box(50, 50, 60, 60)};
    const std::vector<Detection> preds{{gts[0], 0.9}, {box(100, 100, 110, 110), 0.8}, {gts[1], 0.7}};
    // recall levels 0..0.5 take precision 1, 0.6..1.0 take 2/3
    CHECK(average_precision(preds, gts, {}, ApInterpolation::ElevenPoint) ==
          doctest::Approx((6 * 1.0 + 5 * 2.0 / 3.0) / 11.0));
}

TEST_CASE("focal loss") {
    const double expected = -0.25 * 0.1 * 0.1 * std::log(0.9);
    CHECK(expected == doctest::Approx(2.634e-4).epsilon(1e-3));
    CHECK(focal_loss(0.9, 1, {0.25, 2.0}) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(focal_loss(0.3, 0, {1.0, 0.0}) == doctest::Approx(binary_cross_entropy(0.3, 0)));
    CHECK(focal_loss(1.0 - 1e-15, 1, {0.25, 2.0}) < 1e-20);
    CHECK(focal_loss(0.0, 1, {1.0, 0.0}) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("focal loss is bounded by cross entropy and decreasing in p_t") {
    for (double gamma : {0.5, 1.0, 2.0, 5.0}) {
        double prev = 1e300;
        for (int i = 1; i < 100; ++i) {
            const double p = i / 100.0;
            const double fl = focal_loss(p, 1, {1.0, gamma});
            CHECK(fl <= binary_cross_entropy(p, 1));
            CHECK(fl < prev);
            prev = fl;
        }
    }
}

TEST_CASE("density map") {
    const auto empty = density_map({}, {}, 40, 30);
    CHECK(empty.sum() == 0.0);
    const auto three = density_map({{20, 20}, {60, 25}, {40, 60}}, {4.0}, 100, 90);
    CHECK(three.sum() == doctest::Approx(3.0).epsilon(1e-6));
    const auto one = density_map({{17.5, 23.5}}, {}, 50, 50);
    const auto it = std::max_element(one.values.begin(), one.values.end());
    const auto idx = static_cast<int>(it - one.values.begin());
    CHECK(idx % 50 == 17);
    CHECK(idx / 50 == 23);
}

TEST_CASE("local maxima") {
    const std::vector<std::pair<double, double>> centers{{20.5, 20.5}, {60.5, 25.5}, {40.5, 60.5}};
    const auto peaks = local_maxima(density_map(centers, {4.0}, 100, 90), 5, 1e-4);
    REQUIRE(peaks.size() == 3);
    for (const auto& c : centers)
        CHECK(std::any_of(peaks.begin(), peaks.end(), [&](const Peak& p) {
            return std::abs(p.x - c.first) <= 1 && std::abs(p.y - c.second) <= 1;
        }));
    CHECK(local_maxima(Plane(20, 20, 0.5), 3, 0.0).empty());
    CHECK(local_maxima(density_map(centers, {4.0}, 100, 90), 5, 1.0).empty());
}

TEST_CASE("dog detector") {
    CHECK(dog_detect(Image(200, 200, {255, 255, 255}), {}, {}).empty());
    SynthSpec spec;
    spec.width = 600;
    spec.height = 450;
    spec.count_min = spec.count_max = 6;
    const auto tile = generate_tile(spec, 17);
    const auto dets = dog_detect(tile.image, {}, {});
    CHECK(dets.size() <= 500);
    CHECK(dets.size() == tile.gt_boxes.size());
    for (const auto& g : tile.gt_boxes) {
        double best = 0;
        for (const auto& d : dets) best = std::max(best, iou(d.box, g));
        CHECK(best >= 0.5);
    }
    DogParams bad;
    bad.sigma_small = 6;
    CHECK_THROWS(dog_detect(tile.image, {}, bad));
}

TEST_CASE("detection json") {
    const std::vector<Detection> dets{{box(1.5, 2, 11.5, 14), 0.75}};
    const auto j = detections_to_json(dets);
    CHECK(j[0]["x"] == 1.5);
    CHECK(j[0]["w"] == 10.0);
    const auto back = detections_from_json(j);
    CHECK(back[0].box == dets[0].box);
    CHECK(back[0].score == 0.75);
    CHECK(boxes_from_json(boxes_to_json({dets[0].box}))[0] == dets[0].box);
    CHECK_THROWS(detections_from_json(nlohmann::json::parse(R"([{"x":1,"y":2,"w":-3,"h":4,"score":0.5}])")));
    CHECK_THROWS(detections_from_json(nlohmann::json::parse(R"([{"x":1,"y":2,"w":3,"h":4,"score":1.5}])")));
}
