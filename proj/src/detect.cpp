#include "cellpheno/detect.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace cellpheno {

double iou(const BBox& a, const BBox& b) {
    const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

namespace {

std::vector<std::size_t> order_by_score(const std::vector<Detection>& dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

}  // namespace

std::vector<Detection> postprocess(const std::vector<Detection>& dets, double score_threshold, const MatchConfig& cfg,
                                   double nms_iou) {
    std::vector<Detection> kept;
    for (std::size_t i : order_by_score(dets)) {
        const auto& d = dets[i];
        if (d.score < score_threshold) continue;
        bool suppressed = false;
        for (const auto& k : kept)
            if (iou(k.box, d.box) > nms_iou) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(d);
    }
    if (kept.size() > cfg.max_detections) kept.resize(cfg.max_detections);
    return kept;
}

std::vector<std::ptrdiff_t> assign_ground_truth(const std::vector<Detection>& preds, const std::vector<BBox>& gts,
                                               double iou_threshold) {
    std::vector<bool> taken(gts.size(), false);
    std::vector<std::ptrdiff_t> assigned(preds.size(), -1);
    for (std::size_t i : order_by_score(preds)) {
        double best = -1.0;
        std::size_t best_gt = gts.size();
        for (std::size_t g = 0; g < gts.size(); ++g) {
            if (taken[g]) continue;
            const double v = iou(preds[i].box, gts[g]);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_gt = g;
            }
        }
        if (best_gt < gts.size()) {
            taken[best_gt] = true;
            assigned[i] = static_cast<std::ptrdiff_t>(best_gt);
        }
    }
    return assigned;
}

std::vector<MatchedPrediction> match_predictions(const std::vector<Detection>& preds, const std::vector<BBox>& gts,
                                                 double iou_threshold) {
    const auto assigned = assign_ground_truth(preds, gts, iou_threshold);
    std::vector<MatchedPrediction> out;
    out.reserve(preds.size());
    for (std::size_t i : order_by_score(preds)) out.push_back({preds[i].score, assigned[i] >= 0});
    return out;
}

std::vector<PrPoint> pr_curve(std::vector<MatchedPrediction> matched, std::size_t gt_count) {
    std::stable_sort(matched.begin(), matched.end(),
                     [](const MatchedPrediction& a, const MatchedPrediction& b) { return a.score > b.score; });
    std::vector<PrPoint> curve;
    curve.reserve(matched.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < matched.size(); ++i) {
        tp += matched[i].true_positive;
        const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
        const double recall = gt_count ? static_cast<double>(tp) / static_cast<double>(gt_count) : 0.0;
        curve.push_back({matched[i].score, precision, recall});
    }
    return curve;
}

double ap_from_curve(const std::vector<PrPoint>& curve, ApInterpolation interpolation) {
    if (curve.empty()) return 0.0;
    // precision envelope: max precision at any recall >= r
    std::vector<double> envelope(curve.size());
    double running = 0.0;
    for (std::size_t i = curve.size(); i-- > 0;) {
        running = std::max(running, curve[i].precision);
        envelope[i] = running;
    }
    if (interpolation == ApInterpolation::ElevenPoint) {
        double ap = 0.0;
        for (int k = 0; k <= 10; ++k) {
            const double r = k / 10.0;
            double p = 0.0;
            for (std::size_t i = 0; i < curve.size(); ++i)
                if (curve[i].recall >= r - 1e-12) {
                    p = envelope[i];
                    break;
                }
            ap += p;
        }
        return ap / 11.0;
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < curve.size(); ++i) {
        ap += (curve[i].recall - prev_recall) * envelope[i];
        prev_recall = curve[i].recall;
    }
    return std::clamp(ap, 0.0, 1.0);
}

double average_precision(const std::vector<Detection>& preds, const std::vector<BBox>& gts, const MatchConfig& cfg,
                         ApInterpolation interpolation) {
    if (gts.empty()) return preds.empty() ? 1.0 : 0.0;
    return ap_from_curve(pr_curve(match_predictions(preds, gts, cfg.iou_threshold), gts.size()), interpolation);
}

std::vector<PrPoint> dataset_pr_curve(const std::vector<ImageDetections>& images, const MatchConfig& cfg) {
    std::vector<MatchedPrediction> pooled;
    std::size_t gt_count = 0;
    // concatenation in image order followed by a stable sort keeps ties deterministic
    for (const auto& im : images) {
        const auto m = match_predictions(im.preds, im.gts, cfg.iou_threshold);
        pooled.insert(pooled.end(), m.begin(), m.end());
        gt_count += im.gts.size();
    }
    return pr_curve(std::move(pooled), gt_count);
}

double dataset_average_precision(const std::vector<ImageDetections>& images, const MatchConfig& cfg,
                                 const ApOptions& options) {
    if (options.aggregation == ApAggregation::PerImageMean) {
        if (images.empty()) return 1.0;
        double sum = 0.0;
        for (const auto& im : images) sum += average_precision(im.preds, im.gts, cfg, options.interpolation);
        return sum / static_cast<double>(images.size());
    }
    std::size_t gt_count = 0, pred_count = 0;
    for (const auto& im : images) {
        gt_count += im.gts.size();
        pred_count += im.preds.size();
    }
    if (gt_count == 0) return pred_count == 0 ? 1.0 : 0.0;
    return ap_from_curve(dataset_pr_curve(images, cfg), options.interpolation);
}

std::vector<ThresholdMap> map_over_thresholds(const std::vector<ImageDetections>& images,
                                              const std::vector<double>& thresholds, const MatchConfig& cfg,
                                              double nms_iou, const ApOptions& options) {
    if (!std::is_sorted(thresholds.begin(), thresholds.end()))
        throw std::invalid_argument("map_over_thresholds: thresholds must be ascending");
    std::vector<ThresholdMap> out;
    for (double t : thresholds) {
        std::vector<ImageDetections> filtered;
        filtered.reserve(images.size());
        for (const auto& im : images) filtered.push_back({postprocess(im.preds, t, cfg, nms_iou), im.gts});
        out.push_back({t, dataset_average_precision(filtered, cfg, options)});
    }
    return out;
}

namespace {
constexpr double kProbEps = 1e-12;
}

double focal_loss(double p, int y, const FocalParams& fp) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    const double pt = y == 1 ? p : 1.0 - p;
    return -fp.alpha * std::pow(1.0 - pt, fp.gamma) * std::log(pt);
}

double binary_cross_entropy(double p, int y) {
    p = std::clamp(p, kProbEps, 1.0 - kProbEps);
    return -(y == 1 ? std::log(p) : std::log(1.0 - p));
}

Plane density_map(const std::vector<std::pair<double, double>>& centers, const DensityParams& dp, int width,
                  int height) {
    if (!(dp.sigma > 0)) throw std::invalid_argument("density_map: sigma must be positive");
    Plane out(width, height);
    const double radius = 4.0 * dp.sigma;
    const int r = static_cast<int>(std::ceil(radius));
    for (const auto& [cx, cy] : centers) {
        if (cx < 0 || cy < 0 || cx >= width || cy >= height)
            throw std::out_of_range("density_map: centre outside plane");
        const int px = static_cast<int>(std::floor(cx));
        const int py = static_cast<int>(std::floor(cy));
        // weights over the full window, including pixels that fall outside the plane
        std::vector<double> w;
        w.reserve(static_cast<std::size_t>((2 * r + 1) * (2 * r + 1)));
        double total = 0.0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx) {
                const double ex = px + dx + 0.5 - cx, ey = py + dy + 0.5 - cy;
                const double d2 = ex * ex + ey * ey;
                const double v = d2 <= radius * radius ? std::exp(-0.5 * d2 / (dp.sigma * dp.sigma)) : 0.0;
                w.push_back(v);
                total += v;
            }
        std::size_t k = 0;
        for (int dy = -r; dy <= r; ++dy)
            for (int dx = -r; dx <= r; ++dx, ++k) {
                const int x = px + dx, y = py + dy;
                if (x >= 0 && y >= 0 && x < width && y < height) out.at(x, y) += w[k] / total;
            }
    }
    return out;
}

std::vector<Peak> local_maxima(const Plane& plane, int min_distance, double threshold) {
    if (min_distance < 1) throw std::invalid_argument("local_maxima: min_distance must be >= 1");
    const int w = plane.width, h = plane.height;
    auto strict_max_in = [&](int x, int y, int r) {
        const double v = plane.at(x, y);
        for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
            for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx)
                if ((xx != x || yy != y) && plane.at(xx, yy) >= v) return false;
        return true;
    };
    std::vector<Peak> peaks;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double v = plane.at(x, y);
            if (v < threshold) continue;
            if (!strict_max_in(x, y, 1)) continue;
            if (min_distance > 1 && !strict_max_in(x, y, min_distance)) continue;
            peaks.push_back({x, y, v});
        }
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.value > b.value; });
    return peaks;
}

std::vector<Detection> dog_detect(const Image& image, const StainMatrix& m, const DogParams& params,
                                  const MatchConfig& cfg) {
    if (!(params.sigma_small > 0) || !(params.sigma_small < params.sigma_large))
        throw std::invalid_argument("dog_detect: need 0 < sigma_small < sigma_large");
    if (!(params.score_scale > 0)) throw std::invalid_argument("dog_detect: score_scale must be positive");
    if (image.empty()) return {};
    Plane h = hematoxylin_concentration(image, m);
    const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
    const double low = *lo, range = *hi - *lo;
    if (!(range > 0)) return {};
    for (auto& v : h.values) v = (v - low) / range;

    const Plane fine = gaussian_blur(h, params.sigma_small);
    const Plane coarse = gaussian_blur(h, params.sigma_large);
    // back to absolute haematoxylin units so scores are comparable across tiles
    Plane response(h.width, h.height);
    for (std::size_t i = 0; i < response.values.size(); ++i)
        response.values[i] = (fine.values[i] - coarse.values[i]) * range;

    std::vector<Detection> dets;
    for (const auto& p : local_maxima(response, params.min_distance, params.threshold * params.score_scale)) {
        const double score = std::min(1.0, p.value / params.score_scale);
        dets.push_back({BBox::centered(p.x + 0.5, p.y + 0.5, params.box_radius, params.box_radius), score});
    }
    return postprocess(dets, params.threshold, cfg, params.nms_iou);
}

nlohmann::json detections_to_json(const std::vector<Detection>& dets) {
    auto arr = nlohmann::json::array();
    for (const auto& d : dets)
        arr.push_back({{"x", d.box.x_min}, {"y", d.box.y_min}, {"w", d.box.width()}, {"h", d.box.height()},
                       {"score", d.score}});
    return arr;
}

std::vector<Detection> detections_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw std::invalid_argument("detections JSON must be an array");
    std::vector<Detection> out;
    for (const auto& e : j) {
        Detection d{BBox::from_xywh(e.at("x").get<double>(), e.at("y").get<double>(), e.at("w").get<double>(),
                                    e.at("h").get<double>()),
                    e.at("score").get<double>()};
        if (!d.box.valid()) throw std::invalid_argument("detection with empty box");
        if (d.score < 0 || d.score > 1) throw std::invalid_argument("detection score outside [0,1]");
        out.push_back(d);
    }
    return out;
}

nlohmann::json boxes_to_json(const std::vector<BBox>& boxes) {
    auto arr = nlohmann::json::array();
    for (const auto& b : boxes) arr.push_back({{"x", b.x_min}, {"y", b.y_min}, {"w", b.width()}, {"h", b.height()}});
    return arr;
}

std::vector<BBox> boxes_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw std::invalid_argument("ground-truth JSON must be an array");
    std::vector<BBox> out;
    for (const auto& e : j) {
        auto b = BBox::from_xywh(e.at("x").get<double>(), e.at("y").get<double>(), e.at("w").get<double>(),
                                 e.at("h").get<double>());
        if (!b.valid()) throw std::invalid_argument("ground-truth box with non-positive size");
        out.push_back(b);
    }
    return out;
}

void write_pr_csv(const std::vector<PrPoint>& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "score,precision,recall\n";
    out.precision(10);
    for (const auto& p : curve) out << p.score << ',' << p.precision << ',' << p.recall << '\n';
}

}  // namespace cellpheno
