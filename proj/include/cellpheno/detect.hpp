#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellpheno/image.hpp"
#include "cellpheno/stain.hpp"

namespace cellpheno {

/// Axis-aligned box in continuous pixel coordinates; pixel i spans [i, i+1).
struct BBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    static BBox from_xywh(double x, double y, double w, double h) { return {x, y, x + w, y + h}; }
    static BBox centered(double cx, double cy, double half_w, double half_h) {
        return {cx - half_w, cy - half_h, cx + half_w, cy + half_h};
    }
    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }
    bool valid() const { return x_min < x_max && y_min < y_max; }

    friend bool operator==(const BBox&, const BBox&) = default;
};

struct Detection {
    BBox box;
    double score = 0.0;
};

struct FocalParams {
    double alpha = 0.25;
    double gamma = 2.0;
};

struct DensityParams {
    double sigma = 4.0;
};

struct MatchConfig {
    double iou_threshold = 0.5;
    std::size_t max_detections = 500;
};

enum class ApInterpolation { AllPoints, ElevenPoint };
enum class ApAggregation { Pooled, PerImageMean };

struct ApOptions {
    ApInterpolation interpolation = ApInterpolation::AllPoints;
    ApAggregation aggregation = ApAggregation::Pooled;
};

double iou(const BBox& a, const BBox& b);

/// Score threshold (>=), greedy NMS (suppress IoU > nms_iou; equal scores keep input order),
/// then cap at cfg.max_detections. Output sorted by descending score.
std::vector<Detection> postprocess(const std::vector<Detection>& dets, double score_threshold, const MatchConfig& cfg,
                                   double nms_iou);

struct PrPoint {
    double score = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

/// One (score, is_true_positive) entry per prediction after greedy matching.
struct MatchedPrediction {
    double score = 0.0;
    bool true_positive = false;
};

/// Greedy matching in descending score order; each prediction takes the best-IoU unmatched GT.
/// Returns, per prediction in input order, the matched GT index or -1.
std::vector<std::ptrdiff_t> assign_ground_truth(const std::vector<Detection>& preds, const std::vector<BBox>& gts,
                                               double iou_threshold);
/// Same matching, reported in descending score order.
std::vector<MatchedPrediction> match_predictions(const std::vector<Detection>& preds, const std::vector<BBox>& gts,
                                                 double iou_threshold);

/// Precision/recall after each prediction (descending score) of a pooled matched list.
std::vector<PrPoint> pr_curve(std::vector<MatchedPrediction> matched, std::size_t gt_count);
double ap_from_curve(const std::vector<PrPoint>& curve, ApInterpolation interpolation = ApInterpolation::AllPoints);

double average_precision(const std::vector<Detection>& preds, const std::vector<BBox>& gts, const MatchConfig& cfg,
                         ApInterpolation interpolation = ApInterpolation::AllPoints);

struct ImageDetections {
    std::vector<Detection> preds;
    std::vector<BBox> gts;
};

/// AP over a set of images, pooled into a single PR curve or averaged per image.
double dataset_average_precision(const std::vector<ImageDetections>& images, const MatchConfig& cfg,
                                 const ApOptions& options = {});
std::vector<PrPoint> dataset_pr_curve(const std::vector<ImageDetections>& images, const MatchConfig& cfg);

struct ThresholdMap {
    double threshold = 0.0;
    double map = 0.0;
};

std::vector<ThresholdMap> map_over_thresholds(const std::vector<ImageDetections>& images,
                                              const std::vector<double>& thresholds, const MatchConfig& cfg,
                                              double nms_iou = 0.5, const ApOptions& options = {});

/// -alpha (1 - p_t)^gamma ln(p_t), p clamped to [1e-12, 1 - 1e-12].
double focal_loss(double p, int y, const FocalParams& fp);
double binary_cross_entropy(double p, int y);

/// Sum of unit-mass isotropic Gaussians, each normalised over its 4-sigma disc.
Plane density_map(const std::vector<std::pair<double, double>>& centers, const DensityParams& dp, int width,
                  int height);

struct Peak {
    int x = 0;
    int y = 0;
    double value = 0.0;
};

/// Pixels strictly greater than every other pixel within a (2r+1)^2 window and >= threshold,
/// sorted by descending value.
std::vector<Peak> local_maxima(const Plane& plane, int min_distance, double threshold);

struct DogParams {
    double sigma_small = 3.0;
    double sigma_large = 5.0;
    double box_radius = 12.0;
    double threshold = 0.1;     // on the score scale
    double score_scale = 0.15;  // absolute DoG response (haematoxylin units) mapped to score 1
    int min_distance = 8;
    double nms_iou = 0.3;
};

/// Difference-of-Gaussians blob detector on the haematoxylin channel.
std::vector<Detection> dog_detect(const Image& image, const StainMatrix& m, const DogParams& params,
                                  const MatchConfig& cfg = {});

nlohmann::json detections_to_json(const std::vector<Detection>& dets);
std::vector<Detection> detections_from_json(const nlohmann::json& j);
nlohmann::json boxes_to_json(const std::vector<BBox>& boxes);
std::vector<BBox> boxes_from_json(const nlohmann::json& j);

void write_pr_csv(const std::vector<PrPoint>& curve, const std::filesystem::path& path);

}  // namespace cellpheno
