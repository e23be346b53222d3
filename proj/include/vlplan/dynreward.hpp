#pragma once

#include <vector>

#include "vlplan/raster.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

// Half-open pixel box [x0,x1) x [y0,y1).
struct BBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int width() const { return x1 - x0; }
    int height() const { return y1 - y0; }
    long long area() const { return static_cast<long long>(width()) * height(); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool operator==(const BBox&) const = default;
};

double iou(const BBox& a, const BBox& b);

struct RewardParams {
    double tau_iou = 0.3;      // IoU threshold for a valid match
    double lambda_mse = 1.0;   // MSE weight inside a match
    double gamma_pen = 0.5;    // penalty per unmatched region
    int blur_ksize = 5;
    double blur_sigma = 1.0;
    double diff_thresh = 0.1;  // on [0,1] gray absolute difference
    double nms_iou = 0.5;
    int min_area = 4;          // connected components below this are dropped
};

// ---------------------------------------------------------------------------
// Image operations
// ---------------------------------------------------------------------------

// Separable Gaussian blur, kernel normalized to sum 1, replicate border.
std::vector<double> gaussian_blur(const std::vector<double>& gray, int height, int width,
                                  double sigma, int ksize);

// Greedy NMS by descending score (ties by (y0, x0)); suppresses IoU > thresh.
std::vector<BBox> nms(const std::vector<BBox>& boxes, const std::vector<double>& scores,
                      double iou_thresh);

std::vector<std::vector<double>> pairwise_iou(const std::vector<BBox>& a,
                                              const std::vector<BBox>& b);

// Change-region extraction between two same-size rasters:
// gray -> blur both -> |diff| -> threshold -> 3x3 closing -> 4-connected
// components -> boxes -> area filter -> NMS; output sorted by (y0, x0).
std::vector<BBox> detect_regions(const Raster& x_a, const Raster& x_b, const RewardParams& p);

// Thresholded-diff mask for the same pipeline prefix (before closing);
// exposed for coverage checks in tests.
std::vector<std::uint8_t> diff_mask(const Raster& x_a, const Raster& x_b, const RewardParams& p);

// ---------------------------------------------------------------------------
// Assignment
// ---------------------------------------------------------------------------

struct Assignment {
    std::vector<int> row_to_col;  // -1 for unassigned rows
    double total_cost = 0.0;      // sum of cost over assigned pairs, in row order
};

// Minimum-cost one-to-one assignment of min(n,m) pairs; rectangular inputs
// are padded internally. Deterministic: rows are processed in order and
// column ties resolve to the lowest index. Throws NonFinite on bad input.
Assignment hungarian(const std::vector<std::vector<double>>& cost);

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

struct MatchPair {
    int label_idx = 0;
    int gen_idx = 0;
    double iou = 0.0;
    double mse = 0.0;
};

struct MatchSet {
    std::vector<MatchPair> pairs;
    int n_label = 0;
    int n_gen = 0;
};

// score = sum over matches of (IoU - lambda*mse); the reward applies the
// unmatched-region penalty and normalizes by max(1, min(n_label, n_gen)).
double composite_score(const MatchSet& m, const RewardParams& p);

// Full pipeline: detect regions on (x_t, x_real) and (x_t, x_gen), match by
// Hungarian on -IoU, keep pairs with IoU >= tau, compare matched crops over
// their union box (MSE on [0,1] RGB), then apply penalty normalization.
struct DynamicRewardResult {
    double reward = 0.0;
    MatchSet matches;
    std::vector<BBox> label_boxes;
    std::vector<BBox> gen_boxes;
};

DynamicRewardResult dynamic_reward_detail(const Raster& x_t, const Raster& x_gen,
                                          const Raster& x_real, const RewardParams& p);
double dynamic_reward(const Raster& x_t, const Raster& x_gen, const Raster& x_real,
                      const RewardParams& p);

// Precomputes the label side (boxes + blurred current frame) once so that K
// generated samples of the same prompt can be scored cheaply.
class RewardScorer {
public:
    RewardScorer(const Raster& x_t, const Raster& x_real, const RewardParams& p);
    DynamicRewardResult score_detail(const Raster& x_gen) const;
    double score(const Raster& x_gen) const;

private:
    RewardParams params_;
    Raster x_t_;
    Raster x_real_;
    std::vector<double> x_t_blur_;
    std::vector<BBox> label_boxes_;
};

// ---------------------------------------------------------------------------
// Compressibility rewards
// ---------------------------------------------------------------------------

enum class CompressSign { Compress, Incompress };

// c = deflate(raster bytes) at a pinned level; compress -> -c/c_raw,
// incompress -> +c/c_raw.
double compressibility_reward(const Raster& x, CompressSign sign);

}  // namespace vlplan
