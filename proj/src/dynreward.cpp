#include "vlplan/dynreward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <zlib.h>

#include "vlplan/error.hpp"

namespace vlplan {

double iou(const BBox& a, const BBox& b) {
    const int ix0 = std::max(a.x0, b.x0);
    const int iy0 = std::max(a.y0, b.y0);
    const int ix1 = std::min(a.x1, b.x1);
    const int iy1 = std::min(a.y1, b.y1);
    if (ix1 <= ix0 || iy1 <= iy0) return 0.0;
    const double inter = static_cast<double>(ix1 - ix0) * (iy1 - iy0);
    const double uni = static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter;
    return inter / uni;
}

// ---------------------------------------------------------------------------
// Image operations
// ---------------------------------------------------------------------------

std::vector<double> gaussian_blur(const std::vector<double>& gray, int height, int width,
                                  double sigma, int ksize) {
    require(ksize > 0 && ksize % 2 == 1, ErrorKind::BadKernel, "kernel size must be odd");
    require(sigma > 0.0, ErrorKind::BadKernel, "sigma must be positive");
    require(static_cast<int>(gray.size()) == height * width, ErrorKind::DimensionMismatch,
            "gray buffer size mismatch");

    const int half = ksize / 2;
    std::vector<double> kernel(static_cast<std::size_t>(ksize));
    double sum = 0.0;
    for (int i = 0; i < ksize; ++i) {
        const double d = i - half;
        kernel[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
        sum += kernel[static_cast<std::size_t>(i)];
    }
    for (auto& k : kernel) k /= sum;

    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };

    std::vector<double> tmp(gray.size()), out(gray.size());
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            for (int i = -half; i <= half; ++i)
                acc += kernel[static_cast<std::size_t>(i + half)] *
                       gray[static_cast<std::size_t>(y) * width + clampi(x + i, 0, width - 1)];
            tmp[static_cast<std::size_t>(y) * width + x] = acc;
        }
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            double acc = 0.0;
            for (int i = -half; i <= half; ++i)
                acc += kernel[static_cast<std::size_t>(i + half)] *
                       tmp[static_cast<std::size_t>(clampi(y + i, 0, height - 1)) * width + x];
            out[static_cast<std::size_t>(y) * width + x] = acc;
        }
    return out;
}

std::vector<BBox> nms(const std::vector<BBox>& boxes, const std::vector<double>& scores,
                      double iou_thresh) {
    require(boxes.size() == scores.size(), ErrorKind::ShapeMismatch,
            "boxes and scores must align");
    std::vector<std::size_t> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        if (boxes[a].y0 != boxes[b].y0) return boxes[a].y0 < boxes[b].y0;
        return boxes[a].x0 < boxes[b].x0;
    });
    std::vector<BBox> kept;
    for (std::size_t idx : order) {
        bool suppressed = false;
        for (const BBox& k : kept)
            if (iou(boxes[idx], k) > iou_thresh) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(boxes[idx]);
    }
    return kept;
}

std::vector<std::vector<double>> pairwise_iou(const std::vector<BBox>& a,
                                              const std::vector<BBox>& b) {
    std::vector<std::vector<double>> m(a.size(), std::vector<double>(b.size(), 0.0));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) m[i][j] = iou(a[i], b[j]);
    return m;
}

std::vector<std::uint8_t> diff_mask(const Raster& x_a, const Raster& x_b,
                                    const RewardParams& p) {
    require(x_a.same_dims(x_b), ErrorKind::DimensionMismatch, "raster dims differ");
    const auto ga = gaussian_blur(to_gray01(x_a), x_a.height, x_a.width, p.blur_sigma, p.blur_ksize);
    const auto gb = gaussian_blur(to_gray01(x_b), x_b.height, x_b.width, p.blur_sigma, p.blur_ksize);
    std::vector<std::uint8_t> mask(ga.size());
    for (std::size_t i = 0; i < ga.size(); ++i)
        mask[i] = std::abs(ga[i] - gb[i]) > p.diff_thresh ? 1 : 0;
    return mask;
}

namespace {

// 3x3 box dilation / erosion on a binary mask.
std::vector<std::uint8_t> morph3(const std::vector<std::uint8_t>& mask, int h, int w,
                                 bool dilate) {
    std::vector<std::uint8_t> out(mask.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            std::uint8_t v = dilate ? 0 : 1;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    // Out-of-bounds neighbors count as background.
                    const std::uint8_t nv =
                        (ny < 0 || ny >= h || nx < 0 || nx >= w)
                            ? 0
                            : mask[static_cast<std::size_t>(ny) * w + nx];
                    if (dilate)
                        v = static_cast<std::uint8_t>(v | nv);
                    else
                        v = static_cast<std::uint8_t>(v & nv);
                }
            out[static_cast<std::size_t>(y) * w + x] = v;
        }
    return out;
}

}  // namespace

namespace {

// Closing -> labeling -> area filter -> NMS -> (y0, x0) sort.
std::vector<BBox> regions_from_mask(std::vector<std::uint8_t> mask, int h, int w,
                                    const RewardParams& p) {
    mask = morph3(mask, h, w, true);
    mask = morph3(mask, h, w, false);

    // 4-connected component labeling (iterative flood fill).
    std::vector<int> label(mask.size(), -1);
    std::vector<BBox> boxes;
    std::vector<long long> areas;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t at = static_cast<std::size_t>(y) * w + x;
            if (!mask[at] || label[at] >= 0) continue;
            const int id = static_cast<int>(boxes.size());
            BBox box{x, y, x + 1, y + 1};
            long long area = 0;
            stack.clear();
            stack.emplace_back(y, x);
            label[at] = id;
            while (!stack.empty()) {
                auto [cy, cx] = stack.back();
                stack.pop_back();
                ++area;
                box.x0 = std::min(box.x0, cx);
                box.y0 = std::min(box.y0, cy);
                box.x1 = std::max(box.x1, cx + 1);
                box.y1 = std::max(box.y1, cy + 1);
                constexpr int dy[4] = {-1, 1, 0, 0};
                constexpr int dx[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    const int ny = cy + dy[k], nx = cx + dx[k];
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const std::size_t nat = static_cast<std::size_t>(ny) * w + nx;
                    if (!mask[nat] || label[nat] >= 0) continue;
                    label[nat] = id;
                    stack.emplace_back(ny, nx);
                }
            }
            boxes.push_back(box);
            areas.push_back(area);
        }

    std::vector<BBox> filtered;
    std::vector<double> scores;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        if (areas[i] < p.min_area) continue;
        filtered.push_back(boxes[i]);
        scores.push_back(static_cast<double>(boxes[i].area()));
    }
    std::vector<BBox> kept = nms(filtered, scores, p.nms_iou);
    std::sort(kept.begin(), kept.end(), [](const BBox& a, const BBox& b) {
        if (a.y0 != b.y0) return a.y0 < b.y0;
        return a.x0 < b.x0;
    });
    return kept;
}

}  // namespace

std::vector<BBox> detect_regions(const Raster& x_a, const Raster& x_b, const RewardParams& p) {
    return regions_from_mask(diff_mask(x_a, x_b, p), x_a.height, x_a.width, p);
}

// ---------------------------------------------------------------------------
// Hungarian assignment (Jonker-Volgenant style, O(n^3))
// ---------------------------------------------------------------------------

Assignment hungarian(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    Assignment result;
    if (n == 0) return result;
    const int m = static_cast<int>(cost.front().size());
    for (const auto& row : cost) {
        require(static_cast<int>(row.size()) == m, ErrorKind::ShapeMismatch,
                "ragged cost matrix");
        for (double v : row)
            require(std::isfinite(v), ErrorKind::NonFinite, "cost entries must be finite");
    }
    result.row_to_col.assign(static_cast<std::size_t>(n), -1);
    if (m == 0) return result;

    // Pad to square with zero-cost dummy cells; dummies never beat real
    // pairs because rows/cols are expanded, not reweighted.
    const int dim = std::max(n, m);
    auto at = [&](int i, int j) -> double {
        return (i < n && j < m) ? cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]
                                : 0.0;
    };

    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(dim + 1), 0.0);
    std::vector<double> v(static_cast<std::size_t>(dim + 1), 0.0);
    std::vector<int> p(static_cast<std::size_t>(dim + 1), 0);
    std::vector<int> way(static_cast<std::size_t>(dim + 1), 0);
    for (int i = 1; i <= dim; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(dim + 1), inf);
        std::vector<char> used(static_cast<std::size_t>(dim + 1), 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = 0;
            double delta = inf;
            for (int j = 1; j <= dim; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= dim; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }

    for (int j = 1; j <= dim; ++j) {
        const int i = p[static_cast<std::size_t>(j)];
        if (i >= 1 && i <= n && j <= m) result.row_to_col[static_cast<std::size_t>(i - 1)] = j - 1;
    }
    // Total over assigned pairs, summed in row order (matches the brute-force
    // oracle's accumulation order exactly).
    result.total_cost = 0.0;
    for (int i = 0; i < n; ++i) {
        const int j = result.row_to_col[static_cast<std::size_t>(i)];
        if (j >= 0) result.total_cost += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return result;
}

// ---------------------------------------------------------------------------
// Composite reward
// ---------------------------------------------------------------------------

double composite_score(const MatchSet& m, const RewardParams& p) {
    double score = 0.0;
    for (const auto& pair : m.pairs) score += pair.iou - p.lambda_mse * pair.mse;
    const int unmatched = m.n_label + m.n_gen - 2 * static_cast<int>(m.pairs.size());
    const double denom = std::max(1, std::min(m.n_label, m.n_gen));
    return (score - p.gamma_pen * unmatched) / denom;
}

namespace {

BBox union_box(const BBox& a, const BBox& b) {
    return BBox{std::min(a.x0, b.x0), std::min(a.y0, b.y0), std::max(a.x1, b.x1),
                std::max(a.y1, b.y1)};
}

// MSE over the union box on [0,1] RGB; both rasters share dimensions so the
// crops align without resizing.
double crop_mse(const Raster& gen, const Raster& real, const BBox& box) {
    double acc = 0.0;
    long long count = 0;
    for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x) {
            const std::uint8_t* pg = gen.px(y, x);
            const std::uint8_t* pr = real.px(y, x);
            for (int ch = 0; ch < 3; ++ch) {
                const double d = (static_cast<double>(pg[ch]) - pr[ch]) / 255.0;
                acc += d * d;
            }
            count += 3;
        }
    return count ? acc / static_cast<double>(count) : 0.0;
}

DynamicRewardResult score_from_boxes(const std::vector<BBox>& label_boxes,
                                     const std::vector<BBox>& gen_boxes, const Raster& x_gen,
                                     const Raster& x_real, const RewardParams& p) {
    DynamicRewardResult res;
    res.label_boxes = label_boxes;
    res.gen_boxes = gen_boxes;
    res.matches.n_label = static_cast<int>(label_boxes.size());
    res.matches.n_gen = static_cast<int>(gen_boxes.size());

    if (!label_boxes.empty() && !gen_boxes.empty()) {
        const auto m = pairwise_iou(label_boxes, gen_boxes);
        std::vector<std::vector<double>> neg(m.size(), std::vector<double>(m.front().size()));
        for (std::size_t i = 0; i < m.size(); ++i)
            for (std::size_t j = 0; j < m[i].size(); ++j) neg[i][j] = -m[i][j];
        const Assignment a = hungarian(neg);
        for (std::size_t i = 0; i < label_boxes.size(); ++i) {
            const int j = a.row_to_col[i];
            if (j < 0) continue;
            const double pair_iou = m[i][static_cast<std::size_t>(j)];
            if (pair_iou < p.tau_iou) continue;
            MatchPair pair;
            pair.label_idx = static_cast<int>(i);
            pair.gen_idx = j;
            pair.iou = pair_iou;
            pair.mse =
                crop_mse(x_gen, x_real, union_box(label_boxes[i], gen_boxes[static_cast<std::size_t>(j)]));
            res.matches.pairs.push_back(pair);
        }
    }
    res.reward = composite_score(res.matches, p);
    return res;
}

}  // namespace

DynamicRewardResult dynamic_reward_detail(const Raster& x_t, const Raster& x_gen,
                                          const Raster& x_real, const RewardParams& p) {
    require(x_t.same_dims(x_gen) && x_t.same_dims(x_real), ErrorKind::DimensionMismatch,
            "raster dims differ");
    const auto label_boxes = detect_regions(x_t, x_real, p);
    const auto gen_boxes = detect_regions(x_t, x_gen, p);
    return score_from_boxes(label_boxes, gen_boxes, x_gen, x_real, p);
}

double dynamic_reward(const Raster& x_t, const Raster& x_gen, const Raster& x_real,
                      const RewardParams& p) {
    return dynamic_reward_detail(x_t, x_gen, x_real, p).reward;
}

// ---------------------------------------------------------------------------
// RewardScorer
// ---------------------------------------------------------------------------

RewardScorer::RewardScorer(const Raster& x_t, const Raster& x_real, const RewardParams& p)
    : params_(p), x_t_(x_t), x_real_(x_real) {
    require(x_t.same_dims(x_real), ErrorKind::DimensionMismatch, "raster dims differ");
    x_t_blur_ = gaussian_blur(to_gray01(x_t), x_t.height, x_t.width, p.blur_sigma, p.blur_ksize);
    label_boxes_ = detect_regions(x_t_, x_real_, params_);
}

DynamicRewardResult RewardScorer::score_detail(const Raster& x_gen) const {
    require(x_t_.same_dims(x_gen), ErrorKind::DimensionMismatch, "raster dims differ");
    // Same pipeline as detect_regions, reusing the cached blurred x_t.
    const auto gb = gaussian_blur(to_gray01(x_gen), x_gen.height, x_gen.width, params_.blur_sigma,
                                  params_.blur_ksize);
    std::vector<std::uint8_t> mask(gb.size());
    for (std::size_t i = 0; i < gb.size(); ++i)
        mask[i] = std::abs(x_t_blur_[i] - gb[i]) > params_.diff_thresh ? 1 : 0;
    const auto gen_boxes = regions_from_mask(std::move(mask), x_gen.height, x_gen.width, params_);
    return score_from_boxes(label_boxes_, gen_boxes, x_gen, x_real_, params_);
}

double RewardScorer::score(const Raster& x_gen) const { return score_detail(x_gen).reward; }

// ---------------------------------------------------------------------------
// Compressibility rewards
// ---------------------------------------------------------------------------

double compressibility_reward(const Raster& x, CompressSign sign) {
    const uLong src_len = static_cast<uLong>(x.data.size());
    uLongf dst_len = compressBound(src_len);
    std::vector<Bytef> buf(dst_len);
    const int rc = compress2(buf.data(), &dst_len, x.data.data(), src_len, 6);
    require(rc == Z_OK, ErrorKind::Io, "deflate failed");
    const double ratio = static_cast<double>(dst_len) / static_cast<double>(src_len);
    return sign == CompressSign::Compress ? -ratio : ratio;
}

}  // namespace vlplan
