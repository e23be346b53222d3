#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vlplan/dynreward.hpp"
#include "vlplan/gridworld.hpp"
#include "vlplan/rng.hpp"

using namespace vlplan;

namespace {

// Brute-force minimum assignment cost by permutation enumeration, summing in
// row order (the same accumulation order hungarian() reports).
double brute_force_assignment(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    const int m = static_cast<int>(cost.front().size());
    if (n <= m) {
        std::vector<int> cols(static_cast<std::size_t>(m));
        std::iota(cols.begin(), cols.end(), 0);
        double best = std::numeric_limits<double>::infinity();
        do {
            double total = 0.0;
            for (int i = 0; i < n; ++i) total += cost[static_cast<std::size_t>(i)][static_cast<std::size_t>(cols[static_cast<std::size_t>(i)])];
            best = std::min(best, total);
        } while (std::next_permutation(cols.begin(), cols.end()));
        return best;
    }
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick(static_cast<std::size_t>(n), 0);
    // choose which rows map to the m columns: permute rows, take first m
    do {
        double total = 0.0;
        // columns assigned in order to the first m rows of this permutation;
        // to keep row-order summation, collect then sum by row index.
        std::vector<std::pair<int, int>> pairs;
        for (int j = 0; j < m; ++j) pairs.emplace_back(rows[static_cast<std::size_t>(j)], j);
        std::sort(pairs.begin(), pairs.end());
        for (auto [r, c] : pairs) total += cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        best = std::min(best, total);
    } while (std::next_permutation(rows.begin(), rows.end()));
    (void)pick;
    return best;
}

Raster constant_raster(int side, std::uint8_t v) {
    Raster r(side, side);
    std::fill(r.data.begin(), r.data.end(), v);
    return r;
}

}  // namespace

TEST_CASE("gaussian blur preserves constants") {
    std::vector<double> img(32 * 32, 0.7);
    const auto out = gaussian_blur(img, 32, 32, 1.0, 5);
    for (double v : out) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("gaussian blur of a centered impulse reproduces the kernel") {
    const int n = 17;
    std::vector<double> img(n * n, 0.0);
    img[8 * n + 8] = 1.0;
    const auto out = gaussian_blur(img, n, n, 1.0, 5);
    // Build the reference 1-D kernel.
    double k[5], sum = 0.0;
    for (int i = 0; i < 5; ++i) {
        const double d = i - 2;
        k[i] = std::exp(-0.5 * d * d);
        sum += k[i];
    }
    for (double& v : k) v /= sum;
    for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
            CHECK(out[static_cast<std::size_t>(8 + dy) * n + (8 + dx)] ==
                  doctest::Approx(k[dy + 2] * k[dx + 2]).epsilon(1e-12));
    // Outside the kernel support everything stays zero.
    CHECK(out[0] == 0.0);
}

TEST_CASE("gaussian blur is linear") {
    Rng rng(2);
    std::vector<double> a(24 * 24), b(24 * 24);
    for (auto& v : a) v = rng.uniform01();
    for (auto& v : b) v = rng.uniform01();
    std::vector<double> ab(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) ab[i] = a[i] + b[i];
    const auto ba = gaussian_blur(a, 24, 24, 1.0, 5);
    const auto bb = gaussian_blur(b, 24, 24, 1.0, 5);
    const auto bab = gaussian_blur(ab, 24, 24, 1.0, 5);
    for (std::size_t i = 0; i < a.size(); ++i)
        CHECK(bab[i] == doctest::Approx(ba[i] + bb[i]).epsilon(1e-9));
    CHECK_THROWS_AS((void)gaussian_blur(a, 24, 24, 1.0, 4), Error);
}

TEST_CASE("iou basics") {
    const BBox b{0, 0, 4, 4};
    CHECK(iou(b, b) == doctest::Approx(1.0));
    CHECK(iou(b, BBox{10, 10, 12, 12}) == 0.0);
    CHECK(iou(BBox{0, 0, 4, 4}, BBox{2, 0, 6, 4}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("pairwise iou matches a pixel-membership brute force") {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto rand_box = [&]() {
            const int x0 = rng.below_int(12), y0 = rng.below_int(12);
            return BBox{x0, y0, x0 + 1 + rng.below_int(6), y0 + 1 + rng.below_int(6)};
        };
        const BBox a = rand_box(), b = rand_box();
        long inter = 0, uni = 0;
        for (int y = 0; y < 20; ++y)
            for (int x = 0; x < 20; ++x) {
                const bool ina = a.contains(x, y), inb = b.contains(x, y);
                inter += ina && inb;
                uni += ina || inb;
            }
        const double expected = uni ? static_cast<double>(inter) / uni : 0.0;
        CHECK(pairwise_iou({a}, {b})[0][0] == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("nms keeps disjoint boxes and collapses duplicates") {
    const std::vector<BBox> disjoint{{0, 0, 4, 4}, {10, 10, 14, 14}};
    CHECK(nms(disjoint, {16.0, 16.0}, 0.5).size() == 2);

    const std::vector<BBox> dup{{0, 0, 4, 4}, {0, 0, 4, 4}};
    CHECK(nms(dup, {16.0, 16.0}, 0.5).size() == 1);

    // Nested small-in-large: IoU = 36/64 > 0.5, larger kept.
    const std::vector<BBox> nested{{0, 0, 8, 8}, {1, 1, 7, 7}};
    const auto kept = nms(nested, {64.0, 36.0}, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0] == BBox{0, 0, 8, 8});
}

TEST_CASE("detect_regions on identical rasters is empty") {
    const Task t = new_task(1, TaskFamily::MoveToZone);
    const Raster img = render(t.state);
    CHECK(detect_regions(img, img, RewardParams{}).empty());
}

TEST_CASE("detect_regions on a distant move finds two covering boxes") {
    SymbolicState a(8);
    a.at(1, 1) = CellContent::block(0);
    const SymbolicState b = apply_action(a, LanguageAction{0, 1, 1, 6, 6});
    const RewardParams p;
    const auto boxes = detect_regions(render(a), render(b), p);
    REQUIRE(boxes.size() == 2);
    // Sorted by (y0, x0): vacated cell (rows 8..16) first, then the target.
    CHECK(boxes[0].x0 <= 8);
    CHECK(boxes[0].y0 <= 8);
    CHECK(boxes[0].x1 >= 16);
    CHECK(boxes[0].y1 >= 16);
    CHECK(boxes[1].x0 <= 48);
    CHECK(boxes[1].y0 <= 48);
    CHECK(boxes[1].x1 >= 56);
    CHECK(boxes[1].y1 >= 56);
    // Coverage: every thresholded-diff pixel lies in some box.
    const auto mask = diff_mask(render(a), render(b), p);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            if (!mask[static_cast<std::size_t>(y) * 64 + x]) continue;
            bool covered = false;
            for (const auto& box : boxes) covered |= box.contains(x, y);
            CHECK(covered);
        }
}

TEST_CASE("detect_regions on an adjacent move: one or two boxes, full coverage") {
    SymbolicState a(8);
    a.at(3, 3) = CellContent::block(2);
    const SymbolicState b = apply_action(a, LanguageAction{2, 3, 3, 3, 4});
    const RewardParams p;
    const auto boxes = detect_regions(render(a), render(b), p);
    CHECK(boxes.size() >= 1);
    CHECK(boxes.size() <= 2);
    const auto mask = diff_mask(render(a), render(b), p);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            if (!mask[static_cast<std::size_t>(y) * 64 + x]) continue;
            bool covered = false;
            for (const auto& box : boxes) covered |= box.contains(x, y);
            CHECK(covered);
        }
}

TEST_CASE("hungarian solves the 2x2 example") {
    const Assignment a = hungarian({{1, 2}, {2, 4}});
    CHECK(a.total_cost == 4.0);  // enumerated: 1+4=5 vs 2+2=4
    CHECK(a.row_to_col[0] == 1);
    CHECK(a.row_to_col[1] == 0);
}

TEST_CASE("hungarian picks the diagonal when it uniquely wins") {
    const Assignment a = hungarian({{0, 9, 9}, {9, 0, 9}, {9, 9, 0}});
    CHECK(a.total_cost == 0.0);
    for (int i = 0; i < 3; ++i) CHECK(a.row_to_col[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("hungarian equals brute force on random integer matrices") {
    Rng rng(7);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 1 + rng.below_int(6);
        const int m = 1 + rng.below_int(6);
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                              std::vector<double>(static_cast<std::size_t>(m)));
        for (auto& row : cost)
            for (auto& v : row) v = static_cast<double>(rng.below_int(100));
        const Assignment a = hungarian(cost);
        CHECK(a.total_cost == brute_force_assignment(cost));
        // Determinism.
        const Assignment b = hungarian(cost);
        CHECK(a.row_to_col == b.row_to_col);
    }
}

TEST_CASE("hungarian on real-valued rectangular matrices") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + rng.below_int(5);
        const int m = 1 + rng.below_int(5);
        std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                              std::vector<double>(static_cast<std::size_t>(m)));
        for (auto& row : cost)
            for (auto& v : row) v = rng.uniform(-3.0, 3.0);
        const Assignment a = hungarian(cost);
        CHECK(a.total_cost == doctest::Approx(brute_force_assignment(cost)).epsilon(1e-12));
        int assigned = 0;
        for (int c : a.row_to_col) assigned += c >= 0;
        CHECK(assigned == std::min(n, m));
    }
    CHECK_THROWS_AS((void)hungarian({{std::numeric_limits<double>::infinity()}}), Error);
}

TEST_CASE("composite score formula cases") {
    RewardParams p;  // gamma 0.5, lambda 1.0
    MatchSet perfect;
    perfect.n_label = 2;
    perfect.n_gen = 2;
    perfect.pairs = {{0, 0, 1.0, 0.0}, {1, 1, 1.0, 0.0}};
    CHECK(composite_score(perfect, p) == doctest::Approx(1.0));

    MatchSet empty;
    CHECK(composite_score(empty, p) == 0.0);

    // One perfect match, one unmatched generated region: (1 - 0.5) / 1.
    MatchSet partial;
    partial.n_label = 1;
    partial.n_gen = 2;
    partial.pairs = {{0, 0, 1.0, 0.0}};
    CHECK(composite_score(partial, p) == doctest::Approx(0.5));
}

TEST_CASE("composite score monotonicity with detection frozen") {
    RewardParams p;
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        MatchSet m;
        m.n_label = 2 + rng.below_int(3);
        m.n_gen = 2 + rng.below_int(3);
        const int pairs = 1 + rng.below_int(std::min(m.n_label, m.n_gen));
        for (int i = 0; i < pairs; ++i)
            m.pairs.push_back({i, i, 0.3 + 0.7 * rng.uniform01(), rng.uniform01() * 0.2});
        const double base = composite_score(m, p);

        MatchSet better_iou = m;
        better_iou.pairs[0].iou = std::min(1.0, better_iou.pairs[0].iou + 0.1);
        CHECK(composite_score(better_iou, p) >= base);

        MatchSet worse_mse = m;
        worse_mse.pairs[0].mse += 0.05;
        CHECK(composite_score(worse_mse, p) <= base);

        // One more unmatched region on the side that leaves the
        // min(n_label, n_gen) denominator unchanged.
        MatchSet more_unmatched = m;
        if (more_unmatched.n_gen >= more_unmatched.n_label)
            more_unmatched.n_gen += 1;
        else
            more_unmatched.n_label += 1;
        CHECK(composite_score(more_unmatched, p) <= base);
    }
}

TEST_CASE("dynamic reward: perfect generation scores exactly 1") {
    const RewardParams p;
    int with_regions = 0;
    for (int seed = 0; seed < 60; ++seed) {
        const Task t = new_task(static_cast<std::uint64_t>(seed),
                                seed % 2 ? TaskFamily::MatchBowls : TaskFamily::MoveToZone);
        const auto plan = oracle_plan(t.spec, t.state);
        if (plan.empty()) continue;
        const SymbolicState next = apply_action(t.state, plan.front());
        const Raster x_t = render(t.state), x_next = render(next);
        if (detect_regions(x_t, x_next, p).empty()) continue;
        ++with_regions;
        CHECK(dynamic_reward(x_t, x_next, x_next, p) == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(with_regions > 30);
}

TEST_CASE("dynamic reward: no change anywhere scores exactly 0") {
    const Task t = new_task(2, TaskFamily::MoveToZone);
    const Raster img = render(t.state);
    CHECK(dynamic_reward(img, img, img, RewardParams{}) == 0.0);
}

TEST_CASE("dynamic reward: extra spurious generated region costs gamma") {
    // Real motion: one block appears at (6,6). Generated: same plus a spurious
    // second change far away. One perfect match + one unmatched gen region.
    SymbolicState base(8);
    base.at(6, 6) = CellContent::block(3);
    SymbolicState moved = base;
    moved.at(6, 6) = CellContent::empty();
    moved.at(0, 0) = CellContent::block(3);
    SymbolicState spurious = moved;
    spurious.at(3, 7) = CellContent::block(1);

    RewardParams p;
    const Raster x_t = render(base);
    const Raster x_real = render(moved);
    const Raster x_gen = render(spurious);
    const auto detail = dynamic_reward_detail(x_t, x_gen, x_real, p);
    REQUIRE(detail.matches.n_label == 2);
    REQUIRE(detail.matches.n_gen == 3);
    REQUIRE(detail.matches.pairs.size() == 2);
    // (1 + 1 - 0.5 * 1) / 2
    CHECK(detail.reward == doctest::Approx((2.0 - 0.5) / 2.0).epsilon(1e-9));
}

TEST_CASE("dynamic reward is invariant to which side lists which box first") {
    // Permutation invariance of the optimum value: compare two generated
    // images whose region lists arrive in different (y0,x0) orders.
    SymbolicState a(8);
    a.at(0, 0) = CellContent::block(0);
    a.at(7, 7) = CellContent::block(1);
    SymbolicState real = a;
    real.at(0, 0) = CellContent::empty();
    real.at(0, 3) = CellContent::block(0);
    real.at(7, 7) = CellContent::empty();
    real.at(7, 3) = CellContent::block(1);

    const RewardParams p;
    const double r = dynamic_reward(render(a), render(real), render(real), p);
    CHECK(r == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("reward scorer matches the one-shot routine") {
    const RewardParams p;
    Rng rng(21);
    for (int seed = 0; seed < 20; ++seed) {
        const Task t = new_task(static_cast<std::uint64_t>(seed), TaskFamily::MatchBowls);
        const auto plan = oracle_plan(t.spec, t.state);
        REQUIRE(!plan.empty());
        const SymbolicState next = apply_action(t.state, plan.front());
        // A noisy "generation": the true next state with one random extra block.
        SymbolicState gen = next;
        gen.cells[rng.below(gen.cells.size())] = CellContent::block(rng.below_int(kNumColors));
        const Raster x_t = render(t.state), x_real = render(next), x_gen = render(gen);
        RewardScorer scorer(x_t, x_real, p);
        CHECK(scorer.score(x_gen) == dynamic_reward(x_t, x_gen, x_real, p));
    }
}

TEST_CASE("compressibility reward ordering") {
    Rng rng(5);
    Raster noise(64, 64);
    for (auto& b : noise.data) b = static_cast<std::uint8_t>(rng.below_int(256));
    const Raster constant = constant_raster(64, 40);

    const double c_const = compressibility_reward(constant, CompressSign::Compress);
    const double c_noise = compressibility_reward(noise, CompressSign::Compress);
    CHECK(c_const > c_noise);

    CHECK(compressibility_reward(constant, CompressSign::Incompress) <
          compressibility_reward(noise, CompressSign::Incompress));

    CHECK(compressibility_reward(noise, CompressSign::Compress) ==
          compressibility_reward(noise, CompressSign::Compress));
}
