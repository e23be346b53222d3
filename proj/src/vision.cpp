#include "vlplan/vision.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "vlplan/rng.hpp"

namespace vlplan {

std::vector<std::string> Codebook::describe() const {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(size()));
    for (int id = 0; id < size(); ++id) {
        const CellContent c = decode(id);
        switch (c.kind) {
            case CellKind::Empty: out.emplace_back("empty"); break;
            case CellKind::Block: out.emplace_back(std::string("block:") + color_name(c.block_color)); break;
            case CellKind::Bowl: out.emplace_back(std::string("bowl:") + color_name(c.bowl_color)); break;
            case CellKind::BlockInBowl:
                out.emplace_back(std::string("block_in_bowl:") + color_name(c.block_color) + ":" +
                                 color_name(c.bowl_color));
                break;
        }
    }
    return out;
}

TokenImage tokenize(const SymbolicState& s) {
    TokenImage t;
    t.grid = s.grid;
    t.tokens.reserve(s.cells.size());
    for (const auto& cell : s.cells) t.tokens.push_back(cell_code(cell));
    return t;
}

SymbolicState detokenize(const TokenImage& t) {
    SymbolicState s(t.grid);
    require(static_cast<int>(t.tokens.size()) == t.grid * t.grid, ErrorKind::InvalidToken,
            "token count does not match grid");
    for (std::size_t i = 0; i < t.tokens.size(); ++i) s.cells[i] = cell_from_code(t.tokens[i]);
    return s;
}

// ---------------------------------------------------------------------------
// Frozen semantic tower
// ---------------------------------------------------------------------------

namespace {

// Cell classification from pixels: the renderer is deterministic and
// cell-aligned, so each 8x8 patch is looked up against the 49 reference
// patches by hash. Unrecognized patches count as empty.
struct PatchIndex {
    std::unordered_map<std::size_t, int> code_by_hash;

    PatchIndex() {
        SymbolicState one(1);
        for (int code = 0; code < kNumCellCodes; ++code) {
            one.cells[0] = cell_from_code(code);
            const Raster r = render(one);
            code_by_hash[hash_bytes(r.data.data(), r.data.size())] = code;
        }
    }

    static std::size_t hash_bytes(const std::uint8_t* p, std::size_t n) {
        std::size_t h = 1469598103934665603ull;
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
        return h;
    }

    int classify(const Raster& img, int r, int c) const {
        std::uint8_t patch[kCellPx * kCellPx * 3];
        for (int y = 0; y < kCellPx; ++y) {
            const std::uint8_t* row = img.px(r * kCellPx + y, c * kCellPx);
            std::copy(row, row + kCellPx * 3, patch + y * kCellPx * 3);
        }
        auto it = code_by_hash.find(hash_bytes(patch, sizeof(patch)));
        return it == code_by_hash.end() ? 0 : it->second;
    }
};

const PatchIndex& patch_index() {
    static const PatchIndex idx;
    return idx;
}

constexpr std::uint64_t kSemanticProjectionSeed = 0x5e11a6e5ull;

const std::vector<double>& projection_matrix(int raw_dim, int d_sem) {
    // One fixed matrix per (raw_dim, d_sem); entries are seed-derived and
    // never updated.
    static std::unordered_map<std::uint64_t, std::vector<double>> cache;
    const std::uint64_t key = (static_cast<std::uint64_t>(raw_dim) << 32) |
                              static_cast<std::uint64_t>(d_sem);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Rng rng = Rng::derive(kSemanticProjectionSeed, raw_dim, d_sem);
    std::vector<double> m(static_cast<std::size_t>(raw_dim) * d_sem);
    const double scale = 1.0 / std::sqrt(static_cast<double>(raw_dim));
    for (auto& v : m) v = rng.normal() * scale;
    return cache.emplace(key, std::move(m)).first->second;
}

}  // namespace

std::vector<double> SemanticFeatures::concat() const {
    std::vector<double> out;
    out.reserve(histogram.size() + occupancy.size());
    out.insert(out.end(), histogram.begin(), histogram.end());
    out.insert(out.end(), occupancy.begin(), occupancy.end());
    return out;
}

SemanticFeatures semantic_features(const Raster& img, int grid) {
    require(img.height == grid * kCellPx && img.width == grid * kCellPx,
            ErrorKind::DimensionMismatch, "raster dims do not match grid");
    SemanticFeatures f;
    f.histogram.assign(2 * kNumColors, 0.0);
    f.occupancy.assign(static_cast<std::size_t>(2) * grid * kNumColors, 0.0);
    const auto& idx = patch_index();
    for (int r = 0; r < grid; ++r)
        for (int c = 0; c < grid; ++c) {
            const CellContent cell = cell_from_code(idx.classify(img, r, c));
            if (cell.kind == CellKind::Empty) continue;
            if (cell.kind == CellKind::Block || cell.kind == CellKind::BlockInBowl) {
                f.histogram[cell.block_color] += 1.0;
                f.occupancy[static_cast<std::size_t>(r) * kNumColors + cell.block_color] += 1.0;
                f.occupancy[static_cast<std::size_t>(grid + c) * kNumColors + cell.block_color] +=
                    1.0;
            }
            if (cell.kind == CellKind::Bowl || cell.kind == CellKind::BlockInBowl) {
                f.histogram[kNumColors + cell.bowl_color] += 1.0;
                f.occupancy[static_cast<std::size_t>(r) * kNumColors + cell.bowl_color] += 1.0;
                f.occupancy[static_cast<std::size_t>(grid + c) * kNumColors + cell.bowl_color] +=
                    1.0;
            }
        }
    return f;
}

std::vector<double> semantic_encode(const Raster& img, int grid, int d_sem) {
    const auto raw = semantic_features(img, grid).concat();
    const auto& m = projection_matrix(static_cast<int>(raw.size()), d_sem);
    std::vector<double> out(static_cast<std::size_t>(d_sem), 0.0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] == 0.0) continue;
        const double* row = m.data() + i * static_cast<std::size_t>(d_sem);
        for (int j = 0; j < d_sem; ++j) out[static_cast<std::size_t>(j)] += raw[i] * row[j];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial tower and fusion
// ---------------------------------------------------------------------------

std::vector<std::vector<double>> spatial_encode(const TokenImage& t,
                                                std::span<const double> embedding,
                                                std::span<const double> grid_pos, int d_model,
                                                int codebook_size) {
    const int n = t.grid * t.grid;
    require(static_cast<int>(embedding.size()) == codebook_size * d_model,
            ErrorKind::DimensionMismatch, "embedding table size mismatch");
    require(static_cast<int>(grid_pos.size()) == n * d_model, ErrorKind::DimensionMismatch,
            "grid positional table size mismatch");
    std::vector<std::vector<double>> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int id = t.tokens[static_cast<std::size_t>(i)];
        require(id >= 0 && id < codebook_size, ErrorKind::InvalidToken,
                "token id out of range: " + std::to_string(id));
        auto& row = rows[static_cast<std::size_t>(i)];
        row.resize(static_cast<std::size_t>(d_model));
        const double* e = embedding.data() + static_cast<std::size_t>(id) * d_model;
        const double* p = grid_pos.data() + static_cast<std::size_t>(i) * d_model;
        for (int j = 0; j < d_model; ++j) row[static_cast<std::size_t>(j)] = e[j] + p[j];
    }
    return rows;
}

const char* fuse_mode_name(FuseMode m) {
    switch (m) {
        case FuseMode::Full: return "full";
        case FuseMode::NoSe: return "no_se";
        case FuseMode::NoEn: return "no_en";
    }
    return "?";
}

std::vector<std::vector<double>> fuse_understanding(const std::vector<double>& semantic_slot,
                                                    const std::vector<std::vector<double>>& spatial,
                                                    FuseMode mode) {
    require(!spatial.empty(), ErrorKind::DimensionMismatch, "spatial rows required");
    const std::size_t d = spatial.front().size();
    for (const auto& row : spatial)
        require(row.size() == d, ErrorKind::DimensionMismatch, "ragged spatial rows");
    if (mode != FuseMode::NoSe)
        require(semantic_slot.size() == d, ErrorKind::DimensionMismatch,
                "semantic slot dim mismatch");

    std::vector<std::vector<double>> out;
    switch (mode) {
        case FuseMode::Full:
            out.push_back(semantic_slot);
            out.insert(out.end(), spatial.begin(), spatial.end());
            break;
        case FuseMode::NoSe:
            out = spatial;
            break;
        case FuseMode::NoEn: {
            out.push_back(semantic_slot);
            std::vector<double> pooled(d, 0.0);
            for (const auto& row : spatial)
                for (std::size_t j = 0; j < d; ++j) pooled[j] += row[j];
            for (auto& v : pooled) v /= static_cast<double>(spatial.size());
            out.push_back(std::move(pooled));
            break;
        }
    }
    return out;
}

int fused_slot_count(FuseMode mode, int n_cells) {
    switch (mode) {
        case FuseMode::Full: return 1 + n_cells;
        case FuseMode::NoSe: return n_cells;
        case FuseMode::NoEn: return 2;
    }
    return 0;
}

}  // namespace vlplan
