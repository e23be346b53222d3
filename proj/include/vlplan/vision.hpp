#pragma once

#include <span>
#include <string>
#include <vector>

#include "vlplan/gridworld.hpp"
#include "vlplan/raster.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Lossless tokenizer
// ---------------------------------------------------------------------------

// One token id per grid cell, equal to the canonical cell code. The codebook
// is a fixed bijection, so image-level metrics are exact.
struct Codebook {
    int size() const { return kNumCellCodes; }
    int encode(const CellContent& c) const { return cell_code(c); }
    CellContent decode(int id) const { return cell_from_code(id); }

    // Human-readable id -> content table, embedded in checkpoint headers.
    std::vector<std::string> describe() const;
};

struct TokenImage {
    int grid = 8;
    std::vector<int> tokens;  // grid*grid, row-major

    bool operator==(const TokenImage&) const = default;
};

TokenImage tokenize(const SymbolicState& s);
// Exact inverse; throws InvalidToken when any id is outside the codebook.
SymbolicState detokenize(const TokenImage& t);

// ---------------------------------------------------------------------------
// Frozen semantic tower
// ---------------------------------------------------------------------------

// Raw features extracted from a rendered raster: a per-color object-count
// histogram (blocks and bowls separately) plus per-row and per-column
// per-color occupancy counts. Layout-lossy by construction: only the row and
// column marginals survive, not joint positions.
struct SemanticFeatures {
    std::vector<double> histogram;  // 2*kNumColors
    std::vector<double> occupancy;  // 2*grid*kNumColors (rows then columns)

    std::vector<double> concat() const;
};

SemanticFeatures semantic_features(const Raster& r, int grid);

// Frozen encoder: features projected by a fixed seed-derived random matrix
// to d_sem dimensions. Never receives gradient updates.
std::vector<double> semantic_encode(const Raster& r, int grid, int d_sem);

// ---------------------------------------------------------------------------
// Trainable spatial tower and fusion
// ---------------------------------------------------------------------------

// Row i = embedding[tokens[i]] + grid positional embedding for cell i.
// Both tables are row-major [count, d_model] spans into the model parameters.
std::vector<std::vector<double>> spatial_encode(const TokenImage& t,
                                                std::span<const double> embedding,
                                                std::span<const double> grid_pos, int d_model,
                                                int codebook_size);

enum class FuseMode { Full, NoSe, NoEn };
const char* fuse_mode_name(FuseMode m);

// Full: [semantic slot] ++ [N spatial slots]; NoSe drops the semantic slot;
// NoEn collapses the spatial rows to their mean, keeping the semantic slot.
std::vector<std::vector<double>> fuse_understanding(const std::vector<double>& semantic_slot,
                                                    const std::vector<std::vector<double>>& spatial,
                                                    FuseMode mode);

// Slot count contributed by one image group under a fuse mode.
int fused_slot_count(FuseMode mode, int n_cells);

}  // namespace vlplan
