#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlplan/error.hpp"
#include "vlplan/raster.hpp"
#include "vlplan/vocab.hpp"

namespace vlplan {

// ---------------------------------------------------------------------------
// Cells and states
// ---------------------------------------------------------------------------

constexpr int kNumColors = 6;
const char* color_name(int color);          // "red", "green", ...
void color_rgb(int color, std::uint8_t out[3]);

enum class CellKind : std::uint8_t { Empty, Block, Bowl, BlockInBowl };

struct CellContent {
    CellKind kind = CellKind::Empty;
    std::int8_t block_color = -1;  // Block / BlockInBowl
    std::int8_t bowl_color = -1;   // Bowl / BlockInBowl

    static CellContent empty() { return {}; }
    static CellContent block(int c) { return {CellKind::Block, static_cast<std::int8_t>(c), -1}; }
    static CellContent bowl(int c) { return {CellKind::Bowl, -1, static_cast<std::int8_t>(c)}; }
    static CellContent block_in_bowl(int b, int w) {
        return {CellKind::BlockInBowl, static_cast<std::int8_t>(b), static_cast<std::int8_t>(w)};
    }

    bool operator==(const CellContent&) const = default;
};

// Canonical integer code for a cell: 0 empty, 1+c block, 7+c bowl,
// 13 + 6*block + bowl for block-in-bowl. 49 codes at 6 colors. This is the
// id space shared by the dataset files, the image tokenizer and checkpoints.
constexpr int kNumCellCodes = 1 + kNumColors + kNumColors + kNumColors * kNumColors;
int cell_code(const CellContent& c);
CellContent cell_from_code(int code);  // throws InvalidToken when out of range

struct SymbolicState {
    int grid = 8;
    std::vector<CellContent> cells;  // grid*grid, row-major

    SymbolicState() = default;
    explicit SymbolicState(int g) : grid(g), cells(static_cast<std::size_t>(g) * g) {}

    CellContent& at(int r, int c) { return cells[static_cast<std::size_t>(r) * grid + c]; }
    const CellContent& at(int r, int c) const {
        return cells[static_cast<std::size_t>(r) * grid + c];
    }
    bool in_bounds(int r, int c) const { return r >= 0 && r < grid && c >= 0 && c < grid; }

    bool operator==(const SymbolicState&) const = default;
};

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

enum class TaskFamily : std::uint8_t { MoveToZone, StackByColor, MatchBowls };
const char* family_name(TaskFamily f);
TaskFamily family_from_name(const std::string& name);

enum class Zone : std::uint8_t { Left, Right, Top, Bottom };
const char* zone_name(Zone z);
bool zone_contains(Zone z, int grid, int r, int c);

struct TaskSpec {
    TaskFamily family = TaskFamily::MoveToZone;
    Zone zone = Zone::Left;  // MoveToZone
    int color = 0;           // StackByColor
    int column = 0;          // StackByColor
    std::string instruction; // rendered deterministically from the params

    bool operator==(const TaskSpec&) const = default;
};

std::string render_instruction(const TaskSpec& t);

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

// "move the <color> block at r<y> c<x> to r<y> c<x>", one word per token,
// terminated by <eoa>. Text and token forms are interconvertible exactly.
struct LanguageAction {
    int color = 0;
    int src_r = 0, src_c = 0;
    int dst_r = 0, dst_c = 0;

    std::string text() const;
    std::vector<int> tokens(const Vocab& v) const;  // includes the trailing <eoa>
    bool operator==(const LanguageAction&) const = default;
};

// Parses action text; empty result on any deviation from the grammar.
std::optional<LanguageAction> parse_action(const std::string& text, int grid);
std::optional<LanguageAction> parse_action_tokens(const std::vector<int>& tokens,
                                                  const Vocab& v);

// ---------------------------------------------------------------------------
// Environment operations
// ---------------------------------------------------------------------------

struct Task {
    TaskSpec spec;
    SymbolicState state;
};

// Deterministic per (seed, family); retries placement until the task is
// solvable and not already solved, then fails fast.
Task new_task(std::uint64_t seed, TaskFamily family, int grid = 8);

// Moves one block; throws IllegalAction on a bad parse target, wrong color
// at the source, or an occupied destination.
SymbolicState apply_action(const SymbolicState& s, const LanguageAction& a);

bool check_success(const TaskSpec& g, const SymbolicState& s);

// Greedy deterministic plan (row-major over misplaced objects). Executing it
// from s yields check_success == true. Throws Unsolvable when no plan exists
// (possible only for states damaged by non-oracle play).
std::vector<LanguageAction> oracle_plan(const TaskSpec& g, const SymbolicState& s);

// First oracle action from s, or nullopt when solved/unsolvable.
std::optional<LanguageAction> oracle_next(const TaskSpec& g, const SymbolicState& s);

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

constexpr int kCellPx = 8;
extern const std::uint8_t kBackgroundRgb[3];

// (grid*8)^2 RGB raster: blocks fill the cell, bowls are a 1 px ring,
// a block in a bowl is the ring plus an inset 4x4 square.
Raster render(const SymbolicState& s);

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct GoalTransition {
    TaskSpec g;
    SymbolicState x_t;
    LanguageAction a_t;
    SymbolicState x_t1;
    int episode = 0;
    int step = 0;
    bool is_test = false;
};

// Rolls oracle plans for `episodes` seeded tasks, one GoalTransition per
// step; episodes are split 90/10 train/test (episode % 10 == 9 -> test).
std::vector<GoalTransition> sample_dataset(std::uint64_t seed, int episodes,
                                           const std::vector<TaskFamily>& families,
                                           int grid = 8);

// JSON-lines dataset file; one record per transition with the cell-code
// arrays documented in the README.
void write_dataset_jsonl(const std::vector<GoalTransition>& data, const std::string& path);
std::vector<GoalTransition> read_dataset_jsonl(const std::string& path);

}  // namespace vlplan
