#include "vlplan/gridworld.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "vlplan/rng.hpp"

#include <json.hpp>

namespace vlplan {

// ---------------------------------------------------------------------------
// Colors and cell codes
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kColorNames[kNumColors] = {"red",    "green",  "blue",
                                                 "yellow", "orange", "purple"};
constexpr std::uint8_t kColorRgb[kNumColors][3] = {
    {220, 60, 60}, {60, 200, 80}, {70, 90, 230}, {230, 210, 70}, {240, 150, 50}, {170, 80, 200}};
}  // namespace

const std::uint8_t kBackgroundRgb[3] = {40, 40, 40};

const char* color_name(int color) { return kColorNames[color]; }

void color_rgb(int color, std::uint8_t out[3]) {
    for (int i = 0; i < 3; ++i) out[i] = kColorRgb[color][i];
}

int cell_code(const CellContent& c) {
    switch (c.kind) {
        case CellKind::Empty: return 0;
        case CellKind::Block: return 1 + c.block_color;
        case CellKind::Bowl: return 1 + kNumColors + c.bowl_color;
        case CellKind::BlockInBowl:
            return 1 + 2 * kNumColors + c.block_color * kNumColors + c.bowl_color;
    }
    return 0;
}

CellContent cell_from_code(int code) {
    require(code >= 0 && code < kNumCellCodes, ErrorKind::InvalidToken,
            "cell code out of range: " + std::to_string(code));
    if (code == 0) return CellContent::empty();
    code -= 1;
    if (code < kNumColors) return CellContent::block(code);
    code -= kNumColors;
    if (code < kNumColors) return CellContent::bowl(code);
    code -= kNumColors;
    return CellContent::block_in_bowl(code / kNumColors, code % kNumColors);
}

// ---------------------------------------------------------------------------
// Tasks
// ---------------------------------------------------------------------------

const char* family_name(TaskFamily f) {
    switch (f) {
        case TaskFamily::MoveToZone: return "MoveToZone";
        case TaskFamily::StackByColor: return "StackByColor";
        case TaskFamily::MatchBowls: return "MatchBowls";
    }
    return "?";
}

TaskFamily family_from_name(const std::string& name) {
    if (name == "MoveToZone") return TaskFamily::MoveToZone;
    if (name == "StackByColor") return TaskFamily::StackByColor;
    if (name == "MatchBowls") return TaskFamily::MatchBowls;
    fail(ErrorKind::BadConfig, "unknown task family: " + name);
}

const char* zone_name(Zone z) {
    switch (z) {
        case Zone::Left: return "left";
        case Zone::Right: return "right";
        case Zone::Top: return "top";
        case Zone::Bottom: return "bottom";
    }
    return "?";
}

bool zone_contains(Zone z, int grid, int r, int c) {
    const int half = grid / 2;
    switch (z) {
        case Zone::Left: return c < half;
        case Zone::Right: return c >= half;
        case Zone::Top: return r < half;
        case Zone::Bottom: return r >= half;
    }
    return false;
}

std::string render_instruction(const TaskSpec& t) {
    switch (t.family) {
        case TaskFamily::MoveToZone:
            return std::string("move all the blocks to the ") + zone_name(t.zone) + " area";
        case TaskFamily::StackByColor:
            return std::string("stack the ") + color_name(t.color) + " blocks in column c" +
                   std::to_string(t.column);
        case TaskFamily::MatchBowls:
            return "put the blocks in the bowls with matching colors";
    }
    return "";
}

// ---------------------------------------------------------------------------
// Actions
// ---------------------------------------------------------------------------

std::string LanguageAction::text() const {
    return std::string("move the ") + color_name(color) + " block at r" + std::to_string(src_r) +
           " c" + std::to_string(src_c) + " to r" + std::to_string(dst_r) + " c" +
           std::to_string(dst_c);
}

std::vector<int> LanguageAction::tokens(const Vocab& v) const {
    std::vector<int> out = v.encode(text());
    out.push_back(v.eoa());
    return out;
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && text[i] == ' ') ++i;
        std::size_t j = i;
        while (j < text.size() && text[j] != ' ') ++j;
        if (j > i) out.push_back(text.substr(i, j - i));
        i = j;
    }
    return out;
}

std::optional<int> parse_coord(const std::string& w, char prefix, int grid) {
    if (w.size() < 2 || w[0] != prefix) return std::nullopt;
    int v = 0;
    for (std::size_t i = 1; i < w.size(); ++i) {
        if (w[i] < '0' || w[i] > '9') return std::nullopt;
        v = v * 10 + (w[i] - '0');
    }
    if (v >= grid) return std::nullopt;
    return v;
}

std::optional<int> color_from_name(const std::string& w) {
    for (int c = 0; c < kNumColors; ++c)
        if (w == kColorNames[c]) return c;
    return std::nullopt;
}

}  // namespace

std::optional<LanguageAction> parse_action(const std::string& text, int grid) {
    const auto w = split_words(text);
    if (w.size() != 10) return std::nullopt;
    if (w[0] != "move" || w[1] != "the" || w[3] != "block" || w[4] != "at" || w[7] != "to")
        return std::nullopt;
    const auto color = color_from_name(w[2]);
    const auto sr = parse_coord(w[5], 'r', grid);
    const auto sc = parse_coord(w[6], 'c', grid);
    const auto dr = parse_coord(w[8], 'r', grid);
    const auto dc = parse_coord(w[9], 'c', grid);
    if (!color || !sr || !sc || !dr || !dc) return std::nullopt;
    return LanguageAction{*color, *sr, *sc, *dr, *dc};
}

std::optional<LanguageAction> parse_action_tokens(const std::vector<int>& tokens,
                                                  const Vocab& v) {
    if (tokens.empty()) return std::nullopt;
    std::vector<int> body = tokens;
    if (body.back() == v.eoa()) body.pop_back();
    std::string text;
    for (std::size_t i = 0; i < body.size(); ++i) {
        if (body[i] < 0 || body[i] >= v.size()) return std::nullopt;
        if (i) text += ' ';
        text += v.word(body[i]);
    }
    return parse_action(text, v.grid());
}

// ---------------------------------------------------------------------------
// Environment dynamics
// ---------------------------------------------------------------------------

SymbolicState apply_action(const SymbolicState& s, const LanguageAction& a) {
    require(s.in_bounds(a.src_r, a.src_c) && s.in_bounds(a.dst_r, a.dst_c),
            ErrorKind::IllegalAction, "coordinates out of bounds");
    require(!(a.src_r == a.dst_r && a.src_c == a.dst_c), ErrorKind::IllegalAction,
            "source equals target");
    const CellContent& src = s.at(a.src_r, a.src_c);
    require(src.kind == CellKind::Block && src.block_color == a.color, ErrorKind::IllegalAction,
            "source cell does not hold a standalone " + std::string(color_name(a.color)) +
                " block");
    const CellContent& dst = s.at(a.dst_r, a.dst_c);
    require(dst.kind == CellKind::Empty || dst.kind == CellKind::Bowl, ErrorKind::IllegalAction,
            "target cell is occupied");

    SymbolicState out = s;
    out.at(a.src_r, a.src_c) = CellContent::empty();
    if (dst.kind == CellKind::Empty) {
        out.at(a.dst_r, a.dst_c) = CellContent::block(a.color);
    } else {
        out.at(a.dst_r, a.dst_c) = CellContent::block_in_bowl(a.color, dst.bowl_color);
    }
    return out;
}

bool check_success(const TaskSpec& g, const SymbolicState& s) {
    switch (g.family) {
        case TaskFamily::MoveToZone: {
            for (int r = 0; r < s.grid; ++r)
                for (int c = 0; c < s.grid; ++c) {
                    const auto& cell = s.at(r, c);
                    const bool has_block =
                        cell.kind == CellKind::Block || cell.kind == CellKind::BlockInBowl;
                    if (has_block && !zone_contains(g.zone, s.grid, r, c)) return false;
                }
            return true;
        }
        case TaskFamily::StackByColor: {
            int k = 0;
            for (const auto& cell : s.cells) {
                if ((cell.kind == CellKind::Block || cell.kind == CellKind::BlockInBowl) &&
                    cell.block_color == g.color)
                    ++k;
            }
            for (int j = 0; j < k; ++j) {
                const auto& cell = s.at(s.grid - 1 - j, g.column);
                if (!(cell.kind == CellKind::Block && cell.block_color == g.color)) return false;
            }
            return true;
        }
        case TaskFamily::MatchBowls: {
            for (const auto& cell : s.cells) {
                if (cell.kind == CellKind::Block) return false;  // standalone block remains
                if (cell.kind == CellKind::BlockInBowl && cell.block_color != cell.bowl_color)
                    return false;
            }
            return true;
        }
    }
    return false;
}

namespace {

// Row-major scan for the first cell satisfying pred; -1,-1 when absent.
template <typename Pred>
std::pair<int, int> find_cell(const SymbolicState& s, Pred pred) {
    for (int r = 0; r < s.grid; ++r)
        for (int c = 0; c < s.grid; ++c)
            if (pred(s.at(r, c), r, c)) return {r, c};
    return {-1, -1};
}

std::optional<LanguageAction> oracle_step(const TaskSpec& g, const SymbolicState& s) {
    switch (g.family) {
        case TaskFamily::MoveToZone: {
            auto [br, bc] = find_cell(s, [&](const CellContent& cell, int r, int c) {
                return cell.kind == CellKind::Block && !zone_contains(g.zone, s.grid, r, c);
            });
            if (br < 0) return std::nullopt;
            auto [tr, tc] = find_cell(s, [&](const CellContent& cell, int r, int c) {
                return cell.kind == CellKind::Empty && zone_contains(g.zone, s.grid, r, c);
            });
            if (tr < 0) return std::nullopt;
            return LanguageAction{s.at(br, bc).block_color, br, bc, tr, tc};
        }
        case TaskFamily::StackByColor: {
            // Count target-color blocks and the already-correct stack prefix.
            int k = 0;
            for (const auto& cell : s.cells)
                if (cell.kind == CellKind::Block && cell.block_color == g.color) ++k;
            int done = 0;
            while (done < k) {
                const auto& cell = s.at(s.grid - 1 - done, g.column);
                if (cell.kind == CellKind::Block && cell.block_color == g.color)
                    ++done;
                else
                    break;
            }
            if (done == k) return std::nullopt;
            const int tr = s.grid - 1 - done;
            const auto& target_cell = s.at(tr, g.column);
            if (target_cell.kind == CellKind::Block) {
                // A wrong block occupies the next stack cell: evict it to the
                // first empty cell outside the column.
                auto [er, ec] = find_cell(s, [&](const CellContent& cell, int, int c) {
                    return cell.kind == CellKind::Empty && c != g.column;
                });
                if (er < 0) return std::nullopt;
                return LanguageAction{target_cell.block_color, tr, g.column, er, ec};
            }
            if (target_cell.kind != CellKind::Empty) return std::nullopt;
            // First misplaced block of the target color (skip the done prefix).
            auto [br, bc] = find_cell(s, [&](const CellContent& cell, int r, int c) {
                if (!(cell.kind == CellKind::Block && cell.block_color == g.color)) return false;
                return !(c == g.column && r >= s.grid - done);
            });
            if (br < 0) return std::nullopt;
            return LanguageAction{g.color, br, bc, tr, g.column};
        }
        case TaskFamily::MatchBowls: {
            auto [br, bc] = find_cell(s, [](const CellContent& cell, int, int) {
                return cell.kind == CellKind::Block;
            });
            if (br < 0) return std::nullopt;
            const int color = s.at(br, bc).block_color;
            auto [wr, wc] = find_cell(s, [&](const CellContent& cell, int, int) {
                return cell.kind == CellKind::Bowl && cell.bowl_color == color;
            });
            if (wr < 0) return std::nullopt;
            return LanguageAction{color, br, bc, wr, wc};
        }
    }
    return std::nullopt;
}

}  // namespace

std::vector<LanguageAction> oracle_plan(const TaskSpec& g, const SymbolicState& s) {
    std::vector<LanguageAction> plan;
    SymbolicState cur = s;
    const int cap = 4 * s.grid * s.grid;
    while (!check_success(g, cur)) {
        auto step = oracle_step(g, cur);
        require(step.has_value() && static_cast<int>(plan.size()) < cap, ErrorKind::Unsolvable,
                "no oracle step from this state");
        cur = apply_action(cur, *step);
        plan.push_back(*step);
    }
    return plan;
}

std::optional<LanguageAction> oracle_next(const TaskSpec& g, const SymbolicState& s) {
    if (check_success(g, s)) return std::nullopt;
    auto step = oracle_step(g, s);
    if (!step) return std::nullopt;
    // Guard against a stuck oracle suggesting an illegal move.
    try {
        apply_action(s, *step);
    } catch (const Error&) {
        return std::nullopt;
    }
    return step;
}

// ---------------------------------------------------------------------------
// Task generation
// ---------------------------------------------------------------------------

namespace {

std::pair<int, int> place_free(Rng& rng, const SymbolicState& s) {
    for (int tries = 0; tries < 1024; ++tries) {
        int r = rng.below_int(s.grid);
        int c = rng.below_int(s.grid);
        if (s.at(r, c).kind == CellKind::Empty) return {r, c};
    }
    fail(ErrorKind::Unsolvable, "no free cell found");
}

Task generate_once(Rng& rng, TaskFamily family, int grid) {
    Task t;
    t.state = SymbolicState(grid);
    t.spec.family = family;
    switch (family) {
        case TaskFamily::MoveToZone: {
            t.spec.zone = static_cast<Zone>(rng.below_int(4));
            const int n = 2 + rng.below_int(5);  // 2..6 blocks
            for (int i = 0; i < n; ++i) {
                auto [r, c] = place_free(rng, t.state);
                t.state.at(r, c) = CellContent::block(rng.below_int(kNumColors));
            }
            break;
        }
        case TaskFamily::StackByColor: {
            t.spec.color = rng.below_int(kNumColors);
            t.spec.column = rng.below_int(grid);
            const int k = 2 + rng.below_int(3);       // 2..4 target blocks
            const int extras = rng.below_int(3);      // 0..2 distractors
            for (int i = 0; i < k + extras; ++i) {
                for (int tries = 0;; ++tries) {
                    require(tries < 1024, ErrorKind::Unsolvable, "placement failed");
                    auto [r, c] = place_free(rng, t.state);
                    if (c == t.spec.column) continue;  // keep the stack column clear
                    int color = t.spec.color;
                    if (i >= k) {
                        color = rng.below_int(kNumColors - 1);
                        if (color >= t.spec.color) ++color;  // distractor != target color
                    }
                    t.state.at(r, c) = CellContent::block(color);
                    break;
                }
            }
            break;
        }
        case TaskFamily::MatchBowls: {
            const int pairs = 1 + rng.below_int(3);  // 1..3 colors, one block+bowl each
            std::vector<int> colors(kNumColors);
            for (int i = 0; i < kNumColors; ++i) colors[i] = i;
            rng.shuffle(colors);
            for (int i = 0; i < pairs; ++i) {
                auto [br, bc] = place_free(rng, t.state);
                t.state.at(br, bc) = CellContent::block(colors[i]);
                auto [wr, wc] = place_free(rng, t.state);
                t.state.at(wr, wc) = CellContent::bowl(colors[i]);
            }
            break;
        }
    }
    t.spec.instruction = render_instruction(t.spec);
    return t;
}

}  // namespace

Task new_task(std::uint64_t seed, TaskFamily family, int grid) {
    Rng rng = Rng::derive(seed, 0x7a5bull, static_cast<std::uint64_t>(family));
    for (int attempt = 0; attempt < 100; ++attempt) {
        Task t = generate_once(rng, family, grid);
        if (check_success(t.spec, t.state)) continue;  // degenerate: already solved
        try {
            oracle_plan(t.spec, t.state);
        } catch (const Error&) {
            continue;
        }
        return t;
    }
    fail(ErrorKind::Unsolvable, "task generation failed after bounded retries");
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

Raster render(const SymbolicState& s) {
    const int side = s.grid * kCellPx;
    Raster img(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
            auto* p = img.px(y, x);
            p[0] = kBackgroundRgb[0];
            p[1] = kBackgroundRgb[1];
            p[2] = kBackgroundRgb[2];
        }
    std::uint8_t rgb[3];
    for (int r = 0; r < s.grid; ++r)
        for (int c = 0; c < s.grid; ++c) {
            const CellContent& cell = s.at(r, c);
            if (cell.kind == CellKind::Empty) continue;
            const int y0 = r * kCellPx;
            const int x0 = c * kCellPx;
            if (cell.kind == CellKind::Block) {
                color_rgb(cell.block_color, rgb);
                for (int y = 0; y < kCellPx; ++y)
                    for (int x = 0; x < kCellPx; ++x) {
                        auto* p = img.px(y0 + y, x0 + x);
                        p[0] = rgb[0]; p[1] = rgb[1]; p[2] = rgb[2];
                    }
                continue;
            }
            // Bowl ring (outermost pixel of the cell).
            color_rgb(cell.bowl_color, rgb);
            for (int y = 0; y < kCellPx; ++y)
                for (int x = 0; x < kCellPx; ++x) {
                    if (y != 0 && y != kCellPx - 1 && x != 0 && x != kCellPx - 1) continue;
                    auto* p = img.px(y0 + y, x0 + x);
                    p[0] = rgb[0]; p[1] = rgb[1]; p[2] = rgb[2];
                }
            if (cell.kind == CellKind::BlockInBowl) {
                // Inset 4x4 block, one background pixel inside the ring.
                color_rgb(cell.block_color, rgb);
                for (int y = 2; y < kCellPx - 2; ++y)
                    for (int x = 2; x < kCellPx - 2; ++x) {
                        auto* p = img.px(y0 + y, x0 + x);
                        p[0] = rgb[0]; p[1] = rgb[1]; p[2] = rgb[2];
                    }
            }
        }
    return img;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

std::vector<GoalTransition> sample_dataset(std::uint64_t seed, int episodes,
                                           const std::vector<TaskFamily>& families, int grid) {
    require(episodes > 0, ErrorKind::BadConfig, "episode count must be positive");
    require(!families.empty(), ErrorKind::BadConfig, "family list must be nonempty");
    std::vector<GoalTransition> out;
    for (int ep = 0; ep < episodes; ++ep) {
        Rng rng = Rng::derive(seed, 0xda7aull, static_cast<std::uint64_t>(ep));
        const TaskFamily family = families[rng.below(families.size())];
        Task task = new_task(rng.next_u64(), family, grid);
        const auto plan = oracle_plan(task.spec, task.state);
        SymbolicState cur = task.state;
        const bool is_test = (ep % 10) == 9;
        for (std::size_t i = 0; i < plan.size(); ++i) {
            GoalTransition tr;
            tr.g = task.spec;
            tr.x_t = cur;
            tr.a_t = plan[i];
            cur = apply_action(cur, plan[i]);
            tr.x_t1 = cur;
            tr.episode = ep;
            tr.step = static_cast<int>(i);
            tr.is_test = is_test;
            out.push_back(std::move(tr));
        }
    }
    return out;
}

namespace {

nlohmann::ordered_json state_codes(const SymbolicState& s) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& cell : s.cells) arr.push_back(cell_code(cell));
    return arr;
}

SymbolicState state_from_codes(const nlohmann::json& arr, int grid) {
    SymbolicState s(grid);
    require(static_cast<int>(arr.size()) == grid * grid, ErrorKind::Io,
            "state array has wrong length");
    for (int i = 0; i < grid * grid; ++i) s.cells[i] = cell_from_code(arr[i].get<int>());
    return s;
}

TaskSpec spec_from_instruction(TaskFamily family, const std::string& instruction, int grid) {
    // Recover params by matching against the deterministic renderings.
    TaskSpec t;
    t.family = family;
    switch (family) {
        case TaskFamily::MoveToZone:
            for (int z = 0; z < 4; ++z) {
                t.zone = static_cast<Zone>(z);
                if (render_instruction(t) == instruction) break;
            }
            break;
        case TaskFamily::StackByColor: {
            bool found = false;
            for (int c = 0; c < kNumColors && !found; ++c)
                for (int col = 0; col < grid && !found; ++col) {
                    t.color = c;
                    t.column = col;
                    found = render_instruction(t) == instruction;
                }
            break;
        }
        case TaskFamily::MatchBowls: break;
    }
    t.instruction = render_instruction(t);
    require(t.instruction == instruction, ErrorKind::Io,
            "instruction does not match any task rendering: " + instruction);
    return t;
}

}  // namespace

void write_dataset_jsonl(const std::vector<GoalTransition>& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot open for writing: " + path);
    for (const auto& tr : data) {
        nlohmann::ordered_json rec;
        rec["episode"] = tr.episode;
        rec["step"] = tr.step;
        rec["family"] = family_name(tr.g.family);
        rec["instruction"] = tr.g.instruction;
        rec["state_before"] = state_codes(tr.x_t);
        rec["action"] = tr.a_t.text();
        rec["state_after"] = state_codes(tr.x_t1);
        rec["split"] = tr.is_test ? "test" : "train";
        out << rec.dump() << '\n';
    }
    require(out.good(), ErrorKind::Io, "write failed: " + path);
}

std::vector<GoalTransition> read_dataset_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open dataset: " + path);
    std::vector<GoalTransition> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        GoalTransition tr;
        tr.episode = rec.at("episode").get<int>();
        tr.step = rec.at("step").get<int>();
        const int grid = static_cast<int>(std::lround(std::sqrt(
            static_cast<double>(rec.at("state_before").size()))));
        tr.g = spec_from_instruction(family_from_name(rec.at("family").get<std::string>()),
                                     rec.at("instruction").get<std::string>(), grid);
        tr.x_t = state_from_codes(rec.at("state_before"), grid);
        tr.x_t1 = state_from_codes(rec.at("state_after"), grid);
        auto action = parse_action(rec.at("action").get<std::string>(), grid);
        require(action.has_value(), ErrorKind::Io, "unparsable action in dataset");
        tr.a_t = *action;
        tr.is_test = rec.at("split").get<std::string>() == "test";
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace vlplan
