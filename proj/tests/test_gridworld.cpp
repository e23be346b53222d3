#include <doctest.h>

#include <filesystem>
#include <set>
#include <unordered_set>

#include "vlplan/gridworld.hpp"
#include "vlplan/rng.hpp"

using namespace vlplan;

namespace {

SymbolicState state_with(std::initializer_list<std::tuple<int, int, CellContent>> cells,
                         int grid = 8) {
    SymbolicState s(grid);
    for (const auto& [r, c, content] : cells) s.at(r, c) = content;
    return s;
}

SymbolicState random_state(Rng& rng, int grid = 8) {
    SymbolicState s(grid);
    const int n = 1 + rng.below_int(8);
    for (int i = 0; i < n; ++i)
        s.cells[rng.below(s.cells.size())] = cell_from_code(rng.below_int(kNumCellCodes));
    return s;
}

}  // namespace

TEST_CASE("cell codes are a bijection over the content space") {
    std::set<int> seen;
    for (int code = 0; code < kNumCellCodes; ++code) {
        const CellContent c = cell_from_code(code);
        CHECK(cell_code(c) == code);
        seen.insert(code);
    }
    CHECK(static_cast<int>(seen.size()) == kNumCellCodes);
    CHECK_THROWS_AS((void)cell_from_code(kNumCellCodes), Error);
    CHECK_THROWS_AS((void)cell_from_code(-1), Error);
}

TEST_CASE("new_task is deterministic per seed") {
    const Task a = new_task(7, TaskFamily::MoveToZone);
    const Task b = new_task(7, TaskFamily::MoveToZone);
    CHECK(a.spec == b.spec);
    CHECK(a.state == b.state);
    const Task c = new_task(8, TaskFamily::MoveToZone);
    CHECK((!(c.spec == a.spec) || !(c.state == a.state)));
}

TEST_CASE("MatchBowls tasks hold equal block and bowl counts per color") {
    const Task t = new_task(1, TaskFamily::MatchBowls);
    int blocks[kNumColors] = {0}, bowls[kNumColors] = {0};
    for (const auto& cell : t.state.cells) {
        if (cell.kind == CellKind::Block) ++blocks[cell.block_color];
        if (cell.kind == CellKind::Bowl) ++bowls[cell.bowl_color];
    }
    for (int c = 0; c < kNumColors; ++c) CHECK(blocks[c] == bowls[c]);
}

TEST_CASE("instruction renders exactly from the template") {
    const Task t = new_task(2, TaskFamily::StackByColor);
    const std::string expected = std::string("stack the ") + color_name(t.spec.color) +
                                 " blocks in column c" + std::to_string(t.spec.column);
    CHECK(t.spec.instruction == expected);
}

TEST_CASE("generated tasks have 2..6 objects on distinct cells") {
    for (std::uint64_t seed = 0; seed < 30; ++seed)
        for (TaskFamily f :
             {TaskFamily::MoveToZone, TaskFamily::StackByColor, TaskFamily::MatchBowls}) {
            const Task t = new_task(seed, f);
            int objects = 0;
            for (const auto& cell : t.state.cells)
                if (cell.kind != CellKind::Empty) ++objects;
            CHECK(objects >= 2);
            CHECK(objects <= 6);
        }
}

TEST_CASE("apply_action moves a block to an empty cell") {
    const auto s = state_with({{1, 1, CellContent::block(0)}});
    const SymbolicState out = apply_action(s, LanguageAction{0, 1, 1, 1, 2});
    CHECK(out.at(1, 1) == CellContent::empty());
    CHECK(out.at(1, 2) == CellContent::block(0));
    int non_empty = 0;
    for (const auto& cell : out.cells)
        if (cell.kind != CellKind::Empty) ++non_empty;
    CHECK(non_empty == 1);
}

TEST_CASE("apply_action onto a bowl produces block-in-bowl") {
    const auto s = state_with({{0, 0, CellContent::block(2)}, {3, 3, CellContent::bowl(2)}});
    const SymbolicState out = apply_action(s, LanguageAction{2, 0, 0, 3, 3});
    CHECK(out.at(3, 3) == CellContent::block_in_bowl(2, 2));
}

TEST_CASE("apply_action error paths") {
    const auto s = state_with({{1, 1, CellContent::block(0)}, {2, 2, CellContent::block(1)}});
    // empty source
    CHECK_THROWS_AS((void)apply_action(s, LanguageAction{0, 0, 0, 4, 4}), Error);
    // wrong color at source
    CHECK_THROWS_AS((void)apply_action(s, LanguageAction{3, 1, 1, 4, 4}), Error);
    // occupied target
    CHECK_THROWS_AS((void)apply_action(s, LanguageAction{0, 1, 1, 2, 2}), Error);
    try {
        (void)apply_action(s, LanguageAction{0, 0, 0, 4, 4});
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::IllegalAction);
    }
}

TEST_CASE("block conservation under legal actions") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const Task t = new_task(trial, TaskFamily::MoveToZone);
        auto plan = oracle_plan(t.spec, t.state);
        if (plan.empty()) continue;
        int before[kNumColors] = {0};
        for (const auto& cell : t.state.cells)
            if (cell.kind == CellKind::Block || cell.kind == CellKind::BlockInBowl)
                ++before[cell.block_color];
        const SymbolicState next = apply_action(t.state, plan.front());
        int after[kNumColors] = {0};
        for (const auto& cell : next.cells)
            if (cell.kind == CellKind::Block || cell.kind == CellKind::BlockInBowl)
                ++after[cell.block_color];
        for (int c = 0; c < kNumColors; ++c) CHECK(before[c] == after[c]);
    }
}

TEST_CASE("action text and tokens are interconvertible") {
    const Vocab vocab(8);
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        LanguageAction a;
        a.color = rng.below_int(kNumColors);
        a.src_r = rng.below_int(8);
        a.src_c = rng.below_int(8);
        a.dst_r = rng.below_int(8);
        a.dst_c = rng.below_int(8);
        const auto parsed = parse_action(a.text(), 8);
        REQUIRE(parsed.has_value());
        CHECK(*parsed == a);
        const auto toks = a.tokens(vocab);
        CHECK(toks.size() == 11);  // 10 grammar words + <eoa>
        CHECK(toks.back() == vocab.eoa());
        const auto from_tokens = parse_action_tokens(toks, vocab);
        REQUIRE(from_tokens.has_value());
        CHECK(*from_tokens == a);
    }
    CHECK(!parse_action("move the red block at r1 c1 to r9 c1", 8).has_value());
    CHECK(!parse_action("lift the red block at r1 c1 to r2 c2", 8).has_value());
    CHECK(!parse_action("move the red block at r1 c1 to r2", 8).has_value());
}

TEST_CASE("check_success per family") {
    TaskSpec move;
    move.family = TaskFamily::MoveToZone;
    move.zone = Zone::Left;
    CHECK(check_success(move, state_with({{0, 0, CellContent::block(0)},
                                          {5, 3, CellContent::block(1)}})));
    CHECK(!check_success(move, state_with({{0, 4, CellContent::block(0)}})));

    TaskSpec match;
    match.family = TaskFamily::MatchBowls;
    CHECK(check_success(match, state_with({{1, 1, CellContent::block_in_bowl(2, 2)}})));
    CHECK(!check_success(match, state_with({{1, 1, CellContent::block_in_bowl(2, 3)}})));
    CHECK(!check_success(match, state_with({{1, 1, CellContent::block(2)},
                                            {2, 2, CellContent::bowl(2)}})));

    TaskSpec stack;
    stack.family = TaskFamily::StackByColor;
    stack.color = 1;
    stack.column = 4;
    CHECK(check_success(stack, state_with({{7, 4, CellContent::block(1)},
                                           {6, 4, CellContent::block(1)},
                                           {0, 0, CellContent::block(2)}})));
    CHECK(!check_success(stack, state_with({{7, 4, CellContent::block(1)},
                                            {5, 4, CellContent::block(1)}})));
}

TEST_CASE("oracle plan length equals misplaced blocks for MoveToZone") {
    TaskSpec g;
    g.family = TaskFamily::MoveToZone;
    g.zone = Zone::Left;
    g.instruction = render_instruction(g);
    const auto s = state_with({{0, 5, CellContent::block(0)},
                               {3, 6, CellContent::block(1)},
                               {7, 7, CellContent::block(2)},
                               {2, 1, CellContent::block(3)}});
    const auto plan = oracle_plan(g, s);
    CHECK(plan.size() == 3);  // one block already in the zone
}

TEST_CASE("oracle fixed point: solved state gives empty plan") {
    TaskSpec g;
    g.family = TaskFamily::MoveToZone;
    g.zone = Zone::Top;
    g.instruction = render_instruction(g);
    const auto s = state_with({{0, 0, CellContent::block(0)}});
    CHECK(oracle_plan(g, s).empty());
    CHECK(!oracle_next(g, s).has_value());
}

TEST_CASE("oracle replay reaches success on MatchBowls") {
    const Task t = new_task(123, TaskFamily::MatchBowls);
    SymbolicState cur = t.state;
    for (const auto& a : oracle_plan(t.spec, t.state)) cur = apply_action(cur, a);
    CHECK(check_success(t.spec, cur));
}

TEST_CASE("oracle completeness over 1000 seeded tasks") {
    const TaskFamily fams[3] = {TaskFamily::MoveToZone, TaskFamily::StackByColor,
                                TaskFamily::MatchBowls};
    int solved = 0;
    for (int i = 0; i < 1000; ++i) {
        const Task t = new_task(static_cast<std::uint64_t>(i), fams[i % 3]);
        SymbolicState cur = t.state;
        for (const auto& a : oracle_plan(t.spec, t.state)) cur = apply_action(cur, a);
        solved += check_success(t.spec, cur);
    }
    CHECK(solved == 1000);
}

TEST_CASE("render: empty state is pure background") {
    const Raster img = render(SymbolicState(8));
    CHECK(img.height == 64);
    CHECK(img.width == 64);
    for (std::size_t i = 0; i < img.data.size(); i += 3) {
        CHECK(img.data[i] == kBackgroundRgb[0]);
        CHECK(img.data[i + 1] == kBackgroundRgb[1]);
        CHECK(img.data[i + 2] == kBackgroundRgb[2]);
    }
}

TEST_CASE("render: single block occupies exactly its cell") {
    const auto s = state_with({{0, 0, CellContent::block(0)}});
    const Raster img = render(s);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const auto* p = img.px(y, x);
            const bool background = p[0] == kBackgroundRgb[0] && p[1] == kBackgroundRgb[1] &&
                                    p[2] == kBackgroundRgb[2];
            if (y < 8 && x < 8)
                CHECK(!background);
            else
                CHECK(background);
        }
}

TEST_CASE("render is deterministic") {
    const Task t = new_task(9, TaskFamily::StackByColor);
    CHECK(render(t.state) == render(t.state));
}

TEST_CASE("rendering injectivity over 10000 random states") {
    Rng rng(42);
    std::unordered_set<std::size_t> hashes;
    std::vector<SymbolicState> states;
    for (int i = 0; i < 10000; ++i) states.push_back(random_state(rng));
    // Deduplicate states first; distinct states must hash distinctly.
    std::set<std::vector<int>> unique_states;
    int distinct = 0;
    for (const auto& s : states) {
        std::vector<int> codes;
        for (const auto& c : s.cells) codes.push_back(cell_code(c));
        if (!unique_states.insert(codes).second) continue;
        ++distinct;
        const Raster img = render(s);
        std::size_t h = 1469598103934665603ull;
        for (std::uint8_t b : img.data) {
            h ^= b;
            h *= 1099511628211ull;
        }
        hashes.insert(h);
    }
    CHECK(static_cast<int>(hashes.size()) == distinct);
}

TEST_CASE("sample_dataset invariants") {
    const auto data = sample_dataset(3, 100, {TaskFamily::MoveToZone, TaskFamily::MatchBowls});
    CHECK(!data.empty());
    for (const auto& tr : data) CHECK(apply_action(tr.x_t, tr.a_t) == tr.x_t1);

    const auto again = sample_dataset(3, 100, {TaskFamily::MoveToZone, TaskFamily::MatchBowls});
    REQUIRE(data.size() == again.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(data[i].x_t == again[i].x_t);
        CHECK(data[i].a_t == again[i].a_t);
    }

    std::set<int> train_eps, test_eps;
    for (const auto& tr : data) (tr.is_test ? test_eps : train_eps).insert(tr.episode);
    for (int ep : test_eps) CHECK(train_eps.count(ep) == 0);
    CHECK(train_eps.size() == 90);
    CHECK(test_eps.size() == 10);
}

TEST_CASE("dataset jsonl round trip") {
    const auto data = sample_dataset(5, 20,
                                     {TaskFamily::MoveToZone, TaskFamily::StackByColor,
                                      TaskFamily::MatchBowls});
    const std::string path = "/tmp/vlplan_test_dataset.jsonl";
    write_dataset_jsonl(data, path);
    const auto back = read_dataset_jsonl(path);
    REQUIRE(back.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back[i].g == data[i].g);
        CHECK(back[i].x_t == data[i].x_t);
        CHECK(back[i].a_t == data[i].a_t);
        CHECK(back[i].x_t1 == data[i].x_t1);
        CHECK(back[i].episode == data[i].episode);
        CHECK(back[i].is_test == data[i].is_test);
    }
    std::filesystem::remove(path);
}
