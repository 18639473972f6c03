#include <doctest.h>

#include "arcmdl/puzzle.hpp"
#include "arcmdl/rng.hpp"
#include "support/toys.hpp"

using namespace arcmdl;

TEST_CASE("parse minimal well-formed task") {
  const Puzzle p = parse_puzzle(
      R"({"train":[{"input":[[1]],"output":[[1]]}],"test":[{"input":[[2]]}]})", "t");
  CHECK(p.n_example() == 2);
  CHECK(p.n_demo == 1);
  CHECK(p.n_test() == 1);
  CHECK(p.pairs[0].output.has_value());
  CHECK(!p.pairs[1].output.has_value());
}

TEST_CASE("parse rejects malformed input") {
  CHECK_THROWS(parse_puzzle("not json"));
  // ragged rows
  CHECK_THROWS(parse_puzzle(
      R"({"train":[{"input":[[1,2,3],[1,2,3,4]],"output":[[1]]}],"test":[{"input":[[2]]}]})"));
  // color out of range
  CHECK_THROWS(parse_puzzle(R"({"train":[{"input":[[10]],"output":[[1]]}],"test":[{"input":[[2]]}]})"));
  // empty arrays
  CHECK_THROWS(parse_puzzle(R"({"train":[],"test":[{"input":[[2]]}]})"));
  CHECK_THROWS(parse_puzzle(R"({"train":[{"input":[[1]],"output":[[1]]}],"test":[]})"));
  // missing demonstration output
  CHECK_THROWS(parse_puzzle(R"({"train":[{"input":[[1]]}],"test":[{"input":[[2]]}]})"));
}

TEST_CASE("test outputs are quarantined but preserved for scoring") {
  const Puzzle p = parse_puzzle(
      R"({"train":[{"input":[[1]],"output":[[2]]}],"test":[{"input":[[2]],"output":[[1]]}]})", "t");
  CHECK(!p.pairs[1].output.has_value());
  REQUIRE(p.hidden_test_outputs.size() == 1);
  REQUIRE(p.hidden_test_outputs[0].has_value());
  CHECK(p.hidden_test_outputs[0]->at(0, 0) == 1);
}

TEST_CASE("round-trip parse -> serialize -> parse") {
  Rng rng(42);
  const Puzzle p = toys::crop_puzzle(9);
  const std::string s = serialize_puzzle(p);
  const Puzzle q = parse_puzzle(s, p.id);
  REQUIRE(q.n_example() == p.n_example());
  REQUIRE(q.n_demo == p.n_demo);
  for (int i = 0; i < p.n_example(); ++i) {
    CHECK(q.pairs[(size_t)i].input == p.pairs[(size_t)i].input);
    CHECK(q.pairs[(size_t)i].output.has_value() == p.pairs[(size_t)i].output.has_value());
    if (p.pairs[(size_t)i].output.has_value())
      CHECK(*q.pairs[(size_t)i].output == *p.pairs[(size_t)i].output);
  }
  REQUIRE(q.hidden_test_outputs.size() == p.hidden_test_outputs.size());
  CHECK(*q.hidden_test_outputs[0] == *p.hidden_test_outputs[0]);
}

TEST_CASE("rule 1: outputs match inputs") {
  const Puzzle p = toys::identity_puzzle();
  const ShapeInfo info = infer_shape_rules(p);
  CHECK(info.rule1);
  for (int i = 0; i < p.n_example(); ++i) {
    REQUIRE(info.predicted[(size_t)i].has_value());
    CHECK(info.predicted[(size_t)i]->h == p.pairs[(size_t)i].input.h);
    CHECK(info.predicted[(size_t)i]->w == p.pairs[(size_t)i].input.w);
  }
}

TEST_CASE("rule 3: constant output shape wins when rule 1 fails") {
  const Puzzle p = toys::crop_puzzle();
  const ShapeInfo info = infer_shape_rules(p);
  CHECK(!info.rule1);
  CHECK(info.rule3);
  REQUIRE(info.predicted[3].has_value());
  CHECK(info.predicted[3]->h == 2);
  CHECK(info.predicted[3]->w == 2);
}

TEST_CASE("no rule: canvas is the max extent and the test output mask is free") {
  Puzzle p;
  p.id = "norule";
  auto mk = [](int h, int w) {
    Grid g(h, w);
    for (auto& c : g.cells) c = 5;
    return g;
  };
  PuzzlePair a;
  a.input = mk(2, 7);
  a.output = mk(3, 2);
  PuzzlePair b;
  b.input = mk(5, 3);
  b.output = mk(2, 2);
  p.pairs = {a, b};
  p.n_demo = 2;
  PuzzlePair t;
  t.input = mk(4, 4);
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);

  const ShapeInfo info = infer_shape_rules(p);
  CHECK(!info.rule1);
  CHECK(!info.rule3);
  CHECK(info.canvas_h == 5);
  CHECK(info.canvas_w == 7);
  CHECK(!info.predicted[2].has_value());
  // free output mask for the unpredicted test pair
  for (uint8_t v : info.masks[2][kOutputSide].rows) CHECK(v == 1);
  for (uint8_t v : info.masks[2][kOutputSide].cols) CHECK(v == 1);
}

TEST_CASE("masks count exactly the grid extents") {
  const Puzzle p = toys::crop_puzzle();
  const ShapeInfo info = infer_shape_rules(p);
  for (int i = 0; i < p.n_example(); ++i) {
    const auto& m = info.masks[(size_t)i][kInputSide];
    int rows = 0, cols = 0;
    for (uint8_t v : m.rows) rows += v;
    for (uint8_t v : m.cols) cols += v;
    CHECK(rows == p.pairs[(size_t)i].input.h);
    CHECK(cols == p.pairs[(size_t)i].input.w);
  }
}

TEST_CASE("rule precedence: rule1 prediction wins when both hold") {
  // Constant-shape square puzzle satisfies both rule 1 and rule 3.
  Puzzle p = toys::identity_puzzle();
  const ShapeInfo info = infer_shape_rules(p);
  CHECK(info.rule1);
  CHECK(info.rule3);
  for (int i = 0; i < p.n_example(); ++i) {
    CHECK(info.predicted[(size_t)i]->h == p.pairs[(size_t)i].input.h);
    CHECK(info.predicted[(size_t)i]->w == p.pairs[(size_t)i].input.w);
  }
}

TEST_CASE("color map: sorted distinct non-black codes") {
  Puzzle p;
  Grid g(1, 3);
  g.cells = {0, 5, 3};
  PuzzlePair a;
  a.input = g;
  a.output = g;
  p.pairs = {a};
  p.n_demo = 1;
  PuzzlePair t;
  t.input = g;
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);

  const ColorMap cm = build_color_map(p);
  REQUIRE(cm.n_colors() == 2);
  CHECK(cm.present[0] == 3);
  CHECK(cm.present[1] == 5);
  CHECK(cm.index_of[3] == 0);
  CHECK(cm.index_of[5] == 1);
  CHECK(cm.code_of(cm.black_index()) == 0);
}

TEST_CASE("color map: all-black puzzle has zero colors") {
  Puzzle p;
  Grid g(2, 2);
  PuzzlePair a;
  a.input = g;
  a.output = g;
  p.pairs = {a};
  p.n_demo = 1;
  PuzzlePair t;
  t.input = g;
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);
  CHECK(build_color_map(p).n_colors() == 0);
}

TEST_CASE("color map: full palette") {
  Puzzle p;
  Grid g(3, 3);
  for (int i = 0; i < 9; ++i) g.cells[(size_t)i] = static_cast<uint8_t>(i + 1);
  PuzzlePair a;
  a.input = g;
  a.output = g;
  p.pairs = {a};
  p.n_demo = 1;
  PuzzlePair t;
  t.input = g;
  p.pairs.push_back(t);
  p.hidden_test_outputs.push_back(std::nullopt);
  CHECK(build_color_map(p).n_colors() == 9);
}
