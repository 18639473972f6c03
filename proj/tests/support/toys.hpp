#pragma once

// Constructed puzzles with known ground truth, used across the unit and
// acceptance suites.

#include <vector>

#include "arcmdl/puzzle.hpp"
#include "arcmdl/rng.hpp"

namespace arcmdl::toys {

inline Grid random_grid(int h, int w, const std::vector<uint8_t>& palette, Rng& rng) {
  Grid g(h, w);
  for (auto& c : g.cells) c = palette[rng.below(palette.size())];
  return g;
}

// Output equals input. 3 demonstrations plus one test pair, 4x4, colors {1,2}.
inline Puzzle identity_puzzle(uint64_t seed = 7) {
  Rng rng(seed);
  Puzzle p;
  p.id = "toy_identity";
  const std::vector<uint8_t> palette{1, 2};
  for (int i = 0; i < 3; ++i) {
    PuzzlePair pair;
    pair.input = random_grid(4, 4, palette, rng);
    pair.output = pair.input;
    p.pairs.push_back(pair);
  }
  p.n_demo = 3;
  PuzzlePair test;
  test.input = random_grid(4, 4, palette, rng);
  p.pairs.push_back(test);
  p.hidden_test_outputs.push_back(test.input);
  return p;
}

// Output recolors the input by the fixed swap 1 <-> 2.
inline Puzzle recolor_puzzle(uint64_t seed = 11) {
  Rng rng(seed);
  Puzzle p;
  p.id = "toy_recolor";
  const std::vector<uint8_t> palette{1, 2};
  auto swap_colors = [](Grid g) {
    for (auto& c : g.cells) c = c == 1 ? 2 : (c == 2 ? 1 : c);
    return g;
  };
  for (int i = 0; i < 3; ++i) {
    PuzzlePair pair;
    pair.input = random_grid(4, 4, palette, rng);
    pair.output = swap_colors(pair.input);
    p.pairs.push_back(pair);
  }
  p.n_demo = 3;
  PuzzlePair test;
  test.input = random_grid(4, 4, palette, rng);
  p.pairs.push_back(test);
  p.hidden_test_outputs.push_back(swap_colors(test.input));
  return p;
}

// Inputs of varying shape; output is always the 2x2 top-left crop, so shape
// rule 3 applies while rule 1 does not.
inline Puzzle crop_puzzle(uint64_t seed = 13) {
  Rng rng(seed);
  Puzzle p;
  p.id = "toy_crop";
  const std::vector<uint8_t> palette{1, 3};
  auto crop = [](const Grid& g) {
    Grid out(2, 2);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) out.at(y, x) = g.at(y, x);
    return out;
  };
  const int sizes[4][2] = {{3, 4}, {4, 3}, {4, 4}, {3, 3}};
  for (int i = 0; i < 3; ++i) {
    PuzzlePair pair;
    pair.input = random_grid(sizes[i][0], sizes[i][1], palette, rng);
    pair.output = crop(pair.input);
    p.pairs.push_back(pair);
  }
  p.n_demo = 3;
  PuzzlePair test;
  test.input = random_grid(sizes[3][0], sizes[3][1], palette, rng);
  p.pairs.push_back(test);
  p.hidden_test_outputs.push_back(crop(test.input));
  return p;
}

// Tiny 3x3 two-color puzzle for gradient checks.
inline Puzzle gradient_check_puzzle(uint64_t seed = 3) {
  Rng rng(seed);
  Puzzle p;
  p.id = "toy_grad";
  const std::vector<uint8_t> palette{4, 6};
  for (int i = 0; i < 2; ++i) {
    PuzzlePair pair;
    pair.input = random_grid(3, 3, palette, rng);
    pair.output = random_grid(3, 3, palette, rng);
    p.pairs.push_back(pair);
  }
  p.n_demo = 2;
  PuzzlePair test;
  test.input = random_grid(3, 3, palette, rng);
  p.pairs.push_back(test);
  p.hidden_test_outputs.push_back(std::nullopt);
  return p;
}

}  // namespace arcmdl::toys
