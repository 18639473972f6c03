#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace arcmdl {

inline constexpr int kMaxGridSide = 30;
inline constexpr int kNumColorCodes = 10;  // ARC color codes 0..9, 0 = black

struct Grid {
  int h = 0, w = 0;
  std::vector<uint8_t> cells;  // row-major, h*w values in 0..9

  Grid() = default;
  Grid(int h_, int w_) : h(h_), w(w_), cells(static_cast<size_t>(h_) * static_cast<size_t>(w_), 0) {}

  uint8_t& at(int y, int x) { return cells[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)]; }
  uint8_t at(int y, int x) const { return cells[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)]; }

  bool operator==(const Grid& o) const { return h == o.h && w == o.w && cells == o.cells; }
  bool operator!=(const Grid& o) const { return !(*this == o); }
};

struct PuzzlePair {
  Grid input;
  std::optional<Grid> output;  // demonstration pairs only
};

struct Puzzle {
  std::string id;
  std::vector<PuzzlePair> pairs;  // demonstrations first, then test pairs
  int n_demo = 0;

  // Withheld test outputs, when the source file carries them. Scoring only;
  // the solver never reads these.
  std::vector<std::optional<Grid>> hidden_test_outputs;

  int n_example() const { return static_cast<int>(pairs.size()); }
  int n_test() const { return n_example() - n_demo; }
  bool is_test_pair(int i) const { return i >= n_demo; }
};

Puzzle parse_puzzle(const std::string& json_text, const std::string& id = "");
std::string serialize_puzzle(const Puzzle& p);
Puzzle load_puzzle_file(const std::string& path);

enum Side : int { kInputSide = 0, kOutputSide = 1 };

struct SideMask {
  std::vector<uint8_t> rows;  // canvas_h entries, prefix-contiguous
  std::vector<uint8_t> cols;  // canvas_w entries
};

struct ShapeInfo {
  bool rule1 = false;  // outputs match corresponding inputs
  bool rule2 = false;  // all inputs share one shape
  bool rule3 = false;  // all known outputs share one shape
  int64_t canvas_h = 0, canvas_w = 0;

  struct Pred {
    int h = 0, w = 0;
  };
  std::vector<std::optional<Pred>> predicted;        // per pair, output side
  std::vector<std::array<SideMask, 2>> masks;        // [pair][side]

  // True when the output-side slice distribution of `pair` is pinned to a
  // single known/predicted shape.
  bool output_forced(int pair) const { return predicted[static_cast<size_t>(pair)].has_value(); }

  // Union of input and output masks, used by the masked layers.
  SideMask combined_mask(int pair) const {
    const auto& m = masks[static_cast<size_t>(pair)];
    SideMask out = m[0];
    for (size_t i = 0; i < out.rows.size(); ++i) out.rows[i] = out.rows[i] | m[1].rows[i];
    for (size_t i = 0; i < out.cols.size(); ++i) out.cols[i] = out.cols[i] | m[1].cols[i];
    return out;
  }
};

ShapeInfo infer_shape_rules(const Puzzle& p);

struct ColorMap {
  std::vector<uint8_t> present;  // ascending non-black codes used in the puzzle
  std::array<int, kNumColorCodes> index_of{};  // code -> latent index, -1 if absent

  int n_colors() const { return static_cast<int>(present.size()); }
  // The black logit plane is appended after the puzzle colors.
  int black_index() const { return n_colors(); }
  uint8_t code_of(int index) const {
    return index == n_colors() ? uint8_t{0} : present[static_cast<size_t>(index)];
  }
};

ColorMap build_color_map(const Puzzle& p);

}  // namespace arcmdl
