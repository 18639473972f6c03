#include "arcmdl/puzzle.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace arcmdl {

using nlohmann::json;

namespace {

Grid parse_grid(const json& j, const std::string& what) {
  if (!j.is_array() || j.empty()) throw std::runtime_error(what + ": grid must be a non-empty array of rows");
  const int h = static_cast<int>(j.size());
  if (h > kMaxGridSide) throw std::runtime_error(what + ": grid taller than 30");
  if (!j[0].is_array() || j[0].empty()) throw std::runtime_error(what + ": rows must be non-empty arrays");
  const int w = static_cast<int>(j[0].size());
  if (w > kMaxGridSide) throw std::runtime_error(what + ": grid wider than 30");
  Grid g(h, w);
  for (int y = 0; y < h; ++y) {
    const json& row = j[static_cast<size_t>(y)];
    if (!row.is_array() || static_cast<int>(row.size()) != w)
      throw std::runtime_error(what + ": ragged rows");
    for (int x = 0; x < w; ++x) {
      const json& cell = row[static_cast<size_t>(x)];
      if (!cell.is_number_integer()) throw std::runtime_error(what + ": cell is not an integer");
      const int64_t v = cell.get<int64_t>();
      if (v < 0 || v >= kNumColorCodes)
        throw std::runtime_error(what + ": color code out of range 0..9");
      g.at(y, x) = static_cast<uint8_t>(v);
    }
  }
  return g;
}

json grid_to_json(const Grid& g) {
  json rows = json::array();
  for (int y = 0; y < g.h; ++y) {
    json row = json::array();
    for (int x = 0; x < g.w; ++x) row.push_back(static_cast<int>(g.at(y, x)));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

Puzzle parse_puzzle(const std::string& json_text, const std::string& id) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("parse_puzzle: malformed JSON: " + std::string(e.what()));
  }
  if (!j.is_object() || !j.contains("train") || !j.contains("test"))
    throw std::runtime_error("parse_puzzle: expected object with train/test arrays");
  const json& train = j["train"];
  const json& test = j["test"];
  if (!train.is_array() || train.empty()) throw std::runtime_error("parse_puzzle: empty train array");
  if (!test.is_array() || test.empty()) throw std::runtime_error("parse_puzzle: empty test array");

  Puzzle p;
  p.id = id;
  for (size_t i = 0; i < train.size(); ++i) {
    const json& e = train[i];
    const std::string what = "train[" + std::to_string(i) + "]";
    if (!e.contains("input") || !e.contains("output"))
      throw std::runtime_error(what + ": demonstration pair needs input and output");
    PuzzlePair pair;
    pair.input = parse_grid(e["input"], what + ".input");
    pair.output = parse_grid(e["output"], what + ".output");
    p.pairs.push_back(std::move(pair));
  }
  p.n_demo = static_cast<int>(p.pairs.size());
  for (size_t i = 0; i < test.size(); ++i) {
    const json& e = test[i];
    const std::string what = "test[" + std::to_string(i) + "]";
    if (!e.contains("input")) throw std::runtime_error(what + ": test pair needs input");
    PuzzlePair pair;
    pair.input = parse_grid(e["input"], what + ".input");
    p.pairs.push_back(std::move(pair));
    // Withheld answers stay out of the solver-visible pair.
    if (e.contains("output") && !e["output"].is_null())
      p.hidden_test_outputs.push_back(parse_grid(e["output"], what + ".output"));
    else
      p.hidden_test_outputs.push_back(std::nullopt);
  }
  return p;
}

std::string serialize_puzzle(const Puzzle& p) {
  json j;
  j["train"] = json::array();
  j["test"] = json::array();
  for (int i = 0; i < p.n_demo; ++i) {
    json e;
    e["input"] = grid_to_json(p.pairs[static_cast<size_t>(i)].input);
    e["output"] = grid_to_json(*p.pairs[static_cast<size_t>(i)].output);
    j["train"].push_back(std::move(e));
  }
  for (int i = p.n_demo; i < p.n_example(); ++i) {
    json e;
    e["input"] = grid_to_json(p.pairs[static_cast<size_t>(i)].input);
    const auto& hidden = p.hidden_test_outputs[static_cast<size_t>(i - p.n_demo)];
    if (hidden.has_value()) e["output"] = grid_to_json(*hidden);
    j["test"].push_back(std::move(e));
  }
  return j.dump();
}

Puzzle load_puzzle_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string id = path;
  const size_t slash = id.find_last_of('/');
  if (slash != std::string::npos) id = id.substr(slash + 1);
  const size_t dot = id.rfind(".json");
  if (dot != std::string::npos) id = id.substr(0, dot);
  return parse_puzzle(buf.str(), id);
}

ShapeInfo infer_shape_rules(const Puzzle& p) {
  ShapeInfo info;
  const int n = p.n_example();

  info.rule1 = true;
  info.rule2 = true;
  info.rule3 = true;
  int64_t common_in_h = p.pairs[0].input.h, common_in_w = p.pairs[0].input.w;
  int64_t common_out_h = -1, common_out_w = -1;
  for (const PuzzlePair& pair : p.pairs) {
    if (pair.input.h != common_in_h || pair.input.w != common_in_w) info.rule2 = false;
    if (pair.output.has_value()) {
      if (pair.output->h != pair.input.h || pair.output->w != pair.input.w) info.rule1 = false;
      if (common_out_h < 0) {
        common_out_h = pair.output->h;
        common_out_w = pair.output->w;
      } else if (pair.output->h != common_out_h || pair.output->w != common_out_w) {
        info.rule3 = false;
      }
    }
  }

  // Canvas: largest width and height over the known grids.
  info.canvas_h = 0;
  info.canvas_w = 0;
  for (const PuzzlePair& pair : p.pairs) {
    info.canvas_h = std::max<int64_t>(info.canvas_h, pair.input.h);
    info.canvas_w = std::max<int64_t>(info.canvas_w, pair.input.w);
    if (pair.output.has_value()) {
      info.canvas_h = std::max<int64_t>(info.canvas_h, pair.output->h);
      info.canvas_w = std::max<int64_t>(info.canvas_w, pair.output->w);
    }
  }

  // Rule 1 takes precedence over rule 3 for output-shape prediction.
  info.predicted.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const PuzzlePair& pair = p.pairs[static_cast<size_t>(i)];
    if (info.rule1) {
      info.predicted[static_cast<size_t>(i)] = ShapeInfo::Pred{pair.input.h, pair.input.w};
    } else if (info.rule3) {
      info.predicted[static_cast<size_t>(i)] =
          ShapeInfo::Pred{static_cast<int>(common_out_h), static_cast<int>(common_out_w)};
    }
  }

  auto prefix_mask = [](int64_t canvas, int64_t ones) {
    std::vector<uint8_t> m(static_cast<size_t>(canvas), 0);
    for (int64_t i = 0; i < ones; ++i) m[static_cast<size_t>(i)] = 1;
    return m;
  };

  info.masks.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const PuzzlePair& pair = p.pairs[static_cast<size_t>(i)];
    SideMask& in_mask = info.masks[static_cast<size_t>(i)][kInputSide];
    in_mask.rows = prefix_mask(info.canvas_h, pair.input.h);
    in_mask.cols = prefix_mask(info.canvas_w, pair.input.w);
    SideMask& out_mask = info.masks[static_cast<size_t>(i)][kOutputSide];
    if (pair.output.has_value()) {
      out_mask.rows = prefix_mask(info.canvas_h, pair.output->h);
      out_mask.cols = prefix_mask(info.canvas_w, pair.output->w);
    } else if (info.predicted[static_cast<size_t>(i)].has_value()) {
      const auto& pred = *info.predicted[static_cast<size_t>(i)];
      out_mask.rows = prefix_mask(info.canvas_h, pred.h);
      out_mask.cols = prefix_mask(info.canvas_w, pred.w);
    } else {
      // Shape unknown: leave the whole canvas admissible.
      out_mask.rows = prefix_mask(info.canvas_h, info.canvas_h);
      out_mask.cols = prefix_mask(info.canvas_w, info.canvas_w);
    }
  }
  return info;
}

ColorMap build_color_map(const Puzzle& p) {
  std::set<uint8_t> seen;
  auto scan = [&seen](const Grid& g) {
    for (uint8_t c : g.cells)
      if (c != 0) seen.insert(c);
  };
  for (const PuzzlePair& pair : p.pairs) {
    scan(pair.input);
    if (pair.output.has_value()) scan(*pair.output);
  }
  ColorMap cm;
  cm.index_of.fill(-1);
  for (uint8_t c : seen) {
    cm.index_of[c] = static_cast<int>(cm.present.size());
    cm.present.push_back(c);
  }
  return cm;
}

}  // namespace arcmdl
