#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "arcmdl/puzzle.hpp"
#include "arcmdl/solver.hpp"

namespace arcmdl {

// Exact-match scoring: shape and every pixel.
bool score_answer(const Grid& attempt, const Grid& truth);

struct RunManifest {
  std::string dataset_dir;
  std::string split;
  std::vector<std::string> puzzle_filter;  // empty = all
  SolverConfig config;
  int parallelism = 1;
  std::string out_dir;
  bool trace = false;
};

struct PuzzleOutcome {
  std::string id;
  bool failed = false;
  std::string error;
  bool from_cache = false;
  double wall_ms = 0;
  // Partial credit per Appendix L: mean over test pairs of "any of the first
  // k attempts exact". NaN when truth is unavailable.
  std::optional<double> pass1, pass2;
  std::map<int64_t, std::array<double, 2>> checkpoint_pass;  // step -> {pass1, pass2}
};

struct ScoreTable {
  std::vector<PuzzleOutcome> per_puzzle;
  int scored_puzzles = 0;
  double pass_at(int k) const;  // mean over scored puzzles
  std::map<int64_t, std::array<double, 2>> checkpoint_pass;
  double total_wall_ms = 0;
};

ScoreTable run_dataset(const RunManifest& m);

// Submission file: { "<id>": [ {"attempt_1": grid, "attempt_2": grid}, ... ] }
void write_submission(const std::string& path,
                      const std::map<std::string, std::vector<std::array<Answer, 2>>>& attempts);
std::map<std::string, std::vector<std::array<Answer, 2>>> read_submission(const std::string& path);

// Scores a submission file against task files carrying test outputs.
struct SubmissionScore {
  int puzzles = 0;
  int scored = 0;
  double pass1 = 0, pass2 = 0;
};
SubmissionScore score_submission(const std::string& attempts_path, const std::string& truth_dir);

void export_kl_trace(const Trace& trace, const std::string& csv_path);

// Writes the final noise-free decode output per key, for offline analysis.
void export_latents(const MultiTensor<double>& decoded, const std::string& json_path);

struct PcaResult {
  bool degenerate = false;
  std::vector<double> component;   // leading right-singular vector (channel space)
  std::vector<double> projection;  // data projected on the component, per position
  double strength_ratio = 0;       // first vs second singular value
};

// Rows are positions, columns are channels. Rows are centered first.
PcaResult pca_top_component(const Tensor<double>& matrix);

// Flattens a keyed tensor into (positions x channels) for PCA.
Tensor<double> key_tensor_as_matrix(const Tensor<double>& t);

std::string default_output_root();

std::vector<std::string> list_puzzle_files(const std::string& dataset_dir, const std::string& split);

}  // namespace arcmdl
