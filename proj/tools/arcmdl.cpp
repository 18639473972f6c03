// Command-line driver: per-puzzle MDL solving over ARC-AGI task files,
// submission scoring, and the rejection-sampling bound verifier.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "arcmdl/harness.hpp"
#include "arcmdl/rec.hpp"
#include "arcmdl/solver.hpp"

namespace {

using arcmdl::LayerKind;
using arcmdl::SolverConfig;

LayerKind layer_kind_from_name(const std::string& name) {
  if (name == "communicate") return LayerKind::kCommunicate;
  if (name == "softmax") return LayerKind::kSoftmax;
  if (name == "shift") return LayerKind::kDirShift;
  if (name == "cummax") return LayerKind::kDirCummax;
  if (name == "dircomm") return LayerKind::kDirComm;
  if (name == "nonlinear") return LayerKind::kNonlinear;
  throw std::runtime_error("unknown layer kind: " + name);
}

void apply_config_entry(SolverConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "steps") cfg.steps = std::stoll(value);
  else if (key == "lr") cfg.lr = std::stod(value);
  else if (key == "beta1") cfg.beta1 = std::stod(value);
  else if (key == "beta2") cfg.beta2 = std::stod(value);
  else if (key == "adam_eps") cfg.adam_eps = std::stod(value);
  else if (key == "recon_weight") cfg.recon_weight = std::stod(value);
  else if (key == "ema_decay") cfg.ema_decay = std::stod(value);
  else if (key == "warmup_cutoff") cfg.warmup_cutoff = std::stoll(value);
  else if (key == "seed") cfg.seed = std::stoull(value);
  else if (key == "float32") cfg.use_float32 = value == "1" || value == "true";
  else if (key == "block_order") {
    cfg.block_order.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) cfg.block_order.push_back(layer_kind_from_name(item));
  } else {
    throw std::runtime_error("unknown config key: " + key);
  }
}

// Accepts either a JSON object or key=value lines.
void load_config_file(SolverConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  const size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    const nlohmann::json j = nlohmann::json::parse(text);
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& v = it.value();
      apply_config_entry(cfg, it.key(), v.is_string() ? v.get<std::string>() : v.dump());
    }
    return;
  }
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      const size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!key.empty()) apply_config_entry(cfg, key, value);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arcmdl: inference-time MDL solver for ARC-AGI puzzles"};
  app.require_subcommand(1);

  // ---- solve ----
  auto* solve = app.add_subcommand("solve", "solve puzzles from a dataset directory");
  arcmdl::RunManifest manifest;
  std::string config_path;
  manifest.out_dir = arcmdl::default_output_root();
  solve->add_option("--dataset", manifest.dataset_dir, "dataset root directory")->required();
  solve->add_option("--split", manifest.split, "split subdirectory name")->required();
  solve->add_option("--puzzle", manifest.puzzle_filter, "puzzle id filter (repeatable)");
  solve->add_option("--steps", manifest.config.steps, "training steps per puzzle");
  solve->add_option("--seed", manifest.config.seed, "RNG seed");
  solve->add_option("--out", manifest.out_dir, "output directory (default $ARCMDL_OUT or ./out)");
  solve->add_flag("--trace", manifest.trace, "write per-step KL trace CSVs and latent dumps");
  solve->add_option("--parallel", manifest.parallelism, "worker count")->check(CLI::PositiveNumber);
  solve->add_option("--config", config_path, "solver config file (JSON or key=value)");
  solve->add_option("--recon-weight", manifest.config.recon_weight, "reconstruction loss weight");
  solve->add_flag("--float32", manifest.config.use_float32, "32-bit numerics");

  // ---- score ----
  auto* score = app.add_subcommand("score", "score a submission file against task files");
  std::string attempts_path, truth_dir;
  score->add_option("--attempts", attempts_path, "submission JSON")->required();
  score->add_option("--truth", truth_dir, "directory of task files with test outputs")->required();

  // ---- rec-verify ----
  auto* rec = app.add_subcommand("rec-verify", "verify rejection-sampling seed-length bounds");
  double mu = 0, sigma = 1, c = 0.1;
  int64_t trials = 100000;
  uint64_t rec_seed = 0;
  std::string csv_path;
  rec->add_option("--mu", mu, "target mean");
  rec->add_option("--sigma", sigma, "target standard deviation")->check(CLI::PositiveNumber);
  rec->add_option("--c", c, "acceptance scale in (0,1]");
  rec->add_option("--trials", trials, "number of trials");
  rec->add_option("--seed", rec_seed, "RNG seed");
  rec->add_option("--csv", csv_path, "write (trial, seed_index) CSV here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (solve->parsed()) {
      if (!config_path.empty()) {
        // The config file supplies defaults; explicit CLI flags win.
        arcmdl::SolverConfig from_file = manifest.config;
        load_config_file(from_file, config_path);
        if (solve->count("--steps") == 0) manifest.config.steps = from_file.steps;
        if (solve->count("--seed") == 0) manifest.config.seed = from_file.seed;
        if (solve->count("--recon-weight") == 0) manifest.config.recon_weight = from_file.recon_weight;
        if (solve->count("--float32") == 0) manifest.config.use_float32 = from_file.use_float32;
        manifest.config.lr = from_file.lr;
        manifest.config.beta1 = from_file.beta1;
        manifest.config.beta2 = from_file.beta2;
        manifest.config.adam_eps = from_file.adam_eps;
        manifest.config.ema_decay = from_file.ema_decay;
        manifest.config.warmup_cutoff = from_file.warmup_cutoff;
        manifest.config.block_order = from_file.block_order;
      }
      const arcmdl::ScoreTable table = arcmdl::run_dataset(manifest);
      int failures = 0;
      for (const auto& o : table.per_puzzle) {
        if (o.failed) {
          ++failures;
          std::cerr << o.id << ": FAILED: " << o.error << "\n";
          continue;
        }
        std::cout << o.id << (o.from_cache ? " [cached]" : "");
        if (o.pass2.has_value())
          std::cout << "  pass@1=" << *o.pass1 << " pass@2=" << *o.pass2;
        std::cout << "  (" << o.wall_ms / 1000.0 << "s)\n";
      }
      if (table.scored_puzzles > 0) {
        std::cout << "total: pass@1=" << table.pass_at(1) << " pass@2=" << table.pass_at(2)
                  << " over " << table.scored_puzzles << " scored puzzles\n";
        for (const auto& [step, pp] : table.checkpoint_pass)
          std::cout << "  step " << step << ": pass@1=" << pp[0] << " pass@2=" << pp[1] << "\n";
      }
      return failures == 0 ? 0 : 1;
    }
    if (score->parsed()) {
      const arcmdl::SubmissionScore s = arcmdl::score_submission(attempts_path, truth_dir);
      std::cout << "puzzles=" << s.puzzles << " scored=" << s.scored << " pass@1=" << s.pass1
                << " pass@2=" << s.pass2 << "\n";
      return 0;
    }
    if (rec->parsed()) {
      const arcmdl::RecExperiment e =
          arcmdl::run_gaussian_experiment(mu, sigma, c, trials, rec_seed, !csv_path.empty());
      std::cout << arcmdl::experiment_json(e) << "\n";
      if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw std::runtime_error("cannot write " + csv_path);
        out << "trial,seed_index\n";
        for (size_t i = 0; i < e.seed_indices.size(); ++i)
          out << i << "," << e.seed_indices[i] << "\n";
      }
      return e.acceptance_ok && e.seed_ok ? 0 : 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
