#include "arcmdl/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace arcmdl {

namespace fs = std::filesystem;
using nlohmann::json;

bool score_answer(const Grid& attempt, const Grid& truth) {
  return attempt.h == truth.h && attempt.w == truth.w && attempt.cells == truth.cells;
}

double ScoreTable::pass_at(int k) const {
  double sum = 0;
  int n = 0;
  for (const PuzzleOutcome& o : per_puzzle) {
    const auto& v = k <= 1 ? o.pass1 : o.pass2;
    if (v.has_value()) {
      sum += *v;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

namespace {

json grid_json(const Grid& g) {
  json rows = json::array();
  for (int y = 0; y < g.h; ++y) {
    json row = json::array();
    for (int x = 0; x < g.w; ++x) row.push_back(static_cast<int>(g.at(y, x)));
    rows.push_back(std::move(row));
  }
  return rows;
}

Grid grid_from_json(const json& j) {
  Grid g(static_cast<int>(j.size()), static_cast<int>(j.at(0).size()));
  for (int y = 0; y < g.h; ++y)
    for (int x = 0; x < g.w; ++x) g.at(y, x) = j.at(static_cast<size_t>(y)).at(static_cast<size_t>(x)).get<uint8_t>();
  return g;
}

json attempts_json(const std::vector<std::array<Answer, 2>>& attempts) {
  json arr = json::array();
  for (const auto& pair : attempts) {
    json e;
    e["attempt_1"] = grid_json(pair[0].to_grid());
    e["attempt_2"] = grid_json(pair[1].to_grid());
    arr.push_back(std::move(e));
  }
  return arr;
}

std::vector<std::array<Answer, 2>> attempts_from_json(const json& arr) {
  std::vector<std::array<Answer, 2>> out;
  for (const json& e : arr) {
    out.push_back({Answer::from_grid(grid_from_json(e.at("attempt_1"))),
                   Answer::from_grid(grid_from_json(e.at("attempt_2")))});
  }
  return out;
}

// Partial credit over test pairs; k is 1 or 2.
double pass_score(const std::vector<std::array<Answer, 2>>& attempts,
                  const std::vector<std::optional<Grid>>& truth, int k) {
  double sum = 0;
  int n = 0;
  for (size_t i = 0; i < attempts.size(); ++i) {
    if (!truth[i].has_value()) continue;
    ++n;
    bool hit = false;
    for (int a = 0; a < k; ++a)
      if (score_answer(attempts[i][static_cast<size_t>(a)].to_grid(), *truth[i])) hit = true;
    sum += hit ? 1.0 : 0.0;
  }
  return n == 0 ? std::nan("") : sum / n;
}

}  // namespace

std::string default_output_root() {
  const char* env = std::getenv("ARCMDL_OUT");
  return env != nullptr && *env != '\0' ? std::string(env) : std::string("out");
}

std::vector<std::string> list_puzzle_files(const std::string& dataset_dir, const std::string& split) {
  const fs::path dir = fs::path(dataset_dir) / split;
  if (!fs::is_directory(dir)) throw std::runtime_error("dataset split not found: " + dir.string());
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      files.push_back(entry.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

void write_submission(const std::string& path,
                      const std::map<std::string, std::vector<std::array<Answer, 2>>>& attempts) {
  json j = json::object();
  for (const auto& [id, a] : attempts) j[id] = attempts_json(a);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump(1);
}

std::map<std::string, std::vector<std::array<Answer, 2>>> read_submission(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  json j = json::parse(in);
  std::map<std::string, std::vector<std::array<Answer, 2>>> out;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = attempts_from_json(it.value());
  return out;
}

SubmissionScore score_submission(const std::string& attempts_path, const std::string& truth_dir) {
  const auto attempts = read_submission(attempts_path);
  SubmissionScore s;
  double sum1 = 0, sum2 = 0;
  for (const auto& [id, a] : attempts) {
    ++s.puzzles;
    const fs::path task = fs::path(truth_dir) / (id + ".json");
    if (!fs::exists(task)) continue;
    const Puzzle p = load_puzzle_file(task.string());
    if (a.size() != static_cast<size_t>(p.n_test()))
      throw std::runtime_error("attempt count mismatch for " + id);
    const double p1 = pass_score(a, p.hidden_test_outputs, 1);
    const double p2 = pass_score(a, p.hidden_test_outputs, 2);
    if (!std::isnan(p1)) {
      ++s.scored;
      sum1 += p1;
      sum2 += p2;
    }
  }
  if (s.scored > 0) {
    s.pass1 = sum1 / s.scored;
    s.pass2 = sum2 / s.scored;
  }
  return s;
}

void export_kl_trace(const Trace& trace, const std::string& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw std::runtime_error("cannot write " + csv_path);
  const KeySpace& ks = KeySpace::instance();
  out << "step,loss,kl_total,recon";
  for (int k = 0; k < kNumKeys; ++k) {
    std::string label;
    static const char* letters = "ecdhw";
    for (int d = 0; d < kNumDims; ++d)
      if (ks.key(k).has[d]) label += letters[d];
    out << ",kl_" << label;
  }
  out << "\n";
  out.precision(12);
  for (const TraceRow& r : trace.rows) {
    out << r.step << "," << r.loss << "," << r.kl_total << "," << r.recon;
    for (int k = 0; k < kNumKeys; ++k) out << "," << r.kl_per_key[static_cast<size_t>(k)];
    out << "\n";
  }
}

void export_latents(const MultiTensor<double>& decoded, const std::string& json_path) {
  const KeySpace& ks = KeySpace::instance();
  json j = json::object();
  for (int k = 0; k < kNumKeys; ++k) {
    json e;
    e["shape"] = decoded[k].shape;
    e["values"] = decoded[k].data;
    j[ks.key(k).str()] = std::move(e);
  }
  std::ofstream out(json_path);
  if (!out) throw std::runtime_error("cannot write " + json_path);
  out << j.dump();
}

Tensor<double> key_tensor_as_matrix(const Tensor<double>& t) {
  check(t.rank() >= 1, "key_tensor_as_matrix: rank 0");
  const int64_t channels = t.shape.back();
  const int64_t rows = channels == 0 ? 0 : t.numel() / channels;
  Tensor<double> m(Shape{rows, channels});
  m.data = t.data;
  return m;
}

PcaResult pca_top_component(const Tensor<double>& matrix) {
  check(matrix.rank() == 2, "pca_top_component: matrix required");
  const int64_t n = matrix.shape[0], d = matrix.shape[1];
  PcaResult r;
  if (n == 0 || d == 0) {
    r.degenerate = true;
    return r;
  }
  Tensor<double> centered = matrix;
  for (int64_t j = 0; j < d; ++j) {
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += matrix[i * d + j];
    mean /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) centered[i * d + j] -= mean;
  }
  double frob = 0;
  for (double v : centered.data) frob += v * v;
  if (frob == 0) {
    r.degenerate = true;
    return r;
  }

  // Covariance (d x d), then cyclic Jacobi.
  std::vector<double> a(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j)
      for (int64_t k = j; k < d; ++k) a[static_cast<size_t>(j * d + k)] += centered[i * d + j] * centered[i * d + k];
  for (int64_t j = 0; j < d; ++j)
    for (int64_t k = 0; k < j; ++k) a[static_cast<size_t>(j * d + k)] = a[static_cast<size_t>(k * d + j)];

  std::vector<double> v(static_cast<size_t>(d * d), 0.0);
  for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(j * d + j)] = 1.0;
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0;
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = p + 1; q < d; ++q) off += a[static_cast<size_t>(p * d + q)] * a[static_cast<size_t>(p * d + q)];
    if (off < 1e-24 * frob * frob) break;
    for (int64_t p = 0; p < d; ++p)
      for (int64_t q = p + 1; q < d; ++q) {
        const double apq = a[static_cast<size_t>(p * d + q)];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[static_cast<size_t>(p * d + p)], aqq = a[static_cast<size_t>(q * d + q)];
        const double theta = 0.5 * std::atan2(2 * apq, aqq - app);
        const double c = std::cos(theta), s = std::sin(theta);
        for (int64_t k = 0; k < d; ++k) {
          const double akp = a[static_cast<size_t>(k * d + p)], akq = a[static_cast<size_t>(k * d + q)];
          a[static_cast<size_t>(k * d + p)] = c * akp - s * akq;
          a[static_cast<size_t>(k * d + q)] = s * akp + c * akq;
        }
        for (int64_t k = 0; k < d; ++k) {
          const double apk = a[static_cast<size_t>(p * d + k)], aqk = a[static_cast<size_t>(q * d + k)];
          a[static_cast<size_t>(p * d + k)] = c * apk - s * aqk;
          a[static_cast<size_t>(q * d + k)] = s * apk + c * aqk;
        }
        for (int64_t k = 0; k < d; ++k) {
          const double vkp = v[static_cast<size_t>(k * d + p)], vkq = v[static_cast<size_t>(k * d + q)];
          v[static_cast<size_t>(k * d + p)] = c * vkp - s * vkq;
          v[static_cast<size_t>(k * d + q)] = s * vkp + c * vkq;
        }
      }
  }
  int64_t best = 0, second = -1;
  for (int64_t j = 1; j < d; ++j)
    if (a[static_cast<size_t>(j * d + j)] > a[static_cast<size_t>(best * d + best)]) best = j;
  for (int64_t j = 0; j < d; ++j) {
    if (j == best) continue;
    if (second < 0 || a[static_cast<size_t>(j * d + j)] > a[static_cast<size_t>(second * d + second)]) second = j;
  }
  const double l1 = std::max(0.0, a[static_cast<size_t>(best * d + best)]);
  const double l2 = second >= 0 ? std::max(0.0, a[static_cast<size_t>(second * d + second)]) : 0.0;
  r.component.resize(static_cast<size_t>(d));
  for (int64_t j = 0; j < d; ++j) r.component[static_cast<size_t>(j)] = v[static_cast<size_t>(j * d + best)];
  r.projection.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0;
    for (int64_t j = 0; j < d; ++j) dot += centered[i * d + j] * r.component[static_cast<size_t>(j)];
    r.projection[static_cast<size_t>(i)] = dot;
  }
  r.strength_ratio = l2 > 0 ? std::sqrt(l1 / l2) : std::numeric_limits<double>::infinity();
  return r;
}

namespace {

struct PersistedResult {
  std::vector<std::array<Answer, 2>> attempts;
  std::map<int64_t, std::vector<std::array<Answer, 2>>> checkpoints;
  double wall_ms = 0;
};

PersistedResult load_result(const std::string& path) {
  std::ifstream in(path);
  json j = json::parse(in);
  PersistedResult r;
  r.attempts = attempts_from_json(j.at("attempts"));
  r.wall_ms = j.value("wall_ms", 0.0);
  if (j.contains("checkpoints"))
    for (auto it = j["checkpoints"].begin(); it != j["checkpoints"].end(); ++it)
      r.checkpoints[std::stoll(it.key())] = attempts_from_json(it.value());
  return r;
}

void save_result(const std::string& path, const std::string& id, const SolveResult& res,
                 const SolverConfig& cfg, double wall_ms) {
  json j;
  j["id"] = id;
  j["seed"] = cfg.seed;
  j["steps"] = cfg.steps;
  j["wall_ms"] = wall_ms;
  j["skipped_steps"] = res.skipped_steps;
  j["network_param_count"] = res.network_param_count;
  j["attempts"] = attempts_json(res.attempts);
  if (!res.trace.checkpoints.empty()) {
    json cps = json::object();
    for (const auto& [step, snap] : res.trace.checkpoints)
      cps[std::to_string(step)] = attempts_json(snap);
    j["checkpoints"] = std::move(cps);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << j.dump(1);
  }
  fs::rename(tmp, path);
}

}  // namespace

ScoreTable run_dataset(const RunManifest& m) {
  check(m.parallelism >= 1, "run_dataset: parallelism must be >= 1");
  const std::vector<std::string> files = list_puzzle_files(m.dataset_dir, m.split);
  std::vector<std::string> selected;
  for (const std::string& f : files) {
    if (m.puzzle_filter.empty()) {
      selected.push_back(f);
      continue;
    }
    const std::string id = fs::path(f).stem().string();
    if (std::find(m.puzzle_filter.begin(), m.puzzle_filter.end(), id) != m.puzzle_filter.end())
      selected.push_back(f);
  }

  const fs::path out_dir = m.out_dir.empty() ? fs::path(default_output_root()) : fs::path(m.out_dir);
  const fs::path results_dir = out_dir / "results";
  fs::create_directories(results_dir);

  ScoreTable table;
  table.per_puzzle.resize(selected.size());
  std::mutex mu;
  std::atomic<size_t> next{0};

  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= selected.size()) return;
      const std::string& file = selected[i];
      PuzzleOutcome outcome;
      outcome.id = fs::path(file).stem().string();
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const Puzzle p = load_puzzle_file(file);
        const fs::path result_path = results_dir / (outcome.id + ".json");
        PersistedResult pr;
        if (fs::exists(result_path)) {
          pr = load_result(result_path.string());
          outcome.from_cache = true;
          outcome.wall_ms = pr.wall_ms;
        } else {
          SolverConfig cfg = m.config;
          if (m.trace && cfg.checkpoint_steps.empty())
            for (int64_t s = 100; s <= cfg.steps; s += 100) cfg.checkpoint_steps.push_back(s);
          const SolveResult res = solve_puzzle(p, cfg);
          outcome.wall_ms = std::chrono::duration<double, std::milli>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
          save_result(result_path.string(), outcome.id, res, cfg, outcome.wall_ms);
          if (m.trace) {
            export_kl_trace(res.trace, (out_dir / (outcome.id + "_trace.csv")).string());
            export_latents(res.decoded_means, (out_dir / (outcome.id + "_latents.json")).string());
          }
          pr.attempts = res.attempts;
          for (const auto& [step, snap] : res.trace.checkpoints) pr.checkpoints[step] = snap;
        }
        const double p1 = pass_score(pr.attempts, p.hidden_test_outputs, 1);
        const double p2 = pass_score(pr.attempts, p.hidden_test_outputs, 2);
        if (!std::isnan(p1)) outcome.pass1 = p1;
        if (!std::isnan(p2)) outcome.pass2 = p2;
        for (const auto& [step, snap] : pr.checkpoints) {
          const double c1 = pass_score(snap, p.hidden_test_outputs, 1);
          const double c2 = pass_score(snap, p.hidden_test_outputs, 2);
          if (!std::isnan(c1)) outcome.checkpoint_pass[step] = {c1, c2};
        }
      } catch (const std::exception& e) {
        outcome.failed = true;
        outcome.error = e.what();
      }
      std::lock_guard<std::mutex> lock(mu);
      table.per_puzzle[i] = std::move(outcome);
    }
  };

  if (m.parallelism == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < m.parallelism; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // Aggregate.
  std::map<std::string, std::vector<std::array<Answer, 2>>> submission;
  std::map<int64_t, std::array<double, 2>> cp_sum;
  std::map<int64_t, int> cp_n;
  for (const PuzzleOutcome& o : table.per_puzzle) {
    table.total_wall_ms += o.wall_ms;
    if (o.pass1.has_value()) ++table.scored_puzzles;
    for (const auto& [step, pp] : o.checkpoint_pass) {
      cp_sum[step][0] += pp[0];
      cp_sum[step][1] += pp[1];
      cp_n[step] += 1;
    }
  }
  for (const auto& [step, sums] : cp_sum)
    table.checkpoint_pass[step] = {sums[0] / cp_n[step], sums[1] / cp_n[step]};

  for (const PuzzleOutcome& o : table.per_puzzle) {
    if (o.failed) continue;
    const fs::path result_path = results_dir / (o.id + ".json");
    if (fs::exists(result_path)) submission[o.id] = load_result(result_path.string()).attempts;
  }
  write_submission((out_dir / "submission.json").string(), submission);
  return table;
}

}  // namespace arcmdl
