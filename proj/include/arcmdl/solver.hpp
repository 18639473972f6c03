#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "arcmdl/layers.hpp"
#include "arcmdl/puzzle.hpp"
#include "arcmdl/weights.hpp"

namespace arcmdl {

struct SolverConfig {
  int64_t steps = 2000;
  double lr = 0.01;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double adam_eps = 1e-8;
  double recon_weight = 10.0;  // reconstruction vs KL, KL weight fixed at 1
  double ema_decay = 0.97;
  int64_t warmup_cutoff = 150;  // candidate downweighting window
  uint64_t seed = 0;
  bool use_float32 = false;
  std::vector<LayerKind> block_order = default_block_order();
  std::vector<int64_t> checkpoint_steps;  // snapshot attempts after these steps
};

// Canonical answer: shape plus row-major cells in ARC color codes.
struct Answer {
  int h = 0, w = 0;
  std::vector<uint8_t> cells;

  static Answer from_grid(const Grid& g) { return Answer{g.h, g.w, g.cells}; }
  Grid to_grid() const {
    Grid g(h, w);
    g.cells = cells;
    return g;
  }
  bool operator==(const Answer& o) const { return h == o.h && w == o.w && cells == o.cells; }
  bool operator<(const Answer& o) const {
    if (h != o.h) return h < o.h;
    if (w != o.w) return w < o.w;
    return cells < o.cells;
  }
  uint64_t digest(uint64_t seed_hash = 0xcbf29ce484222325ull) const {
    uint64_t d = fnv1a64(&h, sizeof(h), seed_hash);
    d = fnv1a64(&w, sizeof(w), d);
    if (!cells.empty()) d = fnv1a64(cells.data(), cells.size(), d);
    return d;
  }
};

// Weighted multiset of proposed answers, weights kept in log domain.
class CandidateSet {
 public:
  void accumulate(const Answer& a, double log_weight) {
    auto [it, inserted] = entries_.try_emplace(a, Cand{log_weight, next_seq_});
    if (inserted) {
      ++next_seq_;
    } else {
      it->second.log_w = log_add_exp(it->second.log_w, log_weight);
    }
  }

  bool empty() const { return entries_.empty(); }

  // k highest-weight distinct answers; ties broken by first-reached order,
  // then canonical answer ordering. Short sets pad with the top answer.
  std::vector<Answer> top_k(int k) const {
    std::vector<std::pair<const Answer*, const Cand*>> all;
    all.reserve(entries_.size());
    for (const auto& [a, c] : entries_) all.push_back({&a, &c});
    std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
      if (x.second->log_w != y.second->log_w) return x.second->log_w > y.second->log_w;
      if (x.second->seq != y.second->seq) return x.second->seq < y.second->seq;
      return *x.first < *y.first;
    });
    std::vector<Answer> out;
    for (int i = 0; i < k && i < static_cast<int>(all.size()); ++i) out.push_back(*all[static_cast<size_t>(i)].first);
    while (static_cast<int>(out.size()) < k && !out.empty()) out.push_back(out.front());
    return out;
  }

  static double log_add_exp(double a, double b) {
    const double hi = std::max(a, b), lo = std::min(a, b);
    return hi + std::log1p(std::exp(lo - hi));
  }

 private:
  struct Cand {
    double log_w;
    int64_t seq;
  };
  std::map<Answer, Cand> entries_;
  int64_t next_seq_ = 0;
};

// Appendix-style observation weighting: warmup and EMA-derived answers are
// downweighted, as are answers whose top-color probabilities are uncertain.
inline double candidate_log_weight(int64_t step, bool from_ema, double uncertainty,
                                   int64_t warmup_cutoff) {
  double lw = 0.0;
  if (step < warmup_cutoff) lw += -10.0;
  if (from_ema) lw += -4.0;
  lw += -10.0 * uncertainty;
  return lw;
}

// Exponential moving average initialized at the first observation, so a
// constant input is a fixed point.
struct EmaState {
  Tensor<double> value;
  bool ready = false;
  void update(const Tensor<double>& x, double decay) {
    if (!ready) {
      value = x;
      ready = true;
      return;
    }
    for (size_t i = 0; i < value.data.size(); ++i)
      value.data[i] = decay * value.data[i] + (1.0 - decay) * x.data[i];
  }
};

struct TraceRow {
  int64_t step = 0;
  double loss = 0, kl_total = 0, recon = 0;
  std::array<double, kNumKeys> kl_per_key{};
  uint64_t sampled_digest = 0, ema_digest = 0;
  bool skipped = false;
};

struct Trace {
  std::vector<TraceRow> rows;
  // (step count, attempts per test pair) snapshots.
  std::vector<std::pair<int64_t, std::vector<std::array<Answer, 2>>>> checkpoints;
};

struct SolveResult {
  std::vector<std::array<Answer, 2>> attempts;  // per test pair
  Trace trace;
  MultiTensor<double> decoded_means;  // noise-free decode output, diagnostics
  std::array<double, kNumKeys> final_kl{};
  int64_t network_param_count = 0;
  int64_t skipped_steps = 0;
};

struct Extraction {
  Answer ans;
  double uncertainty = 0;
};

// Argmax readout: most probable slice (unless the shape is forced), then the
// most probable color per pixel. `logits` is [E, n_colors+1, H, W, 2].
inline Extraction extract_answer(const Tensor<double>& logits, const Tensor<double>& row_scores,
                                 const Tensor<double>& col_scores, int pair, const ShapeInfo& info,
                                 const ColorMap& cm) {
  const int64_t canvas_h = info.canvas_h, canvas_w = info.canvas_w;
  const int64_t n_classes = logits.shape[1];
  int h = 0, w = 0;
  if (info.output_forced(pair)) {
    h = info.predicted[static_cast<size_t>(pair)]->h;
    w = info.predicted[static_cast<size_t>(pair)]->w;
  } else {
    auto best_extent = [](const Tensor<double>& scores, int pair_idx, int64_t canvas) {
      // inside-sum minus outside-sum, maximized over prefix lengths
      double prefix = 0, total = 0;
      for (int64_t k = 0; k < canvas; ++k) total += scores[(pair_idx * canvas + k) * 2 + kOutputSide];
      int best = 1;
      double best_v = 0;
      bool first = true;
      for (int64_t k = 0; k < canvas; ++k) {
        prefix += scores[(pair_idx * canvas + k) * 2 + kOutputSide];
        const double v = 2 * prefix - total;
        if (first || v > best_v) {
          best_v = v;
          best = static_cast<int>(k + 1);
          first = false;
        }
      }
      return best;
    };
    h = best_extent(row_scores, pair, canvas_h);
    w = best_extent(col_scores, pair, canvas_w);
  }

  Answer a;
  a.h = h;
  a.w = w;
  a.cells.resize(static_cast<size_t>(h) * static_cast<size_t>(w));
  double nll_sum = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best_c = 0;
      double best_v = 0;
      double lse_max = 0;
      for (int64_t c = 0; c < n_classes; ++c) {
        const double v = logits[(((pair * n_classes + c) * canvas_h + y) * canvas_w + x) * 2 + kOutputSide];
        if (c == 0 || v > best_v) {
          best_v = v;
          best_c = static_cast<int>(c);
        }
        if (c == 0 || v > lse_max) lse_max = v;
      }
      double z = 0;
      for (int64_t c = 0; c < n_classes; ++c) {
        const double v = logits[(((pair * n_classes + c) * canvas_h + y) * canvas_w + x) * 2 + kOutputSide];
        z += std::exp(v - lse_max);
      }
      nll_sum += -(best_v - lse_max - std::log(z));
      a.cells[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)] =
          cm.code_of(best_c);
    }
  Extraction ex;
  ex.ans = std::move(a);
  ex.uncertainty = (h * w) > 0 ? nll_sum / (h * w) : 0.0;
  return ex;
}

template <typename T>
SolveResult solve_puzzle_impl(const Puzzle& p, const SolverConfig& cfg) {
  check(cfg.steps >= 1, "solver: steps must be >= 1");
  const ShapeInfo info = infer_shape_rules(p);
  const ColorMap cm = build_color_map(p);
  DimSizes dims;
  dims.n_example = p.n_example();
  dims.n_colors = cm.n_colors();
  dims.height = info.canvas_h;
  dims.width = info.canvas_w;

  Rng rng(cfg.seed);
  ParamStore<T> store;
  NetworkWeights<T> w = init_network(store, dims, rng);
  const AdamConfig adam{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps};

  const int n_test = p.n_test();
  std::vector<CandidateSet> candidates(static_cast<size_t>(n_test));
  EmaState ema_logits, ema_row, ema_col;

  SolveResult result;
  result.network_param_count = store.network_scalar_count();
  result.trace.rows.reserve(static_cast<size_t>(cfg.steps));

  for (int64_t step = 0; step < cfg.steps; ++step) {
    const MultiTensor<T> noise = sample_decode_noise<T>(dims, rng);
    Tape<T> tape;
    const std::vector<Var<T>> leaves = store.make_leaves(tape);
    NetContext<T> ctx;
    ctx.tape = &tape;
    ctx.leaves = &leaves;
    ctx.dims = dims;
    set_masks_from_shape_info(ctx, info);

    DecodeOut<T> dec = decode_latent(ctx, w, noise);
    MultiVar<T> y = forward_network(ctx, w, dec.z, cfg.block_order);
    HeadOutput<T> heads = linear_heads(ctx, w, y, step);
    Var<T> recon = reconstruction_loss(ctx, heads, p, cm, info, step);
    Var<T> loss = ad::add(dec.kl_total, ad::scale(recon, cfg.recon_weight));

    TraceRow row;
    row.step = step;
    row.loss = static_cast<double>(loss.value()[0]);
    row.kl_total = static_cast<double>(dec.kl_total.value()[0]);
    row.recon = static_cast<double>(recon.value()[0]);
    for (int k = 0; k < kNumKeys; ++k)
      row.kl_per_key[static_cast<size_t>(k)] =
          static_cast<double>(dec.kl_per_key[static_cast<size_t>(k)].value()[0]);

    bool skipped = !std::isfinite(row.loss);
    if (!skipped) {
      tape.backward(loss);
      std::vector<const Tensor<T>*> grads;
      grads.reserve(store.items.size());
      for (size_t i = 0; i < store.items.size(); ++i) {
        const auto& n = tape.node(leaves[i].id);
        grads.push_back(n.grad_ready ? &n.grad : nullptr);
      }
      try {
        adam_step(store, grads, adam);
      } catch (const NonFiniteGradient&) {
        skipped = true;
      }
    }
    row.skipped = skipped;

    if (!skipped) {
      const Tensor<double> logits_v = heads.color_logits.value().template cast<double>();
      const Tensor<double> row_v = heads.row_scores.value().template cast<double>();
      const Tensor<double> col_v = heads.col_scores.value().template cast<double>();
      ema_logits.update(logits_v, cfg.ema_decay);
      ema_row.update(row_v, cfg.ema_decay);
      ema_col.update(col_v, cfg.ema_decay);

      uint64_t sdig = 0xcbf29ce484222325ull, edig = 0x84222325cbf29ce4ull;
      for (int t = 0; t < n_test; ++t) {
        const int pair = p.n_demo + t;
        const Extraction s = extract_answer(logits_v, row_v, col_v, pair, info, cm);
        candidates[static_cast<size_t>(t)].accumulate(
            s.ans, candidate_log_weight(step, false, s.uncertainty, cfg.warmup_cutoff));
        sdig = s.ans.digest(sdig);
        const Extraction e =
            extract_answer(ema_logits.value, ema_row.value, ema_col.value, pair, info, cm);
        candidates[static_cast<size_t>(t)].accumulate(
            e.ans, candidate_log_weight(step, true, e.uncertainty, cfg.warmup_cutoff));
        edig = e.ans.digest(edig);
      }
      row.sampled_digest = sdig;
      row.ema_digest = edig;
    } else {
      ++result.skipped_steps;
    }
    result.trace.rows.push_back(row);

    if (std::find(cfg.checkpoint_steps.begin(), cfg.checkpoint_steps.end(), step + 1) !=
        cfg.checkpoint_steps.end()) {
      std::vector<std::array<Answer, 2>> snap;
      for (int t = 0; t < n_test; ++t) {
        const auto top = candidates[static_cast<size_t>(t)].top_k(2);
        snap.push_back({top.empty() ? Answer{} : top[0], top.size() > 1 ? top[1] : top[0]});
      }
      result.trace.checkpoints.push_back({step + 1, std::move(snap)});
    }
  }

  for (int t = 0; t < n_test; ++t) {
    const auto top = candidates[static_cast<size_t>(t)].top_k(2);
    result.attempts.push_back({top.empty() ? Answer{} : top[0], top.size() > 1 ? top[1] : top[0]});
  }

  // Noise-free decode of the trained means, for KL traces and PCA readouts.
  {
    MultiTensor<T> zero_noise;
    zero_noise.dims = dims;
    const KeySpace& ks = KeySpace::instance();
    for (int k = 0; k < kNumKeys; ++k)
      zero_noise[k] = Tensor<T>(dims.tensor_shape(ks.key(k), kDecodeChannels));
    Tape<T> tape;
    const std::vector<Var<T>> leaves = store.make_leaves(tape);
    NetContext<T> ctx;
    ctx.tape = &tape;
    ctx.leaves = &leaves;
    ctx.dims = dims;
    set_masks_from_shape_info(ctx, info);
    DecodeOut<T> dec = decode_latent(ctx, w, zero_noise);
    result.decoded_means.dims = dims;
    for (int k = 0; k < kNumKeys; ++k) {
      result.decoded_means[k] = dec.z[k].value().template cast<double>();
      result.final_kl[static_cast<size_t>(k)] =
          static_cast<double>(dec.kl_per_key[static_cast<size_t>(k)].value()[0]);
    }
  }
  return result;
}

inline SolveResult solve_puzzle(const Puzzle& p, const SolverConfig& cfg) {
  if (cfg.use_float32) return solve_puzzle_impl<float>(p, cfg);
  return solve_puzzle_impl<double>(p, cfg);
}

}  // namespace arcmdl
