#include "arcmdl/rec.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace arcmdl {

double gaussian_kl(double mu, double sigma) {
  if (sigma <= 0) throw std::invalid_argument("gaussian_kl: sigma must be positive");
  const double s2 = sigma * sigma;
  return 0.5 * (mu * mu + s2 - 1.0 - std::log(s2));
}

double categorical_kl(const std::vector<double>& q, const std::vector<double>& p) {
  if (q.size() != p.size()) throw std::invalid_argument("categorical_kl: size mismatch");
  double kl = 0;
  for (size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0) continue;
    if (p[i] <= 0) throw std::invalid_argument("categorical_kl: support mismatch");
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return kl;
}

namespace {

// log( N(z; mu, sigma^2) / N(z; 0, 1) )
inline double log_weight(double z, double mu, double sigma) {
  const double d = (z - mu) / sigma;
  return -std::log(sigma) - 0.5 * d * d + 0.5 * z * z;
}

}  // namespace

RejectionDraw rejection_sample(const GaussianPair& dp, Rng& rng, int64_t max_proposals) {
  if (dp.sigma <= 0) throw std::invalid_argument("rejection_sample: sigma must be positive");
  if (dp.c <= 0 || dp.c > 1) throw std::invalid_argument("rejection_sample: c must be in (0,1]");
  const double log_c = std::log(dp.c);
  for (int64_t i = 1; i <= max_proposals; ++i) {
    const double z = rng.gaussian();
    const double log_acc = std::min(0.0, log_c + log_weight(z, dp.mu, dp.sigma));
    if (std::log(rng.uniform()) <= log_acc) return RejectionDraw{z, i};
  }
  throw std::runtime_error("rejection_sample: proposal cap exceeded");
}

CategoricalDraw rejection_sample(const CategoricalPair& dp, Rng& rng, int64_t max_proposals) {
  if (dp.q.size() != dp.p.size() || dp.q.empty())
    throw std::invalid_argument("rejection_sample: bad categorical pair");
  if (dp.c <= 0 || dp.c > 1) throw std::invalid_argument("rejection_sample: c must be in (0,1]");
  for (int64_t i = 1; i <= max_proposals; ++i) {
    // CDF inversion on the proposal.
    double u = rng.uniform();
    int k = static_cast<int>(dp.p.size()) - 1;
    double acc = 0;
    for (size_t j = 0; j < dp.p.size(); ++j) {
      acc += dp.p[j];
      if (u <= acc) {
        k = static_cast<int>(j);
        break;
      }
    }
    if (dp.p[static_cast<size_t>(k)] <= 0) continue;
    const double w = dp.q[static_cast<size_t>(k)] / dp.p[static_cast<size_t>(k)];
    if (rng.uniform() <= std::min(1.0, dp.c * w)) return CategoricalDraw{k, i};
  }
  throw std::runtime_error("rejection_sample: proposal cap exceeded");
}

namespace {

SeedBoundReport summarize_seeds(const std::vector<int64_t>& seeds, double kl, double c) {
  SeedBoundReport r;
  r.trials = static_cast<int64_t>(seeds.size());
  r.kl = kl;
  r.bound = kl + std::log1p(c) - std::log(c);
  double sum = 0, sum2 = 0;
  for (int64_t s : seeds) {
    const double ls = std::log(static_cast<double>(s));
    sum += ls;
    sum2 += ls * ls;
  }
  const double n = static_cast<double>(seeds.size());
  r.mean_log_seed = sum / n;
  const double var = std::max(0.0, sum2 / n - r.mean_log_seed * r.mean_log_seed);
  r.se_log_seed = std::sqrt(var / n);
  r.pass = r.mean_log_seed <= r.bound + 3.0 * r.se_log_seed;
  return r;
}

}  // namespace

SeedBoundReport verify_seed_bound(const GaussianPair& dp, int64_t trials, Rng& rng) {
  std::vector<int64_t> seeds;
  seeds.reserve(static_cast<size_t>(trials));
  for (int64_t t = 0; t < trials; ++t) seeds.push_back(rejection_sample(dp, rng).seed_index);
  return summarize_seeds(seeds, gaussian_kl(dp.mu, dp.sigma), dp.c);
}

SeedBoundReport verify_seed_bound(const CategoricalPair& dp, int64_t trials, Rng& rng) {
  std::vector<int64_t> seeds;
  seeds.reserve(static_cast<size_t>(trials));
  for (int64_t t = 0; t < trials; ++t) seeds.push_back(rejection_sample(dp, rng).seed_index);
  return summarize_seeds(seeds, categorical_kl(dp.q, dp.p), dp.c);
}

double normal_quantile(double p) {
  if (p <= 0 || p >= 1) throw std::invalid_argument("normal_quantile: p in (0,1) required");
  double lo = -10, hi = 10;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * std::erfc(-mid / std::sqrt(2.0));
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

RecExperiment run_gaussian_experiment(double mu, double sigma, double c, int64_t trials,
                                      uint64_t seed, bool keep_seeds, int tv_bins) {
  RecExperiment e;
  e.mu = mu;
  e.sigma = sigma;
  e.c = c;
  e.trials = trials;
  e.kl = gaussian_kl(mu, sigma);
  e.acceptance_bound = c / (1.0 + c) * std::exp(-e.kl);
  e.seed_bound = e.kl + std::log1p(c) - std::log(c);
  e.tv_bins = tv_bins;

  // Equal-mass bins under the target.
  std::vector<double> edges;
  for (int b = 1; b < tv_bins; ++b)
    edges.push_back(mu + sigma * normal_quantile(static_cast<double>(b) / tv_bins));
  std::vector<int64_t> counts(static_cast<size_t>(tv_bins), 0);

  Rng rng(seed);
  const GaussianPair dp{mu, sigma, c};
  int64_t total_proposals = 0;
  double log_sum = 0, log_sum2 = 0;
  if (keep_seeds) e.seed_indices.reserve(static_cast<size_t>(trials));
  for (int64_t t = 0; t < trials; ++t) {
    const RejectionDraw d = rejection_sample(dp, rng);
    total_proposals += d.seed_index;
    const double ls = std::log(static_cast<double>(d.seed_index));
    log_sum += ls;
    log_sum2 += ls * ls;
    const auto it = std::upper_bound(edges.begin(), edges.end(), d.sample);
    counts[static_cast<size_t>(it - edges.begin())] += 1;
    if (keep_seeds) e.seed_indices.push_back(d.seed_index);
  }

  const double n = static_cast<double>(trials);
  e.acceptance_rate = n / static_cast<double>(total_proposals);
  e.acceptance_se =
      std::sqrt(e.acceptance_rate * (1.0 - e.acceptance_rate) / static_cast<double>(total_proposals));
  e.mean_log_seed = log_sum / n;
  const double var = std::max(0.0, log_sum2 / n - e.mean_log_seed * e.mean_log_seed);
  e.se_log_seed = std::sqrt(var / n);

  double tv = 0;
  for (int64_t cnt : counts)
    tv += std::abs(static_cast<double>(cnt) / n - 1.0 / tv_bins);
  e.tv_to_target = 0.5 * tv;

  e.acceptance_ok = e.acceptance_rate >= e.acceptance_bound - 3.0 * e.acceptance_se;
  e.seed_ok = e.mean_log_seed <= e.seed_bound + 3.0 * e.se_log_seed;
  return e;
}

std::string experiment_json(const RecExperiment& e) {
  std::ostringstream os;
  os.precision(10);
  os << "{\"mu\":" << e.mu << ",\"sigma\":" << e.sigma << ",\"c\":" << e.c
     << ",\"trials\":" << e.trials << ",\"kl\":" << e.kl
     << ",\"acceptance_rate\":" << e.acceptance_rate << ",\"acceptance_se\":" << e.acceptance_se
     << ",\"acceptance_bound\":" << e.acceptance_bound
     << ",\"mean_log_seed\":" << e.mean_log_seed << ",\"se_log_seed\":" << e.se_log_seed
     << ",\"seed_bound\":" << e.seed_bound << ",\"tv_to_target\":" << e.tv_to_target
     << ",\"tv_bins\":" << e.tv_bins << ",\"acceptance_ok\":" << (e.acceptance_ok ? "true" : "false")
     << ",\"seed_ok\":" << (e.seed_ok ? "true" : "false") << "}";
  return os.str();
}

}  // namespace arcmdl
