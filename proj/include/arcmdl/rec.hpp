#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arcmdl/rng.hpp"

namespace arcmdl {

// Rejection-sampling oracle for the seed-length bounds that justify using
// KL + cross-entropy as the training loss. Target Q is imitated by indexing
// proposals from P and accepting with probability min(1, c*q/p).

struct GaussianPair {
  double mu = 0.0;     // target N(mu, sigma^2)
  double sigma = 1.0;  // proposal is N(0, 1)
  double c = 1.0;      // acceptance scale in (0, 1]
};

struct CategoricalPair {
  std::vector<double> q;  // target pmf
  std::vector<double> p;  // proposal pmf
  double c = 1.0;
};

double gaussian_kl(double mu, double sigma);                // nats, throws on sigma <= 0
double categorical_kl(const std::vector<double>& q, const std::vector<double>& p);

struct RejectionDraw {
  double sample = 0.0;
  int64_t seed_index = 0;  // 1-based index of the first accepted proposal
};

RejectionDraw rejection_sample(const GaussianPair& dp, Rng& rng, int64_t max_proposals = 10'000'000);

struct CategoricalDraw {
  int sample = 0;
  int64_t seed_index = 0;
};

CategoricalDraw rejection_sample(const CategoricalPair& dp, Rng& rng,
                                 int64_t max_proposals = 10'000'000);

struct SeedBoundReport {
  int64_t trials = 0;
  double kl = 0;
  double bound = 0;           // KL + ln(1+c) - ln(c)
  double mean_log_seed = 0;
  double se_log_seed = 0;     // standard error of the mean
  bool pass = false;          // mean_log_seed <= bound + 3*se
};

SeedBoundReport verify_seed_bound(const GaussianPair& dp, int64_t trials, Rng& rng);
SeedBoundReport verify_seed_bound(const CategoricalPair& dp, int64_t trials, Rng& rng);

// Full desk-scale experiment for one (mu, sigma, c) cell.
struct RecExperiment {
  double mu = 0, sigma = 1, c = 1;
  int64_t trials = 0;
  double kl = 0;

  double acceptance_rate = 0;
  double acceptance_se = 0;
  double acceptance_bound = 0;  // (c/(1+c)) * exp(-KL)

  double mean_log_seed = 0;
  double se_log_seed = 0;
  double seed_bound = 0;

  double tv_to_target = 0;  // equal-mass-bin histogram TV distance to Q
  int tv_bins = 0;

  bool acceptance_ok = false;  // rate >= bound - 3*se
  bool seed_ok = false;        // mean log seed <= bound + 3*se

  std::vector<int64_t> seed_indices;  // retained when requested
};

RecExperiment run_gaussian_experiment(double mu, double sigma, double c, int64_t trials,
                                      uint64_t seed, bool keep_seeds = false, int tv_bins = 20);

std::string experiment_json(const RecExperiment& e);

// Inverse standard normal CDF (bisection on erfc; deterministic).
double normal_quantile(double p);

}  // namespace arcmdl
