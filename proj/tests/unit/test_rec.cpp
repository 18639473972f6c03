#include <doctest.h>

#include <cmath>

#include "arcmdl/rec.hpp"

using namespace arcmdl;

TEST_CASE("gaussian KL closed forms") {
  CHECK(gaussian_kl(0, 1) == doctest::Approx(0.0));
  CHECK(gaussian_kl(1, 1) == doctest::Approx(0.5));
  CHECK(gaussian_kl(0, 2) == doctest::Approx(0.5 * (4 - 1 - std::log(4.0))).epsilon(1e-12));
  CHECK_THROWS(gaussian_kl(0, 0));
  CHECK_THROWS(gaussian_kl(0, -1));
}

TEST_CASE("gaussian KL is positive except at the standard normal") {
  for (double mu : {-1.0, -0.3, 0.0, 0.4, 2.0})
    for (double sigma : {0.5, 0.9, 1.0, 1.3, 2.5}) {
      const double kl = gaussian_kl(mu, sigma);
      if (mu == 0.0 && sigma == 1.0) {
        CHECK(kl == doctest::Approx(0.0));
      } else {
        CHECK(kl > 0.0);
      }
    }
}

TEST_CASE("matching distributions with c=1 accept the first proposal") {
  Rng rng(1);
  const GaussianPair dp{0.0, 1.0, 1.0};
  for (int i = 0; i < 100; ++i) CHECK(rejection_sample(dp, rng).seed_index == 1);
}

TEST_CASE("seed index is geometric when target equals proposal") {
  // With Q = P the acceptance probability is exactly c; chi-squared
  // goodness of fit against Geometric(c) at the 1% level.
  const double c = 0.3;
  const int64_t trials = 100000;
  Rng rng(7);
  const GaussianPair dp{0.0, 1.0, c};
  const int kBins = 12;  // seed values 1..11 plus tail
  std::vector<int64_t> counts(kBins, 0);
  for (int64_t t = 0; t < trials; ++t) {
    const int64_t s = rejection_sample(dp, rng).seed_index;
    counts[static_cast<size_t>(std::min<int64_t>(s, kBins) - 1)] += 1;
  }
  double chi2 = 0;
  for (int b = 0; b < kBins; ++b) {
    const double pb = b < kBins - 1 ? c * std::pow(1 - c, b) : std::pow(1 - c, kBins - 1);
    const double expect = pb * trials;
    chi2 += (counts[static_cast<size_t>(b)] - expect) * (counts[static_cast<size_t>(b)] - expect) / expect;
  }
  // chi-squared 0.99 quantile, 11 degrees of freedom
  CHECK(chi2 < 24.725);
}

TEST_CASE("acceptance-rate and seed-length bounds hold on a quick cell") {
  const RecExperiment e = run_gaussian_experiment(0.5, 0.7, 0.1, 20000, 42);
  CHECK(e.acceptance_ok);
  CHECK(e.seed_ok);
  CHECK(e.acceptance_rate >= e.acceptance_bound - 3 * e.acceptance_se);
  CHECK(e.mean_log_seed <= e.seed_bound + 3 * e.se_log_seed);
}

TEST_CASE("small c sampling matches the target in total variation") {
  const RecExperiment e = run_gaussian_experiment(0.0, 0.7, 0.01, 100000, 11);
  CHECK(e.tv_to_target < 0.02);
}

TEST_CASE("delta target against a uniform-4 proposal: seed expectation 4") {
  CategoricalPair dp;
  dp.q = {1.0, 0.0, 0.0, 0.0};
  dp.p = {0.25, 0.25, 0.25, 0.25};
  dp.c = 1.0;
  Rng rng(3);
  double mean_seed = 0;
  const int64_t trials = 50000;
  for (int64_t t = 0; t < trials; ++t) {
    const CategoricalDraw d = rejection_sample(dp, rng);
    CHECK(d.sample == 0);
    mean_seed += static_cast<double>(d.seed_index);
  }
  mean_seed /= trials;
  CHECK(mean_seed == doctest::Approx(4.0).epsilon(0.05));

  Rng rng2(4);
  const SeedBoundReport r = verify_seed_bound(dp, trials, rng2);
  CHECK(r.kl == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(r.bound == doctest::Approx(std::log(4.0) + std::log(2.0)).epsilon(1e-12));
  CHECK(r.pass);
}

TEST_CASE("delta-target seed bound equals cross-entropy plus the c terms") {
  // KL(delta_k || p) = -log p[k], the cross-entropy of the logits at k.
  std::vector<double> p = {0.1, 0.2, 0.3, 0.4};
  for (int k = 0; k < 4; ++k) {
    std::vector<double> q(4, 0.0);
    q[static_cast<size_t>(k)] = 1.0;
    const double ce = -std::log(p[static_cast<size_t>(k)]);
    CHECK(categorical_kl(q, p) == doctest::Approx(ce).epsilon(1e-12));
    const double c = 0.25;
    CHECK(categorical_kl(q, p) + std::log1p(c) - std::log(c) ==
          doctest::Approx(ce + std::log(1 + c) - std::log(c)).epsilon(1e-12));
  }
}

TEST_CASE("gaussian seed bound holds across a small parameter sweep") {
  for (double mu : {0.0, 0.8})
    for (double sigma : {0.8, 1.2}) {
      Rng rng(101);
      const SeedBoundReport r = verify_seed_bound(GaussianPair{mu, sigma, 0.1}, 20000, rng);
      CHECK(r.pass);
    }
}

TEST_CASE("proposal cap errors out instead of spinning") {
  Rng rng(5);
  // Target far away with tiny c: acceptance is essentially impossible.
  const GaussianPair dp{50.0, 0.1, 1e-6};
  CHECK_THROWS(rejection_sample(dp, rng, 100));
}

TEST_CASE("invalid pairs are rejected") {
  Rng rng(6);
  CHECK_THROWS(rejection_sample(GaussianPair{0, -1, 0.5}, rng));
  CHECK_THROWS(rejection_sample(GaussianPair{0, 1, 0.0}, rng));
  CHECK_THROWS(rejection_sample(GaussianPair{0, 1, 2.0}, rng));
  CategoricalPair bad;
  bad.q = {1.0};
  bad.p = {0.5, 0.5};
  CHECK_THROWS(rejection_sample(bad, rng));
}

TEST_CASE("normal quantile inverts the CDF") {
  CHECK(normal_quantile(0.5) == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(normal_quantile(0.975) == doctest::Approx(1.959964).epsilon(1e-5));
  CHECK(normal_quantile(0.025) == doctest::Approx(-1.959964).epsilon(1e-5));
}
