#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

using namespace calibrl;
using namespace calibrl::synthworld;

TEST_CASE("make_task_spec fills documented defaults") {
  TaskSpec spec = make_task_spec({});
  REQUIRE(spec.num_options == 4);
  REQUIRE(spec.label_temperature == 0.8);
  REQUIRE(spec.obs_noise == 0.0);
  REQUIRE(spec.latent_scale == 1.0);
  REQUIRE(spec.trace_length == 4);
  REQUIRE(spec.reasoning_vocab == 8);  // 2K when unspecified
  REQUIRE(spec.seed_namespace == 0);
}

TEST_CASE("reasoning vocab default tracks num_options") {
  TaskSpec spec = make_task_spec({{"num_options", std::int64_t{6}}});
  REQUIRE(spec.reasoning_vocab == 12);
  TaskSpec pinned = make_task_spec(
      {{"num_options", std::int64_t{6}}, {"reasoning_vocab", std::int64_t{3}}});
  REQUIRE(pinned.reasoning_vocab == 3);
}

TEST_CASE("make_task_spec rejects bad values with the key named") {
  REQUIRE_THROWS_WITH(make_task_spec({{"num_options", std::int64_t{1}}}),
                      "num_options must be >= 2");
  REQUIRE_THROWS_AS(make_task_spec({{"label_temperature", 0.0}}),
                    ValidationError);
  REQUIRE_THROWS_WITH(make_task_spec({{"latent_scale", -1.0}}),
                      Catch::Matchers::ContainsSubstring("latent_scale"));
  REQUIRE_THROWS_WITH(make_task_spec({{"mystery_knob", 3.0}}),
                      Catch::Matchers::ContainsSubstring("mystery_knob"));
  REQUIRE_THROWS_WITH(make_task_spec({{"trace_length", 2.5}}),
                      Catch::Matchers::ContainsSubstring("trace_length"));
  REQUIRE_THROWS_AS(
      make_task_spec({{"latent_mean", std::vector<double>{1.0, 2.0}}}),
      ValidationError);  // length 2 vs K = 4
}

TEST_CASE("latent_mean broadcasts scalars and accepts full vectors") {
  TaskSpec a = make_task_spec({{"latent_mean", 0.5}});
  REQUIRE(a.latent_mean == std::vector<double>{0.5, 0.5, 0.5, 0.5});
  TaskSpec b =
      make_task_spec({{"latent_mean", std::vector<double>{1, 2, 3, 4}}});
  REQUIRE(b.latent_mean == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("noiseless posterior equals temperature-scaled softmax") {
  TaskSpec spec = make_task_spec({});  // tau = 0.8, sigma = 0
  Instance inst;
  inst.features = {1.0, 0.5, 0.0, -0.5};
  auto post = bayes_posterior(spec, inst);
  // Softmax of (1, 0.5, 0, -0.5) / 0.8, evaluated independently at 50-digit
  // precision and rounded to double.
  REQUIRE(post[0] == Catch::Approx(0.50629804588038370).epsilon(1e-13));
  REQUIRE(post[1] == Catch::Approx(0.27100181529430744).epsilon(1e-13));
  REQUIRE(post[2] == Catch::Approx(0.14505681878567054).epsilon(1e-13));
  REQUIRE(post[3] == Catch::Approx(0.077643320039638313).epsilon(1e-13));
  double sum = post[0] + post[1] + post[2] + post[3];
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("noiseless posterior is shift invariant in the features") {
  TaskSpec spec = make_task_spec({});
  Instance a, b;
  a.features = {0.3, -1.2, 0.9, 2.0};
  b.features = {0.3 + 5.0, -1.2 + 5.0, 0.9 + 5.0, 2.0 + 5.0};
  auto pa = bayes_posterior(spec, a);
  auto pb = bayes_posterior(spec, b);
  for (int k = 0; k < 4; ++k)
    REQUIRE(pa[k] == Catch::Approx(pb[k]).epsilon(1e-12));
}

TEST_CASE("gauss-hermite rule reproduces gaussian moments") {
  std::vector<double> nodes, weights;
  synthworld::detail::gauss_hermite(20, nodes, weights);
  double s0 = 0, s2 = 0, s4 = 0;
  for (int i = 0; i < 20; ++i) {
    s0 += weights[i];
    s2 += weights[i] * nodes[i] * nodes[i];
    s4 += weights[i] * std::pow(nodes[i], 4);
  }
  const double rp = std::sqrt(std::numbers::pi);
  REQUIRE(s0 == Catch::Approx(rp).epsilon(1e-12));
  REQUIRE(s2 == Catch::Approx(rp / 2).epsilon(1e-12));
  REQUIRE(s4 == Catch::Approx(3 * rp / 4).epsilon(1e-12));
}

TEST_CASE("noisy posterior matches a dense 2d trapezoid integration") {
  TaskSpec spec = make_task_spec({{"num_options", std::int64_t{2}},
                                  {"obs_noise", 0.7},
                                  {"label_temperature", 0.5},
                                  {"latent_mean", std::vector<double>{0.2, -0.1}},
                                  {"latent_scale", 1.3}});
  Instance inst;
  inst.features = {0.6, -0.4};

  // Oracle: integrate softmax(u / tau) against the exact per-coordinate
  // Gaussian posterior u | x on a dense grid, far enough out in the tails.
  const double s2 = 1.3 * 1.3, o2 = 0.7 * 0.7;
  const double var = s2 * o2 / (s2 + o2);
  const double sd = std::sqrt(var);
  double m0 = (s2 * 0.6 + o2 * 0.2) / (s2 + o2);
  double m1 = (s2 * -0.4 + o2 * -0.1) / (s2 + o2);
  const int grid = 400;
  const double half = 8.0;
  double num0 = 0.0, den = 0.0;
  for (int i = 0; i <= grid; ++i) {
    double t0 = -half + 2 * half * i / grid;
    double wi = (i == 0 || i == grid) ? 0.5 : 1.0;
    double u0 = m0 + sd * t0;
    double phi0 = std::exp(-0.5 * t0 * t0);
    for (int j = 0; j <= grid; ++j) {
      double t1 = -half + 2 * half * j / grid;
      double wj = (j == 0 || j == grid) ? 0.5 : 1.0;
      double u1 = m1 + sd * t1;
      double w = wi * wj * phi0 * std::exp(-0.5 * t1 * t1);
      double p0 = 1.0 / (1.0 + std::exp(-(u0 - u1) / 0.5));
      num0 += w * p0;
      den += w;
    }
  }
  double oracle0 = num0 / den;

  auto post = bayes_posterior(spec, inst);
  REQUIRE(post[0] + post[1] == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(post[0] == Catch::Approx(oracle0).margin(1e-6));
}

TEST_CASE("noisy posterior at K=4 matches monte carlo") {
  TaskSpec spec = make_task_spec(
      {{"obs_noise", 0.5}, {"label_temperature", 0.8}, {"latent_scale", 1.0}});
  Instance inst;
  inst.features = {0.9, -0.3, 0.2, -1.1};
  auto post = bayes_posterior(spec, inst);

  const double s2 = 1.0, o2 = 0.25;
  const double var = s2 * o2 / (s2 + o2);
  const double sd = std::sqrt(var);
  std::vector<double> mean(4);
  for (int k = 0; k < 4; ++k) mean[k] = (s2 * inst.features[k]) / (s2 + o2);
  auto stream = rng::Stream::keyed({404});
  std::vector<double> acc(4, 0.0);
  const int n = 400000;
  std::vector<double> z(4);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < 4; ++k)
      z[k] = (mean[k] + sd * stream.next_normal()) / 0.8;
    auto p = softmax(z);
    for (int k = 0; k < 4; ++k) acc[k] += p[k];
  }
  for (int k = 0; k < 4; ++k)
    REQUIRE(post[k] == Catch::Approx(acc[k] / n).margin(3e-3));
}

TEST_CASE("sampling is reproducible and per-instance keyed") {
  TaskSpec spec = make_task_spec({{"seed_namespace", std::int64_t{17}}});
  auto a = sample_instances(spec, 10);
  auto b = sample_instances(spec, 10);
  REQUIRE(a.size() == 10);
  for (int i = 0; i < 10; ++i) {
    REQUIRE(a[i].id == b[i].id);
    REQUIRE(a[i].latent == b[i].latent);
    REQUIRE(a[i].features == b[i].features);
    REQUIRE(a[i].gold_label == b[i].gold_label);
    REQUIRE(a[i].bayes_posterior == b[i].bayes_posterior);
  }
  // Prefixes agree because each instance derives from its id alone.
  auto c = sample_instances(spec, 3);
  for (int i = 0; i < 3; ++i) REQUIRE(c[i].latent == a[i].latent);
  // Disjoint id ranges give fresh draws.
  auto shifted = sample_instances(spec, 3, 1000);
  REQUIRE(shifted[0].id == 1000);
  REQUIRE(shifted[0].latent != a[0].latent);
}

TEST_CASE("instances store their own recomputable posterior") {
  TaskSpec spec = make_task_spec({{"obs_noise", 0.3}});
  auto instances = sample_instances(spec, 5);
  for (const auto& inst : instances) {
    auto recomputed = bayes_posterior(spec, inst);
    REQUIRE(inst.bayes_posterior == recomputed);
    REQUIRE(inst.features.size() == 4);
    REQUIRE(inst.gold_label >= 0);
    REQUIRE(inst.gold_label < 4);
  }
}

TEST_CASE("gold labels are calibrated against the stored posterior") {
  // Tower property: P(gold = k) must match E[posterior_k], and the empirical
  // accuracy of the posterior argmax must match the mean max-posterior.
  TaskSpec spec = make_task_spec({{"seed_namespace", std::int64_t{5}}});
  const int n = 20000;
  auto instances = sample_instances(spec, n);
  std::vector<double> freq(4, 0.0), mean_post(4, 0.0);
  double argmax_hits = 0.0, mean_max = 0.0;
  for (const auto& inst : instances) {
    freq[inst.gold_label] += 1.0;
    int best = 0;
    for (int k = 0; k < 4; ++k) {
      mean_post[k] += inst.bayes_posterior[k];
      if (inst.bayes_posterior[k] > inst.bayes_posterior[best]) best = k;
    }
    if (best == inst.gold_label) argmax_hits += 1.0;
    mean_max += inst.bayes_posterior[best];
  }
  for (int k = 0; k < 4; ++k)
    REQUIRE(freq[k] / n == Catch::Approx(mean_post[k] / n).margin(0.015));
  REQUIRE(argmax_hits / n == Catch::Approx(mean_max / n).margin(0.015));
}

TEST_CASE("tower property survives observation noise") {
  TaskSpec spec =
      make_task_spec({{"obs_noise", 0.6}, {"seed_namespace", std::int64_t{9}}});
  const int n = 4000;  // quadrature makes instances pricier here
  auto instances = sample_instances(spec, n);
  double argmax_hits = 0.0, mean_max = 0.0;
  for (const auto& inst : instances) {
    int best = 0;
    for (int k = 0; k < 4; ++k)
      if (inst.bayes_posterior[k] > inst.bayes_posterior[best]) best = k;
    if (best == inst.gold_label) argmax_hits += 1.0;
    mean_max += inst.bayes_posterior[best];
  }
  REQUIRE(argmax_hits / n == Catch::Approx(mean_max / n).margin(0.03));
}

TEST_CASE("shift_spec moves the distribution and nothing else") {
  TaskSpec spec = make_task_spec({{"seed_namespace", std::int64_t{3}}});
  TaskSpec shifted = shift_spec(spec, {{"latent_mean_delta", 0.5}});
  REQUIRE(shifted.latent_mean == std::vector<double>{0.5, 0.5, 0.5, 0.5});
  REQUIRE(shifted.num_options == spec.num_options);
  REQUIRE(shifted.trace_length == spec.trace_length);
  REQUIRE(shifted.reasoning_vocab == spec.reasoning_vocab);
  REQUIRE(shifted.seed_namespace != spec.seed_namespace);

  TaskSpec again = shift_spec(spec, {{"latent_mean_delta", 0.5}});
  REQUIRE(again.seed_namespace == shifted.seed_namespace);
  TaskSpec other = shift_spec(spec, {{"latent_mean_delta", 0.25}});
  REQUIRE(other.seed_namespace != shifted.seed_namespace);
}

TEST_CASE("shift_spec refuses structural changes") {
  TaskSpec spec = make_task_spec({});
  REQUIRE_THROWS_AS(shift_spec(spec, {{"num_options", std::int64_t{5}}}),
                    ValidationError);
  REQUIRE_THROWS_AS(shift_spec(spec, {{"trace_length", std::int64_t{2}}}),
                    ValidationError);
  REQUIRE_THROWS_AS(shift_spec(spec, {{"reasoning_vocab", std::int64_t{3}}}),
                    ValidationError);
  REQUIRE_THROWS_AS(shift_spec(spec, {{"label_temperature", -0.5}}),
                    ValidationError);
}

TEST_CASE("shifted spec draws from the shifted distribution") {
  TaskSpec spec = make_task_spec({{"seed_namespace", std::int64_t{21}}});
  TaskSpec shifted = shift_spec(spec, {{"latent_mean_delta", 2.0}});
  const int n = 5000;
  auto base = sample_instances(spec, n);
  auto moved = sample_instances(shifted, n);
  double mb = 0.0, mm = 0.0;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < 4; ++k) {
      mb += base[i].latent[k];
      mm += moved[i].latent[k];
    }
  REQUIRE(mb / (n * 4) == Catch::Approx(0.0).margin(0.05));
  REQUIRE(mm / (n * 4) == Catch::Approx(2.0).margin(0.05));
}
