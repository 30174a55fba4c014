#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "calibrl/common.hpp"
#include "calibrl/rng.hpp"

// Synthetic decision tasks with analytically known answer posteriors.
// Each instance draws a latent score vector u ~ N(mu, s^2 I) over the K
// options, samples a gold label from softmax(u / label_temperature), and
// exposes features x = u + obs_noise * zeta.  With obs_noise == 0 the
// Bayes posterior is softmax(x / label_temperature) in closed form; with
// obs_noise > 0 it is a Gaussian integral evaluated by tensor-product
// Gauss-Hermite quadrature.

namespace calibrl::synthworld {

struct TaskSpec {
  int num_options = 4;             // K
  double label_temperature = 0.8;  // tau
  double obs_noise = 0.0;          // sigma
  std::vector<double> latent_mean; // mu, length K (empty means all zeros)
  double latent_scale = 1.0;       // s
  int trace_length = 4;            // T, reasoning tokens per rollout
  int reasoning_vocab = 8;         // R, distinct reasoning token ids
  std::uint64_t seed_namespace = 0;
};

inline void validate(const TaskSpec& spec) {
  require(spec.num_options >= 2, "num_options must be >= 2");
  require(spec.label_temperature > 0.0 && std::isfinite(spec.label_temperature),
          "label_temperature must be positive");
  require(spec.obs_noise >= 0.0 && std::isfinite(spec.obs_noise),
          "obs_noise must be >= 0");
  require(spec.latent_scale > 0.0 && std::isfinite(spec.latent_scale),
          "latent_scale must be positive");
  require(spec.trace_length >= 1, "trace_length must be >= 1");
  require(spec.reasoning_vocab >= 1, "reasoning_vocab must be >= 1");
  require(spec.latent_mean.empty() ||
              spec.latent_mean.size() == static_cast<size_t>(spec.num_options),
          "latent_mean length must equal num_options");
  require(spec.latent_mean.empty() ||
              all_finite(std::span<const double>(spec.latent_mean)),
          "latent_mean must be finite");
}

inline std::vector<double> latent_mean_vector(const TaskSpec& spec) {
  if (!spec.latent_mean.empty()) return spec.latent_mean;
  return std::vector<double>(spec.num_options, 0.0);
}

// Config values carry either a number or a vector; integer-valued fields are
// validated for integrality when given as doubles.
using ConfigValue = std::variant<std::int64_t, double, std::vector<double>>;
using ConfigMap = std::map<std::string, ConfigValue>;

namespace detail {

inline double scalar_of(const std::string& key, const ConfigValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (const auto* d = std::get_if<double>(&v)) return *d;
  throw ValidationError(key + " must be a scalar");
}

inline int int_of(const std::string& key, const ConfigValue& v) {
  double d = scalar_of(key, v);
  if (d != std::floor(d)) throw ValidationError(key + " must be an integer");
  return static_cast<int>(d);
}

inline std::vector<double> vector_of(const std::string& key, const ConfigValue& v,
                                     int length) {
  if (const auto* vec = std::get_if<std::vector<double>>(&v)) {
    if (vec->size() != static_cast<size_t>(length))
      throw ValidationError(key + " must have length " + std::to_string(length));
    return *vec;
  }
  // Scalars broadcast across all coordinates.
  return std::vector<double>(length, scalar_of(key, v));
}

}  // namespace detail

/// Builds a TaskSpec from key-value config.  Unspecified keys take defaults;
/// unknown keys and invalid values raise ValidationError naming the key.
inline TaskSpec make_task_spec(const ConfigMap& config) {
  TaskSpec spec;
  if (auto it = config.find("num_options"); it != config.end())
    spec.num_options = detail::int_of("num_options", it->second);
  require(spec.num_options >= 2, "num_options must be >= 2");
  for (const auto& [key, value] : config) {
    if (key == "num_options") {
      // handled above; options count is needed before latent_mean broadcast
    } else if (key == "label_temperature") {
      spec.label_temperature = detail::scalar_of(key, value);
    } else if (key == "obs_noise") {
      spec.obs_noise = detail::scalar_of(key, value);
    } else if (key == "latent_mean") {
      spec.latent_mean = detail::vector_of(key, value, spec.num_options);
    } else if (key == "latent_scale") {
      spec.latent_scale = detail::scalar_of(key, value);
    } else if (key == "trace_length") {
      spec.trace_length = detail::int_of(key, value);
    } else if (key == "reasoning_vocab") {
      spec.reasoning_vocab = detail::int_of(key, value);
    } else if (key == "seed_namespace") {
      spec.seed_namespace =
          static_cast<std::uint64_t>(detail::int_of(key, value));
    } else {
      throw ValidationError("unknown task config key '" + key + "'");
    }
  }
  if (config.find("reasoning_vocab") == config.end())
    spec.reasoning_vocab = 2 * spec.num_options;
  validate(spec);
  return spec;
}

struct Instance {
  std::uint64_t id = 0;
  std::vector<double> latent;    // u, length K
  std::vector<double> features;  // x = u + sigma * zeta, what the policy sees
  int gold_label = 0;
  std::vector<double> bayes_posterior;  // p(c | x), length K
};

// ---- Gauss-Hermite quadrature (physicists' convention, weight e^{-t^2}) ----

namespace detail {

/// Nodes and weights for the m-point rule; Newton iteration on the
/// orthonormal Hermite recurrence.
inline void gauss_hermite(int m, std::vector<double>& nodes,
                          std::vector<double>& weights) {
  nodes.assign(m, 0.0);
  weights.assign(m, 0.0);
  const double pim4 = 0.7511255444649425;  // pi^{-1/4}
  int half = (m + 1) / 2;
  double z = 0.0;
  for (int i = 0; i < half; ++i) {
    if (i == 0) {
      z = std::sqrt(2.0 * m + 1.0) - 1.85575 * std::pow(2.0 * m + 1.0, -1.0 / 6.0);
    } else if (i == 1) {
      z -= 1.14 * std::pow(m, 0.426) / z;
    } else if (i == 2) {
      z = 1.86 * z - 0.86 * nodes[0];
    } else if (i == 3) {
      z = 1.91 * z - 0.91 * nodes[1];
    } else {
      z = 2.0 * z - nodes[i - 2];
    }
    double pp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p1 = pim4, p2 = 0.0;
      for (int j = 0; j < m; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1)) * p2 - std::sqrt(double(j) / (j + 1)) * p3;
      }
      pp = std::sqrt(2.0 * m) * p2;
      double dz = p1 / pp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    nodes[i] = z;
    nodes[m - 1 - i] = -z;
    weights[i] = 2.0 / (pp * pp);
    weights[m - 1 - i] = weights[i];
  }
}

/// Largest per-dimension node count in [3, 20] keeping the tensor grid under
/// a fixed evaluation budget.
inline int quadrature_points_per_dim(int dims) {
  const double budget = 20000.0;
  int best = 3;
  for (int m = 3; m <= 20; ++m) {
    if (std::pow(double(m), double(dims)) <= budget) best = m;
  }
  return best;
}

}  // namespace detail

/// Exact posterior over options given the observed features.  Pure function
/// of (spec, instance.features); does not read instance.latent.
inline std::vector<double> bayes_posterior(const TaskSpec& spec,
                                           const Instance& instance) {
  validate(spec);
  const int k = spec.num_options;
  require(instance.features.size() == static_cast<size_t>(k),
          "instance features length must equal num_options");
  const double tau = spec.label_temperature;
  if (spec.obs_noise == 0.0) {
    std::vector<double> z(k);
    for (int j = 0; j < k; ++j) z[j] = instance.features[j] / tau;
    return softmax(z);
  }
  // u_j | x_j is Gaussian per coordinate; integrate softmax(u / tau) over the
  // posterior with a tensor-product Gauss-Hermite grid.
  const double s2 = spec.latent_scale * spec.latent_scale;
  const double o2 = spec.obs_noise * spec.obs_noise;
  const double var = s2 * o2 / (s2 + o2);
  const std::vector<double> mu = latent_mean_vector(spec);
  std::vector<double> post_mean(k);
  for (int j = 0; j < k; ++j)
    post_mean[j] = (s2 * instance.features[j] + o2 * mu[j]) / (s2 + o2);
  const double scale = std::sqrt(2.0 * var);

  const int m = detail::quadrature_points_per_dim(k);
  std::vector<double> nodes, weights;
  detail::gauss_hermite(m, nodes, weights);

  std::vector<double> acc(k, 0.0);
  std::vector<int> idx(k, 0);
  std::vector<double> u(k), z(k);
  double total_weight = 0.0;
  while (true) {
    double w = 1.0;
    for (int j = 0; j < k; ++j) {
      w *= weights[idx[j]];
      u[j] = post_mean[j] + scale * nodes[idx[j]];
      z[j] = u[j] / tau;
    }
    std::vector<double> p = softmax(z);
    for (int j = 0; j < k; ++j) acc[j] += w * p[j];
    total_weight += w;
    int d = 0;
    while (d < k && ++idx[d] == m) idx[d++] = 0;  // odometer over the grid
    if (d == k) break;
  }
  // total_weight approximates pi^{K/2}; dividing by it renormalizes away the
  // residual quadrature error so the result is an exact distribution.
  for (int j = 0; j < k; ++j) acc[j] /= total_weight;
  return acc;
}

/// Draws n instances.  Instance i uses a stream keyed purely by
/// (seed_namespace, id_offset + i), so any subset is reproducible in
/// isolation and disjoint id ranges never share randomness.
inline std::vector<Instance> sample_instances(const TaskSpec& spec, int n,
                                              std::uint64_t id_offset = 0) {
  validate(spec);
  require(n >= 0, "sample count must be >= 0");
  const int k = spec.num_options;
  const std::vector<double> mu = latent_mean_vector(spec);
  std::vector<Instance> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Instance inst;
    inst.id = id_offset + static_cast<std::uint64_t>(i);
    auto stream = rng::Stream::keyed({spec.seed_namespace, 0x1A57A4CEull, inst.id});
    inst.latent.resize(k);
    for (int j = 0; j < k; ++j)
      inst.latent[j] = mu[j] + spec.latent_scale * stream.next_normal();
    std::vector<double> z(k);
    for (int j = 0; j < k; ++j) z[j] = inst.latent[j] / spec.label_temperature;
    inst.gold_label = stream.next_categorical(softmax(z));
    inst.features = inst.latent;
    if (spec.obs_noise > 0.0) {
      for (int j = 0; j < k; ++j)
        inst.features[j] += spec.obs_noise * stream.next_normal();
    }
    inst.bayes_posterior = bayes_posterior(spec, inst);
    out.push_back(std::move(inst));
  }
  return out;
}

/// Returns a spec for a distribution-shifted variant of the task.  Only the
/// data distribution may move (latent mean/scale, label temperature,
/// observation noise); structural fields are frozen so policies stay
/// compatible.  The shifted spec gets a fresh seed namespace derived from
/// the original and the shift itself.
inline TaskSpec shift_spec(const TaskSpec& spec, const ConfigMap& changes) {
  validate(spec);
  TaskSpec shifted = spec;
  std::uint64_t ns = rng::combine(spec.seed_namespace, 0x5348494654ull);
  for (const auto& [key, value] : changes) {
    if (key == "latent_mean") {
      shifted.latent_mean = detail::vector_of(key, value, spec.num_options);
    } else if (key == "latent_mean_delta") {
      double d = detail::scalar_of(key, value);
      shifted.latent_mean = latent_mean_vector(spec);
      for (double& m : shifted.latent_mean) m += d;
    } else if (key == "latent_scale") {
      shifted.latent_scale = detail::scalar_of(key, value);
    } else if (key == "label_temperature") {
      shifted.label_temperature = detail::scalar_of(key, value);
    } else if (key == "obs_noise") {
      shifted.obs_noise = detail::scalar_of(key, value);
    } else {
      throw ValidationError("shift_spec: key '" + key +
                            "' is not shiftable (only the data distribution "
                            "may change)");
    }
    ns = rng::combine(ns, rng::hash_str(key));
    if (const auto* vec = std::get_if<std::vector<double>>(&value)) {
      for (double d : *vec) ns = rng::combine(ns, std::bit_cast<std::uint64_t>(d));
    } else {
      ns = rng::combine(ns, std::bit_cast<std::uint64_t>(detail::scalar_of(key, value)));
    }
  }
  shifted.seed_namespace = ns;
  validate(shifted);
  return shifted;
}

}  // namespace calibrl::synthworld
