#pragma once

// Causal probes of a trained policy:
//  - rollout_confidence_study: how often sampled decisions are near-certain.
//  - swap_study: replace an instance's reasoning trace with one argued toward
//    a different option and see whether the decision follows the trace.
// Plus a hand-constructed "extractor" policy whose decision provably copies
// the majority evidence class of its trace, used to certify both probes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calibrl/common.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

#include <json.hpp>

namespace calibrl::diagnostics {

// ---- rollout overconfidence study ----

struct ConfidenceStudy {
  double ratio = 0.0;               // fraction of confidences > threshold
  double mean_confidence = 0.0;
  double threshold = 0.99;
  double temperature = 1.0;
  int samples_per_instance = 64;
  std::vector<double> confidences;  // instance-major, then sample index
};

// Samples `samples_per_instance` rollouts per instance at the given
// temperature and records each decision-token probability. Deterministic
// given (params, instances, seed): every sample has its own keyed stream.
inline ConfidenceStudy rollout_confidence_study(
    const policy::PolicyParams& params,
    std::span<const synthworld::Instance> instances,
    int samples_per_instance = 64, double temperature = 1.0,
    double threshold = 0.99, std::uint64_t seed = 0) {
  require(!instances.empty(), "rollout_confidence_study: empty instance set");
  require(samples_per_instance >= 1,
          "rollout_confidence_study: samples_per_instance must be >= 1");
  require(threshold > 0.0 && threshold < 1.0,
          "rollout_confidence_study: threshold must lie in (0, 1)");

  ConfidenceStudy study;
  study.threshold = threshold;
  study.temperature = temperature;
  study.samples_per_instance = samples_per_instance;
  study.confidences.reserve(instances.size() *
                            static_cast<std::size_t>(samples_per_instance));
  long above = 0;
  double total = 0.0;
  for (const auto& inst : instances) {
    for (int s = 0; s < samples_per_instance; ++s) {
      auto stream = rng::Stream::keyed({seed, rng::hash_str("overconfidence"),
                                        inst.id, static_cast<std::uint64_t>(s)});
      const auto r = policy::sample_rollout(params, inst, temperature, stream);
      study.confidences.push_back(r.decision_prob);
      total += r.decision_prob;
      if (r.decision_prob > threshold) ++above;
    }
  }
  study.ratio = static_cast<double>(above) /
                static_cast<double>(study.confidences.size());
  study.mean_confidence = total / static_cast<double>(study.confidences.size());
  return study;
}

// ---- reasoning swap ----

// Evaluation input pairing a target instance's features with a donor trace.
struct SpliceInput {
  synthworld::Instance instance;  // target (features, gold, posterior)
  std::vector<int> trace;         // donor reasoning tokens, length T
  int original_prediction = 0;
  int donor_prediction = 0;
  double original_confidence = 0.0;
};

namespace detail {

inline SpliceInput make_splice(const synthworld::Instance& target,
                               const policy::Rollout& original,
                               const policy::Rollout& donor,
                               const policy::VocabLayout& layout,
                               bool check_opposing) {
  require(original.instance_id == target.id,
          "swap_trace: original rollout does not belong to the target instance");
  require(original.tokens.size() == donor.tokens.size(),
          "swap_trace: trace lengths differ");
  SpliceInput in;
  in.instance = target;
  const auto trace = policy::trace_tokens(donor);
  in.trace.assign(trace.begin(), trace.end());
  in.original_prediction = policy::decision_option(original, layout);
  in.donor_prediction = policy::decision_option(donor, layout);
  in.original_confidence = original.decision_prob;
  if (check_opposing) {
    require(in.donor_prediction != in.original_prediction,
            "swap_trace: donor predicts the same option as the original");
  }
  return in;
}

}  // namespace detail

inline SpliceInput swap_trace(const synthworld::Instance& target,
                              const policy::Rollout& original,
                              const policy::Rollout& donor,
                              const policy::VocabLayout& layout) {
  return detail::make_splice(target, original, donor, layout, true);
}

// Test hook: same construction without the opposing-prediction guard, so a
// rollout can be spliced onto itself to check the identity property.
inline SpliceInput swap_trace_unchecked(const synthworld::Instance& target,
                                        const policy::Rollout& original,
                                        const policy::Rollout& donor,
                                        const policy::VocabLayout& layout) {
  return detail::make_splice(target, original, donor, layout, false);
}

struct SwapCase {
  std::uint64_t target_id = 0;
  std::uint64_t donor_id = 0;
  policy::Rollout original;
  policy::Rollout donor;
  std::vector<double> spliced_distribution;
  int original_prediction = 0;
  int donor_prediction = 0;
  int post_swap_prediction = 0;
  double original_confidence = 0.0;
  double post_swap_confidence = 0.0;  // spliced probability of the new argmax
  bool flipped = false;               // argmax moved to the donor's label
};

struct SwapStudy {
  double flip_ratio = 0.0;
  double confidence_floor = 0.9;
  std::vector<double> flipped_confidences;  // post-swap, flipped cases only
  std::vector<SwapCase> cases;              // one per eligible target
};

// Greedy-decodes every instance, keeps targets whose decision confidence is
// at least `confidence_floor`, splices in a uniformly chosen donor trace with
// the opposite prediction, and re-evaluates only the decision position.
inline SwapStudy swap_study(const policy::PolicyParams& params,
                            std::span<const synthworld::Instance> instances,
                            double confidence_floor = 0.9,
                            std::uint64_t seed = 0) {
  require(!instances.empty(), "swap_study: empty instance set");
  require(confidence_floor > 0.0 && confidence_floor <= 1.0,
          "swap_study: confidence floor must lie in (0, 1]");
  const auto layout = params.dims.layout();

  std::vector<policy::Rollout> rollouts;
  std::vector<int> predictions;
  rollouts.reserve(instances.size());
  for (const auto& inst : instances) {
    rollouts.push_back(policy::greedy_rollout(params, inst));
    predictions.push_back(policy::decision_option(rollouts.back(), layout));
  }

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    if (rollouts[i].decision_prob >= confidence_floor) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw DiagnosticError(
        "swap_study: no greedy decision reaches the confidence floor");
  }

  SwapStudy study;
  study.confidence_floor = confidence_floor;
  long flips = 0;
  for (std::size_t i : eligible) {
    std::vector<std::size_t> donors;
    for (std::size_t j = 0; j < rollouts.size(); ++j) {
      if (predictions[j] != predictions[i]) donors.push_back(j);
    }
    if (donors.empty()) {
      throw DiagnosticError(
          "swap_study: every greedy prediction agrees, no opposing-prediction "
          "donors available");
    }
    auto stream = rng::Stream::keyed(
        {seed, rng::hash_str("swap-donor"), instances[i].id});
    const std::size_t j = donors[stream.next_below(donors.size())];

    const SpliceInput in =
        swap_trace(instances[i], rollouts[i], rollouts[j], layout);
    SwapCase c;
    c.target_id = instances[i].id;
    c.donor_id = instances[j].id;
    c.original = rollouts[i];
    c.donor = rollouts[j];
    c.spliced_distribution =
        policy::decision_distribution(params, in.instance, in.trace);
    c.original_prediction = in.original_prediction;
    c.donor_prediction = in.donor_prediction;
    c.original_confidence = in.original_confidence;
    const auto it = std::max_element(c.spliced_distribution.begin(),
                                     c.spliced_distribution.end());
    c.post_swap_prediction =
        static_cast<int>(it - c.spliced_distribution.begin());
    c.post_swap_confidence = *it;
    c.flipped = c.post_swap_prediction == c.donor_prediction;
    if (c.flipped) {
      ++flips;
      study.flipped_confidences.push_back(c.post_swap_confidence);
    }
    study.cases.push_back(std::move(c));
  }
  study.flip_ratio =
      static_cast<double>(flips) / static_cast<double>(study.cases.size());
  return study;
}

// ---- extractor policy ----

// Hand-built policy certifying the extraction mechanism. Hidden state is
// [feature carriers (K) | evidence counters (K)]. Reasoning token j deposits
// a small increment on counter (j mod K); the decision readout multiplies the
// counters by a weight so large that the softmax saturates to exactly 1.0 for
// the majority class (ladder biases break count ties toward lower options).
// Reasoning logits copy the feature carriers, so different instances argue
// for different options, while the decision depends only on the trace.
inline policy::PolicyParams make_extractor_policy(
    const synthworld::TaskSpec& spec) {
  synthworld::validate(spec);
  const int k = spec.num_options;
  policy::PolicyDims dims{2 * k, k, spec.trace_length, spec.reasoning_vocab};
  policy::validate(dims);

  // With increment 1e-3 and traces of a few dozen tokens at most, counters
  // stay deep inside tanh's linear region: distinct evidence counts stay
  // separated by ~1e-3 while order-dependent curvature error stays below
  // 1e-7. The readout scale then turns a one-count lead into a logit gap
  // > 746 (softmax underflows to exactly 0/1), and the ladder spacing of 60
  // dominates curvature noise on exact ties while still saturating.
  require(spec.trace_length <= 64,
          "make_extractor_policy: trace too long for the saturation margins");
  constexpr double kIncrement = 1e-3;
  constexpr double kReadout = 1e6;
  constexpr double kLadder = 60.0;

  policy::PolicyParams p;
  p.dims = dims;
  p.w.assign(static_cast<std::size_t>(dims.param_count()), 0.0);
  const auto layout = dims.layout();
  const int h = dims.hidden;
  const int v = dims.vocab();

  double* w_in = p.data() + dims.w_in_off();
  for (int i = 0; i < k; ++i) w_in[i * k + i] = 1.0;  // carry features

  double* embed = p.data() + dims.embed_off();
  for (int j = 0; j < dims.reasoning_vocab; ++j) {
    embed[j * h + k + (j % k)] = kIncrement;  // bump the class counter
  }

  double* w_rec = p.data() + dims.w_rec_off();
  for (int i = 0; i < h; ++i) w_rec[i * h + i] = 1.0;  // keep state

  double* w_out = p.data() + dims.w_out_off();
  for (int j = 0; j < dims.reasoning_vocab; ++j) {
    w_out[(j % k) * v + j] = 1.0;  // reasoning logits echo the features
  }
  double* b_out = p.data() + dims.b_out_off();
  for (int opt = 0; opt < k; ++opt) {
    w_out[(k + opt) * v + layout.option_token(opt)] = kReadout;
    b_out[layout.option_token(opt)] = kLadder * static_cast<double>(k - 1 - opt);
  }
  return p;
}

// ---- reports ----

inline nlohmann::json to_json(const ConfidenceStudy& study) {
  return nlohmann::json{{"ratio", study.ratio},
                        {"mean_confidence", study.mean_confidence},
                        {"threshold", study.threshold},
                        {"temperature", study.temperature},
                        {"samples_per_instance", study.samples_per_instance},
                        {"n", study.confidences.size()},
                        {"confidences", study.confidences}};
}

inline nlohmann::json to_json(const SwapStudy& study) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& c : study.cases) {
    cases.push_back({{"target_id", c.target_id},
                     {"donor_id", c.donor_id},
                     {"original_prediction", c.original_prediction},
                     {"donor_prediction", c.donor_prediction},
                     {"post_swap_prediction", c.post_swap_prediction},
                     {"original_confidence", c.original_confidence},
                     {"post_swap_confidence", c.post_swap_confidence},
                     {"flipped", c.flipped}});
  }
  return nlohmann::json{{"flip_ratio", study.flip_ratio},
                        {"confidence_floor", study.confidence_floor},
                        {"n", study.cases.size()},
                        {"flipped_confidences", study.flipped_confidences},
                        {"cases", std::move(cases)}};
}

// Fixed-width histogram of confidences as CSV ("bin_lo,bin_hi,count" rows),
// for plotting flipped-confidence distributions.
inline std::string confidence_histogram_csv(std::span<const double> confidences,
                                            int bins = 20) {
  require(bins >= 1, "confidence_histogram_csv: bins must be >= 1");
  std::vector<long> counts(static_cast<std::size_t>(bins), 0);
  for (double c : confidences) {
    require(std::isfinite(c) && c >= 0.0 && c <= 1.0,
            "confidence_histogram_csv: confidence outside [0, 1]");
    const int b = std::min(bins - 1, static_cast<int>(c * bins));
    ++counts[static_cast<std::size_t>(b)];
  }
  std::ostringstream out;
  out << "bin_lo,bin_hi,count\n";
  for (int b = 0; b < bins; ++b) {
    out << format_double(static_cast<double>(b) / bins) << ','
        << format_double(static_cast<double>(b + 1) / bins) << ','
        << counts[static_cast<std::size_t>(b)] << '\n';
  }
  return out.str();
}

}  // namespace calibrl::diagnostics
