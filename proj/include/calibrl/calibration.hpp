#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibrl/common.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

// Everything downstream of a decision: PredictionRecords and the calibration
// metrics computed over them.  All metrics are pure functions of record
// spans.  ECE/reliability default to equal-mass (equal-count) bins; a
// fixed-width scheme is available behind a flag for comparison.

namespace calibrl::calibration {

enum class Split { InDomain, Ood };

inline std::string split_name(Split s) {
  return s == Split::InDomain ? "in_domain" : "ood";
}

struct PredictionRecord {
  std::uint64_t instance_id = 0;
  double confidence = 0.0;  // probability the policy gave its own decision
  int predicted = 0;        // option index
  int gold = 0;             // option index
  bool correct = false;
  std::vector<double> decision_distribution;  // optional, length K
  std::vector<double> bayes_posterior;        // optional, length K
  Split split = Split::InDomain;
  std::string method;
};

inline void validate(const PredictionRecord& r) {
  require(std::isfinite(r.confidence) && r.confidence >= 0.0 &&
              r.confidence <= 1.0,
          "record confidence must lie in [0,1]");
  require(r.predicted >= 0 && r.gold >= 0, "option indices must be >= 0");
  require(r.correct == (r.predicted == r.gold),
          "record 'correct' flag contradicts predicted vs gold");
  if (!r.decision_distribution.empty()) {
    require(r.predicted < static_cast<int>(r.decision_distribution.size()),
            "predicted index outside decision_distribution");
    require(std::abs(r.confidence - r.decision_distribution[r.predicted]) <=
                1e-9,
            "confidence disagrees with decision_distribution[predicted]");
  }
}

struct BinSummary {
  int bin_index = 0;
  long count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  double lo = 0.0;  // interval label [lo, hi) in confidence space
  double hi = 0.0;
};

enum class BinScheme { EqualMass, FixedWidth };

// ---- decoding / record extraction ----

/// Decode mode for extract_record.  Sampled mode borrows the caller's
/// stream; the stream must outlive the call.
struct Decoding {
  enum class Kind { Greedy, Sampled };
  Kind kind = Kind::Greedy;
  double temperature = 1.0;
  rng::Stream* stream = nullptr;

  static Decoding greedy() { return {}; }
  static Decoding sampled(rng::Stream& s, double temperature = 1.0) {
    Decoding d;
    d.kind = Kind::Sampled;
    d.temperature = temperature;
    d.stream = &s;
    return d;
  }
};

/// Runs one rollout and converts it into a PredictionRecord.  trace_len < 0
/// means the policy's full trace_length; 0 evaluates the decision directly
/// after think_end with no reasoning tokens (how trace-free policies are
/// scored).
inline PredictionRecord extract_record(const policy::PolicyParams& params,
                                       const synthworld::Instance& instance,
                                       const Decoding& decoding,
                                       int trace_len = -1) {
  if (decoding.kind == Decoding::Kind::Sampled)
    require(decoding.stream != nullptr, "sampled decoding needs a stream");
  policy::Rollout rollout = policy::detail::rollout_impl(
      params, instance,
      decoding.kind == Decoding::Kind::Sampled ? decoding.temperature : 1.0,
      decoding.kind == Decoding::Kind::Sampled ? decoding.stream : nullptr,
      trace_len);
  const auto layout = params.dims.layout();
  PredictionRecord r;
  r.instance_id = instance.id;
  r.predicted = policy::decision_option(rollout, layout);
  r.gold = instance.gold_label;
  r.correct = r.predicted == r.gold;
  r.confidence = rollout.decision_prob;
  r.decision_distribution = policy::detail::decision_distribution_any(
      params, instance, policy::trace_tokens(rollout));
  r.bayes_posterior = instance.bayes_posterior;
  return r;
}

// ---- binning ----

namespace detail {

/// Sorted equal-mass partition of indices [0, n).  Ties in the key break by
/// (instance_id, original index) so the partition is a deterministic total
/// order.  Bin m holds sorted positions [floor(mn/M), floor((m+1)n/M)).
template <typename KeyFn>
std::vector<std::vector<size_t>> equal_mass_partition(
    std::span<const PredictionRecord> records, int bins, KeyFn key_of) {
  const size_t n = records.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    double ka = key_of(records[a]), kb = key_of(records[b]);
    if (ka != kb) return ka < kb;
    if (records[a].instance_id != records[b].instance_id)
      return records[a].instance_id < records[b].instance_id;
    return a < b;
  });
  std::vector<std::vector<size_t>> out(bins);
  for (int m = 0; m < bins; ++m) {
    size_t lo = m * n / bins;
    size_t hi = (m + 1) * n / bins;
    out[m].assign(order.begin() + lo, order.begin() + hi);
  }
  return out;
}

template <typename KeyFn>
std::vector<std::vector<size_t>> fixed_width_partition(
    std::span<const PredictionRecord> records, int bins, KeyFn key_of) {
  std::vector<std::vector<size_t>> out(bins);
  for (size_t i = 0; i < records.size(); ++i) {
    int m = std::min(bins - 1, static_cast<int>(key_of(records[i]) * bins));
    out[m].push_back(i);
  }
  return out;
}

inline void check_metric_inputs(std::span<const PredictionRecord> records,
                                int bins) {
  require(!records.empty(), "metrics need at least one record");
  require(bins >= 1, "bin count must be >= 1");
  for (const auto& r : records) validate(r);
}

}  // namespace detail

/// Per-bin summaries for confidence-vs-accuracy; the identical partition
/// backs ece(), so the two always agree.
inline std::vector<BinSummary> confidence_bins(
    std::span<const PredictionRecord> records, int bins,
    BinScheme scheme = BinScheme::EqualMass) {
  detail::check_metric_inputs(records, bins);
  auto key = [](const PredictionRecord& r) { return r.confidence; };
  auto part = scheme == BinScheme::EqualMass
                  ? detail::equal_mass_partition(records, bins, key)
                  : detail::fixed_width_partition(records, bins, key);
  std::vector<BinSummary> out(bins);
  for (int m = 0; m < bins; ++m) {
    BinSummary& b = out[m];
    b.bin_index = m;
    b.count = static_cast<long>(part[m].size());
    for (size_t i : part[m]) {
      b.mean_confidence += records[i].confidence;
      b.accuracy += records[i].correct ? 1.0 : 0.0;
    }
    if (b.count > 0) {
      b.mean_confidence /= b.count;
      b.accuracy /= b.count;
    }
    if (scheme == BinScheme::FixedWidth) {
      b.lo = double(m) / bins;
      b.hi = double(m + 1) / bins;
    } else {
      b.lo = m == 0 ? 0.0
                    : (part[m].empty() ? out[m - 1].hi
                                       : records[part[m].front()].confidence);
      b.hi = 1.0;  // provisional; tightened below
    }
  }
  if (scheme == BinScheme::EqualMass) {
    for (int m = 0; m + 1 < bins; ++m) out[m].hi = out[m + 1].lo;
    out[bins - 1].hi = 1.0;
  }
  return out;
}

/// Expected calibration error over equal-mass bins (default) or fixed-width
/// bins behind the flag.
inline double ece(std::span<const PredictionRecord> records, int bins,
                  BinScheme scheme = BinScheme::EqualMass) {
  auto summaries = confidence_bins(records, bins, scheme);
  const double n = static_cast<double>(records.size());
  double total = 0.0;
  for (const auto& b : summaries)
    total += (b.count / n) * std::abs(b.accuracy - b.mean_confidence);
  return total;
}

struct ReliabilityData {
  std::vector<BinSummary> bins;
  std::array<long, 20> histogram{};  // fixed-width confidence counts
};

inline ReliabilityData reliability_bins(
    std::span<const PredictionRecord> records, int bins,
    BinScheme scheme = BinScheme::EqualMass) {
  ReliabilityData out;
  out.bins = confidence_bins(records, bins, scheme);
  for (const auto& r : records) {
    int b = std::min(19, static_cast<int>(r.confidence * 20.0));
    ++out.histogram[b];
  }
  return out;
}

namespace detail {

inline void check_distributions(std::span<const PredictionRecord> records,
                                int num_options) {
  for (const auto& r : records) {
    require(r.decision_distribution.size() ==
                static_cast<size_t>(num_options),
            "record lacks a full decision distribution");
    for (double p : r.decision_distribution)
      require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
              "decision distribution entries must lie in [0,1]");
  }
}

/// Shared core of sce/mce: per class k, equal-mass bins over the predicted
/// probability of k; accumulate weighted |gap| and weighted gap^2.
inline std::pair<double, double> class_binned_gaps(
    std::span<const PredictionRecord> records, int bins, int num_options) {
  check_metric_inputs(records, bins);
  check_distributions(records, num_options);
  const double n = static_cast<double>(records.size());
  double abs_total = 0.0, sq_total = 0.0;
  for (int k = 0; k < num_options; ++k) {
    auto key = [k](const PredictionRecord& r) {
      return r.decision_distribution[k];
    };
    auto part = equal_mass_partition(records, bins, key);
    for (const auto& bin : part) {
      if (bin.empty()) continue;
      double freq = 0.0, mean_p = 0.0;
      for (size_t i : bin) {
        freq += records[i].gold == k ? 1.0 : 0.0;
        mean_p += records[i].decision_distribution[k];
      }
      freq /= bin.size();
      mean_p /= bin.size();
      const double w = bin.size() / n;
      const double gap = freq - mean_p;
      abs_total += w * std::abs(gap);
      sq_total += w * gap * gap;
    }
  }
  return {abs_total, sq_total};
}

}  // namespace detail

/// Static calibration error: class-conditional binned plug-in estimator,
/// averaged over classes with uniform weights.
inline double sce(std::span<const PredictionRecord> records, int bins,
                  int num_options) {
  auto [abs_total, sq] = detail::class_binned_gaps(records, bins, num_options);
  (void)sq;
  return abs_total / num_options;
}

/// Marginal calibration error: square root of the class-weighted binned
/// squared gaps (uniform class weights), a plug-in estimator.
inline double mce(std::span<const PredictionRecord> records, int bins,
                  int num_options) {
  auto [abs_total, sq_total] =
      detail::class_binned_gaps(records, bins, num_options);
  (void)abs_total;
  return std::sqrt(sq_total / num_options);
}

/// Fraction of records strictly above the confidence threshold.
inline double overconfidence_ratio(std::span<const PredictionRecord> records,
                                   double threshold = 0.99) {
  require(!records.empty(), "overconfidence_ratio needs records");
  require(std::isfinite(threshold), "threshold must be finite");
  double hits = 0.0;
  for (const auto& r : records) hits += r.confidence > threshold ? 1.0 : 0.0;
  return hits / records.size();
}

inline double accuracy(std::span<const PredictionRecord> records) {
  require(!records.empty(), "accuracy needs records");
  double hits = 0.0;
  for (const auto& r : records) hits += r.correct ? 1.0 : 0.0;
  return hits / records.size();
}

/// Oracle-only diagnostic: mean |confidence - posterior mass on the
/// predicted option|.  Requires the synthetic world's exact posterior.
inline double posterior_gap(std::span<const PredictionRecord> records) {
  require(!records.empty(), "posterior_gap needs records");
  double total = 0.0;
  for (const auto& r : records) {
    require(r.predicted < static_cast<int>(r.bayes_posterior.size()),
            "record lacks a bayes posterior covering the prediction");
    total += std::abs(r.confidence - r.bayes_posterior[r.predicted]);
  }
  return total / records.size();
}

/// One-stop summary for a record set.  sce/mce/posterior_gap are filled only
/// when every record carries the needed optional fields.
struct CalibrationReport {
  long n = 0;
  int bins = 10;
  double ece = 0.0;
  double accuracy = 0.0;
  double overconfidence = 0.0;
  std::optional<double> sce;
  std::optional<double> mce;
  std::optional<double> posterior_gap;
  std::vector<BinSummary> bin_summaries;
  std::array<long, 20> histogram{};
};

inline CalibrationReport make_report(std::span<const PredictionRecord> records,
                                     int bins, int num_options,
                                     double overconfidence_threshold = 0.99) {
  CalibrationReport rep;
  rep.n = static_cast<long>(records.size());
  rep.bins = bins;
  auto reliability = reliability_bins(records, bins);
  rep.bin_summaries = std::move(reliability.bins);
  rep.histogram = reliability.histogram;
  rep.ece = ece(records, bins);
  rep.accuracy = accuracy(records);
  rep.overconfidence = overconfidence_ratio(records, overconfidence_threshold);
  bool have_dist = std::all_of(records.begin(), records.end(), [&](auto& r) {
    return r.decision_distribution.size() == static_cast<size_t>(num_options);
  });
  if (have_dist) {
    rep.sce = sce(records, bins, num_options);
    rep.mce = mce(records, bins, num_options);
  }
  bool have_post = std::all_of(records.begin(), records.end(), [](auto& r) {
    return !r.bayes_posterior.empty();
  });
  if (have_post) rep.posterior_gap = posterior_gap(records);
  return rep;
}

}  // namespace calibrl::calibration
