#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibrl/calibration.hpp"
#include "calibrl/common.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

// The three fine-tuning paradigms:
//   sft         cross entropy on the gold decision token
//   grpo        clipped-surrogate policy gradient on binary rewards with
//               group-normalized advantages (no KL term)
//   calib_grpo  grpo with the advantage zeroed at the decision token plus a
//               lambda-weighted cross entropy pulling the decision toward
//               one-hot (correct) or uniform (incorrect) targets
// Everything is full-batch, deterministic, and exact-gradient.

namespace calibrl::trainers {

enum class TrainMode { Sft, Grpo, CalibGrpo };

inline std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Sft: return "sft";
    case TrainMode::Grpo: return "grpo";
    case TrainMode::CalibGrpo: return "calib_grpo";
  }
  throw ValidationError("unknown train mode");
}

inline TrainMode mode_from_name(const std::string& s) {
  if (s == "sft") return TrainMode::Sft;
  if (s == "grpo") return TrainMode::Grpo;
  if (s == "calib_grpo") return TrainMode::CalibGrpo;
  throw ValidationError("unknown train mode '" + s + "'");
}

enum class RewardNorm { Group, Batch };
enum class GoldTracePolicy { EmptyTrace, ReferenceParams };

struct GRPOConfig {
  int group_size = 8;           // G, completions sampled per instance
  double clip_epsilon = 0.2;    // PPO-style ratio clip
  RewardNorm reward_normalization = RewardNorm::Group;
  int inner_updates = 16;       // optimizer steps per sampled batch
  double learning_rate = 1e-3;
  int epochs = 20;
  double sampling_temperature = 1.0;
  double lambda = 0.0;          // calibration CE weight; 0.001 for calib_grpo
  double std_epsilon = 1e-8;    // added to std in the advantage denominator
  double weight_decay = 0.0;
  int hidden_dim = 24;          // policy width when train() builds the init
  int eval_bins = 10;
  double overconfidence_threshold = 0.99;
  GoldTracePolicy gold_trace = GoldTracePolicy::EmptyTrace;
};

inline void validate(const GRPOConfig& c) {
  require(c.group_size >= 2, "group_size must be >= 2");
  require(c.clip_epsilon > 0.0, "clip_epsilon must be positive");
  require(c.inner_updates >= 1, "inner_updates must be >= 1");
  require(c.learning_rate > 0.0, "learning_rate must be positive");
  require(c.epochs >= 1, "epochs must be >= 1");
  require(c.sampling_temperature > 0.0,
          "sampling_temperature must be positive");
  require(c.lambda >= 0.0, "lambda must be >= 0");
  require(c.std_epsilon > 0.0, "std_epsilon must be positive");
  require(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  require(c.hidden_dim >= 2, "hidden_dim must be >= 2");
  require(c.eval_bins >= 1, "eval_bins must be >= 1");
}

struct RolloutGroup {
  synthworld::Instance instance;
  std::vector<policy::Rollout> rollouts;           // G
  std::vector<double> rewards;                     // G, each 0 or 1
  std::vector<std::vector<double>> advantages;     // G x (T+2)
};

/// Binary decision reward: 1 iff the decision token names the gold option.
inline double reward(const policy::Rollout& rollout,
                     const synthworld::Instance& instance,
                     const policy::VocabLayout& layout) {
  require(layout.is_option(policy::decision_token(rollout)),
          "rollout does not end in an option token");
  return policy::decision_option(rollout, layout) == instance.gold_label
             ? 1.0
             : 0.0;
}

struct BatchStats {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

inline BatchStats pooled_reward_stats(std::span<const RolloutGroup> groups) {
  double sum = 0.0, count = 0.0;
  for (const auto& g : groups)
    for (double r : g.rewards) {
      sum += r;
      count += 1.0;
    }
  require(count > 0.0, "no rewards to pool");
  BatchStats s;
  s.mean = sum / count;
  double sq = 0.0;
  for (const auto& g : groups)
    for (double r : g.rewards) sq += (r - s.mean) * (r - s.mean);
  s.std = std::sqrt(sq / count);
  return s;
}

/// Per-rollout scalar advantages: (r_i - mean) / (std + std_epsilon) with
/// population std.  Group mode normalizes within the group; batch mode uses
/// stats pooled over the whole optimizer batch.
inline std::vector<double> group_advantages(
    std::span<const double> rewards, RewardNorm mode,
    std::optional<BatchStats> batch_stats = std::nullopt,
    double std_epsilon = 1e-8) {
  require(rewards.size() >= 2, "advantage groups need G >= 2 rewards");
  double mean, stdev;
  if (mode == RewardNorm::Group) {
    mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= rewards.size();
    double sq = 0.0;
    for (double r : rewards) sq += (r - mean) * (r - mean);
    stdev = std::sqrt(sq / rewards.size());
  } else {
    require(batch_stats.has_value(),
            "batch normalization needs pooled batch stats");
    mean = batch_stats->mean;
    stdev = batch_stats->std;
  }
  std::vector<double> out(rewards.size());
  for (size_t i = 0; i < rewards.size(); ++i)
    out[i] = (rewards[i] - mean) / (stdev + std_epsilon);
  return out;
}

/// Zeroes the advantage at each rollout's decision index, leaving every
/// other entry bit-identical.  Idempotent.
inline void mask_decision_advantage(RolloutGroup& group) {
  for (size_t i = 0; i < group.rollouts.size(); ++i) {
    auto& adv = group.advantages.at(i);
    adv.at(group.rollouts[i].decision_index) = 0.0;
  }
}

// ---- gradient computations ----

struct SurrogateResult {
  std::vector<double> gradient;  // ascent direction on the surrogate
  double surrogate_value = 0.0;
};

/// Clipped-surrogate value and exact ascent gradient:
///   mean over groups, rollouts, tokens of min(rho*A, clip(rho)*A)
/// with rho the per-token new/old probability ratio.  Tokens where the min
/// picks the clipped constant contribute zero gradient.
inline SurrogateResult grpo_surrogate_grad(const policy::PolicyParams& params,
                                           const policy::PolicyParams& old_params,
                                           std::span<const RolloutGroup> groups,
                                           const GRPOConfig& cfg) {
  validate(cfg);
  require(!groups.empty(), "empty rollout batch");
  require(params.dims == old_params.dims,
          "old_params shape differs from params");
  const int v = params.dims.vocab();
  SurrogateResult out;
  out.gradient.assign(params.dims.param_count(), 0.0);
  const double eps = cfg.clip_epsilon;
  const double group_norm = 1.0 / static_cast<double>(groups.size());
  for (const auto& group : groups) {
    require(group.rollouts.size() == group.advantages.size() &&
                group.rollouts.size() == group.rewards.size(),
            "rollout group fields disagree on G");
    const double rollout_norm =
        group_norm / static_cast<double>(group.rollouts.size());
    for (size_t i = 0; i < group.rollouts.size(); ++i) {
      const auto& rollout = group.rollouts[i];
      const auto& adv = group.advantages[i];
      require(adv.size() == rollout.tokens.size(),
              "advantage row does not match token count");
      auto old_logp = policy::score_rollout(old_params, group.instance, rollout);
      auto cache = forward_sequence(params, group.instance.features,
                                    rollout.tokens);
      const double token_norm = rollout_norm / cache.len;
      std::vector<double> dlogits(static_cast<size_t>(cache.len) * v, 0.0);
      for (int t = 0; t < cache.len; ++t) {
        const double a = adv[t];
        const double rho = std::exp(cache.logp[t] - old_logp[t]);
        if (!std::isfinite(rho))
          throw DiagnosticError("non-finite probability ratio");
        const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps);
        out.surrogate_value +=
            token_norm * std::min(rho * a, clipped * a);
        if (a == 0.0) continue;
        // min() selects the unclipped branch (ties included) exactly when
        // the ratio has not left the trust region in the harmful direction.
        const bool unclipped_active =
            a > 0.0 ? rho <= 1.0 + eps : rho >= 1.0 - eps;
        if (!unclipped_active) continue;
        const double coeff = token_norm * a * rho;
        const double* probs = cache.probs.data() + static_cast<size_t>(t) * v;
        double* dl = dlogits.data() + static_cast<size_t>(t) * v;
        for (int j = 0; j < v; ++j)
          dl[j] = coeff * ((j == rollout.tokens[t] ? 1.0 : 0.0) - probs[j]);
      }
      backward_sequence(params, group.instance.features, rollout.tokens, cache,
                        dlogits, out.gradient);
    }
  }
  if (!std::isfinite(out.surrogate_value) || !all_finite(out.gradient))
    throw DiagnosticError("non-finite surrogate");
  return out;
}

struct CalibResult {
  std::vector<double> gradient;  // descent direction, already lambda-scaled
  double ce_value = 0.0;         // mean CE, reported unscaled
};

/// Cross entropy on the decision distribution given each rollout's own
/// trace: one-hot gold target when the rollout was rewarded, uniform 1/K
/// otherwise.  Mean over all rollouts in the batch; gradient carries the
/// lambda factor, the reported value does not.
inline CalibResult decision_calibration_grad(const policy::PolicyParams& params,
                                             std::span<const RolloutGroup> groups,
                                             double lambda, int num_options) {
  require(lambda >= 0.0, "lambda must be >= 0");
  require(num_options == params.dims.num_options,
          "num_options disagrees with the policy");
  require(!groups.empty(), "empty rollout batch");
  const int v = params.dims.vocab();
  const auto layout = params.dims.layout();
  CalibResult out;
  out.gradient.assign(params.dims.param_count(), 0.0);
  size_t total = 0;
  for (const auto& g : groups) total += g.rollouts.size();
  require(total > 0, "no rollouts in batch");
  const double inv_total = 1.0 / static_cast<double>(total);
  for (const auto& group : groups) {
    for (size_t i = 0; i < group.rollouts.size(); ++i) {
      const auto& rollout = group.rollouts[i];
      const bool correct = group.rewards.at(i) == 1.0;
      auto cache = forward_sequence(params, group.instance.features,
                                    rollout.tokens);
      const int d = cache.len - 1;
      const double* probs = cache.probs.data() + static_cast<size_t>(d) * v;
      double ce = 0.0;
      std::vector<double> dlogits(static_cast<size_t>(cache.len) * v, 0.0);
      double* dl = dlogits.data() + static_cast<size_t>(d) * v;
      for (int k = 0; k < num_options; ++k) {
        const int tok = layout.option_token(k);
        const double target =
            correct ? (k == group.instance.gold_label ? 1.0 : 0.0)
                    : 1.0 / num_options;
        if (target > 0.0) ce -= target * std::log(probs[tok]);
        dl[tok] = lambda * inv_total * (probs[tok] - target);
      }
      out.ce_value += inv_total * ce;
      if (lambda > 0.0)
        backward_sequence(params, group.instance.features, rollout.tokens,
                          cache, dlogits, out.gradient);
    }
  }
  if (!std::isfinite(out.ce_value) || !all_finite(out.gradient))
    throw DiagnosticError("non-finite calibration loss");
  return out;
}

struct SftResult {
  std::vector<double> gradient;  // descent direction
  double loss = 0.0;
  double mean_gold_prob = 0.0;   // expected binary reward under one sample
};

/// Cross entropy -log p(gold decision | x, trace).  empty_trace conditions
/// the decision directly on think_end (no reasoning tokens); with
/// reference_params the trace is sampled from the given reference policy
/// and treated as part of the input.
inline SftResult sft_grad(const policy::PolicyParams& params,
                          std::span<const synthworld::Instance> batch,
                          GoldTracePolicy trace_policy,
                          const policy::PolicyParams* reference = nullptr,
                          rng::Stream* stream = nullptr) {
  require(!batch.empty(), "sft batch must be non-empty");
  if (trace_policy == GoldTracePolicy::ReferenceParams) {
    require(reference != nullptr && stream != nullptr,
            "reference_params mode needs a reference policy and a stream");
    require(reference->dims == params.dims,
            "reference policy shape differs from params");
  }
  const auto& dims = params.dims;
  const auto layout = dims.layout();
  const int v = dims.vocab();
  SftResult out;
  out.gradient.assign(dims.param_count(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& inst : batch) {
    std::vector<int> tokens;
    if (trace_policy == GoldTracePolicy::ReferenceParams) {
      auto rollout = policy::sample_rollout(*reference, inst, 1.0, *stream);
      auto trace = policy::trace_tokens(rollout);
      tokens.assign(trace.begin(), trace.end());
    }
    tokens.push_back(layout.think_end_id());
    tokens.push_back(layout.option_token(inst.gold_label));
    auto cache = forward_sequence(params, inst.features, tokens);
    const int d = cache.len - 1;
    out.loss += inv_n * -cache.logp[d];
    const double* probs = cache.probs.data() + static_cast<size_t>(d) * v;
    out.mean_gold_prob += inv_n * probs[tokens[d]];
    std::vector<double> dlogits(static_cast<size_t>(cache.len) * v, 0.0);
    double* dl = dlogits.data() + static_cast<size_t>(d) * v;
    for (int k = 0; k < dims.num_options; ++k) {
      const int tok = layout.option_token(k);
      const double target = tok == tokens[d] ? 1.0 : 0.0;
      dl[tok] = inv_n * (probs[tok] - target);
    }
    backward_sequence(params, inst.features, tokens, cache, dlogits,
                      out.gradient);
  }
  if (!std::isfinite(out.loss) || !all_finite(out.gradient))
    throw DiagnosticError("non-finite sft loss");
  return out;
}

// ---- optimizer ----

/// AdamW with decoupled weight decay (decay defaults to 0 upstream).
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::vector<double> m, v;
  long t = 0;

  void step(std::vector<double>& w, std::span<const double> grad) {
    require(grad.size() == w.size(), "gradient size mismatch");
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
    }
  }
};

// ---- training loop ----

struct EpochRecord {
  int epoch = 0;  // 1-based
  double mean_reward = 0.0;
  double surrogate_loss = 0.0;    // objective value for the epoch
  double calibration_loss = 0.0;  // unscaled decision CE
  double eval_accuracy = 0.0;
  double eval_ece = 0.0;
  double overconfidence_ratio = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainResult {
  policy::PolicyParams final_params;
  policy::PolicyParams best_params;
  int best_epoch = 0;
  TrainHistory history;
};

/// Thrown when an epoch produces a non-finite loss; carries the last
/// parameters known to be good (end of the previous epoch).
struct TrainDivergence : DiagnosticError {
  int epoch;
  policy::PolicyParams last_good;
  TrainDivergence(int epoch_, policy::PolicyParams last_good_)
      : DiagnosticError("training diverged at epoch " + std::to_string(epoch_)),
        epoch(epoch_),
        last_good(std::move(last_good_)) {}
};

/// Evaluation trace length for a training mode: policies taught with empty
/// traces decide directly after think_end, everything else reasons for the
/// full T tokens.
inline int eval_trace_len(TrainMode mode, const GRPOConfig& cfg) {
  return mode == TrainMode::Sft && cfg.gold_trace == GoldTracePolicy::EmptyTrace
             ? 0
             : -1;
}

/// Greedy-decoded records for an eval set (shared by train() and the
/// harness; the method tag and split are filled by the caller).
inline std::vector<calibration::PredictionRecord> evaluate_policy(
    const policy::PolicyParams& params,
    std::span<const synthworld::Instance> instances, int trace_len = -1) {
  std::vector<calibration::PredictionRecord> records;
  records.reserve(instances.size());
  for (const auto& inst : instances)
    records.push_back(calibration::extract_record(
        params, inst, calibration::Decoding::greedy(), trace_len));
  return records;
}

/// Full training run.  Per epoch: snapshot, sample G rollouts per instance,
/// rewards and (masked, for calib_grpo) advantages, inner_updates full-batch
/// AdamW steps on -surrogate + lambda*CE (or the SFT loss), then a greedy
/// eval.  Best checkpoint: highest eval accuracy, ties broken by lower ECE.
inline TrainResult train(TrainMode mode, const synthworld::TaskSpec& spec,
                         std::span<const synthworld::Instance> train_instances,
                         std::span<const synthworld::Instance> eval_instances,
                         const GRPOConfig& cfg, std::uint64_t seed,
                         std::optional<policy::PolicyParams> start = {}) {
  synthworld::validate(spec);
  validate(cfg);
  require(!train_instances.empty(), "train set must be non-empty");
  require(!eval_instances.empty(), "eval set must be non-empty");
  if (mode == TrainMode::CalibGrpo)
    require(cfg.lambda > 0.0, "calib_grpo needs lambda > 0");

  policy::PolicyDims dims{cfg.hidden_dim, spec.num_options, spec.trace_length,
                          spec.reasoning_vocab};
  policy::PolicyParams params =
      start.has_value() ? std::move(*start) : policy::init_policy(dims, seed);
  require(params.dims.num_options == spec.num_options &&
              params.dims.trace_length == spec.trace_length &&
              params.dims.reasoning_vocab == spec.reasoning_vocab,
          "start params incompatible with the task spec");
  const auto layout = params.dims.layout();

  AdamW opt;
  opt.lr = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  TrainResult result;
  result.best_params = policy::snapshot(params);
  policy::PolicyParams last_good = policy::snapshot(params);
  double best_acc = -1.0, best_ece = 2.0;
  const int trace_len = eval_trace_len(mode, cfg);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      if (mode == TrainMode::Sft) {
        policy::PolicyParams reference = policy::snapshot(params);
        for (int step = 0; step < cfg.inner_updates; ++step) {
          SftResult sft;
          if (cfg.gold_trace == GoldTracePolicy::ReferenceParams) {
            auto stream = rng::Stream::keyed(
                {seed, rng::hash_str("sft-trace"), std::uint64_t(epoch)});
            sft = sft_grad(params, train_instances, cfg.gold_trace, &reference,
                           &stream);
          } else {
            sft = sft_grad(params, train_instances, cfg.gold_trace);
          }
          opt.step(params.w, sft.gradient);
          if (!all_finite(params.w))
            throw DiagnosticError("non-finite parameters");
          rec.surrogate_loss = sft.loss;
          rec.mean_reward = sft.mean_gold_prob;
        }
        rec.calibration_loss = 0.0;
      } else {
        policy::PolicyParams old_params = policy::snapshot(params);
        std::vector<RolloutGroup> groups;
        groups.reserve(train_instances.size());
        double reward_sum = 0.0, reward_count = 0.0;
        for (const auto& inst : train_instances) {
          RolloutGroup g;
          g.instance = inst;
          for (int i = 0; i < cfg.group_size; ++i) {
            auto stream = rng::Stream::keyed({seed, rng::hash_str("rollout"),
                                              std::uint64_t(epoch), inst.id,
                                              std::uint64_t(i)});
            g.rollouts.push_back(policy::sample_rollout(
                old_params, inst, cfg.sampling_temperature, stream));
            g.rewards.push_back(reward(g.rollouts.back(), inst, layout));
            reward_sum += g.rewards.back();
            reward_count += 1.0;
          }
          groups.push_back(std::move(g));
        }
        std::optional<BatchStats> pooled;
        if (cfg.reward_normalization == RewardNorm::Batch)
          pooled = pooled_reward_stats(groups);
        for (auto& g : groups) {
          auto scalar = group_advantages(g.rewards, cfg.reward_normalization,
                                         pooled, cfg.std_epsilon);
          g.advantages.assign(g.rollouts.size(), {});
          for (size_t i = 0; i < g.rollouts.size(); ++i)
            g.advantages[i].assign(g.rollouts[i].tokens.size(), scalar[i]);
          if (mode == TrainMode::CalibGrpo) mask_decision_advantage(g);
        }
        rec.mean_reward = reward_sum / reward_count;
        const double lambda = mode == TrainMode::CalibGrpo ? cfg.lambda : 0.0;
        std::vector<double> descent(params.dims.param_count(), 0.0);
        for (int step = 0; step < cfg.inner_updates; ++step) {
          auto surr = grpo_surrogate_grad(params, old_params, groups, cfg);
          rec.surrogate_loss = -surr.surrogate_value;
          if (lambda > 0.0) {
            auto calib = decision_calibration_grad(params, groups, lambda,
                                                   spec.num_options);
            rec.calibration_loss = calib.ce_value;
            for (size_t i = 0; i < descent.size(); ++i)
              descent[i] = -surr.gradient[i] + calib.gradient[i];
          } else {
            for (size_t i = 0; i < descent.size(); ++i)
              descent[i] = -surr.gradient[i];
          }
          opt.step(params.w, descent);
          if (!all_finite(params.w))
            throw DiagnosticError("non-finite parameters");
        }
        if (lambda == 0.0) {
          // Log the decision CE even when it carries no gradient.
          rec.calibration_loss =
              decision_calibration_grad(params, groups, 0.0, spec.num_options)
                  .ce_value;
        }
      }
    } catch (const DiagnosticError&) {
      throw TrainDivergence(epoch, std::move(last_good));
    }

    auto records = evaluate_policy(params, eval_instances, trace_len);
    rec.eval_accuracy = calibration::accuracy(records);
    rec.eval_ece = calibration::ece(records, cfg.eval_bins);
    rec.overconfidence_ratio = calibration::overconfidence_ratio(
        records, cfg.overconfidence_threshold);
    result.history.epochs.push_back(rec);

    if (rec.eval_accuracy > best_acc ||
        (rec.eval_accuracy == best_acc && rec.eval_ece < best_ece)) {
      best_acc = rec.eval_accuracy;
      best_ece = rec.eval_ece;
      result.best_params = policy::snapshot(params);
      result.best_epoch = epoch;
    }
    last_good = policy::snapshot(params);
  }
  result.final_params = std::move(params);
  return result;
}

}  // namespace calibrl::trainers
