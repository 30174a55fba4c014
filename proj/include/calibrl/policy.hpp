#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "calibrl/common.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

// Tiny autoregressive policy over a structured vocabulary.  A rollout is
//   y_0 .. y_{T-1}  reasoning tokens
//   y_T             think_end
//   y_{T+1}         an option token (the decision)
// The network is a single-layer tanh RNN conditioned on the instance
// features; every op that trains or checks gradients goes through one shared
// forward/backward pair, in plain double loops, so analytic gradients are
// exact and easy to audit.

namespace calibrl::policy {

/// Token id ranges: [0, R) reasoning, R think_end, [R+1, R+1+K) options.
struct VocabLayout {
  int reasoning_count = 8;  // R
  int num_options = 4;      // K

  int think_end_id() const { return reasoning_count; }
  int option_begin() const { return reasoning_count + 1; }
  int vocab_size() const { return reasoning_count + 1 + num_options; }
  bool is_reasoning(int id) const { return id >= 0 && id < reasoning_count; }
  bool is_option(int id) const {
    return id >= option_begin() && id < vocab_size();
  }
  int option_token(int k) const { return option_begin() + k; }
  int option_index(int token) const { return token - option_begin(); }
};

struct PolicyDims {
  int hidden = 16;          // H
  int num_options = 4;      // K, also the feature dimension
  int trace_length = 4;     // T
  int reasoning_vocab = 8;  // R

  VocabLayout layout() const { return {reasoning_vocab, num_options}; }
  int vocab() const { return reasoning_vocab + 1 + num_options; }

  // Flat parameter layout (row-major blocks, in order):
  //   w_in  H x K   feature projection
  //   b_in  H
  //   embed V x H   token embeddings fed into the recurrence
  //   w_rec H x H
  //   b_rec H
  //   w_out H x V   readout
  //   b_out V
  int w_in_off() const { return 0; }
  int b_in_off() const { return hidden * num_options; }
  int embed_off() const { return b_in_off() + hidden; }
  int w_rec_off() const { return embed_off() + vocab() * hidden; }
  int b_rec_off() const { return w_rec_off() + hidden * hidden; }
  int w_out_off() const { return b_rec_off() + hidden; }
  int b_out_off() const { return w_out_off() + hidden * vocab(); }
  int param_count() const { return b_out_off() + vocab(); }

  bool operator==(const PolicyDims&) const = default;
};

inline void validate(const PolicyDims& dims) {
  require(dims.hidden >= 2, "hidden must be >= 2");
  require(dims.num_options >= 2, "num_options must be >= 2");
  require(dims.trace_length >= 1, "trace_length must be >= 1");
  require(dims.reasoning_vocab >= 1, "reasoning_vocab must be >= 1");
}

struct PolicyParams {
  PolicyDims dims;
  std::vector<double> w;

  double* data() { return w.data(); }
  const double* data() const { return w.data(); }
};

/// Deep copy for trust-region snapshots; later updates to the source leave
/// the snapshot untouched.
inline PolicyParams snapshot(const PolicyParams& params) { return params; }

/// Fresh parameters: weights uniform in (-1/sqrt(H), 1/sqrt(H)), biases zero.
inline PolicyParams init_policy(const PolicyDims& dims, std::uint64_t seed) {
  validate(dims);
  PolicyParams p;
  p.dims = dims;
  p.w.assign(dims.param_count(), 0.0);
  auto stream = rng::Stream::keyed({seed, rng::hash_str("policy-init")});
  const double a = 1.0 / std::sqrt(static_cast<double>(dims.hidden));
  auto fill = [&](int off, int count) {
    for (int i = 0; i < count; ++i)
      p.w[off + i] = a * (2.0 * stream.next_double() - 1.0);
  };
  fill(dims.w_in_off(), dims.hidden * dims.num_options);
  fill(dims.embed_off(), dims.vocab() * dims.hidden);
  fill(dims.w_rec_off(), dims.hidden * dims.hidden);
  fill(dims.w_out_off(), dims.hidden * dims.vocab());
  return p;
}

struct Rollout {
  std::uint64_t instance_id = 0;
  std::vector<int> tokens;             // length T + 2
  std::vector<double> per_token_logprob;
  int decision_index = 0;              // always T + 1
  double decision_prob = 0.0;          // exp(per_token_logprob[decision_index])
};

inline int decision_token(const Rollout& r) { return r.tokens.back(); }

inline int decision_option(const Rollout& r, const VocabLayout& layout) {
  return layout.option_index(decision_token(r));
}

inline std::span<const int> trace_tokens(const Rollout& r) {
  return std::span<const int>(r.tokens).first(r.tokens.size() - 2);
}

namespace detail {

/// Checks that tokens form a structurally valid sequence with trace length
/// tokens.size() - 2 under the layout.
inline void check_sequence(const VocabLayout& layout, std::span<const int> tokens) {
  require(tokens.size() >= 2, "sequence needs at least think_end and a decision");
  const int r = static_cast<int>(tokens.size()) - 2;
  for (int p = 0; p < r; ++p)
    require(layout.is_reasoning(tokens[p]),
            "position " + std::to_string(p) + " must hold a reasoning token");
  require(tokens[r] == layout.think_end_id(),
          "position " + std::to_string(r) + " must be think_end");
  require(layout.is_option(tokens[r + 1]), "final token must be an option");
}

struct MaskRange {
  int lo = 0;
  int hi = 0;  // exclusive
};

inline MaskRange mask_for_position(const VocabLayout& layout, int pos,
                                   int trace_len) {
  if (pos < trace_len) return {0, layout.reasoning_count};
  if (pos == trace_len)
    return {layout.think_end_id(), layout.think_end_id() + 1};
  require(pos == trace_len + 1, "position beyond the decision token");
  return {layout.option_begin(), layout.option_begin() + layout.num_options};
}

}  // namespace detail

/// Activations cached by forward_sequence for the matching backward pass.
/// probs holds the masked softmax per position (zero outside the mask).
struct ForwardCache {
  int len = 0;        // sequence length
  int trace_len = 0;  // len - 2
  std::vector<double> h;       // len x H
  std::vector<double> logits;  // len x V
  std::vector<double> probs;   // len x V
  std::vector<double> logp;    // len, log prob of the emitted token
};

namespace detail {

inline void hidden_from_features(const PolicyParams& p,
                                 std::span<const double> x, double* h_out) {
  const auto& d = p.dims;
  const double* w_in = p.data() + d.w_in_off();
  const double* b_in = p.data() + d.b_in_off();
  for (int i = 0; i < d.hidden; ++i) {
    double s = b_in[i];
    for (int k = 0; k < d.num_options; ++k) s += w_in[i * d.num_options + k] * x[k];
    h_out[i] = std::tanh(s);
  }
}

inline void hidden_step(const PolicyParams& p, const double* h_prev,
                        int prev_token, double* h_out) {
  const auto& d = p.dims;
  const double* w_rec = p.data() + d.w_rec_off();
  const double* b_rec = p.data() + d.b_rec_off();
  const double* e = p.data() + d.embed_off() + prev_token * d.hidden;
  for (int i = 0; i < d.hidden; ++i) {
    double s = b_rec[i] + e[i];
    const double* row = w_rec + i * d.hidden;
    for (int j = 0; j < d.hidden; ++j) s += row[j] * h_prev[j];
    h_out[i] = std::tanh(s);
  }
}

inline void logits_from_hidden(const PolicyParams& p, const double* h,
                               double* logits_out) {
  const auto& d = p.dims;
  const int v = d.vocab();
  const double* w_out = p.data() + d.w_out_off();
  const double* b_out = p.data() + d.b_out_off();
  for (int j = 0; j < v; ++j) logits_out[j] = b_out[j];
  for (int i = 0; i < d.hidden; ++i) {
    const double hi = h[i];
    const double* row = w_out + i * v;
    for (int j = 0; j < v; ++j) logits_out[j] += hi * row[j];
  }
}

/// Masked log-softmax over [mask.lo, mask.hi); fills probs (zero outside the
/// mask) and returns the log normalizer-adjusted values via logp of token.
inline void masked_softmax(const double* logits, MaskRange mask, int vocab,
                           double* probs_out, double* logz_out) {
  double m = -std::numeric_limits<double>::infinity();
  for (int j = mask.lo; j < mask.hi; ++j) m = std::max(m, logits[j]);
  double s = 0.0;
  for (int j = 0; j < vocab; ++j) probs_out[j] = 0.0;
  for (int j = mask.lo; j < mask.hi; ++j) {
    probs_out[j] = std::exp(logits[j] - m);
    s += probs_out[j];
  }
  for (int j = mask.lo; j < mask.hi; ++j) probs_out[j] /= s;
  *logz_out = m + std::log(s);
}

}  // namespace detail

/// Teacher-forced forward pass through an entire token sequence.
inline ForwardCache forward_sequence(const PolicyParams& p,
                                     std::span<const double> features,
                                     std::span<const int> tokens) {
  const auto& d = p.dims;
  const auto layout = d.layout();
  detail::check_sequence(layout, tokens);
  require(features.size() == static_cast<size_t>(d.num_options),
          "feature length must equal num_options");
  const int len = static_cast<int>(tokens.size());
  const int v = d.vocab();
  ForwardCache c;
  c.len = len;
  c.trace_len = len - 2;
  c.h.assign(static_cast<size_t>(len) * d.hidden, 0.0);
  c.logits.assign(static_cast<size_t>(len) * v, 0.0);
  c.probs.assign(static_cast<size_t>(len) * v, 0.0);
  c.logp.assign(len, 0.0);
  for (int pos = 0; pos < len; ++pos) {
    double* h = c.h.data() + static_cast<size_t>(pos) * d.hidden;
    if (pos == 0) {
      detail::hidden_from_features(p, features, h);
    } else {
      detail::hidden_step(p, c.h.data() + static_cast<size_t>(pos - 1) * d.hidden,
                          tokens[pos - 1], h);
    }
    double* logits = c.logits.data() + static_cast<size_t>(pos) * v;
    double* probs = c.probs.data() + static_cast<size_t>(pos) * v;
    detail::logits_from_hidden(p, h, logits);
    double logz = 0.0;
    auto mask = detail::mask_for_position(layout, pos, c.trace_len);
    detail::masked_softmax(logits, mask, v, probs, &logz);
    c.logp[pos] = logits[tokens[pos]] - logz;
  }
  return c;
}

/// Accumulates d(objective)/d(params) into grad given d(objective)/d(logits)
/// per position.  dlogits has len x V entries; rows for masked-out ids must
/// be zero (the forward never lets them influence anything downstream).
inline void backward_sequence(const PolicyParams& p,
                              std::span<const double> features,
                              std::span<const int> tokens,
                              const ForwardCache& c,
                              std::span<const double> dlogits,
                              std::span<double> grad) {
  const auto& d = p.dims;
  const int v = d.vocab();
  const int h_dim = d.hidden;
  require(grad.size() == static_cast<size_t>(d.param_count()),
          "gradient buffer has wrong size");
  require(dlogits.size() == static_cast<size_t>(c.len) * v,
          "dlogits has wrong size");
  const double* w_out = p.data() + d.w_out_off();
  const double* w_rec = p.data() + d.w_rec_off();
  double* g_w_in = grad.data() + d.w_in_off();
  double* g_b_in = grad.data() + d.b_in_off();
  double* g_embed = grad.data() + d.embed_off();
  double* g_w_rec = grad.data() + d.w_rec_off();
  double* g_b_rec = grad.data() + d.b_rec_off();
  double* g_w_out = grad.data() + d.w_out_off();
  double* g_b_out = grad.data() + d.b_out_off();

  std::vector<double> dh(h_dim, 0.0), dpre(h_dim, 0.0), dh_prev(h_dim, 0.0);
  for (int pos = c.len - 1; pos >= 0; --pos) {
    const double* h = c.h.data() + static_cast<size_t>(pos) * h_dim;
    const double* dl = dlogits.data() + static_cast<size_t>(pos) * v;
    // Readout: logits = h . w_out + b_out.
    for (int j = 0; j < v; ++j) g_b_out[j] += dl[j];
    for (int i = 0; i < h_dim; ++i) {
      const double* row = w_out + i * v;
      double* grow = g_w_out + i * v;
      double s = 0.0;
      for (int j = 0; j < v; ++j) {
        s += row[j] * dl[j];
        grow[j] += h[i] * dl[j];
      }
      dh[i] += s;
    }
    // Through tanh of the cell that produced h[pos].
    for (int i = 0; i < h_dim; ++i) dpre[i] = dh[i] * (1.0 - h[i] * h[i]);
    if (pos == 0) {
      for (int i = 0; i < h_dim; ++i) {
        g_b_in[i] += dpre[i];
        for (int k = 0; k < d.num_options; ++k)
          g_w_in[i * d.num_options + k] += dpre[i] * features[k];
      }
    } else {
      const double* h_before = c.h.data() + static_cast<size_t>(pos - 1) * h_dim;
      double* g_e = g_embed + static_cast<size_t>(tokens[pos - 1]) * h_dim;
      std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
      for (int i = 0; i < h_dim; ++i) {
        g_b_rec[i] += dpre[i];
        g_e[i] += dpre[i];
        const double* row = w_rec + i * h_dim;
        double* grow = g_w_rec + i * h_dim;
        for (int j = 0; j < h_dim; ++j) {
          grow[j] += dpre[i] * h_before[j];
          dh_prev[j] += row[j] * dpre[i];
        }
      }
      std::swap(dh, dh_prev);
    }
  }
}

namespace detail {

/// One decode step shared by sampled and greedy rollouts.  Returns the
/// chosen token and records the untempered masked log prob.
inline int decode_position(const PolicyParams& p, const double* h, int pos,
                           int trace_len, double temperature,
                           rng::Stream* stream, std::vector<double>& scratch,
                           double* logp_out) {
  const auto layout = p.dims.layout();
  const int v = p.dims.vocab();
  scratch.assign(2 * v, 0.0);
  double* logits = scratch.data();
  double* probs = scratch.data() + v;
  logits_from_hidden(p, h, logits);
  auto mask = mask_for_position(layout, pos, trace_len);
  int token;
  if (stream == nullptr) {
    token = mask.lo;  // greedy: argmax, ties to the lowest id
    for (int j = mask.lo + 1; j < mask.hi; ++j)
      if (logits[j] > logits[token]) token = j;
  } else {
    if (temperature == 1.0) {
      double logz = 0.0;
      masked_softmax(logits, mask, v, probs, &logz);
    } else {
      std::vector<double> tempered(logits, logits + v);
      for (int j = mask.lo; j < mask.hi; ++j) tempered[j] /= temperature;
      double logz = 0.0;
      masked_softmax(tempered.data(), mask, v, probs, &logz);
    }
    std::span<const double> in_mask(probs + mask.lo, mask.hi - mask.lo);
    token = mask.lo + stream->next_categorical(in_mask);
  }
  double logz = 0.0;
  masked_softmax(logits, mask, v, probs, &logz);  // untempered log prob
  *logp_out = logits[token] - logz;
  return token;
}

inline Rollout rollout_impl(const PolicyParams& p,
                            const synthworld::Instance& instance,
                            double temperature, rng::Stream* stream,
                            int trace_len = -1) {
  const auto& d = p.dims;
  require(instance.features.size() == static_cast<size_t>(d.num_options),
          "instance features length must equal num_options");
  const int t = trace_len < 0 ? d.trace_length : trace_len;
  require(t <= d.trace_length, "trace_len exceeds the policy's trace_length");
  Rollout r;
  r.instance_id = instance.id;
  r.tokens.resize(t + 2);
  r.per_token_logprob.resize(t + 2);
  r.decision_index = t + 1;
  std::vector<double> h(d.hidden), h_next(d.hidden), scratch;
  hidden_from_features(p, instance.features, h.data());
  for (int pos = 0; pos <= t + 1; ++pos) {
    if (pos > 0) {
      hidden_step(p, h.data(), r.tokens[pos - 1], h_next.data());
      std::swap(h, h_next);
    }
    r.tokens[pos] = decode_position(p, h.data(), pos, t, temperature, stream,
                                    scratch, &r.per_token_logprob[pos]);
  }
  r.decision_prob = std::exp(r.per_token_logprob[r.decision_index]);
  return r;
}

/// Masked option distribution after an arbitrary-length reasoning trace
/// (internal: the public op pins the trace length to T).
inline std::vector<double> decision_distribution_any(
    const PolicyParams& p, const synthworld::Instance& instance,
    std::span<const int> trace) {
  const auto& d = p.dims;
  const auto layout = d.layout();
  require(instance.features.size() == static_cast<size_t>(d.num_options),
          "instance features length must equal num_options");
  for (int tok : trace)
    require(layout.is_reasoning(tok), "trace must contain reasoning tokens");
  const int r = static_cast<int>(trace.size());
  std::vector<double> h(d.hidden), h_next(d.hidden);
  hidden_from_features(p, instance.features, h.data());
  for (int pos = 1; pos <= r + 1; ++pos) {
    int prev = pos - 1 < r ? trace[pos - 1] : layout.think_end_id();
    hidden_step(p, h.data(), prev, h_next.data());
    std::swap(h, h_next);
  }
  std::vector<double> logits(d.vocab()), probs(d.vocab());
  logits_from_hidden(p, h.data(), logits.data());
  auto mask = mask_for_position(layout, r + 1, r);
  double logz = 0.0;
  masked_softmax(logits.data(), mask, d.vocab(), probs.data(), &logz);
  std::vector<double> out(d.num_options);
  for (int k = 0; k < d.num_options; ++k) out[k] = probs[layout.option_token(k)];
  return out;
}

}  // namespace detail

/// Samples a full rollout.  temperature scales the sampling distribution
/// only; per_token_logprob always records the untempered policy.
inline Rollout sample_rollout(const PolicyParams& p,
                              const synthworld::Instance& instance,
                              double temperature, rng::Stream& stream) {
  require(temperature > 0.0 && std::isfinite(temperature),
          "sampling temperature must be positive");
  return detail::rollout_impl(p, instance, temperature, &stream);
}

/// Greedy (argmax) decode; ties resolve to the lowest token id.
inline Rollout greedy_rollout(const PolicyParams& p,
                              const synthworld::Instance& instance) {
  return detail::rollout_impl(p, instance, 1.0, nullptr);
}

/// Teacher-forced per-token log probs for an existing rollout.  Reproduces
/// sample-time values exactly (same code path, same arithmetic).
inline std::vector<double> score_rollout(const PolicyParams& p,
                                         const synthworld::Instance& instance,
                                         const Rollout& rollout) {
  require(rollout.tokens.size() ==
              static_cast<size_t>(p.dims.trace_length) + 2,
          "rollout length must be trace_length + 2");
  auto cache = forward_sequence(p, instance.features, rollout.tokens);
  return cache.logp;
}

/// Option distribution (indexed by option, not token id) after a length-T
/// reasoning trace followed by think_end.
inline std::vector<double> decision_distribution(
    const PolicyParams& p, const synthworld::Instance& instance,
    std::span<const int> trace) {
  require(trace.size() == static_cast<size_t>(p.dims.trace_length),
          "trace length must equal trace_length");
  return detail::decision_distribution_any(p, instance, trace);
}

/// Unmasked next-token distribution over the whole vocabulary given a
/// structurally valid prefix (possibly empty).
inline std::vector<double> forward_next_token_dist(
    const PolicyParams& p, const synthworld::Instance& instance,
    std::span<const int> prefix) {
  const auto& d = p.dims;
  const auto layout = d.layout();
  require(instance.features.size() == static_cast<size_t>(d.num_options),
          "instance features length must equal num_options");
  require(prefix.size() <= static_cast<size_t>(d.trace_length) + 1,
          "prefix extends past the decision position");
  for (size_t i = 0; i < prefix.size(); ++i) {
    if (static_cast<int>(i) < d.trace_length) {
      require(layout.is_reasoning(prefix[i]),
              "prefix position " + std::to_string(i) + " must be reasoning");
    } else {
      require(prefix[i] == layout.think_end_id(),
              "prefix position " + std::to_string(i) + " must be think_end");
    }
  }
  std::vector<double> h(d.hidden), h_next(d.hidden);
  detail::hidden_from_features(p, instance.features, h.data());
  for (size_t i = 1; i <= prefix.size(); ++i) {
    detail::hidden_step(p, h.data(), prefix[i - 1], h_next.data());
    std::swap(h, h_next);
  }
  std::vector<double> logits(d.vocab());
  detail::logits_from_hidden(p, h.data(), logits.data());
  return softmax(logits);
}

// ---- gradient checking ----

struct LossEval {
  double value = 0.0;
  std::vector<double> grad;
};
using LossFn = std::function<LossEval(const PolicyParams&)>;

struct GradCheckOptions {
  int min_coords = 200;
  double step = 1e-5;
  std::uint64_t seed = 2026;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool pass = false;
  int coords_checked = 0;
};

/// Central finite differences against the analytic gradient on a random
/// subset of coordinates (all of them when the model is small enough).
inline GradCheckReport gradient_check(const PolicyParams& params,
                                      const LossFn& loss_fn, double tolerance,
                                      GradCheckOptions opts = {}) {
  LossEval at = loss_fn(params);
  if (!std::isfinite(at.value) || !all_finite(at.grad))
    throw DiagnosticError("gradient_check: non-finite loss or gradient");
  require(at.grad.size() == params.w.size(),
          "gradient_check: gradient size mismatch");
  const int n = static_cast<int>(params.w.size());
  std::vector<int> coords(n);
  for (int i = 0; i < n; ++i) coords[i] = i;
  int count = n;
  if (n > opts.min_coords) {
    auto stream = rng::Stream::keyed({opts.seed, rng::hash_str("gradcheck")});
    for (int i = 0; i < opts.min_coords; ++i) {
      int j = i + stream.next_below(n - i);
      std::swap(coords[i], coords[j]);
    }
    count = opts.min_coords;
  }
  GradCheckReport report;
  report.coords_checked = count;
  PolicyParams probe = params;
  for (int i = 0; i < count; ++i) {
    const int c = coords[i];
    const double orig = params.w[c];
    probe.w[c] = orig + opts.step;
    double up = loss_fn(probe).value;
    probe.w[c] = orig - opts.step;
    double down = loss_fn(probe).value;
    probe.w[c] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw DiagnosticError("gradient_check: non-finite probe loss");
    const double fd = (up - down) / (2.0 * opts.step);
    const double an = at.grad[c];
    const double rel =
        std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  report.pass = report.max_rel_error < tolerance;
  return report;
}

// ---- checkpoint serialization ----

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

/// Writes raw doubles to bin_path and a JSON sidecar (same path with a .json
/// extension) describing the shape.
inline void save_params(const PolicyParams& params,
                        const std::filesystem::path& bin_path) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  require(bin.good(), "cannot open " + bin_path.string() + " for writing");
  bin.write(reinterpret_cast<const char*>(params.w.data()),
            static_cast<std::streamsize>(params.w.size() * sizeof(double)));
  require(bin.good(), "short write to " + bin_path.string());
  bin.close();

  nlohmann::ordered_json meta;
  meta["format_version"] = kFormatVersion;
  meta["H"] = params.dims.hidden;
  meta["V"] = params.dims.vocab();
  meta["K"] = params.dims.num_options;
  meta["T"] = params.dims.trace_length;
  std::filesystem::path json_path = bin_path;
  json_path.replace_extension(".json");
  std::ofstream side(json_path, std::ios::trunc);
  require(side.good(), "cannot open " + json_path.string() + " for writing");
  side << meta.dump(2) << "\n";
}

inline PolicyParams load_params(const std::filesystem::path& bin_path) {
  std::filesystem::path json_path = bin_path;
  json_path.replace_extension(".json");
  std::ifstream side(json_path);
  if (!side.good())
    throw DiagnosticError("missing checkpoint sidecar " + json_path.string());
  nlohmann::json meta;
  try {
    side >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw DiagnosticError("bad checkpoint sidecar " + json_path.string() +
                          ": " + e.what());
  }
  int version = meta.value("format_version", -1);
  require(version == kFormatVersion,
          "unsupported checkpoint format_version " + std::to_string(version));
  PolicyDims dims;
  dims.hidden = meta.at("H").get<int>();
  dims.num_options = meta.at("K").get<int>();
  dims.trace_length = meta.at("T").get<int>();
  const int v = meta.at("V").get<int>();
  dims.reasoning_vocab = v - 1 - dims.num_options;
  validate(dims);
  require(dims.vocab() == v, "checkpoint V inconsistent with K");

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin.good())
    throw DiagnosticError("missing checkpoint " + bin_path.string());
  PolicyParams params;
  params.dims = dims;
  params.w.assign(dims.param_count(), 0.0);
  bin.read(reinterpret_cast<char*>(params.w.data()),
           static_cast<std::streamsize>(params.w.size() * sizeof(double)));
  if (bin.gcount() !=
      static_cast<std::streamsize>(params.w.size() * sizeof(double)))
    throw DiagnosticError("checkpoint " + bin_path.string() + " is truncated");
  bin.get();
  if (!bin.eof())
    throw DiagnosticError("checkpoint " + bin_path.string() +
                          " has trailing bytes beyond the declared shape");
  return params;
}

}  // namespace calibrl::policy
