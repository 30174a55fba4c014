#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "calibrl/policy.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"

using namespace calibrl;
using namespace calibrl::policy;

namespace {

synthworld::TaskSpec small_spec() {
  return synthworld::make_task_spec({{"seed_namespace", std::int64_t{11}}});
}

PolicyDims small_dims() {
  PolicyDims d;
  d.hidden = 8;
  d.num_options = 4;
  d.trace_length = 4;
  d.reasoning_vocab = 8;
  return d;
}

// Loss used to exercise backward_sequence: a fixed linear combination of
// per-token log probs plus a cross-entropy pulling the decision toward a
// target distribution.  Covers every gradient path the trainers use.
LossEval composite_loss(const PolicyParams& p, const synthworld::Instance& inst,
                        const std::vector<int>& tokens,
                        const std::vector<double>& coeffs,
                        const std::vector<double>& target) {
  const int v = p.dims.vocab();
  const auto layout = p.dims.layout();
  auto cache = forward_sequence(p, inst.features, tokens);
  LossEval out;
  out.grad.assign(p.dims.param_count(), 0.0);
  std::vector<double> dlogits(static_cast<size_t>(cache.len) * v, 0.0);
  for (int pos = 0; pos < cache.len; ++pos) {
    out.value += coeffs[pos] * cache.logp[pos];
    const double* probs = cache.probs.data() + static_cast<size_t>(pos) * v;
    double* dl = dlogits.data() + static_cast<size_t>(pos) * v;
    for (int j = 0; j < v; ++j)
      dl[j] = coeffs[pos] * ((j == tokens[pos] ? 1.0 : 0.0) - probs[j]);
  }
  if (!target.empty()) {
    const int d = cache.len - 1;
    const double* probs = cache.probs.data() + static_cast<size_t>(d) * v;
    double* dl = dlogits.data() + static_cast<size_t>(d) * v;
    for (int k = 0; k < p.dims.num_options; ++k) {
      int tok = layout.option_token(k);
      out.value -= target[k] * std::log(probs[tok]);
      dl[tok] += probs[tok] - target[k];
    }
  }
  backward_sequence(p, inst.features, tokens, cache, dlogits, out.grad);
  return out;
}

}  // namespace

TEST_CASE("vocab layout partitions the id space") {
  VocabLayout layout{8, 4};
  REQUIRE(layout.vocab_size() == 13);
  int reasoning = 0, options = 0, think = 0;
  for (int id = 0; id < layout.vocab_size(); ++id) {
    int hits = int(layout.is_reasoning(id)) + int(layout.is_option(id)) +
               int(id == layout.think_end_id());
    REQUIRE(hits == 1);  // disjoint and exhaustive
    reasoning += layout.is_reasoning(id);
    options += layout.is_option(id);
    think += id == layout.think_end_id();
  }
  REQUIRE(reasoning == 8);
  REQUIRE(think == 1);
  REQUIRE(options == 4);
  REQUIRE(layout.option_index(layout.option_token(2)) == 2);
}

TEST_CASE("init_policy is deterministic and validates dims") {
  auto d = small_dims();
  auto a = init_policy(d, 7);
  auto b = init_policy(d, 7);
  REQUIRE(a.w == b.w);
  REQUIRE(a.w.size() == static_cast<size_t>(d.param_count()));
  auto c = init_policy(d, 8);
  REQUIRE(a.w != c.w);
  const double bound = 1.0 / std::sqrt(double(d.hidden));
  for (double w : a.w) REQUIRE(std::abs(w) <= bound);

  PolicyDims bad = d;
  bad.hidden = 1;
  REQUIRE_THROWS_AS(init_policy(bad, 0), ValidationError);
}

TEST_CASE("flat layout offsets tile the parameter vector exactly") {
  auto d = small_dims();
  const int v = d.vocab();
  REQUIRE(d.b_in_off() == d.hidden * d.num_options);
  REQUIRE(d.embed_off() == d.b_in_off() + d.hidden);
  REQUIRE(d.w_rec_off() == d.embed_off() + v * d.hidden);
  REQUIRE(d.b_rec_off() == d.w_rec_off() + d.hidden * d.hidden);
  REQUIRE(d.w_out_off() == d.b_rec_off() + d.hidden);
  REQUIRE(d.b_out_off() == d.w_out_off() + d.hidden * v);
  REQUIRE(d.param_count() == d.b_out_off() + v);
}

TEST_CASE("sampled rollouts have the forced structure") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 3);
  auto instances = synthworld::sample_instances(spec, 20);
  const auto layout = params.dims.layout();
  for (const auto& inst : instances) {
    auto stream = rng::Stream::keyed({1, inst.id});
    auto r = sample_rollout(params, inst, 1.0, stream);
    REQUIRE(r.instance_id == inst.id);
    REQUIRE(r.tokens.size() == 6);
    REQUIRE(r.decision_index == 5);
    for (int p = 0; p < 4; ++p) REQUIRE(layout.is_reasoning(r.tokens[p]));
    REQUIRE(r.tokens[4] == layout.think_end_id());
    REQUIRE(layout.is_option(r.tokens[5]));
    // Forced think_end carries probability exactly 1.
    REQUIRE(r.per_token_logprob[4] == 0.0);
    REQUIRE(r.decision_prob ==
            Catch::Approx(std::exp(r.per_token_logprob[5])).margin(1e-12));
    REQUIRE(decision_option(r, layout) >= 0);
    REQUIRE(decision_option(r, layout) < 4);
  }
}

TEST_CASE("sampling with the same stream key replays exactly") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 3);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto s1 = rng::Stream::keyed({9, 1});
  auto s2 = rng::Stream::keyed({9, 1});
  auto a = sample_rollout(params, inst, 1.0, s1);
  auto b = sample_rollout(params, inst, 1.0, s2);
  REQUIRE(a.tokens == b.tokens);
  REQUIRE(a.per_token_logprob == b.per_token_logprob);
}

TEST_CASE("temperature reshapes sampling but not recorded log probs") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 5);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  // At tiny temperature sampling becomes argmax; the recorded log prob must
  // still be the untempered policy's value.
  auto cold = rng::Stream::keyed({2});
  auto r = sample_rollout(params, inst, 1e-6, cold);
  auto g = greedy_rollout(params, inst);
  REQUIRE(r.tokens == g.tokens);
  auto scored = score_rollout(params, inst, r);
  for (size_t p = 0; p < r.tokens.size(); ++p)
    REQUIRE(r.per_token_logprob[p] == scored[p]);
  REQUIRE_THROWS_AS(sample_rollout(params, inst, 0.0, cold), ValidationError);
}

TEST_CASE("zero parameters give uniform decisions and lowest-id greedy") {
  auto spec = small_spec();
  PolicyParams zero;
  zero.dims = small_dims();
  zero.w.assign(zero.dims.param_count(), 0.0);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto g = greedy_rollout(zero, inst);
  for (int p = 0; p < 4; ++p) REQUIRE(g.tokens[p] == 0);  // ties -> lowest id
  REQUIRE(g.tokens[5] == zero.dims.layout().option_token(0));
  REQUIRE(g.decision_prob == Catch::Approx(0.25).margin(1e-15));
}

TEST_CASE("score_rollout reproduces sampling log probs bit for bit") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 13);
  auto instances = synthworld::sample_instances(spec, 50);
  for (const auto& inst : instances) {
    auto stream = rng::Stream::keyed({3, inst.id});
    auto r = sample_rollout(params, inst, 1.3, stream);
    auto scored = score_rollout(params, inst, r);
    REQUIRE(scored.size() == r.per_token_logprob.size());
    for (size_t p = 0; p < scored.size(); ++p)
      REQUIRE(std::abs(scored[p] - r.per_token_logprob[p]) <= 1e-12);
  }
}

TEST_CASE("score_rollout validates structure") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 13);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({4});
  auto r = sample_rollout(params, inst, 1.0, stream);

  Rollout short_r = r;
  short_r.tokens.pop_back();
  REQUIRE_THROWS_AS(score_rollout(params, inst, short_r), ValidationError);

  Rollout swapped = r;
  std::swap(swapped.tokens[3], swapped.tokens[4]);  // think_end out of place
  REQUIRE_THROWS_AS(score_rollout(params, inst, swapped), ValidationError);

  Rollout bad_tail = r;
  bad_tail.tokens.back() = 0;  // reasoning id where an option belongs
  REQUIRE_THROWS_AS(score_rollout(params, inst, bad_tail), ValidationError);
}

TEST_CASE("per-position masked distributions are proper") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 21);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({5});
  auto r = sample_rollout(params, inst, 1.0, stream);
  auto cache = forward_sequence(params, inst.features, r.tokens);
  const int v = params.dims.vocab();
  const auto layout = params.dims.layout();
  for (int pos = 0; pos < cache.len; ++pos) {
    const double* probs = cache.probs.data() + static_cast<size_t>(pos) * v;
    double sum = 0.0;
    for (int j = 0; j < v; ++j) {
      bool allowed = pos < 4   ? layout.is_reasoning(j)
                     : pos == 4 ? j == layout.think_end_id()
                                : layout.is_option(j);
      if (!allowed) REQUIRE(probs[j] == 0.0);
      sum += probs[j];
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("decision_distribution agrees with teacher forcing") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 31);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({6});
  auto r = sample_rollout(params, inst, 1.0, stream);
  std::vector<int> trace(r.tokens.begin(), r.tokens.begin() + 4);
  auto dist = decision_distribution(params, inst, trace);
  REQUIRE(dist.size() == 4);
  double sum = 0.0;
  for (double p : dist) {
    REQUIRE(p > 0.0);
    sum += p;
  }
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
  const auto layout = params.dims.layout();
  int k = decision_option(r, layout);
  REQUIRE(dist[k] == Catch::Approx(r.decision_prob).margin(1e-12));

  std::vector<int> short_trace(trace.begin(), trace.begin() + 2);
  REQUIRE_THROWS_AS(decision_distribution(params, inst, short_trace),
                    ValidationError);
  std::vector<int> bad = trace;
  bad[0] = layout.think_end_id();
  REQUIRE_THROWS_AS(decision_distribution(params, inst, bad), ValidationError);
}

TEST_CASE("unmasked readout is consistent with the masked policy") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 41);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({7});
  auto r = sample_rollout(params, inst, 1.0, stream);
  const auto layout = params.dims.layout();
  const int v = params.dims.vocab();
  auto cache = forward_sequence(params, inst.features, r.tokens);
  for (size_t plen : {size_t{0}, size_t{2}, size_t{4}, size_t{5}}) {
    std::span<const int> prefix(r.tokens.data(), plen);
    auto full = forward_next_token_dist(params, inst, prefix);
    REQUIRE(full.size() == static_cast<size_t>(v));
    double sum = 0.0;
    for (double p : full) {
      REQUIRE(p > 0.0);
      sum += p;
    }
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    // Restricting and renormalizing the unmasked distribution must recover
    // the masked one: both are softmaxes of the same logits.
    const double* masked = cache.probs.data() + plen * v;
    int lo = plen < 4 ? 0 : (plen == 4 ? layout.think_end_id() : layout.option_begin());
    int hi = plen < 4 ? 8 : (plen == 4 ? layout.think_end_id() + 1 : v);
    double mass = 0.0;
    for (int j = lo; j < hi; ++j) mass += full[j];
    for (int j = lo; j < hi; ++j)
      REQUIRE(full[j] / mass == Catch::Approx(masked[j]).margin(1e-12));
  }
  std::vector<int> too_long(r.tokens.begin(), r.tokens.end());
  REQUIRE_THROWS_AS(
      forward_next_token_dist(params, inst, std::span<const int>(too_long)),
      ValidationError);
}

TEST_CASE("analytic gradients match finite differences") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 77);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({8});
  auto r = sample_rollout(params, inst, 1.0, stream);
  std::vector<double> coeffs = {0.7, -1.3, 0.4, 2.1, 0.9, -0.6};
  std::vector<double> target = {0.1, 0.2, 0.3, 0.4};

  SECTION("weighted log prob plus decision cross entropy") {
    auto fn = [&](const PolicyParams& p) {
      return composite_loss(p, inst, r.tokens, coeffs, target);
    };
    auto report = gradient_check(params, fn, 1e-4);
    REQUIRE(report.coords_checked == 200);
    REQUIRE(report.pass);
    REQUIRE(report.max_rel_error < 1e-4);
  }

  SECTION("pure sequence log likelihood") {
    std::vector<double> ones(6, 1.0);
    auto fn = [&](const PolicyParams& p) {
      return composite_loss(p, inst, r.tokens, ones, {});
    };
    REQUIRE(gradient_check(params, fn, 1e-4).pass);
  }

  SECTION("uniform-target cross entropy only") {
    std::vector<double> zeros(6, 0.0);
    std::vector<double> uniform(4, 0.25);
    auto fn = [&](const PolicyParams& p) {
      return composite_loss(p, inst, r.tokens, zeros, uniform);
    };
    REQUIRE(gradient_check(params, fn, 1e-4).pass);
  }
}

TEST_CASE("forced think_end position contributes zero gradient") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 99);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({10});
  auto r = sample_rollout(params, inst, 1.0, stream);
  // Loss = log prob of the forced token alone; it is identically zero, so
  // every parameter gradient must be exactly zero too.
  std::vector<double> coeffs(6, 0.0);
  coeffs[4] = 1.0;
  auto eval = composite_loss(params, inst, r.tokens, coeffs, {});
  REQUIRE(eval.value == 0.0);
  for (double g : eval.grad) REQUIRE(g == 0.0);
}

TEST_CASE("gradient_check flags a corrupted gradient") {
  auto spec = small_spec();
  auto params = init_policy(small_dims(), 55);
  auto inst = synthworld::sample_instances(spec, 1)[0];
  auto stream = rng::Stream::keyed({11});
  auto r = sample_rollout(params, inst, 1.0, stream);
  std::vector<double> ones(6, 1.0);
  auto fn = [&](const PolicyParams& p) {
    auto eval = composite_loss(p, inst, r.tokens, ones, {});
    for (double& g : eval.grad) g += 0.05;  // deliberate corruption
    return eval;
  };
  auto report = gradient_check(params, fn, 1e-4);
  REQUIRE_FALSE(report.pass);
}

TEST_CASE("snapshots are isolated from later mutation") {
  auto params = init_policy(small_dims(), 61);
  auto snap = snapshot(params);
  auto before = snap.w;
  for (double& w : params.w) w += 1.0;
  REQUIRE(snap.w == before);
  REQUIRE(params.w != snap.w);
}

TEST_CASE("checkpoints round trip bit for bit") {
  namespace fs = std::filesystem;
  auto params = init_policy(small_dims(), 71);
  fs::path dir = fs::temp_directory_path() / "calibrl_ckpt_test";
  fs::create_directories(dir);
  fs::path bin = dir / "params.bin";
  save_params(params, bin);
  REQUIRE(fs::exists(dir / "params.json"));
  auto loaded = load_params(bin);
  REQUIRE(loaded.dims == params.dims);
  REQUIRE(loaded.w == params.w);

  SECTION("truncated payload is rejected") {
    fs::resize_file(bin, 16);
    REQUIRE_THROWS_AS(load_params(bin), DiagnosticError);
  }
  SECTION("missing sidecar is rejected") {
    fs::remove(dir / "params.json");
    REQUIRE_THROWS_AS(load_params(bin), DiagnosticError);
  }
  fs::remove_all(dir);
}
