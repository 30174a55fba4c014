#pragma once

// Post-hoc confidence recalibration: Platt scaling and isotonic regression.
// Both operate on the scalar confidence of the predicted label against a
// binary correct/incorrect target. They rescale confidence only; predicted
// labels are never changed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "calibrl/calibration.hpp"
#include "calibrl/common.hpp"

#include <json.hpp>

namespace calibrl::posthoc {

struct PlattParams {
  double a = 1.0;  // slope on the logit of raw confidence
  double b = 0.0;  // intercept
  double logit_clamp = 16.0;

  bool is_identity() const { return a == 1.0 && b == 0.0; }
};

namespace detail {

inline double clamped_logit(double p, double bound) {
  // p in [0,1]; the endpoints map to +-bound instead of +-infinity.
  if (p <= 0.0) return -bound;
  if (p >= 1.0) return bound;
  return std::clamp(std::log(p / (1.0 - p)), -bound, bound);
}

inline double sigmoid(double t) {
  if (t >= 0.0) {
    return 1.0 / (1.0 + std::exp(-t));
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// Mean log-loss of sigmoid(a*z + b) against binary targets.
inline double platt_loss(std::span<const double> z, std::span<const int> y,
                         double a, double b) {
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double t = a * z[i] + b;
    // log(1 + e^-|t|) is stable for both branches.
    const double soft = std::log1p(std::exp(-std::abs(t)));
    total += y[i] == 1 ? (t >= 0.0 ? soft : soft - t)
                       : (t >= 0.0 ? soft + t : soft);
  }
  return total / static_cast<double>(z.size());
}

}  // namespace detail

// Fits p' = sigmoid(a*logit(p) + b) by minimizing mean log-loss with a damped
// Newton iteration started at the identity (1, 0). Deterministic: fixed
// iteration cap, fixed halving schedule, no randomness.
inline PlattParams fit_platt(std::span<const calibration::PredictionRecord> records,
                             double logit_clamp = 16.0) {
  require(!records.empty(), "fit_platt: empty calibration split");
  require(logit_clamp > 0.0, "fit_platt: logit clamp must be positive");

  std::vector<double> z(records.size());
  std::vector<int> y(records.size());
  std::size_t n_correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    calibration::validate(records[i]);
    z[i] = detail::clamped_logit(records[i].confidence, logit_clamp);
    y[i] = records[i].correct ? 1 : 0;
    n_correct += static_cast<std::size_t>(y[i]);
  }
  if (n_correct == records.size()) {
    throw ValidationError("fit_platt: calibration split has no incorrect records");
  }
  if (n_correct == 0) {
    throw ValidationError("fit_platt: calibration split has no correct records");
  }

  const double n = static_cast<double>(records.size());
  double a = 1.0;
  double b = 0.0;
  double loss = detail::platt_loss(z, y, a, b);

  constexpr int kMaxIters = 100;
  constexpr double kTol = 1e-10;
  for (int iter = 0; iter < kMaxIters; ++iter) {
    // Gradient and Hessian of the mean log-loss in (a, b).
    double ga = 0.0, gb = 0.0;
    double haa = 0.0, hab = 0.0, hbb = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double p = detail::sigmoid(a * z[i] + b);
      const double r = p - static_cast<double>(y[i]);
      const double w = p * (1.0 - p);
      ga += r * z[i];
      gb += r;
      haa += w * z[i] * z[i];
      hab += w * z[i];
      hbb += w;
    }
    ga /= n;
    gb /= n;
    haa /= n;
    hab /= n;
    hbb /= n;

    // Tiny ridge keeps the solve well-posed when all logits coincide.
    haa += 1e-12;
    hbb += 1e-12;
    const double det = haa * hbb - hab * hab;
    require(std::isfinite(det) && det > 0.0, "fit_platt: singular Hessian");
    const double da = -(hbb * ga - hab * gb) / det;
    const double db = -(haa * gb - hab * ga) / det;

    // Damping: halve the step until the loss does not increase.
    double step = 1.0;
    double next_loss = loss;
    double na = a, nb = b;
    for (int h = 0; h < 60; ++h) {
      na = a + step * da;
      nb = b + step * db;
      next_loss = detail::platt_loss(z, y, na, nb);
      if (next_loss <= loss) break;
      step *= 0.5;
    }
    const double moved = std::max(std::abs(na - a), std::abs(nb - b));
    a = na;
    b = nb;
    loss = next_loss;
    if (moved < kTol) break;
  }

  require(std::isfinite(a) && std::isfinite(b), "fit_platt: fit diverged");
  PlattParams out;
  out.a = a;
  out.b = b;
  out.logit_clamp = logit_clamp;
  return out;
}

inline double apply_platt(const PlattParams& params, double p) {
  require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
          "apply_platt: confidence must lie in [0, 1]");
  const double z = detail::clamped_logit(p, params.logit_clamp);
  return detail::sigmoid(params.a * z + params.b);
}

// Piecewise-constant non-decreasing map from raw to recalibrated confidence.
struct IsotonicMap {
  std::vector<double> breakpoints;  // strictly ascending confidences
  std::vector<double> fitted;       // non-decreasing values in [0, 1]

  void validate() const {
    require(!breakpoints.empty(), "IsotonicMap: empty map");
    require(breakpoints.size() == fitted.size(),
            "IsotonicMap: breakpoints/fitted size mismatch");
    for (std::size_t i = 0; i < breakpoints.size(); ++i) {
      require(std::isfinite(breakpoints[i]), "IsotonicMap: non-finite breakpoint");
      require(fitted[i] >= 0.0 && fitted[i] <= 1.0,
              "IsotonicMap: fitted value outside [0, 1]");
      if (i > 0) {
        require(breakpoints[i] > breakpoints[i - 1],
                "IsotonicMap: breakpoints must be strictly ascending");
        require(fitted[i] >= fitted[i - 1],
                "IsotonicMap: fitted values must be non-decreasing");
      }
    }
  }
};

// Pool-adjacent-violators over (confidence, correctness) pairs. Pairs are
// sorted by confidence (ties broken by record id); records sharing a
// confidence are averaged into one weighted point before pooling, so the
// result is the least-squares monotone fit with one value per distinct
// confidence.
inline IsotonicMap fit_isotonic(std::span<const calibration::PredictionRecord> records) {
  require(!records.empty(), "fit_isotonic: empty calibration split");

  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t lhs, std::size_t rhs) {
    if (records[lhs].confidence != records[rhs].confidence) {
      return records[lhs].confidence < records[rhs].confidence;
    }
    return records[lhs].instance_id < records[rhs].instance_id;
  });

  // Collapse tied confidences into weighted points.
  std::vector<double> xs;
  std::vector<double> targets;
  std::vector<double> weights;
  for (std::size_t i : order) {
    calibration::validate(records[i]);
    const double x = records[i].confidence;
    const double t = records[i].correct ? 1.0 : 0.0;
    if (!xs.empty() && xs.back() == x) {
      targets.back() += (t - targets.back()) / (weights.back() + 1.0);
      weights.back() += 1.0;
    } else {
      xs.push_back(x);
      targets.push_back(t);
      weights.push_back(1.0);
    }
  }

  // PAV: merge each new point backwards while its block mean violates
  // monotonicity against the previous block.
  std::vector<double> mean;
  std::vector<double> weight;
  std::vector<std::size_t> count;  // number of distinct confidences per block
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mean.push_back(targets[i]);
    weight.push_back(weights[i]);
    count.push_back(1);
    while (mean.size() > 1 && mean[mean.size() - 2] > mean.back()) {
      const double w = weight[weight.size() - 2] + weight.back();
      const double m = (mean[mean.size() - 2] * weight[weight.size() - 2] +
                        mean.back() * weight.back()) /
                       w;
      mean[mean.size() - 2] = m;
      weight[weight.size() - 2] = w;
      count[count.size() - 2] += count.back();
      mean.pop_back();
      weight.pop_back();
      count.pop_back();
    }
  }

  IsotonicMap map;
  map.breakpoints = std::move(xs);
  map.fitted.reserve(map.breakpoints.size());
  for (std::size_t blk = 0; blk < mean.size(); ++blk) {
    for (std::size_t j = 0; j < count[blk]; ++j) map.fitted.push_back(mean[blk]);
  }
  map.validate();
  return map;
}

// Right-continuous step interpolation, clamped to the end values.
inline double apply_isotonic(const IsotonicMap& map, double p) {
  map.validate();
  require(std::isfinite(p) && p >= 0.0 && p <= 1.0,
          "apply_isotonic: confidence must lie in [0, 1]");
  const auto it =
      std::upper_bound(map.breakpoints.begin(), map.breakpoints.end(), p);
  if (it == map.breakpoints.begin()) return map.fitted.front();
  const auto idx = static_cast<std::size_t>(it - map.breakpoints.begin()) - 1;
  return map.fitted[idx];
}

inline nlohmann::json to_json(const PlattParams& params) {
  return nlohmann::json{{"type", "platt"},
                        {"params",
                         {{"a", params.a},
                          {"b", params.b},
                          {"logit_clamp", params.logit_clamp}}}};
}

inline nlohmann::json to_json(const IsotonicMap& map) {
  return nlohmann::json{
      {"type", "isotonic"},
      {"params", {{"breakpoints", map.breakpoints}, {"fitted", map.fitted}}}};
}

inline PlattParams platt_from_json(const nlohmann::json& doc) {
  require(doc.is_object() && doc.value("type", "") == "platt",
          "platt_from_json: expected a platt calibrator document");
  require(doc.contains("params") && doc["params"].is_object(),
          "platt_from_json: missing params object");
  const auto& p = doc["params"];
  PlattParams out;
  out.a = p.at("a").get<double>();
  out.b = p.at("b").get<double>();
  out.logit_clamp = p.value("logit_clamp", 16.0);
  require(std::isfinite(out.a) && std::isfinite(out.b) && out.logit_clamp > 0.0,
          "platt_from_json: non-finite parameters");
  return out;
}

inline IsotonicMap isotonic_from_json(const nlohmann::json& doc) {
  require(doc.is_object() && doc.value("type", "") == "isotonic",
          "isotonic_from_json: expected an isotonic calibrator document");
  require(doc.contains("params") && doc["params"].is_object(),
          "isotonic_from_json: missing params object");
  const auto& p = doc["params"];
  IsotonicMap map;
  map.breakpoints = p.at("breakpoints").get<std::vector<double>>();
  map.fitted = p.at("fitted").get<std::vector<double>>();
  map.validate();
  return map;
}

}  // namespace calibrl::posthoc
