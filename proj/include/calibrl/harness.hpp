#pragma once

// Experiment harness: run configuration (TOML + environment overrides), the
// end-to-end pipeline (warm-up, three fine-tuning methods, evaluation,
// post-hoc calibration, diagnostics), JSONL record persistence, reliability
// SVG rendering, and cross-run CSV tabulation.
//
// Determinism contract: every artifact except run_record.json (which carries
// the wall clock) and MANIFEST.json is a pure function of the resolved config,
// so re-running with the same config and seed reproduces the bytes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "calibrl/calibration.hpp"
#include "calibrl/common.hpp"
#include "calibrl/diagnostics.hpp"
#include "calibrl/policy.hpp"
#include "calibrl/posthoc.hpp"
#include "calibrl/rng.hpp"
#include "calibrl/synthworld.hpp"
#include "calibrl/toml.hpp"
#include "calibrl/trainers.hpp"

namespace calibrl::harness {

constexpr int kRunFormatVersion = 1;

// Instance-id offsets keep the generated pools disjoint streams.
constexpr std::uint64_t kTrainOffset = 0;
constexpr std::uint64_t kEvalOffset = 100000;
constexpr std::uint64_t kValOffset = 200000;
constexpr std::uint64_t kOodOffset = 300000;
constexpr std::uint64_t kPretrainOffset = 1000000;

struct PoolSizes {
  int pretrain = 500;  // warm-up corpus
  int train = 500;     // fine-tuning corpus
  int val = 512;       // checkpoint-selection slice
  int eval = 2000;     // held-out report set (also the OOD set size)
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/desk";
  int hidden_dim = 24;
  synthworld::ConfigMap task;       // forwarded to make_task_spec
  synthworld::ConfigMap ood_shift;  // forwarded to shift_spec
  PoolSizes pools;
  trainers::GRPOConfig base;  // warm-up: SFT on self-generated traces
  trainers::GRPOConfig sft;   // empty-trace SFT
  trainers::GRPOConfig rl;    // shared by grpo (lambda forced 0) and calib_grpo
  double base_margin = 0.1;   // warm-up must beat chance by this much
  int eval_bins = 10;
  double overconfidence_threshold = 0.99;
  bool select_on_test = false;  // opt-in: select checkpoints on the eval pool
  bool posthoc_enabled = true;
  double calibration_fraction = 0.3;  // prefix of in-domain records fit on
  bool diagnostics_enabled = true;
  int diag_samples = 64;
  double diag_temperature = 1.0;
  double confidence_floor = 0.9;
};

/// Copies the fields every trainer config must share.
inline void sync_trainer_fields(RunConfig& cfg) {
  for (trainers::GRPOConfig* t : {&cfg.base, &cfg.sft, &cfg.rl}) {
    t->hidden_dim = cfg.hidden_dim;
    t->eval_bins = cfg.eval_bins;
    t->overconfidence_threshold = cfg.overconfidence_threshold;
  }
  cfg.base.gold_trace = trainers::GoldTracePolicy::ReferenceParams;
  cfg.sft.gold_trace = trainers::GoldTracePolicy::EmptyTrace;
  cfg.rl.gold_trace = trainers::GoldTracePolicy::EmptyTrace;
}

inline RunConfig default_config() {
  RunConfig cfg;
  cfg.task = {
      {"num_options", std::int64_t{4}},     {"label_temperature", 0.375},
      {"obs_noise", 0.0},                   {"latent_scale", 1.0},
      {"trace_length", std::int64_t{4}},    {"reasoning_vocab", std::int64_t{8}},
      {"seed_namespace", std::int64_t{7}},
  };
  cfg.ood_shift = {{"latent_mean_delta", 0.75}};
  cfg.base.epochs = 1;
  cfg.base.inner_updates = 16;
  cfg.base.learning_rate = 3e-3;
  cfg.sft.epochs = 20;
  cfg.sft.inner_updates = 16;
  cfg.sft.learning_rate = 1e-3;
  cfg.rl.epochs = 60;
  cfg.rl.inner_updates = 8;
  cfg.rl.group_size = 8;
  cfg.rl.learning_rate = 1e-3;
  cfg.rl.sampling_temperature = 1.0;
  cfg.rl.clip_epsilon = 0.2;
  cfg.rl.lambda = 0.1;  // calibration CE weight used by calib_grpo only
  sync_trainer_fields(cfg);
  return cfg;
}

inline void validate(const RunConfig& cfg) {
  require(!cfg.output_dir.empty(), "output_dir must be non-empty");
  require(cfg.pools.pretrain >= 1 && cfg.pools.train >= 1 &&
              cfg.pools.val >= 1 && cfg.pools.eval >= 1,
          "pool sizes must be >= 1");
  require(cfg.base_margin >= 0.0, "base margin must be >= 0");
  require(cfg.eval_bins >= 1, "eval bins must be >= 1");
  require(cfg.overconfidence_threshold > 0.0 &&
              cfg.overconfidence_threshold < 1.0,
          "overconfidence_threshold must lie in (0,1)");
  require(cfg.calibration_fraction > 0.0 && cfg.calibration_fraction < 1.0,
          "calibration_fraction must lie in (0,1)");
  require(cfg.diag_samples >= 1, "diagnostics samples must be >= 1");
  require(cfg.diag_temperature > 0.0, "diagnostics temperature must be > 0");
  require(cfg.confidence_floor > 0.0 && cfg.confidence_floor < 1.0,
          "confidence_floor must lie in (0,1)");
  trainers::validate(cfg.base);
  trainers::validate(cfg.sft);
  trainers::validate(cfg.rl);
  require(cfg.rl.lambda > 0.0, "rl lambda must be > 0 (calib_grpo CE weight)");
}

// ---- TOML round trip and environment overrides ----

namespace detail {

inline toml::Value to_toml_value(const synthworld::ConfigValue& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  if (const auto* d = std::get_if<double>(&v)) return *d;
  return std::get<std::vector<double>>(v);
}

inline synthworld::ConfigValue to_config_value(const std::string& key,
                                               const toml::Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return *i;
  if (const auto* d = std::get_if<double>(&v)) return *d;
  if (const auto* a = std::get_if<std::vector<double>>(&v)) return *a;
  throw ValidationError("config key '" + key + "' cannot be a string");
}

inline std::string reward_norm_name(trainers::RewardNorm n) {
  return n == trainers::RewardNorm::Group ? "group" : "batch";
}

inline trainers::RewardNorm reward_norm_from(const std::string& s) {
  if (s == "group") return trainers::RewardNorm::Group;
  if (s == "batch") return trainers::RewardNorm::Batch;
  throw ValidationError("reward_normalization must be 'group' or 'batch'");
}

inline std::string env_name(const std::string& section, const std::string& key) {
  std::string out = "CALIBRL_";
  const auto append = [&out](const std::string& s) {
    for (char c : s) {
      out.push_back(c == '-' ? '_' : static_cast<char>(
                                         std::toupper(static_cast<unsigned char>(c))));
    }
  };
  if (!section.empty()) {
    append(section);
    out.push_back('_');
  }
  append(key);
  return out;
}

}  // namespace detail

inline toml::Document to_toml(const RunConfig& cfg) {
  toml::Document doc;
  doc[""]["seed"] = static_cast<std::int64_t>(cfg.seed);
  doc[""]["output_dir"] = cfg.output_dir;
  doc[""]["hidden_dim"] = std::int64_t{cfg.hidden_dim};
  for (const auto& [k, v] : cfg.task) doc["task"][k] = detail::to_toml_value(v);
  for (const auto& [k, v] : cfg.ood_shift)
    doc["ood"][k] = detail::to_toml_value(v);
  doc["pools"]["pretrain"] = std::int64_t{cfg.pools.pretrain};
  doc["pools"]["train"] = std::int64_t{cfg.pools.train};
  doc["pools"]["val"] = std::int64_t{cfg.pools.val};
  doc["pools"]["eval"] = std::int64_t{cfg.pools.eval};
  doc["base"]["epochs"] = std::int64_t{cfg.base.epochs};
  doc["base"]["inner_updates"] = std::int64_t{cfg.base.inner_updates};
  doc["base"]["learning_rate"] = cfg.base.learning_rate;
  doc["base"]["margin"] = cfg.base_margin;
  doc["sft"]["epochs"] = std::int64_t{cfg.sft.epochs};
  doc["sft"]["inner_updates"] = std::int64_t{cfg.sft.inner_updates};
  doc["sft"]["learning_rate"] = cfg.sft.learning_rate;
  doc["rl"]["epochs"] = std::int64_t{cfg.rl.epochs};
  doc["rl"]["inner_updates"] = std::int64_t{cfg.rl.inner_updates};
  doc["rl"]["group_size"] = std::int64_t{cfg.rl.group_size};
  doc["rl"]["learning_rate"] = cfg.rl.learning_rate;
  doc["rl"]["clip_epsilon"] = cfg.rl.clip_epsilon;
  doc["rl"]["sampling_temperature"] = cfg.rl.sampling_temperature;
  doc["rl"]["lambda"] = cfg.rl.lambda;
  doc["rl"]["std_epsilon"] = cfg.rl.std_epsilon;
  doc["rl"]["weight_decay"] = cfg.rl.weight_decay;
  doc["rl"]["reward_normalization"] =
      detail::reward_norm_name(cfg.rl.reward_normalization);
  doc["eval"]["bins"] = std::int64_t{cfg.eval_bins};
  doc["eval"]["overconfidence_threshold"] = cfg.overconfidence_threshold;
  doc["eval"]["select_on_test"] = std::int64_t{cfg.select_on_test ? 1 : 0};
  doc["posthoc"]["enabled"] = std::int64_t{cfg.posthoc_enabled ? 1 : 0};
  doc["posthoc"]["calibration_fraction"] = cfg.calibration_fraction;
  doc["diagnostics"]["enabled"] = std::int64_t{cfg.diagnostics_enabled ? 1 : 0};
  doc["diagnostics"]["samples_per_instance"] = std::int64_t{cfg.diag_samples};
  doc["diagnostics"]["temperature"] = cfg.diag_temperature;
  doc["diagnostics"]["confidence_floor"] = cfg.confidence_floor;
  return doc;
}

/// Builds a RunConfig by overlaying a parsed document onto the defaults.
/// Unknown sections or keys raise ValidationError naming the offender.
inline RunConfig config_from_toml(const toml::Document& doc) {
  RunConfig cfg = default_config();
  for (const auto& [section, table] : doc) {
    if (section.empty()) {
      for (const auto& [key, value] : table) {
        if (key == "seed") {
          cfg.seed = static_cast<std::uint64_t>(toml::get_int(table, key, 1));
        } else if (key == "output_dir") {
          cfg.output_dir = toml::get_string(table, key, cfg.output_dir);
        } else if (key == "hidden_dim") {
          cfg.hidden_dim =
              static_cast<int>(toml::get_int(table, key, cfg.hidden_dim));
        } else {
          throw ValidationError("config: unknown root key '" + key + "'");
        }
        (void)value;
      }
    } else if (section == "task") {
      for (const auto& [key, value] : table)
        cfg.task[key] = detail::to_config_value(key, value);
    } else if (section == "ood") {
      cfg.ood_shift.clear();  // a shift list replaces the default wholesale
      for (const auto& [key, value] : table)
        cfg.ood_shift[key] = detail::to_config_value(key, value);
    } else if (section == "pools") {
      for (const auto& [key, value] : table) {
        (void)value;
        if (key == "pretrain") cfg.pools.pretrain = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "train") cfg.pools.train = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "val") cfg.pools.val = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "eval") cfg.pools.eval = static_cast<int>(toml::get_int(table, key, 0));
        else throw ValidationError("config: unknown [pools] key '" + key + "'");
      }
    } else if (section == "base" || section == "sft" || section == "rl") {
      trainers::GRPOConfig& t = section == "base" ? cfg.base
                                : section == "sft" ? cfg.sft
                                                   : cfg.rl;
      for (const auto& [key, value] : table) {
        (void)value;
        if (key == "epochs") t.epochs = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "inner_updates") t.inner_updates = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "learning_rate") t.learning_rate = toml::get_double(table, key, 0.0);
        else if (key == "margin" && section == "base") cfg.base_margin = toml::get_double(table, key, 0.0);
        else if (key == "group_size" && section == "rl") t.group_size = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "clip_epsilon" && section == "rl") t.clip_epsilon = toml::get_double(table, key, 0.0);
        else if (key == "sampling_temperature" && section == "rl") t.sampling_temperature = toml::get_double(table, key, 0.0);
        else if (key == "lambda" && section == "rl") t.lambda = toml::get_double(table, key, 0.0);
        else if (key == "std_epsilon" && section == "rl") t.std_epsilon = toml::get_double(table, key, 0.0);
        else if (key == "weight_decay" && section == "rl") t.weight_decay = toml::get_double(table, key, 0.0);
        else if (key == "reward_normalization" && section == "rl")
          t.reward_normalization = detail::reward_norm_from(toml::get_string(table, key, "group"));
        else
          throw ValidationError("config: unknown [" + section + "] key '" + key + "'");
      }
    } else if (section == "eval") {
      for (const auto& [key, value] : table) {
        (void)value;
        if (key == "bins") cfg.eval_bins = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "overconfidence_threshold") cfg.overconfidence_threshold = toml::get_double(table, key, 0.0);
        else if (key == "select_on_test") cfg.select_on_test = toml::get_bool(table, key, false);
        else throw ValidationError("config: unknown [eval] key '" + key + "'");
      }
    } else if (section == "posthoc") {
      for (const auto& [key, value] : table) {
        (void)value;
        if (key == "enabled") cfg.posthoc_enabled = toml::get_bool(table, key, true);
        else if (key == "calibration_fraction") cfg.calibration_fraction = toml::get_double(table, key, 0.0);
        else throw ValidationError("config: unknown [posthoc] key '" + key + "'");
      }
    } else if (section == "diagnostics") {
      for (const auto& [key, value] : table) {
        (void)value;
        if (key == "enabled") cfg.diagnostics_enabled = toml::get_bool(table, key, true);
        else if (key == "samples_per_instance") cfg.diag_samples = static_cast<int>(toml::get_int(table, key, 0));
        else if (key == "temperature") cfg.diag_temperature = toml::get_double(table, key, 0.0);
        else if (key == "confidence_floor") cfg.confidence_floor = toml::get_double(table, key, 0.0);
        else throw ValidationError("config: unknown [diagnostics] key '" + key + "'");
      }
    } else {
      throw ValidationError("config: unknown section [" + section + "]");
    }
  }
  sync_trainer_fields(cfg);
  validate(cfg);
  return cfg;
}

/// Overlays CALIBRL_<SECTION>_<KEY> environment variables onto the document.
/// Every key known to the defaults plus every key already in the document is
/// checked; string-typed keys take the raw value, everything else is parsed
/// as a TOML scalar. CLI flags are applied after this, so the precedence is
/// flags > environment > file > defaults.
inline void apply_env_overrides(toml::Document& doc) {
  toml::Document known = to_toml(default_config());
  for (const auto& [section, table] : doc)
    for (const auto& [key, value] : table) known[section][key] = value;
  for (const auto& [section, table] : known) {
    for (const auto& [key, value] : table) {
      const std::string name = detail::env_name(section, key);
      const char* raw = std::getenv(name.c_str());
      if (raw == nullptr) continue;
      if (std::holds_alternative<std::string>(value)) {
        doc[section][key] = std::string(raw);
      } else {
        try {
          doc[section][key] = toml::detail::parse_scalar(
              toml::detail::trim(std::string_view(raw)), 0);
        } catch (const ValidationError&) {
          throw ValidationError("environment override " + name +
                                " holds an unparsable value '" +
                                std::string(raw) + "'");
        }
      }
    }
  }
}

/// Parses the config file (or starts from defaults when absent) and applies
/// environment overrides.
inline RunConfig load_config(const std::optional<std::string>& path) {
  toml::Document doc;
  if (path.has_value()) doc = toml::parse_file(*path);
  apply_env_overrides(doc);
  return config_from_toml(doc);
}

// ---- JSONL record persistence ----

inline nlohmann::json record_to_json(const calibration::PredictionRecord& r) {
  calibration::validate(r);
  nlohmann::json j;
  j["id"] = r.instance_id;
  j["p"] = r.confidence;
  j["predicted"] = r.predicted;
  j["gold"] = r.gold;
  j["correct"] = r.correct;
  j["split"] = calibration::split_name(r.split);
  j["method"] = r.method;
  if (!r.decision_distribution.empty()) j["dist"] = r.decision_distribution;
  if (!r.bayes_posterior.empty()) j["posterior"] = r.bayes_posterior;
  return j;
}

inline calibration::PredictionRecord record_from_json(const nlohmann::json& j) {
  calibration::PredictionRecord r;
  try {
    r.instance_id = j.at("id").get<std::uint64_t>();
    r.confidence = j.at("p").get<double>();
    r.predicted = j.at("predicted").get<int>();
    r.gold = j.at("gold").get<int>();
    r.correct = j.at("correct").get<bool>();
    const std::string split = j.at("split").get<std::string>();
    if (split == "in_domain") r.split = calibration::Split::InDomain;
    else if (split == "ood") r.split = calibration::Split::Ood;
    else throw ValidationError("record split '" + split + "' is unknown");
    r.method = j.at("method").get<std::string>();
    if (j.contains("dist"))
      r.decision_distribution = j.at("dist").get<std::vector<double>>();
    if (j.contains("posterior"))
      r.bayes_posterior = j.at("posterior").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed record: ") + e.what());
  }
  calibration::validate(r);
  return r;
}

/// One JSON object per line; keys serialize alphabetically, doubles as their
/// shortest round-trip form, so the bytes are a pure function of the records.
inline void persist_records(
    std::span<const calibration::PredictionRecord> records,
    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  require(out.good(), "short write to " + path.string());
}

inline std::vector<calibration::PredictionRecord> load_records(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw ValidationError("cannot open " + path.string() + " for reading");
  std::vector<calibration::PredictionRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw ValidationError(path.string() + ":" + std::to_string(line_no) +
                            ": invalid JSON");
    records.push_back(record_from_json(j));
  }
  return records;
}

inline void write_text_file(const std::filesystem::path& path,
                            const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "cannot open " + path.string() + " for writing");
  out << content;
  require(out.good(), "short write to " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good())
    throw ValidationError("cannot open " + path.string() + " for reading");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// ---- reliability diagram SVG ----

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '"') out += "&quot;";
    else out.push_back(c);
  }
  return out;
}

}  // namespace detail

/// Deterministic standalone SVG: main panel with the y=x diagonal and one bar
/// per non-empty confidence bin (span = the bin's confidence interval, top =
/// its accuracy), plus a 20-bucket confidence histogram strip underneath.
/// Each shape carries its numbers as data- attributes for machine checking.
inline std::string render_reliability_svg(
    const calibration::ReliabilityData& data, const std::string& title) {
  constexpr double px = 50.0, py = 30.0, pw = 400.0, ph = 240.0;
  constexpr double hx = 50.0, hy = 300.0, hw = 400.0, hh = 60.0;
  const auto fd = [](double v) { return format_double(v); };
  const auto cx = [&](double c) { return px + c * pw; };
  const auto cy = [&](double a) { return py + (1.0 - a) * ph; };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"400\" "
       "viewBox=\"0 0 480 400\">\n";
  const std::string safe_title = detail::xml_escape(title);
  s += "  <title>" + safe_title + "</title>\n";
  s += "  <text x=\"250\" y=\"18\" text-anchor=\"middle\" "
       "font-family=\"monospace\" font-size=\"13\">" + safe_title + "</text>\n";
  s += "  <rect x=\"" + fd(px) + "\" y=\"" + fd(py) + "\" width=\"" + fd(pw) +
       "\" height=\"" + fd(ph) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (const auto& bin : data.bins) {
    if (bin.count == 0) continue;
    const double x0 = cx(bin.lo), x1 = cx(bin.hi), top = cy(bin.accuracy);
    s += "  <rect x=\"" + fd(x0) + "\" y=\"" + fd(top) + "\" width=\"" +
         fd(x1 - x0) + "\" height=\"" + fd(py + ph - top) +
         "\" fill=\"#4682b4\" fill-opacity=\"0.7\" stroke=\"#1c4966\"" +
         " data-bin=\"" + std::to_string(bin.bin_index) + "\" data-lo=\"" +
         fd(bin.lo) + "\" data-hi=\"" + fd(bin.hi) + "\" data-confidence=\"" +
         fd(bin.mean_confidence) + "\" data-accuracy=\"" + fd(bin.accuracy) +
         "\" data-count=\"" + std::to_string(bin.count) + "\"/>\n";
  }
  s += "  <line x1=\"" + fd(cx(0.0)) + "\" y1=\"" + fd(cy(0.0)) + "\" x2=\"" +
       fd(cx(1.0)) + "\" y2=\"" + fd(cy(1.0)) +
       "\" stroke=\"#c03030\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"/>\n";
  s += "  <text x=\"" + fd(px - 6.0) + "\" y=\"" + fd(cy(0.0) + 4.0) +
       "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">0</text>\n";
  s += "  <text x=\"" + fd(px - 6.0) + "\" y=\"" + fd(cy(1.0) + 4.0) +
       "\" text-anchor=\"end\" font-family=\"monospace\" font-size=\"10\">1</text>\n";
  s += "  <text x=\"" + fd(px + pw / 2.0) + "\" y=\"" + fd(py + ph + 16.0) +
       "\" text-anchor=\"middle\" font-family=\"monospace\" "
       "font-size=\"11\">confidence</text>\n";
  s += "  <text x=\"14\" y=\"" + fd(py + ph / 2.0) +
       "\" text-anchor=\"middle\" font-family=\"monospace\" font-size=\"11\" "
       "transform=\"rotate(-90 14 " + fd(py + ph / 2.0) +
       ")\">accuracy</text>\n";

  long max_count = 1;
  for (long c : data.histogram) max_count = std::max(max_count, c);
  for (int b = 0; b < 20; ++b) {
    if (data.histogram[b] == 0) continue;
    const double frac = static_cast<double>(data.histogram[b]) /
                        static_cast<double>(max_count);
    const double bar = frac * hh;
    s += "  <rect x=\"" + fd(hx + hw * b / 20.0) + "\" y=\"" + fd(hy + hh - bar) +
         "\" width=\"" + fd(hw / 20.0) + "\" height=\"" + fd(bar) +
         "\" fill=\"#888\" data-bucket=\"" + std::to_string(b) +
         "\" data-count=\"" + std::to_string(data.histogram[b]) + "\"/>\n";
  }
  s += "  <rect x=\"" + fd(hx) + "\" y=\"" + fd(hy) + "\" width=\"" + fd(hw) +
       "\" height=\"" + fd(hh) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  s += "  <text x=\"" + fd(hx + hw / 2.0) + "\" y=\"" + fd(hy + hh + 16.0) +
       "\" text-anchor=\"middle\" font-family=\"monospace\" "
       "font-size=\"11\">confidence histogram</text>\n";
  s += "</svg>\n";
  return s;
}

// ---- run record ----

struct ResultEntry {
  std::string method;   // base | sft | grpo | calib_grpo
  std::string split;    // in_domain | ood | holdout
  std::string variant;  // raw | platt | isotonic
  std::string path;     // relative to the run directory
  calibration::CalibrationReport report;
};

struct RunRecord {
  std::uint64_t seed = 0;
  int eval_bins = 10;
  int num_options = 0;
  double overconfidence_threshold = 0.99;
  double wall_clock_seconds = 0.0;  // excluded from deterministic artifacts
  double bayes_accuracy_in_domain = 0.0;
  double bayes_accuracy_ood = 0.0;
  std::map<std::string, int> best_epoch;
  std::vector<ResultEntry> results;
  nlohmann::json training = nlohmann::json::object();
  nlohmann::json posthoc = nlohmann::json::object();
  nlohmann::json diagnostics = nlohmann::json::object();
  std::vector<std::string> stages;
};

inline nlohmann::json report_to_json(const calibration::CalibrationReport& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["ece"] = r.ece;
  j["overconfidence"] = r.overconfidence;
  if (r.sce.has_value()) j["sce"] = *r.sce;
  if (r.mce.has_value()) j["mce"] = *r.mce;
  if (r.posterior_gap.has_value()) j["posterior_gap"] = *r.posterior_gap;
  return j;
}

inline nlohmann::json to_json(const RunRecord& rec) {
  nlohmann::json j;
  j["format_version"] = kRunFormatVersion;
  j["seed"] = rec.seed;
  j["eval_bins"] = rec.eval_bins;
  j["num_options"] = rec.num_options;
  j["overconfidence_threshold"] = rec.overconfidence_threshold;
  j["wall_clock_seconds"] = rec.wall_clock_seconds;
  j["bayes_accuracy"] = {{"in_domain", rec.bayes_accuracy_in_domain},
                         {"ood", rec.bayes_accuracy_ood}};
  j["best_epoch"] = rec.best_epoch;
  j["results"] = nlohmann::json::array();
  for (const auto& e : rec.results) {
    nlohmann::json entry;
    entry["method"] = e.method;
    entry["split"] = e.split;
    entry["variant"] = e.variant;
    entry["path"] = e.path;
    entry["report"] = report_to_json(e.report);
    j["results"].push_back(entry);
  }
  j["training"] = rec.training;
  j["posthoc"] = rec.posthoc;
  j["diagnostics"] = rec.diagnostics;
  j["stages"] = rec.stages;
  return j;
}

/// Loads the fields tabulation needs; extra payloads stay as raw JSON.
inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord rec;
  try {
    const int version = j.at("format_version").get<int>();
    require(version == kRunFormatVersion,
            "unsupported run record format_version " + std::to_string(version));
    rec.seed = j.at("seed").get<std::uint64_t>();
    rec.eval_bins = j.at("eval_bins").get<int>();
    rec.num_options = j.at("num_options").get<int>();
    rec.overconfidence_threshold = j.at("overconfidence_threshold").get<double>();
    rec.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    if (j.contains("bayes_accuracy")) {
      rec.bayes_accuracy_in_domain = j["bayes_accuracy"].value("in_domain", 0.0);
      rec.bayes_accuracy_ood = j["bayes_accuracy"].value("ood", 0.0);
    }
    if (j.contains("best_epoch"))
      rec.best_epoch = j["best_epoch"].get<std::map<std::string, int>>();
    for (const auto& entry : j.at("results")) {
      ResultEntry e;
      e.method = entry.at("method").get<std::string>();
      e.split = entry.at("split").get<std::string>();
      e.variant = entry.at("variant").get<std::string>();
      e.path = entry.at("path").get<std::string>();
      rec.results.push_back(std::move(e));
    }
    rec.training = j.value("training", nlohmann::json::object());
    rec.posthoc = j.value("posthoc", nlohmann::json::object());
    rec.diagnostics = j.value("diagnostics", nlohmann::json::object());
    if (j.contains("stages"))
      rec.stages = j["stages"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed run record: ") + e.what());
  }
  return rec;
}

// ---- cross-run tabulation ----

/// CSV comparison table: one row per persisted record file across all run
/// directories (methods x splits x post-hoc variants), every metric
/// recomputed from the JSONL records on disk rather than copied from the run
/// record. Incomplete or unreadable runs contribute a leading warning line
/// and no rows. sce/mce cells are empty when records lack full decision
/// distributions (scalar-recalibrated variants).
inline std::string tabulate(std::span<const std::string> run_dirs) {
  std::string warnings;
  std::string rows;
  for (const auto& dir_str : run_dirs) {
    const std::filesystem::path dir(dir_str);
    nlohmann::json manifest = nlohmann::json::value_t::discarded;
    if (std::filesystem::exists(dir / "MANIFEST.json")) {
      manifest = nlohmann::json::parse(read_text_file(dir / "MANIFEST.json"),
                                       nullptr, false);
    }
    if (manifest.is_discarded()) {
      warnings += "# warning: " + dir_str + ": missing or unreadable MANIFEST.json\n";
      continue;
    }
    const std::string status = manifest.value("status", "unknown");
    if (status != "complete") {
      warnings += "# warning: " + dir_str + ": run is " + status + " (stage " +
                  manifest.value("stage", "?") + "), skipped\n";
      continue;
    }
    RunRecord rec;
    try {
      rec = run_record_from_json(
          nlohmann::json::parse(read_text_file(dir / "run_record.json")));
    } catch (const std::exception& e) {
      warnings += "# warning: " + dir_str + ": " + e.what() + "\n";
      continue;
    }
    for (const auto& entry : rec.results) {
      const auto records = load_records(dir / entry.path);
      const auto rep = calibration::make_report(records, rec.eval_bins,
                                                rec.num_options,
                                                rec.overconfidence_threshold);
      rows += std::to_string(rec.seed) + ',' + entry.method + ',' +
              entry.split + ',' + entry.variant + ',' + std::to_string(rep.n) +
              ',' + format_double(rep.accuracy) + ',' + format_double(rep.ece) +
              ',' + (rep.sce ? format_double(*rep.sce) : std::string()) + ',' +
              (rep.mce ? format_double(*rep.mce) : std::string()) + '\n';
    }
  }
  return warnings + "seed,method,split,variant,n,accuracy,ece,sce,mce\n" + rows;
}

// ---- the experiment pipeline ----

namespace detail {

inline double bayes_accuracy(std::span<const synthworld::Instance> pool) {
  double hits = 0.0;
  for (const auto& inst : pool) {
    const auto it = std::max_element(inst.bayes_posterior.begin(),
                                     inst.bayes_posterior.end());
    hits += (static_cast<int>(it - inst.bayes_posterior.begin()) ==
             inst.gold_label)
                ? 1.0
                : 0.0;
  }
  return pool.empty() ? 0.0 : hits / static_cast<double>(pool.size());
}

inline nlohmann::json history_to_json(const trainers::TrainHistory& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : h.epochs) {
    arr.push_back({{"epoch", e.epoch},
                   {"mean_reward", e.mean_reward},
                   {"surrogate_loss", e.surrogate_loss},
                   {"calibration_loss", e.calibration_loss},
                   {"eval_accuracy", e.eval_accuracy},
                   {"eval_ece", e.eval_ece},
                   {"overconfidence_ratio", e.overconfidence_ratio}});
  }
  return arr;
}

/// Replaces each record's confidence with calibrate(confidence). The full
/// decision distribution is dropped (only the top-class probability is
/// recalibrated); prediction, gold, and posterior stay untouched.
template <typename Fn>
std::vector<calibration::PredictionRecord> recalibrate_records(
    std::span<const calibration::PredictionRecord> records, Fn&& calibrate) {
  std::vector<calibration::PredictionRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    r.confidence = calibrate(r.confidence);
    r.decision_distribution.clear();
  }
  return out;
}

}  // namespace detail

/// Runs the full experiment into cfg.output_dir and returns the run record.
/// Stages: setup, generate, train_base, train_sft, train_grpo,
/// train_calib_grpo, evaluate, posthoc, diagnostics, report. MANIFEST.json
/// tracks the current stage; on failure it records the stage and error and
/// the original exception propagates.
inline RunRecord run_experiment(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  sync_trainer_fields(cfg);
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "records");
  fs::create_directories(dir / "plots");
  fs::create_directories(dir / "calibrators");
  fs::create_directories(dir / "diagnostics");

  nlohmann::json manifest;
  manifest["format_version"] = kRunFormatVersion;
  manifest["status"] = "incomplete";
  manifest["stages_completed"] = nlohmann::json::array();
  const auto write_manifest = [&]() {
    write_text_file(dir / "MANIFEST.json", manifest.dump(2) + "\n");
  };
  const auto begin_stage = [&](const std::string& name) {
    manifest["stage"] = name;
    write_manifest();
  };
  const auto end_stage = [&](const std::string& name) {
    manifest["stages_completed"].push_back(name);
    write_manifest();
  };

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.eval_bins = cfg.eval_bins;
  rec.overconfidence_threshold = cfg.overconfidence_threshold;

  try {
    begin_stage("setup");
    write_text_file(dir / "config.toml", toml::serialize(to_toml(cfg)));
    end_stage("setup");

    begin_stage("generate");
    const synthworld::TaskSpec spec = synthworld::make_task_spec(cfg.task);
    const synthworld::TaskSpec ood_spec =
        synthworld::shift_spec(spec, cfg.ood_shift);
    rec.num_options = spec.num_options;
    const auto pretrain_pool =
        synthworld::sample_instances(spec, cfg.pools.pretrain, kPretrainOffset);
    const auto train_pool =
        synthworld::sample_instances(spec, cfg.pools.train, kTrainOffset);
    const auto val_pool =
        synthworld::sample_instances(spec, cfg.pools.val, kValOffset);
    const auto eval_pool =
        synthworld::sample_instances(spec, cfg.pools.eval, kEvalOffset);
    const auto ood_pool =
        synthworld::sample_instances(ood_spec, cfg.pools.eval, kOodOffset);
    rec.bayes_accuracy_in_domain = detail::bayes_accuracy(eval_pool);
    rec.bayes_accuracy_ood = detail::bayes_accuracy(ood_pool);
    end_stage("generate");

    // Checkpoint selection runs on the validation slice unless the config
    // explicitly opts into selecting on the report set.
    const auto& select_pool = cfg.select_on_test ? eval_pool : val_pool;

    begin_stage("train_base");
    const auto base_res =
        trainers::train(trainers::TrainMode::Sft, spec, pretrain_pool,
                        select_pool, cfg.base, cfg.seed);
    const double chance = 1.0 / spec.num_options;
    const double base_acc =
        base_res.history.epochs[base_res.best_epoch - 1].eval_accuracy;
    if (base_acc < chance + cfg.base_margin) {
      throw DiagnosticError(
          "base warm-up accuracy " + format_double(base_acc) +
          " missed the required chance + margin = " +
          format_double(chance + cfg.base_margin));
    }
    policy::save_params(base_res.best_params, dir / "checkpoints" / "base.bin");
    rec.best_epoch["base"] = base_res.best_epoch;
    rec.training["base"] = detail::history_to_json(base_res.history);
    end_stage("train_base");

    begin_stage("train_sft");
    const auto sft_res = trainers::train(
        trainers::TrainMode::Sft, spec, train_pool, select_pool, cfg.sft,
        cfg.seed, policy::snapshot(base_res.best_params));
    policy::save_params(sft_res.best_params, dir / "checkpoints" / "sft.bin");
    rec.best_epoch["sft"] = sft_res.best_epoch;
    rec.training["sft"] = detail::history_to_json(sft_res.history);
    end_stage("train_sft");

    begin_stage("train_grpo");
    trainers::GRPOConfig grpo_cfg = cfg.rl;
    grpo_cfg.lambda = 0.0;
    const auto grpo_res = trainers::train(
        trainers::TrainMode::Grpo, spec, train_pool, select_pool, grpo_cfg,
        cfg.seed, policy::snapshot(base_res.best_params));
    policy::save_params(grpo_res.best_params, dir / "checkpoints" / "grpo.bin");
    policy::save_params(grpo_res.final_params,
                        dir / "checkpoints" / "grpo_final.bin");
    rec.best_epoch["grpo"] = grpo_res.best_epoch;
    rec.training["grpo"] = detail::history_to_json(grpo_res.history);
    end_stage("train_grpo");

    begin_stage("train_calib_grpo");
    const auto calib_res = trainers::train(
        trainers::TrainMode::CalibGrpo, spec, train_pool, select_pool, cfg.rl,
        cfg.seed, policy::snapshot(base_res.best_params));
    policy::save_params(calib_res.best_params,
                        dir / "checkpoints" / "calib_grpo.bin");
    policy::save_params(calib_res.final_params,
                        dir / "checkpoints" / "calib_grpo_final.bin");
    rec.best_epoch["calib_grpo"] = calib_res.best_epoch;
    rec.training["calib_grpo"] = detail::history_to_json(calib_res.history);
    end_stage("train_calib_grpo");

    begin_stage("evaluate");
    struct MethodEval {
      std::string name;
      const policy::PolicyParams* params;
      int trace_len;
    };
    const MethodEval methods[] = {
        {"base", &base_res.best_params,
         trainers::eval_trace_len(trainers::TrainMode::Sft, cfg.base)},
        {"sft", &sft_res.best_params,
         trainers::eval_trace_len(trainers::TrainMode::Sft, cfg.sft)},
        {"grpo", &grpo_res.best_params,
         trainers::eval_trace_len(trainers::TrainMode::Grpo, grpo_cfg)},
        {"calib_grpo", &calib_res.best_params,
         trainers::eval_trace_len(trainers::TrainMode::CalibGrpo, cfg.rl)},
    };
    std::map<std::string, std::vector<calibration::PredictionRecord>>
        in_domain_records;
    std::map<std::string, std::vector<calibration::PredictionRecord>>
        ood_records;
    const auto tag = [](std::vector<calibration::PredictionRecord> records,
                        const std::string& method, calibration::Split split) {
      for (auto& r : records) {
        r.method = method;
        r.split = split;
      }
      return records;
    };
    const auto add_result = [&](const std::string& method,
                                const std::string& split,
                                const std::string& variant,
                                std::span<const calibration::PredictionRecord>
                                    records) {
      const std::string file = method + '_' + split +
                               (variant == "raw" ? "" : "_" + variant) +
                               ".jsonl";
      const std::string rel = "records/" + file;
      persist_records(records, dir / "records" / file);
      ResultEntry entry;
      entry.method = method;
      entry.split = split;
      entry.variant = variant;
      entry.path = rel;
      entry.report = calibration::make_report(records, cfg.eval_bins,
                                              spec.num_options,
                                              cfg.overconfidence_threshold);
      rec.results.push_back(std::move(entry));
    };
    for (const auto& m : methods) {
      auto in_recs = tag(trainers::evaluate_policy(*m.params, eval_pool,
                                                   m.trace_len),
                         m.name, calibration::Split::InDomain);
      auto ood_recs = tag(trainers::evaluate_policy(*m.params, ood_pool,
                                                    m.trace_len),
                          m.name, calibration::Split::Ood);
      add_result(m.name, "in_domain", "raw", in_recs);
      add_result(m.name, "ood", "raw", ood_recs);
      write_text_file(dir / "plots" / (m.name + "_in_domain.svg"),
                      render_reliability_svg(
                          calibration::reliability_bins(in_recs, cfg.eval_bins),
                          m.name + " / in_domain"));
      write_text_file(dir / "plots" / (m.name + "_ood.svg"),
                      render_reliability_svg(
                          calibration::reliability_bins(ood_recs, cfg.eval_bins),
                          m.name + " / ood"));
      in_domain_records[m.name] = std::move(in_recs);
      ood_records[m.name] = std::move(ood_recs);
    }
    end_stage("evaluate");

    if (cfg.posthoc_enabled) {
      begin_stage("posthoc");
      for (const std::string method : {"grpo", "calib_grpo"}) {
        const auto& in_recs = in_domain_records[method];
        const auto n_cal = static_cast<std::size_t>(
            cfg.calibration_fraction * static_cast<double>(in_recs.size()));
        require(n_cal >= 2 && n_cal < in_recs.size(),
                "calibration split for " + method +
                    " needs at least 2 records and a non-empty holdout");
        const std::span<const calibration::PredictionRecord> fit_slice(
            in_recs.data(), n_cal);
        const std::span<const calibration::PredictionRecord> holdout(
            in_recs.data() + n_cal, in_recs.size() - n_cal);
        const auto platt = posthoc::fit_platt(fit_slice);
        const auto iso = posthoc::fit_isotonic(fit_slice);
        write_text_file(dir / "calibrators" / (method + "_platt.json"),
                        posthoc::to_json(platt).dump(2) + "\n");
        write_text_file(dir / "calibrators" / (method + "_isotonic.json"),
                        posthoc::to_json(iso).dump(2) + "\n");
        rec.posthoc[method] = {
            {"fit_records", n_cal},
            {"platt", posthoc::to_json(platt)},
            {"isotonic", posthoc::to_json(iso)},
        };
        add_result(method, "holdout", "raw", holdout);
        add_result(method, "holdout", "platt",
                   detail::recalibrate_records(holdout, [&](double p) {
                     return posthoc::apply_platt(platt, p);
                   }));
        add_result(method, "holdout", "isotonic",
                   detail::recalibrate_records(holdout, [&](double p) {
                     return posthoc::apply_isotonic(iso, p);
                   }));
        const auto& ood_recs = ood_records[method];
        add_result(method, "ood", "platt",
                   detail::recalibrate_records(ood_recs, [&](double p) {
                     return posthoc::apply_platt(platt, p);
                   }));
        add_result(method, "ood", "isotonic",
                   detail::recalibrate_records(ood_recs, [&](double p) {
                     return posthoc::apply_isotonic(iso, p);
                   }));
      }
      end_stage("posthoc");
    }

    if (cfg.diagnostics_enabled) {
      begin_stage("diagnostics");
      // Diagnostics probe the end-of-training behavior, so they run on the
      // final parameters, not the selected checkpoint.
      const std::map<std::string, const policy::PolicyParams*> finals = {
          {"grpo", &grpo_res.final_params},
          {"calib_grpo", &calib_res.final_params},
      };
      for (const auto& [method, params] : finals) {
        const auto study = diagnostics::rollout_confidence_study(
            *params, eval_pool, cfg.diag_samples, cfg.diag_temperature,
            cfg.overconfidence_threshold, cfg.seed);
        nlohmann::json j = diagnostics::to_json(study);
        write_text_file(dir / "diagnostics" /
                            ("overconfidence_" + method + ".json"),
                        j.dump(2) + "\n");
        write_text_file(dir / "diagnostics" /
                            ("overconfidence_" + method + "_hist.csv"),
                        diagnostics::confidence_histogram_csv(study.confidences));
        j.erase("confidences");
        rec.diagnostics["overconfidence"][method] = j;
      }
      nlohmann::json swap_json;
      try {
        const auto swap = diagnostics::swap_study(
            grpo_res.final_params, eval_pool, cfg.confidence_floor, cfg.seed);
        swap_json = diagnostics::to_json(swap);
        swap_json["expected_flip_ratio_above"] = 0.5;
        if (swap.flip_ratio <= 0.5) {
          swap_json["warning"] =
              "flip ratio at or below 0.5: spliced reasoning did not steer "
              "most decisions";
        }
        write_text_file(dir / "diagnostics" / "swap_grpo.json",
                        swap_json.dump(2) + "\n");
        swap_json.erase("cases");
      } catch (const DiagnosticError& e) {
        // No eligible cases at this confidence floor is a reportable outcome
        // for the run, not a pipeline failure.
        swap_json = {{"status", "skipped"}, {"reason", e.what()}};
        write_text_file(dir / "diagnostics" / "swap_grpo.json",
                        swap_json.dump(2) + "\n");
      }
      rec.diagnostics["swap"]["grpo"] = swap_json;
      end_stage("diagnostics");
    }

    begin_stage("report");
    rec.stages = manifest["stages_completed"].get<std::vector<std::string>>();
    rec.stages.push_back("report");
    rec.wall_clock_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    write_text_file(dir / "run_record.json", to_json(rec).dump(2) + "\n");
    manifest["status"] = "complete";
    end_stage("report");
    const std::string dirs[] = {cfg.output_dir};
    write_text_file(dir / "metrics.csv", tabulate(dirs));
  } catch (const std::exception& e) {
    manifest["status"] = "incomplete";
    manifest["error"] = e.what();
    write_manifest();
    throw;
  }
  return rec;
}

}  // namespace calibrl::harness
