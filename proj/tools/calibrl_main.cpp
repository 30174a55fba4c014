// Command-line front end: generate instances, train policies, evaluate
// checkpoints, run diagnostics, fit/apply post-hoc calibrators, tabulate
// finished runs, or execute the full experiment pipeline.
//
// Exit codes: 0 success, 2 invalid input or configuration, 3 runtime
// diagnostic failure (divergence, missing artifacts, failed pipeline stage).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "calibrl/harness.hpp"

namespace {

namespace fs = std::filesystem;
using namespace calibrl;

struct CommonOpts {
  std::string config_path;
  std::int64_t seed = -1;  // <0 means "leave the config's seed alone"
  std::string out;
};

harness::RunConfig resolved_config(const CommonOpts& opts) {
  harness::RunConfig cfg = harness::load_config(
      opts.config_path.empty() ? std::nullopt
                               : std::optional<std::string>(opts.config_path));
  if (opts.seed >= 0) cfg.seed = static_cast<std::uint64_t>(opts.seed);
  if (!opts.out.empty()) cfg.output_dir = opts.out;
  return cfg;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty() || out_path == "-") {
    std::cout << text;
  } else {
    harness::write_text_file(out_path, text);
  }
}

nlohmann::json instance_to_json(const synthworld::Instance& inst) {
  nlohmann::json j;
  j["id"] = inst.id;
  j["gold"] = inst.gold_label;
  j["latent"] = inst.latent;
  j["features"] = inst.features;
  j["posterior"] = inst.bayes_posterior;
  return j;
}

int cmd_gen(const CommonOpts& opts, int n, std::int64_t offset, bool ood) {
  harness::RunConfig cfg = resolved_config(opts);
  synthworld::TaskSpec spec = synthworld::make_task_spec(cfg.task);
  if (ood) spec = synthworld::shift_spec(spec, cfg.ood_shift);
  const auto pool = synthworld::sample_instances(
      spec, n, static_cast<std::uint64_t>(offset));
  std::string out;
  for (const auto& inst : pool) out += instance_to_json(inst).dump() + "\n";
  emit(out, opts.out);
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& mode_name) {
  harness::RunConfig cfg = resolved_config(opts);
  const fs::path dir(cfg.output_dir);
  fs::create_directories(dir / "checkpoints");
  const synthworld::TaskSpec spec = synthworld::make_task_spec(cfg.task);
  const auto pretrain =
      synthworld::sample_instances(spec, cfg.pools.pretrain,
                                   harness::kPretrainOffset);
  const auto train_pool =
      synthworld::sample_instances(spec, cfg.pools.train, harness::kTrainOffset);
  const auto val_pool =
      synthworld::sample_instances(spec, cfg.pools.val, harness::kValOffset);

  const auto base_res = trainers::train(trainers::TrainMode::Sft, spec,
                                        pretrain, val_pool, cfg.base, cfg.seed);
  const double base_acc =
      base_res.history.epochs[base_res.best_epoch - 1].eval_accuracy;
  const double target = 1.0 / spec.num_options + cfg.base_margin;
  if (base_acc < target) {
    throw DiagnosticError("base warm-up accuracy " + format_double(base_acc) +
                          " missed the required chance + margin = " +
                          format_double(target));
  }
  policy::save_params(base_res.best_params, dir / "checkpoints" / "base.bin");

  trainers::TrainResult res;
  if (mode_name == "base") {
    res = base_res;
  } else if (mode_name == "sft") {
    res = trainers::train(trainers::TrainMode::Sft, spec, train_pool, val_pool,
                          cfg.sft, cfg.seed,
                          policy::snapshot(base_res.best_params));
  } else {
    trainers::GRPOConfig rl_cfg = cfg.rl;
    if (mode_name == "grpo") rl_cfg.lambda = 0.0;
    res = trainers::train(trainers::mode_from_name(mode_name) ==
                                  trainers::TrainMode::CalibGrpo
                              ? trainers::TrainMode::CalibGrpo
                              : trainers::TrainMode::Grpo,
                          spec, train_pool, val_pool, rl_cfg, cfg.seed,
                          policy::snapshot(base_res.best_params));
  }
  policy::save_params(res.best_params,
                      dir / "checkpoints" / (mode_name + ".bin"));
  policy::save_params(res.final_params,
                      dir / "checkpoints" / (mode_name + "_final.bin"));

  nlohmann::json summary;
  summary["mode"] = mode_name;
  summary["best_epoch"] = res.best_epoch;
  summary["epochs"] = res.history.epochs.size();
  const auto& best = res.history.epochs[res.best_epoch - 1];
  summary["best_eval_accuracy"] = best.eval_accuracy;
  summary["best_eval_ece"] = best.eval_ece;
  summary["checkpoint"] = (dir / "checkpoints" / (mode_name + ".bin")).string();
  harness::write_text_file(dir / ("train_" + mode_name + ".json"),
                           summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint,
             const std::string& method, int trace_len, bool ood,
             const std::string& records_out) {
  harness::RunConfig cfg = resolved_config(opts);
  synthworld::TaskSpec spec = synthworld::make_task_spec(cfg.task);
  if (ood) spec = synthworld::shift_spec(spec, cfg.ood_shift);
  const auto pool = synthworld::sample_instances(
      spec, cfg.pools.eval, ood ? harness::kOodOffset : harness::kEvalOffset);
  const auto params = policy::load_params(checkpoint);
  auto records = trainers::evaluate_policy(params, pool, trace_len);
  for (auto& r : records) {
    r.method = method;
    r.split = ood ? calibration::Split::Ood : calibration::Split::InDomain;
  }
  if (!records_out.empty()) harness::persist_records(records, records_out);
  const auto report = calibration::make_report(
      records, cfg.eval_bins, spec.num_options, cfg.overconfidence_threshold);
  std::cout << harness::report_to_json(report).dump(2) << "\n";
  return 0;
}

int cmd_diagnose(const CommonOpts& opts, const std::string& kind,
                 const std::string& checkpoint) {
  harness::RunConfig cfg = resolved_config(opts);
  const synthworld::TaskSpec spec = synthworld::make_task_spec(cfg.task);
  const auto pool = synthworld::sample_instances(spec, cfg.pools.eval,
                                                 harness::kEvalOffset);
  const auto params = policy::load_params(checkpoint);
  nlohmann::json j;
  if (kind == "overconfidence") {
    j = diagnostics::to_json(diagnostics::rollout_confidence_study(
        params, pool, cfg.diag_samples, cfg.diag_temperature,
        cfg.overconfidence_threshold, cfg.seed));
  } else {
    j = diagnostics::to_json(diagnostics::swap_study(
        params, pool, cfg.confidence_floor, cfg.seed));
  }
  emit(j.dump(2) + "\n", opts.out);
  return 0;
}

int cmd_posthoc_fit(const std::string& records_path, const std::string& method,
                    const std::string& out) {
  const auto records = harness::load_records(records_path);
  nlohmann::json j;
  if (method == "platt") {
    j = posthoc::to_json(posthoc::fit_platt(records));
  } else {
    j = posthoc::to_json(posthoc::fit_isotonic(records));
  }
  emit(j.dump(2) + "\n", out);
  return 0;
}

int cmd_posthoc_apply(const std::string& records_path,
                      const std::string& calibrator_path,
                      const std::string& out) {
  const auto records = harness::load_records(records_path);
  const nlohmann::json j =
      nlohmann::json::parse(harness::read_text_file(calibrator_path));
  const std::string type = j.value("type", "");
  std::vector<calibration::PredictionRecord> out_records;
  if (type == "platt") {
    const auto platt = posthoc::platt_from_json(j);
    out_records = harness::detail::recalibrate_records(
        records, [&](double p) { return posthoc::apply_platt(platt, p); });
  } else if (type == "isotonic") {
    const auto iso = posthoc::isotonic_from_json(j);
    out_records = harness::detail::recalibrate_records(
        records, [&](double p) { return posthoc::apply_isotonic(iso, p); });
  } else {
    throw ValidationError("calibrator file has unknown type '" + type + "'");
  }
  std::string text;
  for (const auto& r : out_records)
    text += harness::record_to_json(r).dump() + "\n";
  emit(text, out);
  return 0;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out,
               bool render_plots) {
  if (render_plots) {
    for (const auto& dir_str : dirs) {
      const fs::path dir(dir_str);
      if (!fs::exists(dir / "run_record.json")) continue;
      const auto rec = harness::run_record_from_json(
          nlohmann::json::parse(harness::read_text_file(dir / "run_record.json")));
      fs::create_directories(dir / "plots");
      for (const auto& entry : rec.results) {
        if (entry.variant != "raw") continue;
        const auto records = harness::load_records(dir / entry.path);
        harness::write_text_file(
            dir / "plots" / (entry.method + "_" + entry.split + ".svg"),
            harness::render_reliability_svg(
                calibration::reliability_bins(records, rec.eval_bins),
                entry.method + " / " + entry.split));
      }
    }
  }
  emit(harness::tabulate(dirs), out);
  return 0;
}

int cmd_run(const CommonOpts& opts) {
  const harness::RunConfig cfg = resolved_config(opts);
  const harness::RunRecord rec = harness::run_experiment(cfg);
  nlohmann::json summary;
  summary["output_dir"] = cfg.output_dir;
  summary["seed"] = rec.seed;
  summary["wall_clock_seconds"] = rec.wall_clock_seconds;
  summary["bayes_accuracy"] = {{"in_domain", rec.bayes_accuracy_in_domain},
                               {"ood", rec.bayes_accuracy_ood}};
  for (const auto& entry : rec.results) {
    if (entry.variant != "raw" || entry.split != "in_domain") continue;
    summary["in_domain"][entry.method] = {{"accuracy", entry.report.accuracy},
                                          {"ece", entry.report.ece}};
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic decision-making laboratory"};
  app.require_subcommand(1);

  CommonOpts opts;
  const auto add_common = [&opts](CLI::App* sub, bool with_out = true) {
    sub->add_option("--config", opts.config_path, "TOML config file");
    sub->add_option("--seed", opts.seed, "override the config seed");
    if (with_out) sub->add_option("--out", opts.out, "output path");
  };

  auto* gen = app.add_subcommand("gen", "emit sampled instances as JSONL");
  int gen_n = 16;
  std::int64_t gen_offset = 0;
  bool gen_ood = false;
  add_common(gen);
  gen->add_option("--n", gen_n, "number of instances");
  gen->add_option("--offset", gen_offset, "instance id offset");
  gen->add_flag("--ood", gen_ood, "sample from the shifted distribution");

  auto* train = app.add_subcommand("train", "train one method");
  std::string train_mode = "grpo";
  add_common(train);
  train->add_option("--mode", train_mode, "base | sft | grpo | calib_grpo")
      ->check(CLI::IsMember({"base", "sft", "grpo", "calib_grpo"}));

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_checkpoint, eval_method = "policy", eval_records;
  int eval_trace_len = -1;
  bool eval_ood = false;
  add_common(eval, false);
  eval->add_option("--checkpoint", eval_checkpoint, "policy .bin path")
      ->required();
  eval->add_option("--method", eval_method, "method tag for the records");
  eval->add_option("--trace-len", eval_trace_len,
                   "reasoning tokens at eval (-1 = full, 0 = none)");
  eval->add_flag("--ood", eval_ood, "evaluate on the shifted distribution");
  eval->add_option("--records-out", eval_records, "write records JSONL here");

  auto* diagnose = app.add_subcommand("diagnose", "run a diagnostic study");
  std::string diag_kind, diag_checkpoint;
  add_common(diagnose);
  diagnose->add_option("kind", diag_kind, "overconfidence | swap")
      ->required()
      ->check(CLI::IsMember({"overconfidence", "swap"}));
  diagnose->add_option("--checkpoint", diag_checkpoint, "policy .bin path")
      ->required();

  auto* posthoc_cmd = app.add_subcommand("posthoc", "post-hoc calibration");
  posthoc_cmd->require_subcommand(1);
  auto* fit = posthoc_cmd->add_subcommand("fit", "fit a calibrator");
  std::string fit_records, fit_method = "platt", fit_out;
  fit->add_option("--records", fit_records, "calibration records JSONL")
      ->required();
  fit->add_option("--method", fit_method, "platt | isotonic")
      ->check(CLI::IsMember({"platt", "isotonic"}));
  fit->add_option("--out", fit_out, "calibrator JSON path");
  auto* apply = posthoc_cmd->add_subcommand("apply", "apply a calibrator");
  std::string apply_records, apply_calibrator, apply_out;
  apply->add_option("--records", apply_records, "records JSONL")->required();
  apply->add_option("--calibrator", apply_calibrator, "calibrator JSON")
      ->required();
  apply->add_option("--out", apply_out, "recalibrated records JSONL path");

  auto* report = app.add_subcommand("report", "tabulate finished runs");
  std::vector<std::string> report_dirs;
  std::string report_out;
  bool report_plots = false;
  report->add_option("dirs", report_dirs, "run directories")->required();
  report->add_option("--out", report_out, "CSV output path");
  report->add_flag("--render-plots", report_plots,
                   "re-render reliability SVGs from persisted records");

  auto* run = app.add_subcommand("run", "execute the full pipeline");
  add_common(run);

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen(opts, gen_n, gen_offset, gen_ood);
    if (train->parsed()) return cmd_train(opts, train_mode);
    if (eval->parsed())
      return cmd_eval(opts, eval_checkpoint, eval_method, eval_trace_len,
                      eval_ood, eval_records);
    if (diagnose->parsed()) return cmd_diagnose(opts, diag_kind, diag_checkpoint);
    if (posthoc_cmd->parsed()) {
      if (fit->parsed()) return cmd_posthoc_fit(fit_records, fit_method, fit_out);
      return cmd_posthoc_apply(apply_records, apply_calibrator, apply_out);
    }
    if (report->parsed()) return cmd_report(report_dirs, report_out, report_plots);
    if (run->parsed()) return cmd_run(opts);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DiagnosticError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
