// SPDX-License-Identifier: Apache-2.0
//
// pqd: train / calibrate / quantize / evaluate / reproduce / defaults.
// Exit codes: 0 success, 2 config error, 3 format error, 4 numerical failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pqd/pqd.hpp"

namespace fs = std::filesystem;
using namespace pqd;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitFormat = 3;
constexpr int kExitNumerical = 4;

struct CommonArgs {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::string bits;
};

ExperimentConfig resolve_config(const CommonArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (a.seed) {
    cfg.init_seed = *a.seed;
    cfg.train.seed = *a.seed;
    cfg.calibration.seed = *a.seed;
    cfg.eval.seed = *a.seed;
  }
  if (!a.bits.empty()) cfg.bit_grid = {BitConfig::parse(a.bits)};
  cfg.validate();
  return cfg;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError("missing --" + what);
  if (!fs::exists(path)) throw FormatError(what + " file not found: " + path);
}

void add_common(CLI::App* cmd, CommonArgs& a, bool with_bits) {
  cmd->add_option("--config", a.config, "experiment config (JSON); defaults when omitted");
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--seed", a.seed, "override every run seed");
  if (with_bits) cmd->add_option("--bits", a.bits, "override the bit grid with a single WxAy entry");
}

int cmd_train(const CommonArgs& a) {
  const ExperimentConfig cfg = resolve_config(a);
  const TrainOutcome t = run_train(cfg);
  const fs::path out(a.out);
  save_checkpoint(out / "checkpoint.dqckpt", t.model);
  write_file(out / "train_log.json", dump_json(train_log(cfg, t)));
  std::cout << "held-out loss " << t.initial_loss << " -> " << t.final_loss << "\n"
            << "wrote " << (out / "checkpoint.dqckpt").string() << "\n";
  return 0;
}

int cmd_calibrate(const CommonArgs& a, const std::string& checkpoint, const std::string& strategy) {
  const ExperimentConfig cfg = resolve_config(a);
  require_file(checkpoint, "checkpoint");
  const Denoiser model = load_checkpoint(checkpoint);
  const CalibrationStrategy s = strategy.empty() ? cfg.strategies.front() : strategy_from_string(strategy);
  const CalibrationSet set = run_calibrate(cfg, model, s);
  const fs::path out(a.out);
  const fs::path file = out / calibration_file_name(set.config);
  save_calibration_set(file, set);
  write_file(file.string() + ".json", dump_json(calibration_manifest(set)));
  std::cout << "wrote " << set.size() << " records to " << file.string() << "\n";
  return 0;
}

int cmd_quantize(const CommonArgs& a, const std::string& checkpoint, const std::string& calib_path,
                 const std::string& strategy) {
  const ExperimentConfig cfg = resolve_config(a);
  require_file(checkpoint, "checkpoint");
  const Denoiser model = load_checkpoint(checkpoint);
  const CalibrationStrategy s = strategy.empty() ? cfg.strategies.front() : strategy_from_string(strategy);
  std::optional<CalibrationSet> calib;
  if (!calib_path.empty()) {
    require_file(calib_path, "calib");
    calib = load_calibration_set(calib_path);
  }
  const fs::path out(a.out);
  for (const auto& bits : cfg.bit_grid) {
    if (bits.acts_quantized() && !calib)
      throw ConfigError(bits.label() + " quantizes activations and needs a calibration set: run `pqd calibrate` "
                                       "and pass the result with --calib");
    const GridCell cell{bits, bits.weights_quantized() || bits.acts_quantized() ? std::optional(s) : std::nullopt};
    const QuantizedModel q = cell.strategy ? quantize_with_calibration(model, bits, s, calib ? &*calib : nullptr)
                                           : build_quantized_model(model, bits, WeightStrategy::kMinMax, std::nullopt);
    const fs::path file = out / model_file_name(cell);
    save_quantized_model(file, q, cell.strategy);
    write_file(file.string() + ".json", dump_json(quantize_manifest(q, cell.strategy)));
    std::cout << "wrote " << file.string() << "\n";
  }
  return 0;
}

int cmd_evaluate(const CommonArgs& a, const std::vector<std::string>& models) {
  const ExperimentConfig cfg = resolve_config(a);
  if (models.empty()) throw ConfigError("evaluate needs at least one --model");
  const NoiseSchedule sched = schedule_of(cfg);
  const Matrix reference = reference_data(cfg);
  std::vector<EvalReport> rows;
  Json reports = Json::array();
  for (const auto& path : models) {
    require_file(path, "model");
    const QuantizedModelFile f = load_any_model(path);
    EvalReport r = evaluate(f.model, sched, reference, cfg.eval, strategy_label(f.model, f.strategy));
    reports.push_back(report_json(r));
    rows.push_back(std::move(r));
  }
  const fs::path out(a.out);
  write_file(out / "comparison.csv", comparison_csv(rows));
  write_file(out / "reports.json", dump_json(reports));
  std::cout << comparison_csv(rows);
  return 0;
}

int cmd_reproduce(const CommonArgs& a, bool resume) {
  const ExperimentConfig cfg = resolve_config(a);
  ReproduceOptions opt;
  opt.resume = resume;
  opt.log = &std::cerr;
  const auto rows = reproduce(cfg, a.out, opt);
  std::cout << comparison_csv(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Time-aware post-training quantization for diffusion denoisers"};
  app.require_subcommand(1);

  CommonArgs train_args, calib_args, quant_args, eval_args, repro_args;
  std::string calib_ckpt, calib_strategy, quant_ckpt, quant_calib, quant_strategy;
  std::vector<std::string> eval_models;
  bool resume = false;

  auto* train = app.add_subcommand("train", "train the full-precision denoiser");
  add_common(train, train_args, false);
  auto* calibrate = app.add_subcommand("calibrate", "build a calibration set from full-precision rollouts");
  add_common(calibrate, calib_args, false);
  calibrate->add_option("--checkpoint", calib_ckpt, "trained checkpoint")->required();
  calibrate->add_option("--strategy", calib_strategy, "calibration strategy (default: first configured)");
  auto* quantize = app.add_subcommand("quantize", "quantize a checkpoint for every configured bit config");
  add_common(quantize, quant_args, true);
  quantize->add_option("--checkpoint", quant_ckpt, "trained checkpoint")->required();
  quantize->add_option("--calib", quant_calib, "calibration set file");
  quantize->add_option("--strategy", quant_strategy, "calibration strategy (default: first configured)");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score models against reference data");
  add_common(evaluate_cmd, eval_args, false);
  evaluate_cmd->add_option("--model", eval_models, "quantized model or checkpoint (repeatable)")->required();
  auto* repro = app.add_subcommand("reproduce", "run every stage over the configured grid");
  add_common(repro, repro_args, true);
  repro->add_flag("--resume", resume, "reuse stage outputs already in --out");
  auto* defaults = app.add_subcommand("defaults", "print the default config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*train) return cmd_train(train_args);
    if (*calibrate) return cmd_calibrate(calib_args, calib_ckpt, calib_strategy);
    if (*quantize) return cmd_quantize(quant_args, quant_ckpt, quant_calib, quant_strategy);
    if (*evaluate_cmd) return cmd_evaluate(eval_args, eval_models);
    if (*repro) return cmd_reproduce(repro_args, resume);
    if (*defaults) {
      std::cout << dump_json(ExperimentConfig{}.to_json());
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
