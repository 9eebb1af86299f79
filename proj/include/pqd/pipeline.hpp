// SPDX-License-Identifier: Apache-2.0
//
// The four experiment stages (train, calibrate, quantize, evaluate) and the
// orchestration that runs them over a bit-width grid.
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pqd/calibration.hpp"
#include "pqd/config.hpp"
#include "pqd/denoiser.hpp"
#include "pqd/diffusion.hpp"
#include "pqd/io.hpp"
#include "pqd/metrics.hpp"
#include "pqd/quantizer.hpp"
#include "pqd/toy_data.hpp"

namespace pqd {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kHistogramBins = 25;

inline NoiseSchedule schedule_of(const ExperimentConfig& cfg) {
  return make_linear_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

/// Training points; labels are kept only for conditional models.
inline SampleBatch training_data(const ExperimentConfig& cfg) {
  Rng rng(cfg.data.train_seed);
  SampleBatch d = sample_ring_mixture(cfg.data.num_train, cfg.data.mixture, rng);
  if (cfg.model.num_classes == 0) d.conditions.clear();
  return d;
}

inline Matrix reference_data(const ExperimentConfig& cfg) {
  if (!cfg.data.reference_path.empty()) {
    const std::filesystem::path p(cfg.data.reference_path);
    if (!std::filesystem::exists(p)) throw FormatError("reference data file not found: " + p.string());
    Matrix x = decode_points_csv(read_file(p), p.string());
    if (x.cols() != cfg.model.input_dim) throw FormatError(p.string() + ": reference width differs from model input dim");
    return x;
  }
  Rng rng(cfg.data.reference_seed);
  return sample_ring_mixture(cfg.data.num_reference, cfg.data.mixture, rng).data;
}

/// Held-out forward-diffused pairs at uniformly mixed time steps.
inline EpsilonProbe heldout_probe(const ExperimentConfig& cfg, const NoiseSchedule& sched) {
  Rng rng(cfg.data.probe_seed);
  SampleBatch held = sample_ring_mixture(cfg.data.num_probe, cfg.data.mixture, rng);
  held.conditions.clear();
  return make_epsilon_probe(held, sched, derive_seed(cfg.data.probe_seed, 1));
}

inline std::vector<ClassId> calibration_conditions(const Denoiser& m) {
  std::vector<ClassId> c;
  for (ClassId k = 0; k < m.num_classes; ++k) c.push_back(k);
  return c;
}

/// 64-bit FNV-1a, used to fingerprint configs in provenance records.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

// ---------------------------------------------------------------------------
// Stages

struct TrainOutcome {
  Denoiser model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

inline TrainOutcome run_train(const ExperimentConfig& cfg) {
  const NoiseSchedule sched = schedule_of(cfg);
  const EpsilonProbe probe = heldout_probe(cfg, sched);
  Denoiser init = initialize_denoiser(cfg.model, cfg.init_seed);
  TrainOutcome out;
  out.initial_loss = epsilon_loss(init, probe);
  out.model = train_denoiser(training_data(cfg), sched, cfg.train, std::move(init)).model;
  out.final_loss = epsilon_loss(out.model, probe);
  return out;
}

inline Json train_log(const ExperimentConfig& cfg, const TrainOutcome& t) {
  return Json{{"initial_heldout_loss", t.initial_loss},
              {"final_heldout_loss", t.final_loss},
              {"num_iterations", cfg.train.num_iterations},
              {"learning_rate", cfg.train.learning_rate},
              {"batch_size", cfg.train.batch_size},
              {"seed", cfg.train.seed},
              {"init_seed", cfg.init_seed}};
}

inline CalibrationSet run_calibrate(const ExperimentConfig& cfg, const Denoiser& model, CalibrationStrategy strategy) {
  return build_calibration_set(model, schedule_of(cfg), config_for(cfg.calibration, strategy),
                               calibration_conditions(model));
}

/// Time-step histogram with the expected counts of the configured law.
inline Json calibration_manifest(const CalibrationSet& set) {
  const auto& c = set.config;
  const auto hist = timestep_histogram(set, kHistogramBins);
  std::vector<double> expected(kHistogramBins, 0.0);
  const double n = static_cast<double>(c.num_samples);
  if (c.law == TimeLaw::kNormal) {
    const auto pmf = timestep_pmf(c.mu, c.sigma, c.num_steps);
    for (int k = 0; k < c.num_steps; ++k)
      expected[static_cast<std::size_t>(static_cast<std::int64_t>(k) * kHistogramBins / c.num_steps)] +=
          n * pmf[static_cast<std::size_t>(k)];
  } else if (c.law == TimeLaw::kUniform) {
    for (int k = 0; k < c.num_steps; ++k)
      expected[static_cast<std::size_t>(static_cast<std::int64_t>(k) * kHistogramBins / c.num_steps)] += n / c.num_steps;
  } else {
    expected.back() = n;
  }
  double chi2 = 0.0;
  for (std::size_t b = 0; b < hist.size(); ++b)
    if (expected[b] > 0.0) chi2 += (hist[b] - expected[b]) * (hist[b] - expected[b]) / expected[b];
  return Json{{"records", set.samples.size()},
              {"num_samples", c.num_samples},
              {"conditional", set.conditional},
              {"time_law", to_string(c.law)},
              {"mu", c.mu},
              {"sigma", c.sigma},
              {"num_steps", c.num_steps},
              {"sampler", to_string(c.sampler)},
              {"num_inference_steps", c.num_inference_steps},
              {"seed", c.seed},
              {"histogram_bins", kHistogramBins},
              {"histogram", hist},
              {"expected_counts", expected},
              {"chi_square", chi2}};
}

inline Json quantize_manifest(const QuantizedModel& q, std::optional<CalibrationStrategy> strategy) {
  Json layers = Json::array();
  for (int l = 0; l < q.num_layers(); ++l) {
    Json row;
    row["layer"] = l;
    const auto lu = static_cast<std::size_t>(l);
    if (q.bits.weights_quantized()) {
      double lo = q.weight_params[lu].front().scale, hi = lo;
      for (const auto& p : q.weight_params[lu]) {
        lo = std::min(lo, p.scale);
        hi = std::max(hi, p.scale);
      }
      row["weight_scale_min"] = lo;
      row["weight_scale_max"] = hi;
    }
    if (q.act_params[lu]) {
      row["act_scale"] = q.act_params[lu]->scale;
      row["act_zero_point"] = q.act_params[lu]->zero_point;
    }
    layers.push_back(row);
  }
  return Json{{"bit_config", q.bits.label()},
              {"weight_bits", q.bits.weight_bits},
              {"act_bits", q.bits.act_bits},
              {"strategy", strategy ? to_string(*strategy) : "none"},
              {"size_bits", model_size_bits(q)},
              {"bops_per_step", bops_per_step(q)},
              {"layers", layers}};
}

inline std::string strategy_label(const QuantizedModel& q, std::optional<CalibrationStrategy> s) {
  if (!q.bits.weights_quantized() && !q.bits.acts_quantized()) return "full-precision";
  return s ? to_string(*s) : "unspecified";
}

inline Json report_json(const EvalReport& r) {
  return Json{{"strategy", r.strategy},
              {"bit_config", r.bits.label()},
              {"weight_bits", r.bits.weight_bits},
              {"act_bits", r.bits.act_bits},
              {"size_bits", r.size_bits},
              {"bops_per_step", r.bops_per_step},
              {"sliced_wasserstein", r.sliced_wasserstein},
              {"mmd", r.mmd},
              {"mmd_bandwidth", r.mmd_bandwidth},
              {"num_samples", r.num_samples},
              {"seed", r.seed}};
}

inline constexpr const char* kComparisonHeader = "strategy,W,A,size_bits,bops,sw,mmd,seed";

inline std::string comparison_csv(const std::vector<EvalReport>& rows) {
  std::ostringstream ss;
  ss << kComparisonHeader << '\n';
  for (const auto& r : rows)
    ss << r.strategy << ',' << r.bits.weight_bits << ',' << r.bits.act_bits << ',' << r.size_bits << ','
       << r.bops_per_step << ',' << format_double(r.sliced_wasserstein) << ',' << format_double(r.mmd) << ','
       << r.seed << '\n';
  return ss.str();
}

inline std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------------------
// Full grid

struct ReproduceOptions {
  /// Reuse stage outputs already present in the directory instead of
  /// requiring it to be empty.
  bool resume = false;
  std::ostream* log = nullptr;
};

struct GridCell {
  BitConfig bits;
  std::optional<CalibrationStrategy> strategy;  // empty for W32A32
};

/// Rows of the comparison table in configured order. W32A32 appears once.
inline std::vector<GridCell> grid_cells(const ExperimentConfig& cfg) {
  std::vector<GridCell> cells;
  for (const auto& b : cfg.bit_grid) {
    if (!b.weights_quantized() && !b.acts_quantized()) {
      cells.push_back({b, std::nullopt});
      continue;
    }
    for (auto s : cfg.strategies) cells.push_back({b, s});
  }
  return cells;
}

inline std::string calibration_file_name(const CalibrationConfig& c) { return "calib_" + to_string(c.law) + ".dqcal"; }

inline std::string model_file_name(const GridCell& c) {
  return (c.strategy ? to_string(*c.strategy) : std::string("full-precision")) + "_" + c.bits.label() + ".dqq";
}

/// train -> calibrate -> quantize over the grid -> evaluate. Returns the
/// comparison rows; every intermediate artifact is written under `out`.
inline std::vector<EvalReport> reproduce(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                         const ReproduceOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (!opt.resume && fs::exists(out) && !fs::is_empty(out))
    throw ConfigError("output directory " + out.string() + " is not empty (use --resume to reuse stage outputs)");
  fs::create_directories(out);
  auto log = [&](const std::string& msg) {
    if (opt.log) *opt.log << msg << std::endl;
  };
  write_file(out / "config.json", dump_json(cfg.to_json()));
  const NoiseSchedule sched = schedule_of(cfg);

  const fs::path ckpt_path = out / "checkpoint.dqckpt";
  Denoiser model = with_stage("train", [&] {
    if (opt.resume && fs::exists(ckpt_path)) return load_checkpoint(ckpt_path);
    log("[train] " + std::to_string(cfg.train.num_iterations) + " iterations");
    TrainOutcome t = run_train(cfg);
    save_checkpoint(ckpt_path, t.model);
    write_file(out / "train_log.json", dump_json(train_log(cfg, t)));
    return t.model;
  });

  const Matrix reference = with_stage("reference data", [&] { return reference_data(cfg); });
  write_file(out / "reference.csv", encode_points_csv(reference));

  std::map<std::string, CalibrationSet> calib_sets;
  auto calibration_for = [&](CalibrationStrategy s) -> const CalibrationSet& {
    const CalibrationConfig cc = config_for(cfg.calibration, s);
    const std::string name = calibration_file_name(cc);
    if (auto it = calib_sets.find(name); it != calib_sets.end()) return it->second;
    const fs::path p = out / name;
    CalibrationSet set = with_stage("calibrate", [&] {
      if (opt.resume && fs::exists(p)) return load_calibration_set(p);
      log("[calibrate] " + name);
      CalibrationSet built = run_calibrate(cfg, model, s);
      save_calibration_set(p, built);
      write_file(out / (name + ".json"), dump_json(calibration_manifest(built)));
      return built;
    });
    return calib_sets.emplace(name, std::move(set)).first->second;
  };

  std::vector<EvalReport> rows;
  Json reports = Json::array();
  for (const auto& cell : grid_cells(cfg)) {
    const fs::path mp = out / "models" / model_file_name(cell);
    QuantizedModel q = with_stage("quantize " + cell.bits.label(), [&] {
      if (opt.resume && fs::exists(mp)) return load_quantized_model(mp).model;
      log("[quantize] " + model_file_name(cell));
      const CalibrationSet* calib = cell.bits.acts_quantized() ? &calibration_for(*cell.strategy) : nullptr;
      QuantizedModel built = cell.strategy ? quantize_with_calibration(model, cell.bits, *cell.strategy, calib)
                                           : build_quantized_model(model, cell.bits, WeightStrategy::kMinMax, std::nullopt);
      save_quantized_model(mp, built, cell.strategy);
      write_file(mp.string() + ".json", dump_json(quantize_manifest(built, cell.strategy)));
      return built;
    });
    log("[evaluate] " + model_file_name(cell));
    EvalReport r = with_stage("evaluate " + cell.bits.label(),
                              [&] { return evaluate(q, sched, reference, cfg.eval, strategy_label(q, cell.strategy)); });
    reports.push_back(report_json(r));
    rows.push_back(std::move(r));
  }
  write_file(out / "comparison.csv", comparison_csv(rows));
  write_file(out / "reports.json", dump_json(reports));

  const std::string cfg_text = cfg.to_json().dump();
  Json prov{{"tool", "pqd"},
            {"tool_version", kToolVersion},
            {"config_fnv1a64", hex64(fnv1a(cfg_text))},
            {"seeds",
             {{"init", cfg.init_seed},
              {"train", cfg.train.seed},
              {"train_data", cfg.data.train_seed},
              {"reference_data", cfg.data.reference_seed},
              {"probe_data", cfg.data.probe_seed},
              {"calibration", cfg.calibration.seed},
              {"eval", cfg.eval.seed}}},
            {"stages", {"train", "calibrate", "quantize", "evaluate"}},
            {"rows", rows.size()}};
  write_file(out / "provenance.json", dump_json(prov));
  return rows;
}

}  // namespace pqd
