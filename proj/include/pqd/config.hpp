// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration as a single JSON document. Every field has a
// default; unknown keys and out-of-domain values are rejected with the
// offending field path.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pqd/calibration.hpp"
#include "pqd/denoiser.hpp"
#include "pqd/metrics.hpp"
#include "pqd/quantizer.hpp"
#include "pqd/toy_data.hpp"

namespace pqd {

using Json = nlohmann::ordered_json;

struct ScheduleConfig {
  int num_steps = 250;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct DataConfig {
  MixtureSpec mixture;
  int num_train = 8192;
  int num_reference = 2000;
  int num_probe = 2048;
  std::uint64_t train_seed = 11;
  std::uint64_t reference_seed = 12;
  std::uint64_t probe_seed = 13;
  /// Optional CSV of reference points; generated from the mixture when empty.
  std::string reference_path;
};

struct ExperimentConfig {
  ScheduleConfig schedule;
  DenoiserShape model;
  std::uint64_t init_seed = 0;
  DataConfig data;
  TrainConfig train{0.3, 256, 6000, 0, 0.2};
  CalibrationConfig calibration;
  std::vector<BitConfig> bit_grid{{32, 32}, {4, 32}, {8, 8}, {4, 8}};
  std::vector<CalibrationStrategy> strategies{CalibrationStrategy::kPqdNormal, CalibrationStrategy::kMinMaxNaive};
  EvalParams eval;

  void validate() const;
  Json to_json() const;
  static ExperimentConfig from_json(const Json& j);
};

namespace detail {

class JsonReader {
 public:
  JsonReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_or_root() + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + " has the wrong type");
    }
  }

  JsonReader child(const char* key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    return JsonReader(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  bool has(const char* key) const { return j_.contains(key); }
  const Json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown field " + field(k));
  }

 private:
  std::string path_or_root() const { return path_.empty() ? "config" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& f, const std::string& m) { throw ConfigError(f + " " + m); };
  if (schedule.num_steps < 1) fail("schedule.num_steps", "must be >= 1");
  if (!(schedule.beta_start > 0.0)) fail("schedule.beta_start", "must be > 0");
  if (!(schedule.beta_end >= schedule.beta_start)) fail("schedule.beta_end", "must be >= schedule.beta_start");
  if (!(schedule.beta_end < 1.0)) fail("schedule.beta_end", "must be < 1");
  if (model.input_dim != 2) fail("model.input_dim", "must be 2 for the ring-mixture data");
  if (model.time_embed_dim < 2 || model.time_embed_dim % 2) fail("model.time_embed_dim", "must be even and >= 2");
  if (model.num_classes < 0) fail("model.num_classes", "must be >= 0");
  if (model.num_classes > 0 && model.num_classes != data.mixture.num_components)
    fail("model.num_classes", "must be 0 or equal data.num_components");
  if (model.class_embed_dim < 1) fail("model.class_embed_dim", "must be >= 1");
  if (model.hidden_width < 1) fail("model.hidden_width", "must be >= 1");
  if (model.hidden_layers < 0) fail("model.hidden_layers", "must be >= 0");
  if (data.mixture.num_components < 1) fail("data.num_components", "must be >= 1");
  if (!(data.mixture.radius >= 0.0)) fail("data.radius", "must be >= 0");
  if (!(data.mixture.stddev > 0.0)) fail("data.stddev", "must be > 0");
  if (data.num_train < 1) fail("data.num_train", "must be >= 1");
  if (data.num_reference < 2) fail("data.num_reference", "must be >= 2");
  if (data.num_probe < 1) fail("data.num_probe", "must be >= 1");
  train.validate();
  calibration.validate();
  if (calibration.num_steps != schedule.num_steps) fail("calibration.num_steps", "must equal schedule.num_steps");
  if (bit_grid.empty()) fail("bit_grid", "must be nonempty");
  for (std::size_t i = 0; i < bit_grid.size(); ++i) {
    try {
      bit_grid[i].validate();
    } catch (const ConfigError& e) {
      fail("bit_grid[" + std::to_string(i) + "]", e.what());
    }
  }
  if (strategies.empty()) fail("strategies", "must be nonempty");
  if (eval.num_samples < 2) fail("eval.num_samples", "must be >= 2");
  if (eval.n_projections < 1) fail("eval.n_projections", "must be >= 1");
  if (eval.num_inference_steps < 1 || eval.num_inference_steps > schedule.num_steps)
    fail("eval.num_inference_steps", "must lie in [1, schedule.num_steps]");
}

inline Json ExperimentConfig::to_json() const {
  Json j;
  j["schedule"] = {{"num_steps", schedule.num_steps}, {"beta_start", schedule.beta_start}, {"beta_end", schedule.beta_end}};
  j["model"] = {{"input_dim", model.input_dim},         {"time_embed_dim", model.time_embed_dim},
                {"num_classes", model.num_classes},     {"class_embed_dim", model.class_embed_dim},
                {"hidden_width", model.hidden_width},   {"hidden_layers", model.hidden_layers},
                {"init_seed", init_seed}};
  j["data"] = {{"num_components", data.mixture.num_components},
               {"radius", data.mixture.radius},
               {"stddev", data.mixture.stddev},
               {"num_train", data.num_train},
               {"num_reference", data.num_reference},
               {"num_probe", data.num_probe},
               {"train_seed", data.train_seed},
               {"reference_seed", data.reference_seed},
               {"probe_seed", data.probe_seed},
               {"reference_path", data.reference_path}};
  j["train"] = {{"learning_rate", train.learning_rate},
                {"batch_size", train.batch_size},
                {"num_iterations", train.num_iterations},
                {"seed", train.seed},
                {"label_drop_prob", train.label_drop_prob}};
  j["calibration"] = {{"num_samples", calibration.num_samples},
                      {"mu", calibration.mu},
                      {"sigma", calibration.sigma},
                      {"num_steps", calibration.num_steps},
                      {"sampler", to_string(calibration.sampler)},
                      {"num_inference_steps", calibration.num_inference_steps},
                      {"seed", calibration.seed},
                      {"drop_prob", calibration.drop_prob},
                      {"grid_size", calibration.grid_size}};
  Json grid = Json::array();
  for (const auto& b : bit_grid) grid.push_back(b.label());
  j["bit_grid"] = grid;
  Json strat = Json::array();
  for (auto s : strategies) strat.push_back(to_string(s));
  j["strategies"] = strat;
  j["eval"] = {{"num_samples", eval.num_samples},
               {"n_projections", eval.n_projections},
               {"num_inference_steps", eval.num_inference_steps},
               {"seed", eval.seed},
               {"mmd_bandwidth", eval.mmd_bandwidth}};
  return j;
}

inline ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  detail::JsonReader root(j, "");
  {
    auto s = root.child("schedule");
    s.read("num_steps", c.schedule.num_steps);
    s.read("beta_start", c.schedule.beta_start);
    s.read("beta_end", c.schedule.beta_end);
    s.finish();
  }
  {
    auto m = root.child("model");
    m.read("input_dim", c.model.input_dim);
    m.read("time_embed_dim", c.model.time_embed_dim);
    m.read("num_classes", c.model.num_classes);
    m.read("class_embed_dim", c.model.class_embed_dim);
    m.read("hidden_width", c.model.hidden_width);
    m.read("hidden_layers", c.model.hidden_layers);
    m.read("init_seed", c.init_seed);
    m.finish();
  }
  {
    auto d = root.child("data");
    d.read("num_components", c.data.mixture.num_components);
    d.read("radius", c.data.mixture.radius);
    d.read("stddev", c.data.mixture.stddev);
    d.read("num_train", c.data.num_train);
    d.read("num_reference", c.data.num_reference);
    d.read("num_probe", c.data.num_probe);
    d.read("train_seed", c.data.train_seed);
    d.read("reference_seed", c.data.reference_seed);
    d.read("probe_seed", c.data.probe_seed);
    d.read("reference_path", c.data.reference_path);
    d.finish();
  }
  {
    auto t = root.child("train");
    t.read("learning_rate", c.train.learning_rate);
    t.read("batch_size", c.train.batch_size);
    t.read("num_iterations", c.train.num_iterations);
    t.read("seed", c.train.seed);
    t.read("label_drop_prob", c.train.label_drop_prob);
    t.finish();
  }
  {
    auto k = root.child("calibration");
    k.read("num_samples", c.calibration.num_samples);
    k.read("mu", c.calibration.mu);
    k.read("sigma", c.calibration.sigma);
    bool steps_given = k.has("num_steps");
    k.read("num_steps", c.calibration.num_steps);
    if (!steps_given) c.calibration.num_steps = c.schedule.num_steps;
    std::string sampler = to_string(c.calibration.sampler);
    k.read("sampler", sampler);
    try {
      c.calibration.sampler = sampler_from_string(sampler);
    } catch (const ConfigError& e) {
      throw ConfigError("calibration.sampler: " + std::string(e.what()));
    }
    bool inference_given = k.has("num_inference_steps");
    k.read("num_inference_steps", c.calibration.num_inference_steps);
    if (!inference_given) c.calibration.num_inference_steps = std::min(c.calibration.num_inference_steps, c.schedule.num_steps);
    k.read("seed", c.calibration.seed);
    k.read("drop_prob", c.calibration.drop_prob);
    k.read("grid_size", c.calibration.grid_size);
    k.finish();
  }
  if (root.has("bit_grid")) {
    const Json& g = root.at("bit_grid");
    if (!g.is_array()) throw ConfigError("bit_grid must be an array of \"WxAy\" strings");
    c.bit_grid.clear();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g[i].is_string()) throw ConfigError("bit_grid[" + std::to_string(i) + "] must be a string");
      try {
        c.bit_grid.push_back(BitConfig::parse(g[i].get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError("bit_grid[" + std::to_string(i) + "]: " + e.what());
      }
    }
  }
  if (root.has("strategies")) {
    const Json& g = root.at("strategies");
    if (!g.is_array()) throw ConfigError("strategies must be an array of strings");
    c.strategies.clear();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g[i].is_string()) throw ConfigError("strategies[" + std::to_string(i) + "] must be a string");
      try {
        c.strategies.push_back(strategy_from_string(g[i].get<std::string>()));
      } catch (const ConfigError& e) {
        throw ConfigError("strategies[" + std::to_string(i) + "]: " + e.what());
      }
    }
  }
  {
    auto e = root.child("eval");
    e.read("num_samples", c.eval.num_samples);
    e.read("n_projections", c.eval.n_projections);
    bool inference_given = e.has("num_inference_steps");
    e.read("num_inference_steps", c.eval.num_inference_steps);
    if (!inference_given) c.eval.num_inference_steps = std::min(c.eval.num_inference_steps, c.schedule.num_steps);
    e.read("seed", c.eval.seed);
    e.read("mmd_bandwidth", c.eval.mmd_bandwidth);
    e.finish();
  }
  root.finish();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return ExperimentConfig::from_json(j);
}

}  // namespace pqd
