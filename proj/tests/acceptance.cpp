// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fail.

#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "pqd/pqd.hpp"

using namespace pqd;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Shared {
  fs::path run_a, run_b;
  std::vector<EvalReport> rows_a;
  double seconds_a = 0.0, seconds_b = 0.0;
  Denoiser model;
  ExperimentConfig cfg;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

// 1. Quantizer properties on randomized cases.
Outcome quantizer_properties() {
  Rng rng(2024);
  std::uniform_real_distribution<double> log_scale(-6.0, 3.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  const int cases_per_bits = 100000;
  const int tensor = 32;
  std::int64_t violations = 0, checks = 0;
  for (int b : {2, 4, 8}) {
    for (int c = 0; c < cases_per_bits; ++c) {
      const bool sign = coin(rng);
      const int qmin = sign ? -(1 << (b - 1)) : 0;
      const int qmax = sign ? (1 << (b - 1)) - 1 : (1 << b) - 1;
      std::uniform_int_distribution<int> zd(qmin, qmax);
      const auto qp = QuantParams::make(std::exp2(log_scale(rng)), zd(rng), b, sign);
      const double lo = qp.lowest(), hi = qp.highest(), span = hi - lo;
      std::vector<double> x(tensor);
      for (auto& v : x) v = lo - 0.25 * span + 1.5 * span * unit(rng);
      std::sort(x.begin(), x.end());
      const auto y = quant_dequant(std::span<const double>(x), qp);
      std::set<double> distinct;
      for (int i = 0; i < tensor; ++i) {
        const double xi = x[static_cast<std::size_t>(i)], yi = y[static_cast<std::size_t>(i)];
        distinct.insert(yi);
        if (xi >= lo && xi <= hi && std::abs(xi - yi) > 0.5 * qp.scale * (1.0 + 1e-12)) ++violations;
        if (fake_quant(yi, qp) != yi) ++violations;
        if (i > 0 && yi < y[static_cast<std::size_t>(i - 1)]) ++violations;
        if (yi < lo - 1e-12 * std::abs(lo) || yi > hi + 1e-12 * std::abs(hi)) ++violations;
        checks += 4;
      }
      if (distinct.size() > (std::size_t{1} << b)) ++violations;
      ++checks;
    }
  }
  return {violations == 0, std::to_string(3 * cases_per_bits) + " cases (" + std::to_string(checks) + " checks), " +
                               std::to_string(violations) + " violations"};
}

// Fine-mesh optimum over scale and every zero point.
double brute_force_l2(const std::vector<double>& x, int b, bool sign) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  const int qmin = sign ? -(1 << (b - 1)) : 0;
  const int qmax = sign ? (1 << (b - 1)) - 1 : (1 << b) - 1;
  double best = std::numeric_limits<double>::infinity();
  const int mesh = 20000;
  const double s_lo = m * 1e-4, s_hi = 2.0 * m;
  for (int k = 0; k <= mesh; ++k) {
    const double s = s_lo * std::pow(s_hi / s_lo, static_cast<double>(k) / mesh);
    for (int z = qmin; z <= qmax; ++z) best = std::min(best, l2_error(x, QuantParams::make(s, z, b, sign)));
  }
  return best;
}

// 2. L2 range search against brute force.
Outcome l2_oracle() {
  Rng rng(77);
  std::uniform_int_distribution<int> len(1, 8);
  std::uniform_real_distribution<double> centre(-3.0, 3.0), log_spread(-4.0, 1.5);
  std::bernoulli_distribution coin(0.5);
  int within = 0;
  double worst = 0.0;
  const int instances = 500;
  for (int i = 0; i < instances; ++i) {
    const int b = 2 + i % 2;
    const bool sign = coin(rng);
    const double c = centre(rng), spread = std::exp(log_spread(rng));
    std::vector<double> x(static_cast<std::size_t>(len(rng)));
    for (auto& v : x) v = c + spread * standard_normal(rng);
    double energy = 0.0;
    for (double v : x) energy += v * v;
    const double ours = l2_error(x, l2_optimal_params(x, b, sign, kDefaultGridSize));
    const double brute = brute_force_l2(x, b, sign);
    if (ours <= 1.05 * brute + 1e-12 * energy) ++within;
    if (brute > 1e-12 * energy) worst = std::max(worst, ours / brute);
  }
  return {within == instances, std::to_string(within) + "/" + std::to_string(instances) +
                                   " within 5% of brute force, worst ratio " + fmt(worst, 6)};
}

// Bin probabilities of the floored, clamped normal law by Simpson integration.
std::vector<double> simpson_bins(double mu, double sigma, int bins) {
  auto pdf = [&](double n) {
    const double z = (n - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * std::numbers::pi));
  };
  auto integrate = [&](double a, double b) {
    const int n = 4000;
    const double h = (b - a) / n;
    double s = pdf(a) + pdf(b);
    for (int i = 1; i < n; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
    return s * h / 3.0;
  };
  std::vector<double> p(static_cast<std::size_t>(bins));
  const double lo_edge = mu - 12 * sigma, hi_edge = mu + 12 * sigma;
  for (int k = 0; k < bins; ++k) {
    // Steps [k T / bins, (k+1) T / bins) cover normalized time [k/bins, (k+1)/bins).
    const double a = k == 0 ? lo_edge : static_cast<double>(k) / bins;
    const double b = k == bins - 1 ? hi_edge : static_cast<double>(k + 1) / bins;
    p[static_cast<std::size_t>(k)] = integrate(a, b);
  }
  return p;
}

// 3. Time-step law of the calibration set.
Outcome time_law(const Shared& s) {
  const auto t0 = std::chrono::steady_clock::now();
  CalibrationConfig cfg;  // N = 5120, mu = sigma = 0.4, T = 250
  const auto set = build_calibration_set(s.model, schedule_of(s.cfg), cfg);
  const int bins = 25;
  const auto h = timestep_histogram(set, bins);
  const auto p = simpson_bins(cfg.mu, cfg.sigma, bins);
  double chi2 = 0.0;
  for (int k = 0; k < bins; ++k) {
    const double e = cfg.num_samples * p[static_cast<std::size_t>(k)];
    chi2 += (h[static_cast<std::size_t>(k)] - e) * (h[static_cast<std::size_t>(k)] - e) / e;
  }
  const double pval = boost::math::cdf(boost::math::complement(boost::math::chi_squared(bins - 1), chi2));
  const double secs = seconds_since(t0);
  return {pval > 0.01 && secs < 120.0 && set.size() == 5120u,
          "chi2 " + fmt(chi2) + " on 24 dof, p = " + fmt(pval) + ", " + fmt(secs, 3) + " s"};
}

// 4. Last hidden layer range varies over a DDIM trajectory.
Outcome activation_range(const Shared& s) {
  const auto t0 = std::chrono::steady_clock::now();
  TrajectoryOptions o;
  o.num_samples = 512;
  Rng rng(4);
  const auto tr = sample_trajectory(s.model, schedule_of(s.cfg), o, rng);
  const auto rows = record_activation_stats(s.model, tr.states, last_hidden_layer(s.model));
  double lo = rows.front().range(), hi = lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.range());
    hi = std::max(hi, r.range());
  }
  const double secs = seconds_since(t0);
  return {lo > 0.0 && hi / lo >= 1.2 && secs < 30.0,
          "range " + fmt(lo) + " .. " + fmt(hi) + ", ratio " + fmt(hi / lo) + ", " + fmt(secs, 3) + " s"};
}

const EvalReport* find_row(const std::vector<EvalReport>& rows, const std::string& strategy, BitConfig b) {
  for (const auto& r : rows)
    if (r.strategy == strategy && r.bits == b) return &r;
  return nullptr;
}

// 5. Directional comparison on the ring benchmark.
Outcome directional(const Shared& s) {
  const auto* fp = find_row(s.rows_a, "full-precision", {32, 32});
  const auto* pqd8 = find_row(s.rows_a, "pqd-normal", {8, 8});
  const auto* naive8 = find_row(s.rows_a, "minmax-naive", {8, 8});
  const auto* pqd4 = find_row(s.rows_a, "pqd-normal", {4, 8});
  if (!fp || !pqd8 || !naive8 || !pqd4) return {false, "missing grid rows"};
  bool finite = true;
  for (const auto& r : s.rows_a) finite = finite && std::isfinite(r.sliced_wasserstein) && std::isfinite(r.mmd);
  const bool a = pqd8->sliced_wasserstein <= 1.25 * fp->sliced_wasserstein;
  const bool b = pqd8->sliced_wasserstein <= naive8->sliced_wasserstein;
  const bool c = pqd4->sliced_wasserstein > pqd8->sliced_wasserstein;
  return {a && b && c && finite && s.seconds_a < 600.0,
          "SW fp " + fmt(fp->sliced_wasserstein) + ", W8A8 pqd " + fmt(pqd8->sliced_wasserstein) + ", W8A8 naive " +
              fmt(naive8->sliced_wasserstein) + ", W4A8 pqd " + fmt(pqd4->sliced_wasserstein) + " (a " +
              (a ? "ok" : "no") + ", b " + (b ? "ok" : "no") + ", c " + (c ? "ok" : "no") + "), " +
              fmt(s.seconds_a, 3) + " s"};
}

// 6. Time-aware calibration beats pure-noise calibration.
Outcome time_aware_vs_last_step(const Shared& s) {
  const auto t0 = std::chrono::steady_clock::now();
  const NoiseSchedule sched = schedule_of(s.cfg);
  const EpsilonProbe probe = heldout_probe(s.cfg, sched);
  const Matrix fp = s.model.predict(probe.x_t, probe.steps, probe.conds);
  auto err = [&](const QuantizedModel& q) {
    return (q.predict(probe.x_t, probe.steps, probe.conds) - fp).squaredNorm() / static_cast<double>(fp.size());
  };
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    CalibrationConfig cfg = s.cfg.calibration;
    cfg.seed = seed;
    const auto normal = build_calibration_set(s.model, sched, config_for(cfg, CalibrationStrategy::kPqdNormal));
    const auto last = build_calibration_set(s.model, sched, config_for(cfg, CalibrationStrategy::kLastStepOnly));
    const double e_pqd = err(quantize_with_calibration(s.model, {32, 8}, CalibrationStrategy::kPqdNormal, &normal));
    const double e_last = err(quantize_with_calibration(s.model, {32, 8}, CalibrationStrategy::kLastStepOnly, &last));
    wins += e_pqd < e_last;
    detail += "seed " + std::to_string(seed) + ": " + fmt(e_pqd) + " vs " + fmt(e_last) + "; ";
  }
  const double secs = seconds_since(t0);
  return {wins >= 2 && secs < 300.0, detail + std::to_string(wins) + "/3 wins, " + fmt(secs, 3) + " s"};
}

// 7. Exact cost ratios.
Outcome cost_ratios(const Shared& s) {
  auto model_with = [&](BitConfig b) {
    std::vector<std::vector<QuantParams>> wp;
    if (b.weights_quantized())
      for (const auto& L : s.model.layers)
        wp.emplace_back(static_cast<std::size_t>(L.out_features()), QuantParams::make(1.0, 0, b.weight_bits, true));
    std::vector<std::optional<QuantParams>> ap(static_cast<std::size_t>(s.model.num_layers()));
    if (b.acts_quantized())
      for (auto& a : ap) a = QuantParams::make(1.0, 0, b.act_bits, false);
    return assemble_quantized_model(s.model, b, WeightStrategy::kMinMax, wp, ap);
  };
  const auto w32 = model_with({32, 32}), w8 = model_with({8, 8}), w4 = model_with({4, 8});
  const auto t0 = std::chrono::steady_clock::now();
  const auto s32 = weight_term_bits(w32), s8 = weight_term_bits(w8), s4 = weight_term_bits(w4);
  const auto b32 = bops_per_step(w32), b8 = bops_per_step(w8), b4 = bops_per_step(w4);
  const double secs = seconds_since(t0);
  const bool ok = s32 == 8 * s4 && s8 == 2 * s4 && b32 == 16 * b8 && b8 == 2 * b4 && secs < 1.0;
  return {ok, "weight bits " + std::to_string(s32) + ":" + std::to_string(s8) + ":" + std::to_string(s4) + ", BOPs " +
                  std::to_string(b32) + ":" + std::to_string(b8) + ":" + std::to_string(b4)};
}

// 8. Reproduce is byte-deterministic.
Outcome determinism(const Shared& s) {
  const std::string a = read_file(s.run_a / "comparison.csv");
  const std::string b = read_file(s.run_b / "comparison.csv");
  return {a == b && s.seconds_b < 600.0, std::string(a == b ? "identical" : "different") + " comparison CSVs (" +
                                             std::to_string(a.size()) + " bytes), runs " + fmt(s.seconds_a, 3) +
                                             " s and " + fmt(s.seconds_b, 3) + " s"};
}

// 9. Conditional pairs share x and t bitwise.
Outcome conditional_pairing(const Shared& s) {
  ExperimentConfig cfg = s.cfg;
  cfg.model.num_classes = cfg.data.mixture.num_components;
  cfg.train.num_iterations = 300;
  const Denoiser cond = run_train(cfg).model;
  const auto t0 = std::chrono::steady_clock::now();
  const auto conditions = calibration_conditions(cond);
  const auto set = build_calibration_set(cond, schedule_of(cfg), cfg.calibration, conditions);
  const std::size_t N = static_cast<std::size_t>(cfg.calibration.num_samples);
  std::size_t bad = set.size() == 2 * N ? 0 : 1;
  for (std::size_t i = 0; i + 1 < set.size(); i += 2) {
    const auto& a = set.samples[i];
    const auto& b = set.samples[i + 1];
    const bool same_x = a.x.size() == b.x.size() &&
                        std::memcmp(a.x.data(), b.x.data(), sizeof(double) * static_cast<std::size_t>(a.x.size())) == 0;
    if (!same_x || a.t != b.t || a.condition != conditions[(i / 2) % conditions.size()] ||
        b.condition != kUnconditional)
      ++bad;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 10.0, std::to_string(set.size()) + " records for N = " + std::to_string(N) + ", " +
                                       std::to_string(bad) + " bad pairs, " + fmt(secs, 3) + " s"};
}

}  // namespace

int main() {
  Shared s;
  s.cfg = ExperimentConfig{};
  const fs::path root = fs::temp_directory_path() / "pqd_acceptance";
  fs::remove_all(root);
  s.run_a = root / "a";
  s.run_b = root / "b";

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"quantizer properties", [] { return quantizer_properties(); }},
      {"l2 range oracle", [] { return l2_oracle(); }},
      {"calibration time law", [&] { return time_law(s); }},
      {"activation range varies over t", [&] { return activation_range(s); }},
      {"directional SW ordering", [&] { return directional(s); }},
      {"time-aware vs last-step", [&] { return time_aware_vs_last_step(s); }},
      {"cost ratios", [&] { return cost_ratios(s); }},
      {"reproduce determinism", [&] { return determinism(s); }},
      {"conditional pairing", [&] { return conditional_pairing(s); }},
  };

  std::string setup_error;
  try {
    auto t0 = std::chrono::steady_clock::now();
    s.rows_a = reproduce(s.cfg, s.run_a);
    s.seconds_a = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    reproduce(s.cfg, s.run_b);
    s.seconds_b = seconds_since(t0);
    s.model = load_checkpoint(s.run_a / "checkpoint.dqckpt");
  } catch (const std::exception& e) {
    setup_error = e.what();
  }

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const bool needs_runs = i >= 2;
    if (needs_runs && !setup_error.empty()) {
      o = {false, "reproduce failed: " + setup_error};
    } else {
      try {
        o = criteria[i].second();
      } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
      }
    }
    failed += !o.pass;
    std::cout << "AC" << i + 1 << " " << (o.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  fs::remove_all(root);
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
