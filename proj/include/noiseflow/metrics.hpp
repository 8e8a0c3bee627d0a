#pragma once

#include "noiseflow/checkpoint.hpp"
#include "noiseflow/datagen.hpp"
#include "noiseflow/flow.hpp"
#include "noiseflow/simulator.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nf {

inline constexpr double kWmapeThresholdDb = 30.0;

class EmptyRegionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using RegionSelect = Grid<bool>;

RegionSelect region_select(const RegionMasks& masks, Region r);

double mae(const Grid<float>& y, const Grid<float>& yhat, const RegionSelect& region);
double mae(const DbMap& y, const DbMap& yhat, const RegionMasks& masks, Region r);

/// Percent; only region pixels with y >= threshold enter either sum.
double wmape(const Grid<float>& y, const Grid<float>& yhat, const RegionSelect& region,
             double threshold_db = kWmapeThresholdDb);
double wmape(const DbMap& y, const DbMap& yhat, const RegionMasks& masks, Region r,
             double threshold_db = kWmapeThresholdDb);

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1 0.01, K2 0.03, L 1).
double ssim(const NormMap& y, const NormMap& yhat);

struct Interval {
  double point = 0, lo = 0, hi = 0;
};

/// Percentile bootstrap of the mean.
Interval bootstrap_ci(const std::vector<double>& values, double level = 0.95, int resamples = 10000,
                      std::uint64_t seed = 0);

struct RuntimeStats {
  double mean_ms = 0, median_ms = 0;
  int warmup = 0, reps = 0;
};

RuntimeStats bench_runtime(const std::function<void()>& fn, int warmup = 2, int reps = 5);

struct Environment {
  std::string cpu_model;
  int hardware_threads = 0;
  int threads_used = 1;
};

Environment current_environment(int threads_used);

struct RegionMetrics {
  std::size_t pixels = 0;
  std::size_t samples = 0;
  std::optional<Interval> mae;
  std::size_t wmape_samples = 0;
  std::optional<Interval> wmape;
};

struct MetricRow {
  std::string name;
  RegionMetrics los, nlos;
  Interval ssim;
};

struct ReferenceRuntime {
  double simulator_ms, model_ms;
};

ReferenceRuntime reference_runtime(Scenario s);

struct SpeedComparison {
  int layouts = 0;
  double simulator_median_ms = 0, model_median_ms = 0;
  double speedup = 0;
};

/// Per-layout median runtimes, summarized by the median over layouts.
SpeedComparison compare_runtime(const FlowModel<float>& model, const std::vector<LayoutMask>& layouts,
                                const ScenarioConfig& sc, double temperature, int warmup = 2, int reps = 5);

struct EvalReport {
  Scenario scenario = Scenario::Baseline;
  std::size_t samples = 0;
  double temperature = 0.7;
  std::uint64_t seed = 0;
  MetricRow model, mean_predictor;
  std::size_t clamp_pixels = 0, total_pixels = 0;
  std::optional<RuntimeStats> simulator_runtime, model_runtime;
  Environment environment;
};

/// Per-sample metrics of predictions against targets, with building pixels
/// of every prediction overwritten by kDbMin.
MetricRow score_predictions(const std::string& name, const std::vector<DataSample>& samples,
                            const std::vector<DbMap>& predictions, int bootstrap_resamples = 10000,
                            std::uint64_t seed = 0, int threads = 1);

/// Pixelwise mean of the targets in dB.
DbMap mean_map(const std::vector<DataSample>& samples);

struct EvalOptions {
  double temperature = 0.7;
  std::uint64_t seed = 0;
  int threads = 1;
  int bootstrap_resamples = 10000;
  bool benchmark = true;
  int bench_warmup = 2, bench_reps = 5;
  int reflection_order = 1;
};

EvalReport evaluate_testset(const FlowModel<float>& model, const std::string& dataset_dir, Scenario scenario,
                            const EvalOptions& opt);

json to_json(const EvalReport& r);
std::string format_table(const EvalReport& r);

}  // namespace nf
