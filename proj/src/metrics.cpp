#include "noiseflow/metrics.hpp"

#include "noiseflow/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace nf {

namespace {

void check_shapes(const Grid<float>& y, const Grid<float>& yhat, const RegionSelect& region) {
  if (y.rows() != yhat.rows() || y.cols() != yhat.cols() || y.rows() != region.rows() ||
      y.cols() != region.cols())
    throw std::invalid_argument("metric inputs must have equal shapes");
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

RegionSelect region_select(const RegionMasks& masks, Region r) { return masks.labels == r; }

double mae(const Grid<float>& y, const Grid<float>& yhat, const RegionSelect& region) {
  check_shapes(y, yhat, region);
  double sum = 0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (region(i)) {
      sum += std::abs(static_cast<double>(y(i)) - static_cast<double>(yhat(i)));
      ++n;
    }
  if (n == 0) throw EmptyRegionError("mae: empty region");
  return sum / static_cast<double>(n);
}

double mae(const DbMap& y, const DbMap& yhat, const RegionMasks& masks, Region r) {
  return mae(y.values, yhat.values, region_select(masks, r));
}

double wmape(const Grid<float>& y, const Grid<float>& yhat, const RegionSelect& region, double threshold_db) {
  check_shapes(y, yhat, region);
  double num = 0, den = 0;
  std::size_t n = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (region(i) && y(i) >= threshold_db) {
      num += std::abs(static_cast<double>(y(i)) - static_cast<double>(yhat(i)));
      den += std::abs(static_cast<double>(y(i)));
      ++n;
    }
  if (n == 0) throw EmptyRegionError("wmape: no region pixel at or above the threshold");
  return 100.0 * num / den;
}

double wmape(const DbMap& y, const DbMap& yhat, const RegionMasks& masks, Region r, double threshold_db) {
  return wmape(y.values, yhat.values, region_select(masks, r), threshold_db);
}

double ssim(const NormMap& y, const NormMap& yhat) {
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;
  const Eigen::Index h = y.values.rows(), w = y.values.cols();
  if (yhat.values.rows() != h || yhat.values.cols() != w) throw std::invalid_argument("ssim: shape mismatch");
  if (h < kWin || w < kWin) throw std::invalid_argument("ssim: maps must be at least 11x11");
  std::array<double, kWin> g{};
  for (int k = 0; k < kWin; ++k) g[k] = std::exp(-0.5 * (k - kWin / 2) * (k - kWin / 2) / (kSigma * kSigma));
  const double gs = std::accumulate(g.begin(), g.end(), 0.0);
  for (double& v : g) v /= gs;

  const Eigen::Index oh = h - kWin + 1, ow = w - kWin + 1;
  auto filter = [&](const Grid<double>& img) {
    Grid<double> tmp = Grid<double>::Zero(h, ow);
    for (int k = 0; k < kWin; ++k) tmp += g[k] * img.middleCols(k, ow);
    Grid<double> out = Grid<double>::Zero(oh, ow);
    for (int k = 0; k < kWin; ++k) out += g[k] * tmp.middleRows(k, oh);
    return out;
  };
  const Grid<double>& a = y.values;
  const Grid<double>& b = yhat.values;
  const Grid<double> ma = filter(a), mb = filter(b);
  const Grid<double> ma2 = ma.square(), mb2 = mb.square(), mab = ma * mb;
  const Grid<double> va = filter(a * a) - ma2, vb = filter(b * b) - mb2, cab = filter(a * b) - mab;
  const Grid<double> s = ((2.0 * mab + kC1) * (2.0 * cab + kC2)) / ((ma2 + mb2 + kC1) * (va + vb + kC2));
  return s.mean();
}

Interval bootstrap_ci(const std::vector<double>& values, double level, int resamples, std::uint64_t seed) {
  if (values.size() < 2) throw std::invalid_argument("bootstrap_ci: need at least 2 values");
  if (!(level > 0 && level < 1) || resamples < 1) throw std::invalid_argument("bootstrap_ci: bad parameters");
  const std::size_t n = values.size();
  const double point = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(n);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<double> means(resamples);
  for (double& m : means) {
    double s = 0;
    for (std::size_t k = 0; k < n; ++k) s += values[pick(rng)];
    m = s / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double p) {
    const double pos = p * static_cast<double>(resamples - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const std::size_t j = std::min(i + 1, means.size() - 1);
    return means[i] + (pos - static_cast<double>(i)) * (means[j] - means[i]);
  };
  const double alpha = (1.0 - level) / 2.0;
  return {point, std::min(quantile(alpha), point), std::max(quantile(1.0 - alpha), point)};
}

RuntimeStats bench_runtime(const std::function<void()>& fn, int warmup, int reps) {
  if (warmup < 2 || reps < 5) throw std::invalid_argument("bench_runtime: need warmup >= 2 and reps >= 5");
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> ms(reps);
  for (double& t : ms) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    t = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return {std::accumulate(ms.begin(), ms.end(), 0.0) / reps, median_of(ms), warmup, reps};
}

Environment current_environment(int threads_used) {
  Environment e{"unknown", static_cast<int>(std::thread::hardware_concurrency()), threads_used};
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);)
    if (line.rfind("model name", 0) == 0) {
      const auto p = line.find(':');
      if (p != std::string::npos) e.cpu_model = line.substr(line.find_first_not_of(' ', p + 1));
      break;
    }
  return e;
}

ReferenceRuntime reference_runtime(Scenario s) {
  switch (s) {
    case Scenario::Baseline: return {204700.0, 101.70};
    case Scenario::Reflection: return {251000.0, 102.30};
    case Scenario::Diffraction: return {206000.0, 107.62};
  }
  return {0, 0};
}

SpeedComparison compare_runtime(const FlowModel<float>& model, const std::vector<LayoutMask>& layouts,
                                const ScenarioConfig& sc, double temperature, int warmup, int reps) {
  if (layouts.empty()) throw std::invalid_argument("compare_runtime: no layouts");
  std::vector<double> sim, mod;
  for (const auto& l : layouts) {
    sim.push_back(bench_runtime([&] { simulate(l, sc); }, warmup, reps).median_ms);
    mod.push_back(bench_runtime([&] { sample(l, model, temperature, 0); }, warmup, reps).median_ms);
  }
  SpeedComparison r;
  r.layouts = static_cast<int>(layouts.size());
  r.simulator_median_ms = median_of(sim);
  r.model_median_ms = median_of(mod);
  r.speedup = r.simulator_median_ms / r.model_median_ms;
  return r;
}

MetricRow score_predictions(const std::string& name, const std::vector<DataSample>& samples,
                            const std::vector<DbMap>& predictions, int bootstrap_resamples, std::uint64_t seed,
                            int threads) {
  if (samples.empty()) throw std::invalid_argument("score_predictions: no samples");
  if (samples.size() != predictions.size()) throw std::invalid_argument("score_predictions: count mismatch");
  struct PerSample {
    std::optional<double> mae[2], wmape[2];
    std::size_t pixels[2] = {0, 0};
    double ssim = 0;
  };
  std::vector<PerSample> per(samples.size());
  parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
    const auto& s = samples[i];
    const RegionMasks masks = build_region_masks(s.layout);
    DbMap pred = predictions[i];
    pred.values = (masks.labels == Region::Building).select(kDbMin, pred.values);
    const Region regions[2] = {Region::LoS, Region::NLoS};
    for (int k = 0; k < 2; ++k) {
      per[i].pixels[k] = masks.count(regions[k]);
      if (per[i].pixels[k] == 0) continue;
      per[i].mae[k] = mae(s.db, pred, masks, regions[k]);
      try {
        per[i].wmape[k] = wmape(s.db, pred, masks, regions[k]);
      } catch (const EmptyRegionError&) {
      }
    }
    per[i].ssim = ssim(normalize(s.db), normalize(pred));
  });

  auto interval = [&](const std::vector<double>& v) -> std::optional<Interval> {
    if (v.empty()) return std::nullopt;
    if (v.size() == 1) return Interval{v[0], v[0], v[0]};
    return bootstrap_ci(v, 0.95, bootstrap_resamples, seed);
  };
  MetricRow row{name, {}, {}, {}};
  RegionMetrics* out[2] = {&row.los, &row.nlos};
  for (int k = 0; k < 2; ++k) {
    std::vector<double> m, w;
    for (const auto& p : per) {
      out[k]->pixels += p.pixels[k];
      if (p.mae[k]) m.push_back(*p.mae[k]);
      if (p.wmape[k]) w.push_back(*p.wmape[k]);
    }
    out[k]->samples = m.size();
    out[k]->mae = interval(m);
    out[k]->wmape_samples = w.size();
    out[k]->wmape = interval(w);
  }
  std::vector<double> ss;
  for (const auto& p : per) ss.push_back(p.ssim);
  row.ssim = *interval(ss);
  return row;
}

DbMap mean_map(const std::vector<DataSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("mean_map: no samples");
  Grid<double> acc = Grid<double>::Zero(samples[0].db.height(), samples[0].db.width());
  for (const auto& s : samples) acc += s.db.values.cast<double>();
  return DbMap{(acc / static_cast<double>(samples.size())).cast<float>()};
}

EvalReport evaluate_testset(const FlowModel<float>& model, const std::string& dataset_dir, Scenario scenario,
                            const EvalOptions& opt) {
  const DatasetManifest manifest = load_manifest(dataset_dir);
  if (manifest.config.grid_size != model.config.input_size)
    throw std::invalid_argument("model input size " + std::to_string(model.config.input_size) +
                                " does not match dataset grid size " + std::to_string(manifest.config.grid_size));
  const auto test = load_split(dataset_dir, manifest, Split::Test, scenario);
  if (test.empty()) throw std::runtime_error("test split is empty");
  const auto train = load_split(dataset_dir, manifest, Split::Train, scenario);

  EvalReport r;
  r.scenario = scenario;
  r.samples = test.size();
  r.temperature = opt.temperature;
  r.seed = opt.seed;
  r.environment = current_environment(opt.threads);

  std::vector<DbMap> preds(test.size());
  std::vector<std::size_t> clamps(test.size());
  parallel_for(static_cast<int>(test.size()), opt.threads, [&](int i) {
    const SampleResult s = sample(test[i].layout, model, opt.temperature, opt.seed + static_cast<std::uint64_t>(i));
    Denormalized d = denormalize(s.map);
    clamps[i] = s.clamp_count + d.clamp_count;
    preds[i] = std::move(d.map);
  });
  for (std::size_t c : clamps) r.clamp_pixels += c;
  r.total_pixels = test.size() * static_cast<std::size_t>(model.config.input_size * model.config.input_size);
  r.model = score_predictions("Full Glow (local)", test, preds, opt.bootstrap_resamples, opt.seed, opt.threads);

  const DbMap mean = train.empty() ? mean_map(test) : mean_map(train);
  r.mean_predictor = score_predictions("Mean predictor", test, std::vector<DbMap>(test.size(), mean),
                                       opt.bootstrap_resamples, opt.seed, opt.threads);

  if (opt.benchmark) {
    ScenarioConfig sc;
    sc.scenario = scenario;
    sc.reflection_order = opt.reflection_order;
    const LayoutMask& layout = test[0].layout;
    r.simulator_runtime = bench_runtime([&] { simulate(layout, sc); }, opt.bench_warmup, opt.bench_reps);
    r.model_runtime =
        bench_runtime([&] { sample(layout, model, opt.temperature, opt.seed); }, opt.bench_warmup, opt.bench_reps);
  }
  return r;
}

namespace {

json interval_json(const std::optional<Interval>& v) {
  if (!v) return nullptr;
  return {{"point", v->point}, {"lo", v->lo}, {"hi", v->hi}};
}

json region_json(const RegionMetrics& m) {
  return {{"pixels", m.pixels},
          {"samples", m.samples},
          {"mae_db", interval_json(m.mae)},
          {"wmape_pct", interval_json(m.wmape)},
          {"wmape_samples", m.wmape_samples}};
}

json row_json(const MetricRow& r) {
  return {{"name", r.name}, {"los", region_json(r.los)}, {"nlos", region_json(r.nlos)},
          {"ssim", interval_json(r.ssim)}};
}

json runtime_json(const std::optional<RuntimeStats>& r) {
  if (!r) return nullptr;
  return {{"mean_ms", r->mean_ms}, {"median_ms", r->median_ms}, {"warmup", r->warmup}, {"reps", r->reps}};
}

std::string fmt(double v, int prec = 2) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

std::string fmt(const std::optional<Interval>& v, int prec = 2) {
  if (!v) return "n/a";
  return fmt(v->point, prec) + " [" + fmt(v->lo, prec) + ", " + fmt(v->hi, prec) + "]";
}

}  // namespace

json to_json(const EvalReport& r) {
  const ReferenceRuntime ref = reference_runtime(r.scenario);
  json j = {{"scenario", to_string(r.scenario)},
            {"samples", r.samples},
            {"temperature", r.temperature},
            {"seed", r.seed},
            {"wmape_threshold_db", kWmapeThresholdDb},
            {"wmape_rule", "ground-truth filter: only pixels with y >= threshold enter the sums"},
            {"ci_level", 0.95},
            {"model", row_json(r.model)},
            {"mean_predictor", row_json(r.mean_predictor)},
            {"clamp_pixels", r.clamp_pixels},
            {"total_pixels", r.total_pixels},
            {"simulator_runtime", runtime_json(r.simulator_runtime)},
            {"model_runtime", runtime_json(r.model_runtime)},
            {"environment",
             {{"cpu_model", r.environment.cpu_model},
              {"hardware_threads", r.environment.hardware_threads},
              {"threads_used", r.environment.threads_used}}},
            {"reference_runtime_ms", {{"simulator", ref.simulator_ms}, {"model", ref.model_ms}}}};
  j["speedup"] = r.simulator_runtime && r.model_runtime
                     ? json(r.simulator_runtime->median_ms / r.model_runtime->median_ms)
                     : json(nullptr);
  return j;
}

std::string format_table(const EvalReport& r) {
  std::ostringstream os;
  os << "Scenario: " << to_string(r.scenario) << "   test samples: " << r.samples << "   tau: " << fmt(r.temperature)
     << "   95% bootstrap CIs in brackets\n";
  os << std::left << std::setw(20) << "Model" << std::setw(14) << "Metric" << std::setw(30) << "LoS" << "NLoS\n";
  for (const MetricRow* row : {&r.model, &r.mean_predictor}) {
    os << std::setw(20) << row->name << std::setw(14) << "MAE (dB)" << std::setw(30) << fmt(row->los.mae)
       << fmt(row->nlos.mae) << "\n";
    os << std::setw(20) << "" << std::setw(14) << "wMAPE (%)" << std::setw(30) << fmt(row->los.wmape)
       << fmt(row->nlos.wmape) << "\n";
    os << std::setw(20) << "" << std::setw(14) << "SSIM" << fmt(std::optional<Interval>(row->ssim), 3) << "\n";
  }
  os << "wMAPE uses a 30 dB ground-truth filter; n/a means no pixel passed it.\n";
  os << "Pixels: LoS " << r.model.los.pixels << ", NLoS " << r.model.nlos.pixels << "; clamped model pixels "
     << r.clamp_pixels << " of " << r.total_pixels << "\n";
  if (r.simulator_runtime && r.model_runtime) {
    const ReferenceRuntime ref = reference_runtime(r.scenario);
    os << "Runtime median (ms): simulator " << fmt(r.simulator_runtime->median_ms, 3) << ", model "
       << fmt(r.model_runtime->median_ms, 3) << ", speedup "
       << fmt(r.simulator_runtime->median_ms / r.model_runtime->median_ms, 1) << "x (reference: "
       << fmt(ref.simulator_ms, 0) << " ms vs " << fmt(ref.model_ms) << " ms, "
       << fmt(ref.simulator_ms / ref.model_ms, 0) << "x)\n";
  }
  os << "Environment: " << r.environment.cpu_model << ", " << r.environment.hardware_threads
     << " hardware threads, " << r.environment.threads_used << " used\n";
  return os.str();
}

}  // namespace nf
