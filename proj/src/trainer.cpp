#include "noiseflow/trainer.hpp"

#include "noiseflow/parallel.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace nf {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("TrainConfig: " + what); };
  if (total_iters < 1) fail("total_iters must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr_init > 0) || !(lr_final > 0) || !(lr_final < lr_init)) fail("need 0 < lr_final < lr_init");
  if (!(decay_start_frac > 0 && decay_start_frac < 1)) fail("decay_start_frac must be in (0,1)");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0)) fail("bad Adam constants");
  if (checkpoint_every < 1 || eval_every < 1) fail("checkpoint_every and eval_every must be >= 1");
  if (threads < 1) fail("threads must be >= 1");
  if (grad_clip < 0) fail("grad_clip must be >= 0");
}

json to_json(const TrainConfig& c) {
  return {{"total_iters", c.total_iters},     {"batch_size", c.batch_size},
          {"beta1", c.beta1},                 {"beta2", c.beta2},
          {"eps", c.eps},                     {"lr_init", c.lr_init},
          {"lr_final", c.lr_final},           {"decay_start_frac", c.decay_start_frac},
          {"seed", c.seed},                   {"checkpoint_every", c.checkpoint_every},
          {"eval_every", c.eval_every},       {"threads", c.threads},
          {"grad_clip", c.grad_clip},         {"data_init", c.data_init}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  TrainConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "total_iters") c.total_iters = v.get<int>();
    else if (k == "batch_size") c.batch_size = v.get<int>();
    else if (k == "beta1") c.beta1 = v.get<double>();
    else if (k == "beta2") c.beta2 = v.get<double>();
    else if (k == "eps") c.eps = v.get<double>();
    else if (k == "lr_init") c.lr_init = v.get<double>();
    else if (k == "lr_final") c.lr_final = v.get<double>();
    else if (k == "decay_start_frac") c.decay_start_frac = v.get<double>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "checkpoint_every") c.checkpoint_every = v.get<int>();
    else if (k == "eval_every") c.eval_every = v.get<int>();
    else if (k == "threads") c.threads = v.get<int>();
    else if (k == "grad_clip") c.grad_clip = v.get<double>();
    else if (k == "data_init") c.data_init = v.get<bool>();
    else throw std::invalid_argument("unknown train config key: " + k);
  }
  c.validate();
  return c;
}

double lr_at(int iter, const TrainConfig& cfg) {
  const double start = cfg.decay_start_frac * cfg.total_iters;
  if (iter <= start) return cfg.lr_init;
  const double t = std::min(1.0, (iter - start) / (cfg.total_iters - start));
  return cfg.lr_init + t * (cfg.lr_final - cfg.lr_init);
}

TrainSample make_sample(const LayoutMask& mask, const NormMap& target) {
  return {to_flow_space<float>(target), cond_image<float>(mask)};
}

Tensor<float> dequantize(const Tensor<float>& x, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f / 256.0f);
  Tensor<float> out = x;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data.data()[i] += u(rng);
  return out;
}

AdamState adam_init(const FlowModel<float>& model) { return {model.zeros_like(), model.zeros_like()}; }

void adam_step(FlowModel<float>& model, const FlowModel<float>& grad, AdamState& state, int t,
               double lr, const TrainConfig& cfg) {
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const float step = static_cast<float>(lr), eps = static_cast<float>(cfg.eps);
  auto p = model.params();
  const auto g = grad.params();
  auto m = state.m.params();
  auto v = state.v.params();
  for (std::size_t b = 0; b < p.size(); ++b)
    for (Eigen::Index i = 0; i < p[b].size; ++i) {
      const float gi = g[b].data[i];
      m[b].data[i] = b1 * m[b].data[i] + (1 - b1) * gi;
      v[b].data[i] = b2 * v[b].data[i] + (1 - b2) * gi * gi;
      p[b].data[i] -= step * (m[b].data[i] * c1) / (std::sqrt(v[b].data[i] * c2) + eps);
    }
}

double batch_gradient(const FlowModel<float>& model, const std::vector<Tensor<float>>& xs,
                      const std::vector<const Tensor<float>*>& conds, FlowModel<float>& grad,
                      int threads) {
  const int n = static_cast<int>(xs.size());
  std::vector<FlowModel<float>> grads(n);
  std::vector<double> losses(n);
  parallel_for(n, threads, [&](int i) {
    grads[i] = model.zeros_like();
    const auto cond = cond_net(*conds[i], model);
    losses[i] = flow_backward(xs[i], cond, model, grads[i], 1.0f / float(n));
  });
  grad = model.zeros_like();
  auto total = grad.params();
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const auto gi = grads[i].params();
    for (std::size_t b = 0; b < total.size(); ++b)
      for (Eigen::Index j = 0; j < total[b].size; ++j) total[b].data[j] += gi[b].data[j];
    loss += losses[i];
  }
  return loss / n;
}

namespace {

constexpr std::uint64_t kValStream = 0x76616c;   // validation noise
constexpr std::uint64_t kInitStream = 0x696e6974;  // data-init batch

std::mt19937_64 keyed_rng(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

double mean_nll(const FlowModel<float>& model, const std::vector<TrainSample>& data,
                std::uint64_t seed, int threads) {
  if (data.empty()) throw std::invalid_argument("mean_nll needs at least one sample");
  std::vector<double> nll(data.size());
  parallel_for(static_cast<int>(data.size()), threads, [&](int i) {
    auto rng = keyed_rng(seed, kValStream, static_cast<std::uint64_t>(i));
    const auto x = dequantize(data[i].target, rng);
    nll[i] = -static_cast<double>(log_likelihood(x, cond_net(data[i].cond, model), model)) /
             double(x.size());
  });
  double acc = 0;
  for (double v : nll) acc += v;
  return acc / double(data.size());
}

namespace {

void check_grad_finite(const FlowModel<float>& grad) {
  for (const auto& p : grad.params())
    for (Eigen::Index i = 0; i < p.size; ++i)
      if (!std::isfinite(p.data[i])) throw TrainingError("non-finite gradient in " + p.name);
}

std::vector<Section> adam_sections(const AdamState& s) {
  std::vector<Section> out;
  for (const auto* which : {&s.m, &s.v}) {
    const std::string prefix = which == &s.m ? "adam.m." : "adam.v.";
    for (const auto& p : which->params())
      out.push_back({prefix + p.name, p.shape, std::vector<float>(p.data, p.data + p.size)});
  }
  return out;
}

void restore_adam(const std::vector<Section>& extra, AdamState& s) {
  for (auto* which : {&s.m, &s.v}) {
    const std::string prefix = which == &s.m ? "adam.m." : "adam.v.";
    for (auto& p : which->params()) {
      auto it = std::find_if(extra.begin(), extra.end(),
                             [&](const Section& e) { return e.name == prefix + p.name; });
      if (it == extra.end() || it->values.size() != static_cast<std::size_t>(p.size))
        throw CheckpointError("resume checkpoint lacks " + prefix + p.name);
      std::copy(it->values.begin(), it->values.end(), p.data);
    }
  }
}

std::string format_row(const HistoryRow& r) {
  std::ostringstream os;
  os << r.iter << ',' << std::setprecision(9) << r.lr << ',' << std::setprecision(17) << r.train_nll << ','
     << r.val_nll << ',' << std::setprecision(6) << std::fixed << r.wallclock_ms;
  return os.str();
}

constexpr const char* kHistoryHeader = "iter,lr,train_nll,val_nll,wallclock_ms";

std::vector<HistoryRow> read_history(const std::string& path, int max_iter) {
  std::vector<HistoryRow> rows;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    HistoryRow r{};
    char comma;
    std::istringstream is(line);
    is >> r.iter >> comma >> r.lr >> comma >> r.train_nll >> comma >> r.val_nll >> comma >> r.wallclock_ms;
    if (is && r.iter <= max_iter) rows.push_back(r);
  }
  return rows;
}

void write_history(const std::string& path, const std::vector<HistoryRow>& rows) {
  std::string text = std::string(kHistoryHeader) + "\n";
  for (const auto& r : rows) text += format_row(r) + "\n";
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace

TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_set,
                  FlowModel<float>& model, const TrainConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train and validation sets must be non-empty");
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  const std::string last_path = (fs::path(opt.out_dir) / "last.ckpt").string();
  const std::string best_path = (fs::path(opt.out_dir) / "best.ckpt").string();
  const std::string history_path = (fs::path(opt.out_dir) / "history.csv").string();

  AdamState adam = adam_init(model);
  TrainResult result;
  int iter = 0;
  double best = std::numeric_limits<double>::infinity();
  double acc_sum = 0, wall_offset = 0;
  int acc_count = 0;

  if (opt.resume && fs::exists(last_path)) {
    Checkpoint ck = load_checkpoint(last_path);
    if (!(ck.model.config == model.config)) throw TrainingError("resume checkpoint has a different flow config");
    model = ck.model;
    adam = adam_init(model);
    restore_adam(ck.extra, adam);
    iter = ck.meta.at("iteration").get<int>();
    best = ck.meta.at("best_val_nll").is_null() ? best : ck.meta.at("best_val_nll").get<double>();
    acc_sum = ck.meta.at("train_acc_sum").get<double>();
    acc_count = ck.meta.at("train_acc_count").get<int>();
    wall_offset = ck.meta.at("wallclock_ms").get<double>();
    result.history = read_history(history_path, iter);
  } else if (cfg.data_init) {
    auto rng = keyed_rng(cfg.seed, kInitStream);
    std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
    const std::size_t n = std::min<std::size_t>(32, train_set.size());
    std::vector<Tensor<float>> xs;
    std::vector<CondFeatures<float>> conds;
    for (std::size_t i = 0; i < n; ++i) {
      const auto& s = train_set[pick(rng)];
      xs.push_back(dequantize(s.target, rng));
      conds.push_back(cond_net(s.cond, model));
    }
    std::vector<const CondFeatures<float>*> ptrs;
    for (const auto& c : conds) ptrs.push_back(&c);
    actnorm_data_init(model, xs, ptrs);
  }
  write_history(history_path, result.history);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return wall_offset + std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  auto save_last = [&](int done, double last_val) {
    Checkpoint ck{model, json::object(), adam_sections(adam)};
    ck.meta = {{"iteration", done},
               {"best_val_nll", std::isfinite(best) ? json(best) : json(nullptr)},
               {"val_nll", last_val},
               {"train_acc_sum", acc_sum},
               {"train_acc_count", acc_count},
               {"wallclock_ms", elapsed()},
               {"train_config", to_json(cfg)}};
    save_checkpoint(last_path, ck);
  };

  std::uniform_int_distribution<std::size_t> pick(0, train_set.size() - 1);
  double last_val = std::numeric_limits<double>::quiet_NaN();
  while (iter < cfg.total_iters) {
    auto rng = keyed_rng(cfg.seed, static_cast<std::uint64_t>(iter) + 1);
    std::vector<Tensor<float>> xs;
    std::vector<const Tensor<float>*> conds;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto& s = train_set[pick(rng)];
      xs.push_back(dequantize(s.target, rng));
      conds.push_back(&s.cond);
    }
    FlowModel<float> grad;
    double loss;
    try {
      loss = batch_gradient(model, xs, conds, grad, cfg.threads);
    } catch (const NonFiniteError& e) {
      throw TrainingError("iteration " + std::to_string(iter) + ": " + e.what());
    }
    check_grad_finite(grad);
    if (cfg.grad_clip > 0) {
      double sq = 0;
      for (const auto& p : grad.params())
        for (Eigen::Index i = 0; i < p.size; ++i) sq += double(p.data[i]) * p.data[i];
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip) {
        const float f = static_cast<float>(cfg.grad_clip / norm);
        for (auto& p : grad.params())
          for (Eigen::Index i = 0; i < p.size; ++i) p.data[i] *= f;
      }
    }
    const double lr = lr_at(iter, cfg);
    adam_step(model, grad, adam, iter + 1, lr, cfg);
    acc_sum += loss;
    ++acc_count;
    ++iter;

    if (iter % cfg.eval_every == 0 || iter == cfg.total_iters) {
      last_val = mean_nll(model, val_set, cfg.seed, cfg.threads);
      const HistoryRow row{iter, lr, acc_sum / acc_count, last_val, elapsed()};
      result.history.push_back(row);
      std::ofstream(history_path, std::ios::app) << format_row(row) << "\n";
      acc_sum = 0;
      acc_count = 0;
      if (!std::isfinite(last_val)) throw TrainingError("non-finite validation NLL at iteration " + std::to_string(iter));
      if (last_val < best) {
        best = last_val;
        Checkpoint ck{model, {{"iteration", iter}, {"val_nll", last_val}, {"train_nll", row.train_nll}}, {}};
        save_checkpoint(best_path, ck);
      }
      if (opt.on_eval) opt.on_eval(row);
    }
    const bool stopping = opt.stop_after && iter >= *opt.stop_after;
    if (iter % cfg.checkpoint_every == 0 || iter == cfg.total_iters || stopping) save_last(iter, last_val);
    if (stopping) break;
  }
  result.iterations = iter;
  result.best_val_nll = best;
  return result;
}

GradCheckReport grad_check(const GradCheckOptions& opt) {
  FlowConfig cfg;
  cfg.input_size = 8;
  cfg.num_scales = 2;
  cfg.steps_per_scale = {1, 1};
  cfg.cond_hidden_channels = 4;
  cfg.coupling_hidden_channels = 8;
  auto model = opt.identity ? FlowModel<double>::identity(cfg) : FlowModel<double>::random(cfg, opt.seed);

  std::mt19937_64 rng(opt.seed + 1000);
  std::vector<Tensor<double>> xs, images;
  std::normal_distribution<double> normal(0.0, 0.3);
  std::bernoulli_distribution occ(0.2);
  for (int b = 0; b < 2; ++b) {
    LayoutMask mask(8, {4, 4});
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c)
        if (r != 4 || c != 4) mask.cells(r, c) = occ(rng);
    Tensor<double> x(1, 8, 8);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data.data()[i] = normal(rng);
    xs.push_back(x);
    images.push_back(cond_image<double>(mask));
  }
  auto loss = [&](const FlowModel<double>& m) {
    double acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i)
      acc -= log_likelihood(xs[i], cond_net(images[i], m), m) / double(xs[i].size());
    return acc / double(xs.size());
  };
  auto grad = model.zeros_like();
  for (std::size_t i = 0; i < xs.size(); ++i)
    flow_backward(xs[i], cond_net(images[i], model), model, grad, 1.0 / double(xs.size()));

  auto analytic = grad.params();
  if (opt.corrupt_coupling)
    for (auto& p : analytic)
      if (p.name == "s0.k0.coupling.in.weight")
        for (Eigen::Index i = 0; i < p.size; ++i) p.data[i] *= 1.05;

  GradCheckReport report;
  auto params = model.params();
  const double h = 1e-6;
  for (std::size_t b = 0; b < params.size(); ++b) {
    double worst = 0;
    for (Eigen::Index i = 0; i < params[b].size; ++i) {
      const double keep = params[b].data[i];
      params[b].data[i] = keep + h;
      const double up = loss(model);
      params[b].data[i] = keep - h;
      const double down = loss(model);
      params[b].data[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double a = analytic[b].data[i];
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-6});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
    const bool ok = worst < report.threshold;
    report.blocks.push_back({params[b].name, worst, ok});
    report.pass = report.pass && ok;
  }
  return report;
}

}  // namespace nf
