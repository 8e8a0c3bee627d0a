#include "CLI11.hpp"
#include "noiseflow/checkpoint.hpp"
#include "noiseflow/datagen.hpp"
#include "noiseflow/metrics.hpp"
#include "noiseflow/runtime.hpp"
#include "noiseflow/service.hpp"
#include "noiseflow/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

using namespace nf;
namespace fs = std::filesystem;

namespace {

struct Binding {
  CLI::Option* opt;
  json::json_pointer ptr;
  std::function<json()> value;
};

struct Command {
  CLI::App* app;
  json defaults;
  std::vector<Binding> bindings;
  std::string config_path;

  template <typename T>
  CLI::Option* bind(const std::string& flag, const std::string& ptr, T& var, const std::string& help) {
    auto* o = app->add_option(flag, var, help);
    bindings.push_back({o, json::json_pointer(ptr), [&var] { return json(var); }});
    return o;
  }

  CLI::Option* bind_flag(const std::string& flag, const std::string& ptr, bool& var, const std::string& help) {
    auto* o = app->add_flag(flag, var, help);
    bindings.push_back({o, json::json_pointer(ptr), [&var] { return json(var); }});
    return o;
  }

  json resolve() const {
    json cfg = defaults;
    if (!config_path.empty()) {
      const auto bytes = read_file_bytes(config_path);
      json file = json::parse(bytes.begin(), bytes.end());
      if (!file.is_object()) throw std::invalid_argument(config_path + ": config must be a JSON object");
      file.erase("command");
      check_keys(file, defaults, "");
      cfg.merge_patch(file);
    }
    for (const auto& b : bindings)
      if (b.opt->count() > 0) cfg[b.ptr] = b.value();
    cfg["command"] = app->get_name();
    std::cerr << canonical(cfg) << "\n";
    return cfg;
  }

  static void check_keys(const json& file, const json& ref, const std::string& where) {
    for (const auto& [k, v] : file.items()) {
      if (!ref.contains(k)) throw std::invalid_argument("unknown config key: " + where + "/" + k);
      if (v.is_object() && ref[k].is_object()) check_keys(v, ref[k], where + "/" + k);
    }
  }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help, json defaults) {
  Command c{root.add_subcommand(name, help), std::move(defaults), {}, {}};
  c.app->add_option("--config", c.config_path, "JSON config file (same shape as the echoed config)")
      ->check(CLI::ExistingFile);
  return c;
}

std::vector<Scenario> scenarios_from(const json& j) {
  std::vector<Scenario> out;
  for (const auto& s : j) out.push_back(parse_scenario(s.get<std::string>()));
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

LayoutMask layout_from_config(const json& c) {
  const std::string path = c["layout"].get<std::string>();
  if (path.empty()) {
    const int n = c["size"].get<int>();
    return LayoutMask(n, {n / 2, n / 2});
  }
  LayoutMask m = layout_from_raster(load_raster(path));
  return m;
}

int run_gen_data(const json& c) {
  GenConfig g = gen_config_from_json(c["gen"]);
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = build_dataset(g, c["out"].get<std::string>(), c["threads"].get<int>());
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t counts[3] = {0, 0, 0};
  for (const auto& r : m.samples) ++counts[static_cast<int>(r.split)];
  std::cout << "wrote " << m.samples.size() << " samples to " << c["out"].get<std::string>() << " (train "
            << counts[0] << ", val " << counts[1] << ", test " << counts[2] << ") in " << std::fixed
            << std::setprecision(1) << s << " s\n";
  return 0;
}

int run_simulate(const json& c) {
  ScenarioConfig sc;
  sc.scenario = parse_scenario(c["scenario"].get<std::string>());
  sc.reflection_order = c["reflection_order"].get<int>();
  LayoutMask layout = layout_from_config(c);
  if (c["source"].is_array() && c["source"].size() == 2) layout.source = {c["source"][0], c["source"][1]};
  layout.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const DbMap map = simulate(layout, sc);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  const std::string out = c["out"].get<std::string>();
  if (!out.empty()) save_raster(out, to_raster(map));
  const std::string pgm = c["pgm"].get<std::string>();
  if (!pgm.empty()) write_text(pgm, to_pgm(map));
  const auto masks = build_region_masks(layout);
  std::cout << to_string(sc.scenario) << " " << layout.size() << "x" << layout.size() << ": min "
            << map.values.minCoeff() << " dB, max " << map.values.maxCoeff() << " dB, LoS "
            << masks.count(Region::LoS) << " px, NLoS " << masks.count(Region::NLoS) << " px, " << std::fixed
            << std::setprecision(3) << ms << " ms\n";
  return 0;
}

std::vector<TrainSample> to_train_samples(const std::vector<DataSample>& data) {
  std::vector<TrainSample> out;
  out.reserve(data.size());
  for (const auto& d : data) out.push_back(make_sample(d.layout, d.target));
  return out;
}

int run_train(const json& c) {
  const std::string data = c["data"].get<std::string>();
  const Scenario scenario = parse_scenario(c["scenario"].get<std::string>());
  const auto manifest = load_manifest(data);
  json fj = c["flow"];
  if (fj["input_size"].get<int>() == 0) fj["input_size"] = manifest.config.grid_size;
  const FlowConfig fc = flow_config_from_json(fj);
  TrainConfig tc = train_config_from_json(c["train"]);
  tc.threads = c["threads"].get<int>();
  const auto train_set = to_train_samples(load_split(data, manifest, Split::Train, scenario));
  const auto val_set = to_train_samples(load_split(data, manifest, Split::Val, scenario));
  FlowModel<float> model = FlowModel<float>::initial(fc, c["init_seed"].get<std::uint64_t>());
  std::cerr << "training " << model.param_count() << " parameters on " << train_set.size() << " samples ("
            << val_set.size() << " validation)\n";
  TrainOptions opt;
  opt.out_dir = c["out"].get<std::string>();
  opt.resume = c["resume"].get<bool>();
  if (c["stop_after"].get<int>() > 0) opt.stop_after = c["stop_after"].get<int>();
  opt.on_eval = [](const HistoryRow& r) {
    std::cerr << "iter " << r.iter << "  lr " << r.lr << "  train " << std::fixed << std::setprecision(4)
              << r.train_nll << "  val " << r.val_nll << "  " << std::setprecision(0) << r.wallclock_ms / 1000
              << " s\n"
              << std::defaultfloat;
  };
  const auto r = train(train_set, val_set, model, tc, opt);
  std::cout << "iterations " << r.iterations << ", best val NLL " << std::setprecision(6) << r.best_val_nll
            << " nats/dim, checkpoints in " << opt.out_dir << "\n";
  return 0;
}

int run_eval(const json& c) {
  const Checkpoint ck = load_checkpoint(c["checkpoint"].get<std::string>());
  EvalOptions opt;
  opt.temperature = c["tau"].is_null() ? ck.model.config.temperature : c["tau"].get<double>();
  opt.seed = c["seed"].get<std::uint64_t>();
  opt.threads = c["threads"].get<int>();
  opt.bootstrap_resamples = c["bootstrap"].get<int>();
  opt.benchmark = c["bench"].get<bool>();
  opt.bench_reps = c["reps"].get<int>();
  opt.reflection_order = c["reflection_order"].get<int>();
  const auto report =
      evaluate_testset(ck.model, c["data"].get<std::string>(), parse_scenario(c["scenario"].get<std::string>()), opt);
  std::cout << format_table(report);
  const std::string out = c["json"].get<std::string>();
  if (!out.empty()) write_text(out, canonical(to_json(report)) + "\n");
  return 0;
}

int run_bench(const json& c) {
  const int n = c["size"].get<int>();
  FlowModel<float> model;
  if (c["checkpoint"].get<std::string>().empty()) {
    FlowConfig fc;
    fc.input_size = n;
    model = FlowModel<float>::initial(fc, 0);
  } else {
    model = load_checkpoint(c["checkpoint"].get<std::string>()).model;
  }
  if (model.config.input_size != n) throw std::invalid_argument("checkpoint input size differs from --size");
  ScenarioConfig sc;
  sc.scenario = parse_scenario(c["scenario"].get<std::string>());
  sc.reflection_order = c["reflection_order"].get<int>();
  GenConfig g;
  g.grid_size = n;
  g.seed = c["seed"].get<std::uint64_t>();
  std::vector<LayoutMask> layouts;
  for (int i = 0; i < c["layouts"].get<int>(); ++i) layouts.push_back(gen_layout(g, i));
  const auto r = compare_runtime(model, layouts, sc, model.config.temperature, c["warmup"].get<int>(),
                                 c["reps"].get<int>());
  const auto ref = reference_runtime(sc.scenario);
  const auto env = current_environment(1);
  std::cout << std::fixed << std::setprecision(3) << "layouts: " << r.layouts << "\nsimulator ("
            << to_string(sc.scenario) << ", order " << sc.reflection_order << ", " << n << "x" << n
            << "): median " << r.simulator_median_ms << " ms\n"
            << "model inference: median " << r.model_median_ms << " ms\n"
            << std::setprecision(1) << "speedup " << r.speedup << "x (reference "
            << std::setprecision(0) << ref.simulator_ms << " ms vs " << std::setprecision(2) << ref.model_ms
            << " ms = " << std::setprecision(0) << ref.simulator_ms / ref.model_ms << "x)\n"
            << "cpu: " << env.cpu_model << ", " << env.hardware_threads << " hardware threads\n";
  return 0;
}

int run_grad_check(const json& c) {
  bool pass = true;
  for (const auto& s : c["seeds"]) {
    GradCheckOptions opt;
    opt.seed = s.get<std::uint64_t>();
    const auto r = grad_check(opt);
    std::cout << "seed " << opt.seed << "\n";
    for (const auto& b : r.blocks)
      std::cout << "  " << std::left << std::setw(34) << b.name << std::scientific << std::setprecision(3)
                << b.max_rel_error << (b.pass ? "  ok" : "  FAIL") << "\n";
    pass = pass && r.pass;
  }
  std::cout << (pass ? "grad-check passed" : "grad-check FAILED") << "\n";
  return pass ? 0 : 1;
}

int run_serve(const json& c) {
  ServiceOptions opt;
  opt.grid_size = c["grid_size"].get<int>();
  opt.threads = c["threads"].get<int>();
  ServiceState state(opt);
  if (!c["checkpoint"].get<std::string>().empty())
    state.load_model(c["checkpoint"].get<std::string>(), c["eval_report"].get<std::string>());
  return serve(state, c["host"].get<std::string>(), c["port"].get<int>());
}

}  // namespace

int main(int argc, char** argv) {
  nf::tune_allocator();
  CLI::App app{"noiseflow: urban noise maps by simulation and conditional normalizing flows"};
  app.set_version_flag("--version", NOISEFLOW_VERSION);
  app.require_subcommand(1);

  GenConfig gd;
  json gen_defaults = {{"out", "data"}, {"threads", 1}, {"gen", to_json(gd)}};
  Command gen = make_command(app, "gen-data", "Generate a procedural layout corpus with simulated targets",
                             gen_defaults);
  std::string g_out;
  int g_n = 0, g_size = 0, g_threads = 1, g_order = 1;
  std::uint64_t g_seed = 0;
  std::vector<std::string> g_scen;
  gen.bind("--out", "/out", g_out, "Output directory");
  gen.bind("--n", "/gen/samples", g_n, "Number of samples");
  gen.bind("--size", "/gen/grid_size", g_size, "Grid size (32, 64, 128, 256)");
  gen.bind("--seed", "/gen/seed", g_seed, "Corpus seed");
  gen.bind("--scenarios", "/gen/scenarios", g_scen, "Scenarios (comma separated)")->delimiter(',');
  gen.bind("--reflection-order", "/gen/reflection_order", g_order, "Reflection order for reflection targets");
  gen.bind("--threads", "/threads", g_threads, "Worker threads");

  Command sim = make_command(app, "simulate", "Simulate one layout",
                             {{"layout", ""}, {"size", 64}, {"source", nullptr}, {"scenario", "baseline"},
                              {"reflection_order", 1}, {"out", ""}, {"pgm", ""}});
  std::string s_layout, s_scen, s_out, s_pgm;
  int s_size = 0, s_order = 1;
  std::vector<int> s_source;
  sim.bind("--layout", "/layout", s_layout, "Layout raster (.nfr); empty layout when omitted");
  sim.bind("--size", "/size", s_size, "Grid size of the empty layout");
  sim.bind("--source", "/source", s_source, "Source cell row,col")->delimiter(',')->expected(2);
  sim.bind("--scenario", "/scenario", s_scen, "baseline, diffraction or reflection");
  sim.bind("--reflection-order", "/reflection_order", s_order, "1 or 2");
  sim.bind("--out", "/out", s_out, "Output dB raster (.nfr)");
  sim.bind("--pgm", "/pgm", s_pgm, "Output PGM preview");

  FlowConfig fd;
  fd.input_size = 0;
  json flow_defaults = {{"input_size", 0},
                        {"num_scales", fd.num_scales},
                        {"steps_per_scale", fd.steps_per_scale},
                        {"cond_hidden_channels", fd.cond_hidden_channels},
                        {"coupling_hidden_channels", fd.coupling_hidden_channels},
                        {"temperature", fd.temperature}};
  json train_defaults = to_json(TrainConfig{});
  train_defaults.erase("threads");
  Command tr = make_command(app, "train", "Train a conditional flow on a corpus",
                            {{"data", "data"},
                             {"out", "run"},
                             {"scenario", "baseline"},
                             {"threads", 1},
                             {"init_seed", 0},
                             {"resume", false},
                             {"stop_after", 0},
                             {"flow", flow_defaults},
                             {"train", train_defaults}});
  std::string t_data, t_out, t_scen;
  int t_threads = 1, t_iters = 0, t_batch = 0, t_ckpt = 0, t_eval = 0, t_scales = 0, t_ch = 0, t_hh = 0,
      t_stop = 0;
  double t_lr = 0, t_lr_final = 0, t_clip = 0;
  std::uint64_t t_seed = 0, t_init = 0;
  std::vector<int> t_steps;
  bool t_resume = false;
  tr.bind("--data", "/data", t_data, "Dataset directory");
  tr.bind("--out", "/out", t_out, "Run directory");
  tr.bind("--scenario", "/scenario", t_scen, "Target scenario");
  tr.bind("--threads", "/threads", t_threads, "Worker threads");
  tr.bind("--init-seed", "/init_seed", t_init, "Parameter initialization seed");
  tr.bind_flag("--resume", "/resume", t_resume, "Resume from <out>/last.ckpt");
  tr.bind("--stop-after", "/stop_after", t_stop, "Stop after this many iterations (0 = run to completion)");
  tr.bind("--scales", "/flow/num_scales", t_scales, "Number of scales");
  tr.bind("--steps", "/flow/steps_per_scale", t_steps, "Flow steps per scale (comma separated)")->delimiter(',');
  tr.bind("--cond-hidden", "/flow/cond_hidden_channels", t_ch, "Condition network channels");
  tr.bind("--coupling-hidden", "/flow/coupling_hidden_channels", t_hh, "Coupling network channels");
  tr.bind("--iters", "/train/total_iters", t_iters, "Total iterations");
  tr.bind("--batch", "/train/batch_size", t_batch, "Batch size");
  tr.bind("--lr", "/train/lr_init", t_lr, "Initial learning rate");
  tr.bind("--lr-final", "/train/lr_final", t_lr_final, "Final learning rate");
  tr.bind("--seed", "/train/seed", t_seed, "Training seed");
  tr.bind("--checkpoint-every", "/train/checkpoint_every", t_ckpt, "Checkpoint interval");
  tr.bind("--eval-every", "/train/eval_every", t_eval, "Validation interval");
  tr.bind("--grad-clip", "/train/grad_clip", t_clip, "Global gradient-norm clip (0 disables)");

  Command ev = make_command(app, "eval", "Evaluate a checkpoint on the test split",
                            {{"checkpoint", "run/best.ckpt"},
                             {"data", "data"},
                             {"scenario", "baseline"},
                             {"tau", nullptr},
                             {"seed", 0},
                             {"threads", 1},
                             {"bootstrap", 10000},
                             {"bench", true},
                             {"reps", 5},
                             {"reflection_order", 1},
                             {"json", ""}});
  std::string e_ck, e_data, e_scen, e_json;
  double e_tau = 0;
  std::uint64_t e_seed = 0;
  int e_threads = 1, e_boot = 0, e_reps = 0, e_order = 1;
  bool e_bench = true;
  ev.bind("--checkpoint", "/checkpoint", e_ck, "Checkpoint file");
  ev.bind("--data", "/data", e_data, "Dataset directory");
  ev.bind("--scenario", "/scenario", e_scen, "Scenario");
  ev.bind("--tau", "/tau", e_tau, "Sampling temperature (default: model config)");
  ev.bind("--seed", "/seed", e_seed, "Sampling seed");
  ev.bind("--threads", "/threads", e_threads, "Worker threads");
  ev.bind("--bootstrap", "/bootstrap", e_boot, "Bootstrap resamples");
  ev.bind_flag("--bench,!--no-bench", "/bench", e_bench, "Benchmark runtimes");
  ev.bind("--reps", "/reps", e_reps, "Benchmark repetitions");
  ev.bind("--reflection-order", "/reflection_order", e_order, "Simulator reflection order for benchmarking");
  ev.bind("--json", "/json", e_json, "Write the report as JSON");

  Command be = make_command(app, "bench", "Benchmark simulator against model inference",
                            {{"checkpoint", ""},
                             {"size", 64},
                             {"scenario", "reflection"},
                             {"reflection_order", 2},
                             {"seed", 0},
                             {"layouts", 20},
                             {"warmup", 2},
                             {"reps", 5}});
  std::string b_ck, b_scen;
  int b_size = 0, b_order = 0, b_layouts = 0, b_warm = 0, b_reps = 0;
  std::uint64_t b_seed = 0;
  be.bind("--checkpoint", "/checkpoint", b_ck, "Checkpoint (default: freshly initialized model)");
  be.bind("--size", "/size", b_size, "Grid size");
  be.bind("--scenario", "/scenario", b_scen, "Simulator scenario");
  be.bind("--reflection-order", "/reflection_order", b_order, "Reflection order");
  be.bind("--seed", "/seed", b_seed, "Layout seed");
  be.bind("--layouts", "/layouts", b_layouts, "Number of generated layouts");
  be.bind("--warmup", "/warmup", b_warm, "Warmup runs");
  be.bind("--reps", "/reps", b_reps, "Timed runs");

  Command sv = make_command(app, "serve", "Serve the what-if HTTP API",
                            {{"checkpoint", ""},
                             {"eval_report", ""},
                             {"host", "127.0.0.1"},
                             {"port", 8080},
                             {"grid_size", 64},
                             {"threads", 4}});
  std::string v_ck, v_eval, v_host;
  int v_port = 0, v_grid = 0, v_threads = 0;
  sv.bind("--checkpoint", "/checkpoint", v_ck, "Model checkpoint");
  sv.bind("--eval-report", "/eval_report", v_eval, "Evaluation report JSON for the model card");
  sv.bind("--host", "/host", v_host, "Bind address");
  sv.bind("--port", "/port", v_port, "Port");
  sv.bind("--grid-size", "/grid_size", v_grid, "Accepted grid size");
  sv.bind("--threads", "/threads", v_threads, "Request worker threads");

  Command gc = make_command(app, "grad-check", "Check analytic gradients against finite differences",
                            {{"seeds", {0, 1, 2}}});
  std::vector<int> c_seeds;
  gc.bind("--seeds", "/seeds", c_seeds, "Seeds (comma separated)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::vector<std::pair<Command*, int (*)(const json&)>> table = {
      {&gen, run_gen_data}, {&sim, run_simulate}, {&tr, run_train},      {&ev, run_eval},
      {&be, run_bench},     {&sv, run_serve},     {&gc, run_grad_check}};
  for (const auto& [cmd, fn] : table) {
    if (!cmd->app->parsed()) continue;
    try {
      return fn(cmd->resolve());
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}
