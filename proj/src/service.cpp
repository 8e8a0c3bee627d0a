#include "noiseflow/service.hpp"

#include "httplib.h"
#include "noiseflow/datagen.hpp"
#include "noiseflow/metrics.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

namespace nf {

std::vector<int> encode_rle(const LayoutMask& mask) {
  std::vector<int> runs{0};
  std::uint8_t current = 0;
  for (Eigen::Index i = 0; i < mask.cells.size(); ++i) {
    const std::uint8_t v = mask.cells(i) ? 1 : 0;
    if (v != current) {
      runs.push_back(0);
      current = v;
    }
    ++runs.back();
  }
  return runs;
}

Grid<std::uint8_t> decode_rle(const std::vector<int>& runs, int width, int height) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("layout dimensions must be positive");
  Grid<std::uint8_t> g(height, width);
  Eigen::Index pos = 0;
  std::uint8_t v = 0;
  for (int run : runs) {
    if (run < 0) throw std::invalid_argument("negative run length");
    if (pos + run > g.size()) throw std::invalid_argument("run lengths exceed width*height");
    for (int k = 0; k < run; ++k) g(pos++) = v;
    v ^= 1;
  }
  if (pos != g.size()) throw std::invalid_argument("run lengths do not cover width*height");
  return g;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("base64 length must be a multiple of 4");
  std::vector<std::uint8_t> out(3 * text.size() / 4);
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw std::invalid_argument("invalid base64");
  std::size_t pad = 0;
  for (auto it = text.rbegin(); it != text.rend() && *it == '='; ++it) ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

struct RequestError : std::runtime_error {
  int status;
  RequestError(int s, const std::string& msg) : std::runtime_error(msg), status(s) {}
};

HttpResult json_result(int status, const json& body) { return {status, canonical(body), {}}; }

HttpResult error_result(int status, const std::string& message) {
  return json_result(status, {{"error", message}, {"status", status}});
}

template <typename T>
T field(const json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  try {
    return j[key].get<T>();
  } catch (const json::exception&) {
    throw RequestError(400, "field '" + key + "' has the wrong type");
  }
}

std::string payload(const NormMap& m) { return base64_encode(write_raster(to_raster(m))); }

json region_summary(const RegionMetrics& r) {
  auto point = [](const std::optional<Interval>& v) { return v ? json(v->point) : json(nullptr); };
  return {{"pixels", r.pixels}, {"mae_db", point(r.mae)}, {"wmape_pct", point(r.wmape)}};
}

}  // namespace

ServiceState::ServiceState(ServiceOptions opt) : opt_(opt) {
  if (!is_supported_grid_size(opt_.grid_size)) throw std::invalid_argument("unsupported grid size");
  if (opt_.threads < 1) throw std::invalid_argument("threads must be >= 1");
}

void ServiceState::load_model(const std::string& checkpoint_path, const std::string& eval_report_path) {
  const auto bytes = read_file_bytes(checkpoint_path);
  Checkpoint ck = decode_checkpoint(bytes);
  if (ck.model.config.input_size != opt_.grid_size)
    throw std::invalid_argument("checkpoint input size " + std::to_string(ck.model.config.input_size) +
                                " does not match grid size " + std::to_string(opt_.grid_size));
  json training = json::object();
  for (const char* k : {"iteration", "best_val_nll", "val_nll"})
    training[k] = ck.meta.contains(k) ? ck.meta[k] : json(nullptr);
  json eval = nullptr;
  if (!eval_report_path.empty()) {
    const auto report = read_file_bytes(eval_report_path);
    eval = json::parse(report.begin(), report.end());
  }
  card_ = {{"config", to_json(ck.model.config)},
           {"checkpoint_sha256", sha256_hex(bytes)},
           {"param_count", ck.model.param_count()},
           {"training", training},
           {"eval", eval}};
  model_ = std::move(ck.model);
}

HttpResult ServiceState::health() const { return json_result(200, {{"status", "ok"}, {"version", NOISEFLOW_VERSION}}); }

HttpResult ServiceState::model_card() const {
  if (!model_) return error_result(404, "no model loaded");
  return json_result(200, card_);
}

HttpResult ServiceState::whatif(const std::string& body) const {
  try {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      throw RequestError(400, std::string("malformed JSON: ") + e.what());
    }
    if (!req.is_object()) throw RequestError(400, "request must be a JSON object");
    if (!req.contains("layout") || !req["layout"].is_object()) throw RequestError(400, "missing layout");
    const json& lj = req["layout"];
    const int width = field<int>(lj, "width", 0), height = field<int>(lj, "height", 0);
    if (width != height || width != opt_.grid_size)
      throw RequestError(400, "layout must be " + std::to_string(opt_.grid_size) + "x" +
                                  std::to_string(opt_.grid_size));
    if (!lj.contains("rle") || !lj["rle"].is_array()) throw RequestError(400, "missing layout.rle");
    LayoutMask layout;
    try {
      layout.cells = decode_rle(lj["rle"].get<std::vector<int>>(), width, height);
    } catch (const std::exception& e) {
      throw RequestError(400, std::string("layout.rle: ") + e.what());
    }
    const json src = req.value("source", json(nullptr));
    if (!src.is_array() || src.size() != 2 || !src[0].is_number_integer() || !src[1].is_number_integer())
      throw RequestError(400, "source must be [row, col]");
    layout.source = {src[0].get<int>(), src[1].get<int>()};
    if (layout.source.row < 0 || layout.source.row >= height || layout.source.col < 0 ||
        layout.source.col >= width)
      throw RequestError(400, "source is out of bounds");
    if (layout.building(layout.source)) throw RequestError(400, "source lies inside a building");

    Scenario scenario;
    try {
      scenario = parse_scenario(field<std::string>(req, "scenario", "baseline"));
    } catch (const std::invalid_argument& e) {
      throw RequestError(422, e.what());
    }
    const std::string engine = field<std::string>(req, "engine", "both");
    if (engine != "simulator" && engine != "model" && engine != "both")
      throw RequestError(400, "engine must be simulator, model or both");
    const double tau = field<double>(req, "tau", model_ ? model_->config.temperature : 0.7);
    if (!(tau >= 0.0 && tau <= 2.0)) throw RequestError(400, "tau must be in [0, 2]");
    const auto seed = field<std::uint64_t>(req, "seed", 0);
    ScenarioConfig sc;
    sc.scenario = scenario;
    sc.reflection_order = field<int>(req, "reflection_order", 1);
    if (sc.reflection_order != 1 && sc.reflection_order != 2) throw RequestError(400, "reflection_order must be 1 or 2");
    const bool use_sim = engine != "model", use_model = engine != "simulator";
    if (use_model && !model_) throw RequestError(409, "no model loaded");

    json out = {{"width", width}, {"height", height}, {"scenario", to_string(scenario)}, {"engine", engine},
                {"seed", seed},   {"reflection_order", sc.reflection_order}};
    std::ostringstream timing;
    timing << std::fixed << std::setprecision(3);
    using clock = std::chrono::steady_clock;
    DbMap sim_db, model_db;
    if (use_sim) {
      const auto t0 = clock::now();
      sim_db = simulate(layout, sc);
      const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      out["simulator"] = {{"map", payload(normalize(sim_db))}};
      timing << "simulator=" << ms;
    }
    if (use_model) {
      const auto t0 = clock::now();
      const SampleResult s = sample(layout, *model_, tau, seed);
      const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      Denormalized d = denormalize(s.map);
      model_db = std::move(d.map);
      out["tau"] = tau;
      out["model"] = {{"map", payload(s.map)}, {"clamp_count", s.clamp_count + d.clamp_count}};
      timing << (use_sim ? ";" : "") << "model=" << ms;
    }
    if (use_sim && use_model) {
      const std::vector<DataSample> one{{"request", layout, sim_db, normalize(sim_db)}};
      const MetricRow row = score_predictions("model", one, {model_db}, 1, 0, 1);
      out["comparison"] = {{"los", region_summary(row.los)},
                           {"nlos", region_summary(row.nlos)},
                           {"ssim", row.ssim.point},
                           {"wmape_threshold_db", kWmapeThresholdDb}};
    }
    HttpResult r = json_result(200, out);
    r.headers.emplace_back("X-NF-Runtime-Ms", timing.str());
    return r;
  } catch (const RequestError& e) {
    return error_result(e.status, e.what());
  }
}

struct HttpService::Impl {
  const ServiceState& state;
  httplib::Server server;
  std::thread thread;

  explicit Impl(const ServiceState& s) : state(s) {
    const int threads = state.options().threads;
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<std::size_t>(threads)); };
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                {"Access-Control-Expose-Headers", "X-NF-Runtime-Ms"}});
    auto reply = [](httplib::Response& res, const HttpResult& r) {
      res.status = r.status;
      for (const auto& [k, v] : r.headers) res.set_header(k, v);
      res.set_content(r.body, "application/json");
    };
    server.Get("/v1/health", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, state.health()); });
    server.Get("/v1/model", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, state.model_card()); });
    server.Post("/v1/whatif", [this, reply](const httplib::Request& req, httplib::Response& res) {
      reply(res, state.whatif(req.body));
    });
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        reply(res, error_result(500, e.what()));
      }
    });
  }
};

HttpService::HttpService(const ServiceState& state) : impl_(std::make_unique<Impl>(state)) {}

HttpService::~HttpService() { stop(); }

int HttpService::start(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void HttpService::stop() {
  if (!impl_ || !impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

void HttpService::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

int serve(const ServiceState& state, const std::string& host, int port) {
  HttpService service(state);
  const int bound = service.start(host, port);
  std::cerr << "listening on http://" << host << ":" << bound << " (model "
            << (state.has_model() ? "loaded" : "not loaded") << ")\n";
  service.wait();
  return 0;
}

}  // namespace nf
