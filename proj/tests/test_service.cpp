#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "noiseflow/datagen.hpp"
#include "noiseflow/metrics.hpp"
#include "noiseflow/service.hpp"

#include "httplib.h"

#include <chrono>
#include <filesystem>
#include <random>

using namespace nf;
namespace fs = std::filesystem;

namespace {

constexpr int kN = 32;

fs::path temp_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("nf_service_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

FlowConfig small_config() {
  FlowConfig c;
  c.input_size = kN;
  c.num_scales = 2;
  c.steps_per_scale = {2, 3};
  c.cond_hidden_channels = 4;
  c.coupling_hidden_channels = 8;
  return c;
}

std::string model_path() {
  static const std::string path = [] {
    const fs::path d = temp_dir("model");
    Checkpoint ck;
    ck.model = FlowModel<float>::initial(small_config(), 3);
    ck.meta = {{"iteration", 12}, {"best_val_nll", -1.5}, {"val_nll", -1.25}};
    save_checkpoint((d / "m.ckpt").string(), ck);
    return (d / "m.ckpt").string();
  }();
  return path;
}

LayoutMask layout_with_block() {
  GenConfig g;
  g.grid_size = kN;
  g.seed = 5;
  return gen_layout(g, 0);
}

json request(const LayoutMask& l, const std::string& engine = "both") {
  return {{"layout", {{"width", l.cells.cols()}, {"height", l.cells.rows()}, {"rle", encode_rle(l)}}},
          {"source", {l.source.row, l.source.col}},
          {"scenario", "baseline"},
          {"engine", engine},
          {"seed", 7}};
}

Grid<float> decode_map(const std::string& b64) {
  return db_map_from_raster(read_raster(base64_decode(b64))).values;
}

ServiceState loaded() {
  ServiceState s({kN, 1});
  s.load_model(model_path());
  return s;
}

}  // namespace

TEST_CASE("rle round trip and validation") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    LayoutMask l;
    l.cells = Grid<std::uint8_t>::Zero(kN, kN);
    std::bernoulli_distribution b(t / 50.0);
    for (Eigen::Index i = 0; i < l.cells.size(); ++i) l.cells(i) = b(rng);
    const auto runs = encode_rle(l);
    long sum = 0;
    for (int r : runs) sum += r;
    CHECK(sum == kN * kN);
    CHECK((decode_rle(runs, kN, kN) == l.cells).all());
  }
  CHECK_THROWS(decode_rle({10}, kN, kN));
  CHECK_THROWS(decode_rle({kN * kN, 1}, kN, kN));
  CHECK_THROWS(decode_rle({-1, kN * kN + 1}, kN, kN));
}

TEST_CASE("base64 round trip") {
  std::mt19937_64 rng(2);
  for (std::size_t n : {0, 1, 2, 3, 4, 5, 100, 1001}) {
    std::vector<std::uint8_t> v(n);
    for (auto& x : v) x = static_cast<std::uint8_t>(rng());
    CHECK(base64_decode(base64_encode(v)) == v);
  }
  CHECK(base64_encode(std::vector<std::uint8_t>{'f', 'o', 'o', 'b'}) == "Zm9vYg==");
  CHECK_THROWS(base64_decode("Zm9v*"));
}

TEST_CASE("health and model card") {
  ServiceState s({kN, 1});
  const auto h = s.health();
  CHECK(h.status == 200);
  CHECK(json::parse(h.body)["version"] == NOISEFLOW_VERSION);
  CHECK(s.model_card().status == 404);
  CHECK(json::parse(s.model_card().body)["status"] == 404);

  s.load_model(model_path());
  const auto card = s.model_card();
  REQUIRE(card.status == 200);
  const json j = json::parse(card.body);
  CHECK(j["checkpoint_sha256"] == sha256_hex(read_file_bytes(model_path())));
  CHECK(j["config"]["steps_per_scale"] == json({2, 3}));
  CHECK(j["param_count"] == load_checkpoint(model_path()).model.param_count());
  CHECK(j["training"]["iteration"] == 12);
  CHECK(j["eval"].is_null());

  ServiceState wrong({64, 1});
  CHECK_THROWS(wrong.load_model(model_path()));
}

TEST_CASE("simulator response on an empty layout is symmetric") {
  ServiceState s({kN, 1});
  LayoutMask l;
  l.cells = Grid<std::uint8_t>::Zero(kN, kN);
  l.source = {kN / 2, kN / 2};
  const auto r = s.whatif(request(l, "simulator").dump());
  REQUIRE(r.status == 200);
  const json j = json::parse(r.body);
  CHECK_FALSE(j.contains("model"));
  CHECK_FALSE(j.contains("comparison"));
  const Grid<float> m = decode_map(j["simulator"]["map"]);
  const Grid<float> direct = normalize(simulate(l, ScenarioConfig{})).values.cast<float>();
  CHECK((m == direct).all());
  const int c = kN / 2;
  for (int d = 1; d < c; ++d) {
    CHECK(m(c - d, c) == m(c + d, c));
    CHECK(m(c, c - d) == m(c, c + d));
    CHECK(m(c - d, c) == m(c, c - d));
  }
  REQUIRE(r.headers.size() == 1);
  CHECK(r.headers[0].first == "X-NF-Runtime-Ms");
  CHECK(r.headers[0].second.rfind("simulator=", 0) == 0);
}

TEST_CASE("identical requests give identical bodies") {
  const ServiceState s = loaded();
  const std::string body = request(layout_with_block()).dump();
  const auto a = s.whatif(body), b = s.whatif(body);
  REQUIRE(a.status == 200);
  CHECK(a.body == b.body);
  json other = json::parse(body);
  other["seed"] = 8;
  CHECK(s.whatif(other.dump()).body != a.body);
}

TEST_CASE("comparison agrees with offline scoring") {
  const ServiceState s = loaded();
  const LayoutMask l = layout_with_block();
  const auto r = s.whatif(request(l).dump());
  REQUIRE(r.status == 200);
  const json j = json::parse(r.body);
  const DbMap sim = simulate(l, ScenarioConfig{});
  const auto model = load_checkpoint(model_path()).model;
  const SampleResult smp = sample(l, model, model.config.temperature, 7);
  CHECK((decode_map(j["model"]["map"]) == smp.map.values.cast<float>()).all());
  const std::vector<DataSample> one{{"x", l, sim, normalize(sim)}};
  const MetricRow row = score_predictions("m", one, {denormalize(smp.map).map}, 1, 0, 1);
  CHECK(j["comparison"]["los"]["mae_db"].get<double>() == doctest::Approx(row.los.mae->point).epsilon(1e-12));
  CHECK(j["comparison"]["nlos"]["mae_db"].get<double>() == doctest::Approx(row.nlos.mae->point).epsilon(1e-12));
  CHECK(j["comparison"]["nlos"]["pixels"] == row.nlos.pixels);
  CHECK(j["comparison"]["ssim"].get<double>() == doctest::Approx(row.ssim.point).epsilon(1e-12));
  CHECK(j["comparison"]["wmape_threshold_db"] == 30.0);
  CHECK(j["tau"] == doctest::Approx(model.config.temperature));
}

TEST_CASE("request errors map to status codes") {
  ServiceState empty({kN, 1});
  const ServiceState s = loaded();
  const LayoutMask l = layout_with_block();
  auto status = [&](const ServiceState& st, const json& req) { return st.whatif(req.dump()).status; };
  auto with = [&](const std::string& key, const json& v) {
    json r = request(l);
    r[key] = v;
    return r;
  };

  CHECK(s.whatif("{not json").status == 400);
  CHECK(s.whatif("[1,2]").status == 400);
  CHECK(status(s, with("layout", 3)) == 400);
  json bad_size = request(l);
  bad_size["layout"]["width"] = 16;
  CHECK(status(s, bad_size) == 400);
  json bad_rle = request(l);
  bad_rle["layout"]["rle"] = {5, 5};
  CHECK(status(s, bad_rle) == 400);
  CHECK(status(s, with("source", {-1, 3})) == 400);
  CHECK(status(s, with("source", {3, kN})) == 400);
  CHECK(status(s, with("source", "center")) == 400);
  Cell inside{-1, -1};
  for (int r = 0; r < kN && inside.row < 0; ++r)
    for (int c = 0; c < kN; ++c)
      if (l.cells(r, c)) {
        inside = {r, c};
        break;
      }
  REQUIRE(inside.row >= 0);
  CHECK(status(s, with("source", {inside.row, inside.col})) == 400);
  CHECK(status(s, with("engine", "oracle")) == 400);
  CHECK(status(s, with("tau", 2.5)) == 400);
  CHECK(status(s, with("tau", "warm")) == 400);
  CHECK(status(s, with("reflection_order", 3)) == 400);
  CHECK(status(s, with("scenario", "rain")) == 422);
  CHECK(status(empty, request(l, "model")) == 409);
  CHECK(status(empty, request(l, "both")) == 409);
  CHECK(status(empty, request(l, "simulator")) == 200);
  const json err = json::parse(s.whatif(with("scenario", "rain").dump()).body);
  CHECK(err["status"] == 422);
  CHECK(err["error"].get<std::string>().size() > 0);
}

TEST_CASE("http round trip") {
  const ServiceState s = loaded();
  HttpService server(s);
  const int port = server.start("127.0.0.1", 0);
  REQUIRE(port > 0);
  httplib::Client cli("127.0.0.1", port);

  auto t0 = std::chrono::steady_clock::now();
  auto h = cli.Get("/v1/health");
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(ms < 10.0);
  CHECK(h->get_header_value("Access-Control-Allow-Origin") == "*");

  auto m = cli.Get("/v1/model");
  REQUIRE(m);
  CHECK(m->status == 200);
  CHECK(m->body == s.model_card().body);

  const std::string body = request(layout_with_block()).dump();
  auto w = cli.Post("/v1/whatif", body, "application/json");
  REQUIRE(w);
  CHECK(w->status == 200);
  CHECK(w->body == s.whatif(body).body);
  CHECK(w->get_header_value("X-NF-Runtime-Ms").find("model=") != std::string::npos);

  auto e = cli.Post("/v1/whatif", "{", "application/json");
  REQUIRE(e);
  CHECK(e->status == 400);
  auto o = cli.Options("/v1/whatif");
  REQUIRE(o);
  CHECK(o->status == 204);
  server.stop();
}
