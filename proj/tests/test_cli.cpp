#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "noiseflow/datagen.hpp"
#include "noiseflow/simulator.hpp"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace nf;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "nf_cli";

struct Run {
  int code;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Run run(const std::string& args) {
  fs::create_directories(kWork);
  const fs::path o = kWork / "stdout.txt", e = kWork / "stderr.txt";
  const std::string cmd = std::string(NF_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

json echoed(const Run& r) {
  std::istringstream in(r.err);
  std::string line;
  std::getline(in, line);
  return json::parse(line);
}

fs::path fresh(const std::string& name) {
  const fs::path d = kWork / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("usage errors exit 2") {
  CHECK(run("").code == 2);
  CHECK(run("frobnicate").code == 2);
  CHECK(run("simulate --no-such-flag").code == 2);
  CHECK(run("simulate --size").code == 2);
  CHECK(run("simulate --config /nonexistent/cfg.json").code == 2);
  const Run h = run("--help");
  CHECK(h.code == 0);
  for (const char* sub : {"gen-data", "simulate", "train", "eval", "bench", "serve", "grad-check"})
    CHECK(h.out.find(sub) != std::string::npos);
}

TEST_CASE("operational failures exit 1 with the module error") {
  const Run r = run("simulate --layout /nonexistent/layout.nfr");
  CHECK(r.code == 1);
  CHECK(r.err.find("error: ") != std::string::npos);
  CHECK(r.err.find("/nonexistent/layout.nfr") != std::string::npos);
  CHECK(run("simulate --scenario fog").code == 1);
  CHECK(run("simulate --size 32 --source 40,1").code == 1);
  CHECK(run("eval --checkpoint /nonexistent.ckpt").code == 1);
}

TEST_CASE("defaults < config file < flags, echoed as canonical JSON") {
  const fs::path d = fresh("precedence");
  write(d / "cfg.json", R"({"gen": {"samples": 7, "grid_size": 32, "seed": 3}, "threads": 1})");
  const Run r = run("gen-data --config " + (d / "cfg.json").string() + " --n 5 --out " + (d / "data").string());
  REQUIRE(r.code == 0);
  const json e = echoed(r);
  CHECK(e["command"] == "gen-data");
  CHECK(e["gen"]["samples"] == 5);
  CHECK(e["gen"]["grid_size"] == 32);
  CHECK(e["gen"]["seed"] == 3);
  CHECK(e["gen"]["max_buildings"] == GenConfig{}.max_buildings);
  CHECK(r.err.substr(0, r.err.find('\n')) == e.dump());
  CHECK(load_manifest((d / "data").string()).samples.size() == 5);

  write(d / "echo.json", e.dump());
  const Run again = run("gen-data --config " + (d / "echo.json").string());
  REQUIRE(again.code == 0);
  CHECK(echoed(again) == e);

  write(d / "bad.json", R"({"gen": {"samplez": 7}})");
  const Run bad = run("gen-data --config " + (d / "bad.json").string());
  CHECK(bad.code == 1);
  CHECK(bad.err.find("samplez") != std::string::npos);
}

TEST_CASE("simulate is deterministic and matches the library") {
  const fs::path d = fresh("simulate");
  const std::string args = "simulate --size 32 --source 10,12 --scenario reflection --reflection-order 2 --out ";
  REQUIRE(run(args + (d / "a.nfr").string() + " --pgm " + (d / "a.pgm").string()).code == 0);
  REQUIRE(run(args + (d / "b.nfr").string()).code == 0);
  CHECK(read_file_bytes((d / "a.nfr").string()) == read_file_bytes((d / "b.nfr").string()));
  ScenarioConfig sc;
  sc.scenario = Scenario::Reflection;
  sc.reflection_order = 2;
  const DbMap direct = simulate(LayoutMask(32, {10, 12}), sc);
  CHECK(read_file_bytes((d / "a.nfr").string()) == write_raster(to_raster(direct)));
  CHECK(slurp(d / "a.pgm") == to_pgm(direct));
}

TEST_CASE("gen-data, train, eval pipeline") {
  const fs::path d = fresh("pipeline");
  const std::string data = (d / "data").string(), run_dir = (d / "run").string();
  REQUIRE(run("gen-data --n 20 --size 32 --seed 2 --scenarios baseline --out " + data).code == 0);
  const std::string train = "train --data " + data + " --out " + run_dir +
                            " --iters 6 --batch 2 --steps 1,1 --cond-hidden 4 --coupling-hidden 8"
                            " --eval-every 3 --checkpoint-every 3";
  const Run t = run(train);
  REQUIRE(t.code == 0);
  CHECK(echoed(t)["flow"]["steps_per_scale"] == json({1, 1}));
  CHECK(fs::exists(run_dir + "/best.ckpt"));
  CHECK(fs::exists(run_dir + "/history.csv"));

  const std::string eval = "eval --checkpoint " + run_dir + "/last.ckpt --data " + data +
                           " --no-bench --bootstrap 200 --json " + (d / "report.json").string();
  const Run a = run(eval);
  REQUIRE(a.code == 0);
  CHECK(a.out.find("Mean predictor") != std::string::npos);
  const std::string report = slurp(d / "report.json");
  const Run b = run(eval);
  CHECK(b.out == a.out);
  CHECK(slurp(d / "report.json") == report);
  CHECK(json::parse(report)["scenario"] == "baseline");
}

TEST_CASE("grad-check exits 0 on pass") {
  const Run r = run("grad-check --seeds 0");
  CHECK(r.code == 0);
  CHECK(r.out.find("grad-check passed") != std::string::npos);
}
