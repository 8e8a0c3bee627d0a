#include "noiseflow/datagen.hpp"

#include "noiseflow/parallel.hpp"

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <random>
#include <sstream>

namespace nf {

namespace fs = std::filesystem;

void GenConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("GenConfig: " + what); };
  if (!is_supported_grid_size(grid_size)) fail("grid size must be 32, 64, 128 or 256");
  if (min_buildings < 0 || max_buildings < min_buildings) fail("bad building count range");
  if (min_side < 1 || max_side < min_side || max_side > grid_size) fail("bad building size range");
  if (clearance < 0) fail("clearance must be >= 0");
  if (samples < 1) fail("samples must be >= 1");
  if (scenarios.empty()) fail("at least one scenario is required");
  if (reflection_order < 1 || reflection_order > 2) fail("reflection_order must be 1 or 2");
}

json to_json(const GenConfig& c) {
  json sc = json::array();
  for (Scenario s : c.scenarios) sc.push_back(to_string(s));
  return {{"grid_size", c.grid_size},   {"min_buildings", c.min_buildings},
          {"max_buildings", c.max_buildings}, {"min_side", c.min_side},
          {"max_side", c.max_side},     {"clearance", c.clearance},
          {"seed", c.seed},             {"samples", c.samples},
          {"scenarios", sc},            {"reflection_order", c.reflection_order}};
}

GenConfig gen_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("gen config must be a JSON object");
  GenConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "grid_size") c.grid_size = v.get<int>();
    else if (k == "min_buildings") c.min_buildings = v.get<int>();
    else if (k == "max_buildings") c.max_buildings = v.get<int>();
    else if (k == "min_side") c.min_side = v.get<int>();
    else if (k == "max_side") c.max_side = v.get<int>();
    else if (k == "clearance") c.clearance = v.get<int>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "samples") c.samples = v.get<int>();
    else if (k == "reflection_order") c.reflection_order = v.get<int>();
    else if (k == "scenarios") {
      c.scenarios.clear();
      for (const auto& s : v) c.scenarios.push_back(parse_scenario(s.get<std::string>()));
    } else throw std::invalid_argument("unknown gen config key: " + k);
  }
  c.validate();
  return c;
}

LayoutMask gen_layout(const GenConfig& cfg, int index) {
  const int n = cfg.grid_size;
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  LayoutMask m(n, {n / 2, n / 2});
  std::uniform_int_distribution<int> count(cfg.min_buildings, cfg.max_buildings);
  std::uniform_int_distribution<int> side(cfg.min_side, std::min(cfg.max_side, n));
  const int k = count(rng);
  const int s0 = m.source.row - cfg.clearance, s1 = m.source.row + cfg.clearance;
  const int t0 = m.source.col - cfg.clearance, t1 = m.source.col + cfg.clearance;
  int rejections = 0;
  for (int b = 0; b < k; ++b) {
    while (true) {
      const int h = side(rng), w = side(rng);
      const int r0 = std::uniform_int_distribution<int>(0, n - h)(rng);
      const int c0 = std::uniform_int_distribution<int>(0, n - w)(rng);
      const bool hits = r0 <= s1 && r0 + h - 1 >= s0 && c0 <= t1 && c0 + w - 1 >= t0;
      if (!hits) {
        m.cells.block(r0, c0, h, w).setOnes();
        break;
      }
      if (++rejections >= 1000)
        throw GenerationError("layout " + std::to_string(index) +
                              ": 1000 placement rejections, configuration too dense");
    }
  }
  return m;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split: " + s);
}

std::vector<Split> assign_splits(int n, std::uint64_t seed) {
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ 0x73706c6974ull);
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[std::uniform_int_distribution<int>(0, i)(rng)]);
  const int n_train = n * 8 / 10, n_val = n / 10;
  std::vector<Split> out(n);
  for (int k = 0; k < n; ++k)
    out[order[k]] = k < n_train ? Split::Train : k < n_train + n_val ? Split::Val : Split::Test;
  return out;
}

json to_json(const DatasetManifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    json targets = json::object();
    for (const auto& [sc, path] : s.targets) targets[to_string(sc)] = path;
    samples.push_back({{"id", s.id}, {"layout", s.layout}, {"targets", targets}, {"split", to_string(s.split)}});
  }
  return {{"version", kManifestVersion},
          {"gen_config", to_json(m.config)},
          {"split_fractions", {0.8, 0.1, 0.1}},
          {"split_rule", "seeded shuffle; floor(0.8n) train, floor(0.1n) val, remainder test"},
          {"samples", samples}};
}

DatasetManifest manifest_from_json(const json& j) {
  if (j.at("version").get<int>() != kManifestVersion)
    throw std::runtime_error("unsupported manifest version");
  DatasetManifest m;
  m.config = gen_config_from_json(j.at("gen_config"));
  for (const auto& s : j.at("samples")) {
    SampleRecord r{s.at("id").get<std::string>(), s.at("layout").get<std::string>(), {},
                   parse_split(s.at("split").get<std::string>())};
    for (const auto& [sc, path] : s.at("targets").items())
      r.targets.emplace_back(parse_scenario(sc), path.get<std::string>());
    std::sort(r.targets.begin(), r.targets.end());
    m.samples.push_back(std::move(r));
  }
  return m;
}

namespace {

std::string sample_id(int i) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << i;
  return os.str();
}

bool readable_raster(const fs::path& p) {
  try {
    load_raster(p.string());
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

DatasetManifest build_dataset(const GenConfig& cfg, const std::string& dir, int threads) {
  cfg.validate();
  const fs::path root(dir);
  fs::create_directories(root / "layouts");
  for (Scenario s : cfg.scenarios) fs::create_directories(root / "targets" / to_string(s));

  DatasetManifest m{cfg, {}};
  const auto splits = assign_splits(cfg.samples, cfg.seed);
  std::vector<Scenario> scenarios = cfg.scenarios;
  std::sort(scenarios.begin(), scenarios.end());
  scenarios.erase(std::unique(scenarios.begin(), scenarios.end()), scenarios.end());
  for (int i = 0; i < cfg.samples; ++i) {
    const std::string id = sample_id(i);
    SampleRecord r{id, "layouts/" + id + ".nfr", {}, splits[i]};
    for (Scenario s : scenarios) r.targets.emplace_back(s, "targets/" + to_string(s) + "/" + id + ".nfr");
    m.samples.push_back(std::move(r));
  }

  parallel_for(cfg.samples, threads, [&](int i) {
    const auto& rec = m.samples[i];
    const LayoutMask layout = gen_layout(cfg, i);
    const fs::path lp = root / rec.layout;
    if (!readable_raster(lp)) save_raster(lp.string(), to_raster(layout));
    for (const auto& [s, rel] : rec.targets) {
      const fs::path tp = root / rel;
      if (readable_raster(tp)) continue;
      ScenarioConfig sc;
      sc.scenario = s;
      sc.reflection_order = cfg.reflection_order;
      save_raster(tp.string(), to_raster(simulate(layout, sc)));
    }
  });

  const std::string text = to_json(m).dump(2) + "\n";
  write_file_bytes((root / "manifest.json").string(),
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return m;
}

DatasetManifest load_manifest(const std::string& dir) {
  const auto path = (fs::path(dir) / "manifest.json").string();
  const auto bytes = read_file_bytes(path);
  try {
    return manifest_from_json(json::parse(bytes.begin(), bytes.end()));
  } catch (const std::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

std::vector<DataSample> load_split(const std::string& dir, const DatasetManifest& m, Split split,
                                   Scenario scenario) {
  std::vector<DataSample> out;
  for (const auto& rec : m.samples) {
    if (rec.split != split) continue;
    auto it = std::find_if(rec.targets.begin(), rec.targets.end(),
                           [&](const auto& t) { return t.first == scenario; });
    if (it == rec.targets.end())
      throw std::runtime_error("dataset has no " + to_string(scenario) + " targets for sample " + rec.id);
    const fs::path lp = fs::path(dir) / rec.layout, tp = fs::path(dir) / it->second;
    LayoutMask layout = layout_from_raster(load_raster(lp.string()));
    DbMap db = db_map_from_raster(load_raster(tp.string()));
    NormMap target;
    try {
      target = normalize(db);
    } catch (const RangeError& e) {
      throw std::runtime_error(tp.string() + ": " + e.what());
    }
    out.push_back({rec.id, std::move(layout), std::move(db), std::move(target)});
  }
  return out;
}

}  // namespace nf
