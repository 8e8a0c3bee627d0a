#include "noiseflow/simulator.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double cell_distance(Cell a, Cell b) {
  return std::hypot(static_cast<double>(a.row - b.row), static_cast<double>(a.col - b.col));
}

float to_db_value(double level) {
  return static_cast<float>(std::clamp(level, static_cast<double>(kDbMin),
                                       static_cast<double>(kDbMax)));
}

bool within_extent(const geom::RatPoint& p, const WallSegment& w) {
  const std::int64_t along = w.line.vertical ? p.y : p.x;
  return static_cast<__int128>(w.lo) * p.den <= along &&
         along <= static_cast<__int128>(w.hi) * p.den;
}

}  // namespace

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::Baseline: return "baseline";
    case Scenario::Diffraction: return "diffraction";
    case Scenario::Reflection: return "reflection";
  }
  return "unknown";
}

Scenario parse_scenario(const std::string& name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  if (lower == "baseline") return Scenario::Baseline;
  if (lower == "diffraction") return Scenario::Diffraction;
  if (lower == "reflection") return Scenario::Reflection;
  throw std::invalid_argument("unknown scenario '" + name + "'");
}

void ScenarioConfig::validate() const {
  if (!(source_level_db > kDbMin && source_level_db <= kDbMax))
    throw std::invalid_argument("source_level_db must lie in (DB_MIN, DB_MAX]");
  if (scenario == Scenario::Reflection && (reflection_order < 1 || reflection_order > 2))
    throw std::invalid_argument("reflection_order must be 1 or 2");
  if (!(wavelength_m > 0.0) || !(r0_m > 0.0))
    throw std::invalid_argument("wavelength_m and r0_m must be positive");
  if (reflection_loss_db < 0.0) throw std::invalid_argument("reflection_loss_db must be >= 0");
}

double path_level(double r_m, const ScenarioConfig& cfg, double extra_loss_db) {
  const double r = std::max(r_m, cfg.r0_m);
  return cfg.source_level_db - 20.0 * std::log10(r / cfg.r0_m) - extra_loss_db;
}

double free_field_level(double r_m, const ScenarioConfig& cfg) {
  return std::max(path_level(r_m, cfg), static_cast<double>(kDbMin));
}

double maekawa_attenuation(double detour_m, double wavelength_m) {
  const double fresnel = 2.0 * detour_m / wavelength_m;
  return 10.0 * std::log10(3.0 + 20.0 * fresnel);
}

double energetic_sum(std::span<const double> levels_db) {
  if (levels_db.empty()) return -kInf;
  const double peak = *std::max_element(levels_db.begin(), levels_db.end());
  double acc = 0.0;
  for (double l : levels_db) acc += std::pow(10.0, (l - peak) / 10.0);
  return peak + 10.0 * std::log10(acc);
}

RegionMasks build_region_masks(const LayoutMask& mask) {
  const int n = mask.size();
  RegionMasks out{Grid<Region>(n, n)};
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (mask.building(r, c))
        out.labels(r, c) = Region::Building;
      else
        out.labels(r, c) = geom::line_of_sight(mask, mask.source, {r, c}) ? Region::LoS
                                                                            : Region::NLoS;
    }
  }
  return out;
}

CornerGraph build_corner_graph(const LayoutMask& mask) {
  const int n = mask.size();
  CornerGraph g;
  auto occ = [&](int r, int c) {
    return r >= 0 && c >= 0 && r < n && c < n && mask.building(r, c);
  };
  for (int r = 0; r <= n; ++r) {
    for (int c = 0; c <= n; ++c) {
      const int k = occ(r - 1, c - 1) + occ(r - 1, c) + occ(r, c - 1) + occ(r, c);
      if (k == 1) g.corners.push_back(geom::lattice_point(r, c));
    }
  }
  const auto m = static_cast<Eigen::Index>(g.corners.size());
  g.weights = Eigen::MatrixXd::Constant(m, m, kInf);
  for (Eigen::Index i = 0; i < m; ++i) {
    g.weights(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < m; ++j) {
      if (geom::segment_clear(mask, g.corners[i], g.corners[j])) {
        const double d = geom::distance_cells(g.corners[i], g.corners[j]);
        g.weights(i, j) = d;
        g.weights(j, i) = d;
      }
    }
  }
  return g;
}

namespace {

// Dense Dijkstra from the source over the corner graph; cell units.
std::vector<double> source_corner_distances(const LayoutMask& mask, const CornerGraph& g) {
  const std::size_t m = g.corners.size();
  std::vector<double> dist(m, kInf);
  std::vector<bool> done(m, false);
  const geom::RatPoint src = geom::center_of(mask.source);
  for (std::size_t i = 0; i < m; ++i)
    if (geom::segment_clear(mask, src, g.corners[i]))
      dist[i] = geom::distance_cells(src, g.corners[i]);
  for (std::size_t iter = 0; iter < m; ++iter) {
    std::size_t u = m;
    for (std::size_t i = 0; i < m; ++i)
      if (!done[i] && dist[i] < kInf && (u == m || dist[i] < dist[u])) u = i;
    if (u == m) break;
    done[u] = true;
    for (std::size_t v = 0; v < m; ++v) {
      const double w = g.weights(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
      if (!done[v] && w < kInf && dist[u] + w < dist[v]) dist[v] = dist[u] + w;
    }
  }
  return dist;
}

// Shortest corner path length to the target in cell units, or +inf.
double shortest_corner_path(const LayoutMask& mask, const CornerGraph& g,
                            const std::vector<double>& from_source, Cell target) {
  const geom::RatPoint t = geom::center_of(target);
  double best = kInf;
  for (std::size_t i = 0; i < g.corners.size(); ++i) {
    if (!(from_source[i] < kInf)) continue;
    const double leg = geom::distance_cells(g.corners[i], t);
    if (from_source[i] + leg >= best) continue;
    if (geom::segment_clear(mask, g.corners[i], t)) best = from_source[i] + leg;
  }
  return best;
}

}  // namespace

std::optional<double> diffraction_detour(const LayoutMask& mask, const CornerGraph& graph,
                                         Cell target) {
  if (geom::line_of_sight(mask, mask.source, target)) return 0.0;
  const auto from_source = source_corner_distances(mask, graph);
  const double best = shortest_corner_path(mask, graph, from_source, target);
  if (!(best < kInf)) return std::nullopt;
  return (best - cell_distance(mask.source, target)) * mask.cell_size_m;
}

std::vector<WallSegment> exposed_walls(const LayoutMask& mask) {
  const int n = mask.size();
  std::vector<WallSegment> walls;
  for (int vertical = 1; vertical >= 0; --vertical) {
    for (int line = 1; line < n; ++line) {
      int run_state = 0;
      int run_start = 0;
      auto flush = [&](int end) {
        if (run_state != 0)
          walls.push_back({{vertical == 1, 2 * std::int64_t{line}}, 2 * std::int64_t{run_start},
                           2 * std::int64_t{end}, run_state});
      };
      for (int k = 0; k < n; ++k) {
        // "before" is the cell on the smaller-coordinate side of the line.
        const bool before = vertical ? mask.building(k, line - 1) : mask.building(line - 1, k);
        const bool after = vertical ? mask.building(k, line) : mask.building(line, k);
        const int state = before == after ? 0 : (before ? 1 : -1);
        if (state != run_state) {
          flush(k);
          run_state = state;
          run_start = k;
        }
      }
      flush(n);
    }
  }
  return walls;
}

DbMap simulate_baseline(const LayoutMask& mask, const ScenarioConfig& cfg) {
  mask.validate();
  cfg.validate();
  const int n = mask.size();
  const auto regions = build_region_masks(mask);
  DbMap out{Grid<float>::Constant(n, n, kDbMin)};
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (regions.is(r, c, Region::LoS))
        out.values(r, c) = to_db_value(
            free_field_level(cell_distance(mask.source, {r, c}) * mask.cell_size_m, cfg));
  return out;
}

DbMap simulate_diffraction(const LayoutMask& mask, const ScenarioConfig& cfg) {
  mask.validate();
  cfg.validate();
  const int n = mask.size();
  const auto regions = build_region_masks(mask);
  DbMap out{Grid<float>::Constant(n, n, kDbMin)};
  const auto graph = build_corner_graph(mask);
  const auto from_source = source_corner_distances(mask, graph);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const double direct = cell_distance(mask.source, {r, c});
      if (regions.is(r, c, Region::LoS)) {
        out.values(r, c) = to_db_value(free_field_level(direct * mask.cell_size_m, cfg));
      } else if (regions.is(r, c, Region::NLoS)) {
        const double path = shortest_corner_path(mask, graph, from_source, {r, c});
        if (!(path < kInf)) continue;
        const double detour_m = (path - direct) * mask.cell_size_m;
        const double level = path_level(path * mask.cell_size_m, cfg) -
                             maekawa_attenuation(detour_m, cfg.wavelength_m);
        out.values(r, c) = to_db_value(level);
      }
    }
  }
  return out;
}

DbMap simulate_reflection(const LayoutMask& mask, const ScenarioConfig& cfg) {
  mask.validate();
  cfg.validate();
  const int n = mask.size();
  const auto regions = build_region_masks(mask);
  const auto walls = exposed_walls(mask);
  const geom::RatPoint src = geom::center_of(mask.source);
  const double cell_m = mask.cell_size_m;

  struct FirstImage {
    std::size_t wall;
    geom::RatPoint image;
  };
  std::vector<FirstImage> first;
  for (std::size_t w = 0; w < walls.size(); ++w)
    if (geom::side_of(src, walls[w].line) == walls[w].free_side)
      first.push_back({w, geom::mirror(src, walls[w].line)});

  struct SecondImage {
    std::size_t first_index;
    std::size_t wall;
    geom::RatPoint image;
  };
  std::vector<SecondImage> second;
  if (cfg.reflection_order >= 2) {
    for (std::size_t f = 0; f < first.size(); ++f) {
      for (std::size_t w = 0; w < walls.size(); ++w) {
        if (w == first[f].wall) continue;
        if (geom::side_of(first[f].image, walls[w].line) != walls[w].free_side) continue;
        second.push_back({f, w, geom::mirror(first[f].image, walls[w].line)});
      }
    }
  }

  DbMap out{Grid<float>::Constant(n, n, kDbMin)};
  std::vector<double> levels;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      if (regions.is(r, c, Region::Building)) continue;
      levels.clear();
      const geom::RatPoint t = geom::center_of({r, c});
      if (regions.is(r, c, Region::LoS))
        levels.push_back(path_level(cell_distance(mask.source, {r, c}) * cell_m, cfg));

      for (const auto& fi : first) {
        const WallSegment& w = walls[fi.wall];
        if (geom::side_of(t, w.line) != w.free_side) continue;
        const auto hit = geom::cross_line(fi.image, t, w.line);
        if (!hit || !within_extent(*hit, w)) continue;
        if (!geom::segment_clear(mask, src, *hit) || !geom::segment_clear(mask, *hit, t)) continue;
        levels.push_back(
            path_level(geom::distance_cells(fi.image, t) * cell_m, cfg, cfg.reflection_loss_db));
      }

      for (const auto& si : second) {
        const WallSegment& w2 = walls[si.wall];
        const FirstImage& fi = first[si.first_index];
        const WallSegment& w1 = walls[fi.wall];
        if (geom::side_of(t, w2.line) != w2.free_side) continue;
        const auto hit2 = geom::cross_line(si.image, t, w2.line);
        if (!hit2 || !within_extent(*hit2, w2)) continue;
        if (geom::side_of(*hit2, w1.line) != w1.free_side) continue;
        const auto hit1 = geom::cross_line(fi.image, *hit2, w1.line);
        if (!hit1 || !within_extent(*hit1, w1)) continue;
        if (geom::side_of(*hit1, w2.line) != w2.free_side) continue;
        if (!geom::segment_clear(mask, *hit2, t) || !geom::segment_clear(mask, *hit1, *hit2) ||
            !geom::segment_clear(mask, src, *hit1))
          continue;
        levels.push_back(path_level(geom::distance_cells(si.image, t) * cell_m, cfg,
                                    2.0 * cfg.reflection_loss_db));
      }

      if (!levels.empty()) out.values(r, c) = to_db_value(energetic_sum(levels));
    }
  }
  return out;
}

DbMap simulate(const LayoutMask& mask, const ScenarioConfig& cfg) {
  switch (cfg.scenario) {
    case Scenario::Baseline: return simulate_baseline(mask, cfg);
    case Scenario::Diffraction: return simulate_diffraction(mask, cfg);
    case Scenario::Reflection: return simulate_reflection(mask, cfg);
  }
  throw std::invalid_argument("unknown scenario");
}

}  // namespace nf
