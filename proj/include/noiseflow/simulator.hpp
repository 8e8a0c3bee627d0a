#pragma once

#include "noiseflow/geometry.hpp"
#include "noiseflow/raster.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace nf {

enum class Scenario { Baseline, Diffraction, Reflection };

std::string to_string(Scenario s);
/// Accepts "baseline", "diffraction", "reflection" (case-insensitive).
Scenario parse_scenario(const std::string& name);

struct ScenarioConfig {
  Scenario scenario = Scenario::Baseline;
  double source_level_db = 95.0;
  int reflection_order = 1;  // 1 or 2
  double reflection_loss_db = 1.0;
  double wavelength_m = 0.68;
  double r0_m = 1.0;

  void validate() const;
};

/// Spherical spreading from the source level, clamped at kDbMin.
double free_field_level(double r_m, const ScenarioConfig& cfg);

/// Unclamped spreading level minus an extra loss. Used for path summation.
double path_level(double r_m, const ScenarioConfig& cfg, double extra_loss_db = 0.0);

/// Maekawa barrier attenuation 10·log10(3 + 20N) with Fresnel number N = 2δ/λ.
double maekawa_attenuation(double detour_m, double wavelength_m);

/// 10·log10(Σ 10^(L/10)).
double energetic_sum(std::span<const double> levels_db);

enum class Region : std::uint8_t { Building = 0, LoS = 1, NLoS = 2 };

struct RegionMasks {
  Grid<Region> labels;
  std::size_t count(Region r) const { return static_cast<std::size_t>((labels == r).count()); }
  bool is(int row, int col, Region r) const { return labels(row, col) == r; }
};

RegionMasks build_region_masks(const LayoutMask& mask);

/// Convex building corners (lattice points with exactly one occupied incident
/// cell) and their mutual visibility in cell units (+inf when blocked).
struct CornerGraph {
  std::vector<geom::RatPoint> corners;
  Eigen::MatrixXd weights;
};

CornerGraph build_corner_graph(const LayoutMask& mask);

/// Shortest source→corner(s)→target path length minus the direct distance, in
/// meters. 0 for LoS targets, nullopt when no corner path exists.
std::optional<double> diffraction_detour(const LayoutMask& mask, const CornerGraph& graph,
                                         Cell target);

/// Maximal runs of building faces that border an in-grid free cell.
struct WallSegment {
  geom::AxisLine line;
  std::int64_t lo = 0, hi = 0;  // extent along the line, half-cell units
  int free_side = 1;            // side_of() value of the free half-plane
};

std::vector<WallSegment> exposed_walls(const LayoutMask& mask);

DbMap simulate_baseline(const LayoutMask& mask, const ScenarioConfig& cfg);
DbMap simulate_diffraction(const LayoutMask& mask, const ScenarioConfig& cfg);
DbMap simulate_reflection(const LayoutMask& mask, const ScenarioConfig& cfg);

/// Dispatches on cfg.scenario.
DbMap simulate(const LayoutMask& mask, const ScenarioConfig& cfg);

}  // namespace nf
