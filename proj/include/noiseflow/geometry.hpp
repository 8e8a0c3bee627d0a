#pragma once

#include "noiseflow/raster.hpp"

#include <cstdint>
#include <optional>
#include <vector>

// Exact grid geometry. Points are rationals in half-cell units: the centre of
// cell (r, c) is (2c+1, 2r+1) and the lattice corner above-left of it is
// (2c, 2r). x runs along columns, y along rows.
namespace nf::geom {

struct RatPoint {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t den = 1;  // > 0

  double xd() const { return static_cast<double>(x) / static_cast<double>(den); }
  double yd() const { return static_cast<double>(y) / static_cast<double>(den); }
};

bool same_point(const RatPoint& a, const RatPoint& b);

inline RatPoint center_of(Cell c) { return {2 * c.col + 1, 2 * c.row + 1, 1}; }
inline RatPoint lattice_point(int row, int col) { return {2 * std::int64_t{col}, 2 * std::int64_t{row}, 1}; }

/// Euclidean distance in cell units.
double distance_cells(const RatPoint& a, const RatPoint& b);

/// Every cell whose square the segment between the centres of a and b
/// touches, in traversal order, endpoints included. Where the segment passes
/// exactly through a lattice corner both side cells are listed (side cell in
/// the column direction first).
std::vector<Cell> supercover(Cell a, Cell b);

/// True iff no cell of supercover(a, b), except a and b themselves, is a
/// building. Cells outside the grid are free.
bool line_of_sight(const LayoutMask& mask, Cell a, Cell b);

/// Clearance test for propagation legs whose endpoints may sit on building
/// boundaries (diffraction corners, reflection points). A leg is blocked when
/// it enters the open interior of a building cell, squeezes through a lattice
/// corner between two diagonally touching buildings, or runs along a grid line
/// with buildings on both sides.
bool segment_clear(const LayoutMask& mask, const RatPoint& p, const RatPoint& q);

/// Axis-aligned line: vertical lines are x = coord, horizontal y = coord, with
/// coord in half-cell units (always even for grid lines).
struct AxisLine {
  bool vertical = true;
  std::int64_t coord = 0;
};

RatPoint mirror(const RatPoint& p, const AxisLine& line);

/// Signed side of p relative to the line: +1 for larger coordinate, -1 for
/// smaller, 0 when on the line.
int side_of(const RatPoint& p, const AxisLine& line);

/// Intersection of segment a→b with the line when a and b lie strictly on
/// opposite sides; nullopt otherwise.
std::optional<RatPoint> cross_line(const RatPoint& a, const RatPoint& b, const AxisLine& line);

}  // namespace nf::geom
