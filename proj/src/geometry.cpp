#include "noiseflow/geometry.hpp"

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <stdexcept>

namespace nf::geom {

namespace {

using i128 = __int128;

i128 floor_div(i128 a, i128 b) {
  i128 q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

i128 abs128(i128 v) { return v < 0 ? -v : v; }
int sgn(i128 v) { return (v > 0) - (v < 0); }

i128 gcd128(i128 a, i128 b) {
  a = abs128(a);
  b = abs128(b);
  while (b != 0) {
    const i128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

std::int64_t narrow(i128 v) {
  if (v > std::numeric_limits<std::int64_t>::max() || v < std::numeric_limits<std::int64_t>::min())
    throw std::overflow_error("geometry: rational coordinate overflow");
  return static_cast<std::int64_t>(v);
}

RatPoint reduced(i128 x, i128 y, i128 den) {
  if (den < 0) {
    x = -x;
    y = -y;
    den = -den;
  }
  i128 g = gcd128(gcd128(x, y), den);
  if (g > 1) {
    x /= g;
    y /= g;
    den /= g;
  }
  return {narrow(x), narrow(y), narrow(den)};
}

bool building_at(const LayoutMask& mask, i128 row, i128 col) {
  if (row < 0 || col < 0 || row >= mask.size() || col >= mask.size()) return false;
  return mask.building(static_cast<int>(row), static_cast<int>(col));
}

}  // namespace

bool same_point(const RatPoint& a, const RatPoint& b) {
  return i128{a.x} * b.den == i128{b.x} * a.den && i128{a.y} * b.den == i128{b.y} * a.den;
}

double distance_cells(const RatPoint& a, const RatPoint& b) {
  return 0.5 * std::hypot(a.xd() - b.xd(), a.yd() - b.yd());
}

namespace {

/// Visits the supercover cells from a to b in order; stops when fn returns false.
template <typename Fn>
bool walk_supercover(Cell a, Cell b, Fn&& fn) {
  if (!fn(a)) return false;
  const int nx = std::abs(b.col - a.col);
  const int ny = std::abs(b.row - a.row);
  const int sx = (b.col > a.col) - (b.col < a.col);
  const int sy = (b.row > a.row) - (b.row < a.row);
  int row = a.row, col = a.col;
  int i = 0, j = 0;
  // Grid-line crossings happen at t = (2i+1)/(2nx) and (2j+1)/(2ny).
  while (i < nx || j < ny) {
    const long long tx = static_cast<long long>(2 * i + 1) * ny;
    const long long ty = static_cast<long long>(2 * j + 1) * nx;
    if (j >= ny || (i < nx && tx < ty)) {
      col += sx;
      ++i;
    } else if (i >= nx || tx > ty) {
      row += sy;
      ++j;
    } else {
      if (!fn(Cell{row, col + sx}) || !fn(Cell{row + sy, col})) return false;
      col += sx;
      row += sy;
      ++i;
      ++j;
    }
    if (!fn(Cell{row, col})) return false;
  }
  return true;
}

}  // namespace

std::vector<Cell> supercover(Cell a, Cell b) {
  std::vector<Cell> cells;
  walk_supercover(a, b, [&](Cell c) {
    cells.push_back(c);
    return true;
  });
  return cells;
}

bool line_of_sight(const LayoutMask& mask, Cell a, Cell b) {
  if (a == b) return true;
  return walk_supercover(a, b, [&](Cell c) {
    return c == a || c == b || !building_at(mask, c.row, c.col);
  });
}

bool segment_clear(const LayoutMask& mask, const RatPoint& p, const RatPoint& q) {
  const i128 g = std::gcd(p.den, q.den);
  const i128 den = i128{p.den} / g * q.den;
  const i128 px = i128{p.x} * (den / p.den), py = i128{p.y} * (den / p.den);
  const i128 qx = i128{q.x} * (den / q.den), qy = i128{q.y} * (den / q.den);
  const i128 unit = 2 * den;  // one cell side
  const i128 dx = qx - px, dy = qy - py;
  if (dx == 0 && dy == 0) return true;
  const int sx = sgn(dx), sy = sgn(dy);

  auto on_line = [&](i128 v) { return v % unit == 0; };
  auto start_index = [&](i128 v, int s) -> i128 {
    if (on_line(v) && s != 0) return v / unit + (s > 0 ? 0 : -1);
    return floor_div(v, unit);
  };
  auto first_line = [&](i128 v, int s) -> i128 {
    return s > 0 ? floor_div(v, unit) + 1 : -floor_div(-v, unit) - 1;
  };
  auto before_end = [&](i128 m, int s, i128 end) {
    return s > 0 ? m * unit < end : m * unit > end;
  };

  // Leg running along a grid line: blocked only between buildings on both
  // sides, or through a diagonal pinch at a lattice point.
  if ((dx == 0 && on_line(px)) || (dy == 0 && on_line(py))) {
    const bool vertical = dx == 0;
    const i128 line = (vertical ? px : py) / unit;
    const int s = vertical ? sy : sx;
    const i128 from = vertical ? py : px, to = vertical ? qy : qx;
    auto occ = [&](i128 along, i128 across) {
      return vertical ? building_at(mask, along, across) : building_at(mask, across, along);
    };
    i128 k = start_index(from, s);
    i128 m = first_line(from, s);
    for (;;) {
      if (occ(k, line - 1) && occ(k, line)) return false;
      if (!before_end(m, s, to)) break;
      const i128 next = k + s;
      if ((occ(k, line - 1) && occ(next, line)) || (occ(k, line) && occ(next, line - 1)))
        return false;
      k = next;
      m += s;
    }
    return true;
  }

  i128 col = start_index(px, sx);
  i128 row = start_index(py, sy);
  i128 mx = sx != 0 ? first_line(px, sx) : 0;
  i128 my = sy != 0 ? first_line(py, sy) : 0;
  const i128 adx = abs128(dx), ady = abs128(dy);
  if (building_at(mask, row, col)) return false;
  for (;;) {
    const bool has_x = sx != 0 && before_end(mx, sx, qx);
    const bool has_y = sy != 0 && before_end(my, sy, qy);
    if (!has_x && !has_y) break;
    int step = 0;  // 1: x, 2: y, 3: both
    if (has_x && has_y) {
      const i128 tx = (mx * unit - px) * sx * ady;
      const i128 ty = (my * unit - py) * sy * adx;
      step = tx < ty ? 1 : (tx > ty ? 2 : 3);
    } else {
      step = has_x ? 1 : 2;
    }
    if (step == 3) {
      if (building_at(mask, row, col + sx) && building_at(mask, row + sy, col)) return false;
      col += sx;
      row += sy;
      mx += sx;
      my += sy;
    } else if (step == 1) {
      col += sx;
      mx += sx;
    } else {
      row += sy;
      my += sy;
    }
    if (building_at(mask, row, col)) return false;
  }
  return true;
}

RatPoint mirror(const RatPoint& p, const AxisLine& line) {
  const i128 c = i128{line.coord} * p.den * 2;
  if (line.vertical) return {narrow(c - p.x), p.y, p.den};
  return {p.x, narrow(c - p.y), p.den};
}

int side_of(const RatPoint& p, const AxisLine& line) {
  const i128 v = line.vertical ? p.x : p.y;
  return sgn(v - i128{line.coord} * p.den);
}

std::optional<RatPoint> cross_line(const RatPoint& a, const RatPoint& b, const AxisLine& line) {
  const int sa = side_of(a, line), sb = side_of(b, line);
  if (sa == 0 || sb == 0 || sa == sb) return std::nullopt;
  const i128 den = i128{a.den} * b.den;
  const i128 ax = i128{a.x} * b.den, ay = i128{a.y} * b.den;
  const i128 bx = i128{b.x} * a.den, by = i128{b.y} * a.den;
  const i128 c = i128{line.coord} * den;
  if (line.vertical) {
    const i128 span = bx - ax;
    const i128 y = ay * span + (c - ax) * (by - ay);
    return reduced(c * span, y, den * span);
  }
  const i128 span = by - ay;
  const i128 x = ax * span + (c - ay) * (bx - ax);
  return reduced(x, c * span, den * span);
}

}  // namespace nf::geom
