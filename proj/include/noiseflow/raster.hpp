#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nf {

inline constexpr float kDbMin = 0.0f;
inline constexpr float kDbMax = 100.0f;

template <typename T>
using Grid = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Value outside the admissible dB range. Carries the offending pixel.
class RangeError : public std::runtime_error {
 public:
  RangeError(int row, int col, double value);
  int row() const { return row_; }
  int col() const { return col_; }
  double value() const { return value_; }

 private:
  int row_, col_;
  double value_;
};

class InvalidLayout : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Binary building occupancy plus a point source. Square, row-major.
struct LayoutMask {
  Grid<std::uint8_t> cells;  // 1 = building
  Cell source;
  double cell_size_m = 1.0;

  LayoutMask() = default;
  LayoutMask(int size, Cell src, double cell_size = 1.0);

  int size() const { return static_cast<int>(cells.rows()); }
  bool in_bounds(Cell c) const {
    return c.row >= 0 && c.col >= 0 && c.row < size() && c.col < size();
  }
  bool building(int r, int c) const { return cells(r, c) != 0; }
  bool building(Cell c) const { return cells(c.row, c.col) != 0; }

  /// Throws InvalidLayout when the grid is not square, holds values other
  /// than 0/1, or the source is outside the grid or inside a building.
  void validate() const;

  friend bool operator==(const LayoutMask& a, const LayoutMask& b) {
    return a.source == b.source && a.cell_size_m == b.cell_size_m &&
           a.cells.rows() == b.cells.rows() && a.cells.cols() == b.cells.cols() &&
           (a.cells == b.cells).all();
  }
};

/// Sizes accepted for datasets, the service, and the CLI.
bool is_supported_grid_size(int n);

struct DbMap {
  Grid<float> values;
  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

/// [0,1] map. Stored in double so that the dB round trip is exact for every
/// f32 DbMap (an f32 quotient d/100 is not injective on [0,100]).
struct NormMap {
  Grid<double> values;
  int width() const { return static_cast<int>(values.cols()); }
  int height() const { return static_cast<int>(values.rows()); }
};

NormMap normalize(const DbMap& map);

struct Denormalized {
  DbMap map;
  std::size_t clamp_count = 0;
};
Denormalized denormalize(const NormMap& map);

// ---------------------------------------------------------------------------
// RasterFile: "NFR1" | u32 width | u32 height | u32 channels | u8 dtype |
// payload (f32-LE, row-major, channel-minor). 17-byte header.

inline constexpr std::size_t kRasterHeaderBytes = 17;
inline constexpr std::uint8_t kDtypeF32 = 1;

struct RasterFile {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t channels = 0;
  std::vector<float> payload;

  float at(std::uint32_t row, std::uint32_t col, std::uint32_t ch = 0) const {
    return payload[(static_cast<std::size_t>(row) * width + col) * channels + ch];
  }
};

class RasterFormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, Truncated, UnknownDtype, TrailingBytes };
  RasterFormatError(Kind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::vector<std::uint8_t> write_raster(const RasterFile& file);
RasterFile read_raster(std::span<const std::uint8_t> bytes);

void save_raster(const std::string& path, const RasterFile& file);
RasterFile load_raster(const std::string& path);

RasterFile to_raster(const DbMap& map);
RasterFile to_raster(const NormMap& map);  // narrowed to f32
DbMap db_map_from_raster(const RasterFile& file);

/// Layouts are stored as two channels: occupancy and a one-hot source marker.
RasterFile to_raster(const LayoutMask& mask);
LayoutMask layout_from_raster(const RasterFile& file, double cell_size_m = 1.0);

/// ASCII PGM (P2): free 255, building 0, source 128.
std::string to_pgm(const LayoutMask& mask);
/// ASCII PGM (P2) on the fixed [kDbMin, kDbMax] scale.
std::string to_pgm(const DbMap& map);

// Little-endian byte helpers shared by the checkpoint format.
void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void append_f32(std::vector<std::uint8_t>& out, float v);
std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t offset);
float read_f32(std::span<const std::uint8_t> bytes, std::size_t offset);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
/// Writes via a temporary file and rename so readers never see partial files.
void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace nf
