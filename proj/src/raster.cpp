#include "noiseflow/raster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace nf {

namespace {

constexpr std::uint8_t kMagic[4] = {'N', 'F', 'R', '1'};

std::string pixel_message(int row, int col, double value) {
  std::ostringstream os;
  os << "dB value " << value << " at pixel (" << row << ", " << col
     << ") outside [" << kDbMin << ", " << kDbMax << "]";
  return os.str();
}

}  // namespace

RangeError::RangeError(int row, int col, double value)
    : std::runtime_error(pixel_message(row, col, value)), row_(row), col_(col), value_(value) {}

LayoutMask::LayoutMask(int size, Cell src, double cell_size)
    : cells(Grid<std::uint8_t>::Zero(size, size)), source(src), cell_size_m(cell_size) {}

void LayoutMask::validate() const {
  if (cells.rows() != cells.cols() || cells.rows() < 2)
    throw InvalidLayout("layout must be square with side >= 2");
  if (!((cells == 0) || (cells == 1)).all())
    throw InvalidLayout("layout cells must be 0 or 1");
  if (!in_bounds(source)) throw InvalidLayout("source outside grid");
  if (building(source)) throw InvalidLayout("source cell is occupied by a building");
  if (!(cell_size_m > 0.0)) throw InvalidLayout("cell_size_m must be positive");
}

bool is_supported_grid_size(int n) { return n == 32 || n == 64 || n == 128 || n == 256; }

NormMap normalize(const DbMap& map) {
  NormMap out{Grid<double>(map.height(), map.width())};
  constexpr double span = static_cast<double>(kDbMax) - static_cast<double>(kDbMin);
  for (int r = 0; r < map.height(); ++r) {
    for (int c = 0; c < map.width(); ++c) {
      const float v = map.values(r, c);
      if (!(v >= kDbMin && v <= kDbMax)) throw RangeError(r, c, v);
      out.values(r, c) = (static_cast<double>(v) - kDbMin) / span;
    }
  }
  return out;
}

Denormalized denormalize(const NormMap& map) {
  Denormalized out{DbMap{Grid<float>(map.height(), map.width())}, 0};
  constexpr double span = static_cast<double>(kDbMax) - static_cast<double>(kDbMin);
  for (int r = 0; r < map.height(); ++r) {
    for (int c = 0; c < map.width(); ++c) {
      double v = map.values(r, c);
      if (std::isnan(v) || v < 0.0 || v > 1.0) {
        ++out.clamp_count;
        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
      }
      out.map.values(r, c) = static_cast<float>(kDbMin + v * span);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_f32(std::vector<std::uint8_t>& out, float v) {
  append_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::uint32_t read_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  return v;
}

float read_f32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return std::bit_cast<float>(read_u32(bytes, offset));
}

std::vector<std::uint8_t> write_raster(const RasterFile& file) {
  const std::size_t expected =
      static_cast<std::size_t>(file.width) * file.height * file.channels;
  if (file.payload.size() != expected)
    throw std::invalid_argument("raster payload size does not match dimensions");
  std::vector<std::uint8_t> out;
  out.reserve(kRasterHeaderBytes + expected * 4);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  append_u32(out, file.width);
  append_u32(out, file.height);
  append_u32(out, file.channels);
  out.push_back(kDtypeF32);
  for (float v : file.payload) append_f32(out, v);
  return out;
}

RasterFile read_raster(std::span<const std::uint8_t> bytes) {
  using Kind = RasterFormatError::Kind;
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
    throw RasterFormatError(Kind::BadMagic, "raster: bad magic (expected NFR1)");
  if (bytes.size() < kRasterHeaderBytes)
    throw RasterFormatError(Kind::Truncated, "raster: truncated header");
  RasterFile file;
  file.width = read_u32(bytes, 4);
  file.height = read_u32(bytes, 8);
  file.channels = read_u32(bytes, 12);
  const std::uint8_t dtype = bytes[16];
  if (dtype != kDtypeF32)
    throw RasterFormatError(Kind::UnknownDtype,
                            "raster: unknown dtype code " + std::to_string(dtype));
  const std::uint64_t count = static_cast<std::uint64_t>(file.width) * file.height * file.channels;
  const std::uint64_t need = kRasterHeaderBytes + count * 4;
  if (bytes.size() < need)
    throw RasterFormatError(Kind::Truncated, "raster: payload truncated (" +
                                                 std::to_string(bytes.size()) + " of " +
                                                 std::to_string(need) + " bytes)");
  if (bytes.size() > need)
    throw RasterFormatError(Kind::TrailingBytes, "raster: trailing bytes after payload");
  file.payload.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    file.payload[i] = read_f32(bytes, kRasterHeaderBytes + 4 * i);
  return file;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

void save_raster(const std::string& path, const RasterFile& file) {
  write_file_bytes(path, write_raster(file));
}

RasterFile load_raster(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return read_raster(bytes);
  } catch (const RasterFormatError& e) {
    throw RasterFormatError(e.kind(), path + ": " + e.what());
  }
}

RasterFile to_raster(const DbMap& map) {
  RasterFile f{static_cast<std::uint32_t>(map.width()), static_cast<std::uint32_t>(map.height()),
               1, {}};
  f.payload.assign(map.values.data(), map.values.data() + map.values.size());
  return f;
}

RasterFile to_raster(const NormMap& map) {
  RasterFile f{static_cast<std::uint32_t>(map.width()), static_cast<std::uint32_t>(map.height()),
               1, {}};
  f.payload.resize(map.values.size());
  for (Eigen::Index i = 0; i < map.values.size(); ++i)
    f.payload[i] = static_cast<float>(map.values.data()[i]);
  return f;
}

DbMap db_map_from_raster(const RasterFile& file) {
  if (file.channels != 1) throw std::invalid_argument("dB raster must have one channel");
  DbMap map{Grid<float>(file.height, file.width)};
  std::copy(file.payload.begin(), file.payload.end(), map.values.data());
  return map;
}

RasterFile to_raster(const LayoutMask& mask) {
  const auto n = static_cast<std::uint32_t>(mask.size());
  RasterFile f{n, n, 2, std::vector<float>(static_cast<std::size_t>(n) * n * 2, 0.0f)};
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < n; ++c) {
      const std::size_t i = (static_cast<std::size_t>(r) * n + c) * 2;
      f.payload[i] = mask.cells(r, c) ? 1.0f : 0.0f;
      f.payload[i + 1] = (static_cast<int>(r) == mask.source.row &&
                          static_cast<int>(c) == mask.source.col)
                             ? 1.0f
                             : 0.0f;
    }
  }
  return f;
}

LayoutMask layout_from_raster(const RasterFile& file, double cell_size_m) {
  if (file.channels != 2 || file.width != file.height)
    throw InvalidLayout("layout raster must be square with 2 channels");
  const int n = static_cast<int>(file.width);
  LayoutMask mask(n, {-1, -1}, cell_size_m);
  int sources = 0;
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const float occ = file.at(r, c, 0);
      if (occ != 0.0f && occ != 1.0f) throw InvalidLayout("layout occupancy must be 0/1");
      mask.cells(r, c) = occ == 1.0f ? 1 : 0;
      if (file.at(r, c, 1) == 1.0f) {
        mask.source = {r, c};
        ++sources;
      }
    }
  }
  if (sources != 1) throw InvalidLayout("layout raster must mark exactly one source");
  mask.validate();
  return mask;
}

std::string to_pgm(const LayoutMask& mask) {
  std::ostringstream os;
  const int n = mask.size();
  os << "P2\n" << n << ' ' << n << "\n255\n";
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      int v = mask.building(r, c) ? 0 : 255;
      if (Cell{r, c} == mask.source) v = 128;
      os << v << (c + 1 < n ? ' ' : '\n');
    }
  }
  return os.str();
}

std::string to_pgm(const DbMap& map) {
  std::ostringstream os;
  os << "P2\n" << map.width() << ' ' << map.height() << "\n255\n";
  for (int r = 0; r < map.height(); ++r)
    for (int c = 0; c < map.width(); ++c) {
      const double t = std::clamp((map.values(r, c) - kDbMin) / (kDbMax - kDbMin), 0.0f, 1.0f);
      os << static_cast<int>(std::lround(255.0 * t)) << (c + 1 < map.width() ? ' ' : '\n');
    }
  return os.str();
}

}  // namespace nf
