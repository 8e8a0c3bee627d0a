#pragma once

#include "noiseflow/checkpoint.hpp"
#include "noiseflow/raster.hpp"
#include "noiseflow/simulator.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nf {

inline constexpr int kManifestVersion = 1;

struct GenConfig {
  int grid_size = 64;
  int min_buildings = 3, max_buildings = 12;
  int min_side = 3, max_side = 20;
  int clearance = 3;
  std::uint64_t seed = 0;
  int samples = 500;
  std::vector<Scenario> scenarios{Scenario::Baseline, Scenario::Diffraction, Scenario::Reflection};
  int reflection_order = 1;

  void validate() const;
};

json to_json(const GenConfig& cfg);
GenConfig gen_config_from_json(const json& j);

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Axis-aligned rectangles rejection-sampled away from a (2*clearance+1)^2
/// square around the central source; deterministic in (seed, index).
LayoutMask gen_layout(const GenConfig& cfg, int index);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// floor(0.8 n) train, floor(0.1 n) val, remainder test, over a seeded shuffle.
std::vector<Split> assign_splits(int n, std::uint64_t seed);

struct SampleRecord {
  std::string id;
  std::string layout;
  std::vector<std::pair<Scenario, std::string>> targets;
  Split split;
};

struct DatasetManifest {
  GenConfig config;
  std::vector<SampleRecord> samples;
};

json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const json& j);

/// Writes layouts/{id}.nfr, targets/{scenario}/{id}.nfr, then manifest.json.
/// Existing valid sample files from an interrupted build are reused.
DatasetManifest build_dataset(const GenConfig& cfg, const std::string& dir, int threads = 1);
DatasetManifest load_manifest(const std::string& dir);

struct DataSample {
  std::string id;
  LayoutMask layout;
  DbMap db;
  NormMap target;
};

/// Samples of one split in manifest order; any missing or corrupt file throws.
std::vector<DataSample> load_split(const std::string& dir, const DatasetManifest& m, Split split,
                                   Scenario scenario);

}  // namespace nf
