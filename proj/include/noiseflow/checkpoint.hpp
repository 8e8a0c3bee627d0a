#pragma once

#include "noiseflow/flow.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <vector>

namespace nf {

using json = nlohmann::json;

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json to_json(const FlowConfig& cfg);
/// Unknown keys are rejected; missing keys keep their defaults.
FlowConfig flow_config_from_json(const json& j);

/// A named f32 blob outside the model proper (e.g. optimizer moments).
struct Section {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
  bool operator==(const Section&) const = default;
};

/// Layout: "NFCK", u32 version, u32 header length, canonical JSON header
/// {config, meta, sections:[{name, shape}]}, then each section as f32-LE.
struct Checkpoint {
  FlowModel<float> model;
  json meta = json::object();
  std::vector<Section> extra;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Sorted-key compact JSON; the single serialization used for hashing and echoing.
inline std::string canonical(const json& j) { return j.dump(); }

}  // namespace nf
