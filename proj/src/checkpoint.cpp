#include "noiseflow/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <map>

namespace nf {

json to_json(const FlowConfig& cfg) {
  return {{"input_size", cfg.input_size},
          {"num_scales", cfg.num_scales},
          {"steps_per_scale", cfg.steps_per_scale},
          {"cond_hidden_channels", cfg.cond_hidden_channels},
          {"coupling_hidden_channels", cfg.coupling_hidden_channels},
          {"temperature", cfg.temperature}};
}

FlowConfig flow_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("flow config must be a JSON object");
  FlowConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "input_size") cfg.input_size = value.get<int>();
    else if (key == "num_scales") cfg.num_scales = value.get<int>();
    else if (key == "steps_per_scale") cfg.steps_per_scale = value.get<std::vector<int>>();
    else if (key == "cond_hidden_channels") cfg.cond_hidden_channels = value.get<int>();
    else if (key == "coupling_hidden_channels") cfg.coupling_hidden_channels = value.get<int>();
    else if (key == "temperature") cfg.temperature = value.get<double>();
    else throw std::invalid_argument("unknown flow config key: " + key);
  }
  cfg.validate();
  return cfg;
}

namespace {

constexpr char kMagic[4] = {'N', 'F', 'C', 'K'};

struct Blob {
  std::string name;
  std::vector<int> shape;
  float* data;
  std::size_t size;
};

std::size_t volume(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw CheckpointError("negative section dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string buffer_name(std::size_t s, std::size_t k, const char* what) {
  return "s" + std::to_string(s) + ".k" + std::to_string(k) + ".invconv." + what;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  const auto& m = ck.model;
  json sections = json::array();
  std::vector<std::vector<float>> payloads;
  auto add = [&](const std::string& name, const std::vector<int>& shape, std::vector<float> v) {
    sections.push_back({{"name", name}, {"shape", shape}});
    payloads.push_back(std::move(v));
  };
  for (const auto& p : m.params()) add(p.name, p.shape, std::vector<float>(p.data, p.data + p.size));
  for (std::size_t s = 0; s < m.steps.size(); ++s)
    for (std::size_t k = 0; k < m.steps[s].size(); ++k) {
      const auto& ic = m.steps[s][k].invconv;
      const int c = ic.channels();
      std::vector<float> perm(c), sign(c);
      for (int i = 0; i < c; ++i) {
        perm[i] = static_cast<float>(ic.perm(i));
        sign[i] = ic.sign(i);
      }
      add(buffer_name(s, k, "perm"), {c}, perm);
      add(buffer_name(s, k, "sign"), {c}, sign);
    }
  for (const auto& e : ck.extra) {
    if (volume(e.shape) != e.values.size()) throw CheckpointError("section " + e.name + " shape mismatch");
    add(e.name, e.shape, e.values);
  }
  const json header = {{"config", to_json(m.config)}, {"meta", ck.meta}, {"sections", sections}};
  const std::string text = canonical(header);

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  append_u32(out, kCheckpointVersion);
  append_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : payloads)
    for (float v : p) append_f32(out, v);
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  const std::uint32_t version = read_u32(bytes, 4);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t len = read_u32(bytes, 8);
  if (bytes.size() < 12ull + len) throw CheckpointError("truncated checkpoint header");
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  FlowConfig cfg;
  try {
    cfg = flow_config_from_json(header.at("config"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  ck.model = FlowModel<float>::identity(cfg);
  ck.meta = header.value("meta", json::object());

  std::map<std::string, Blob> slots;
  for (auto& p : ck.model.params()) slots[p.name] = {p.name, p.shape, p.data, static_cast<std::size_t>(p.size)};
  std::map<std::string, std::vector<float>> buffers;

  std::size_t at = 12 + len;
  for (const auto& sec : header.at("sections")) {
    const std::string name = sec.at("name").get<std::string>();
    const auto shape = sec.at("shape").get<std::vector<int>>();
    const std::size_t n = volume(shape);
    if (bytes.size() < at + 4 * n) throw CheckpointError("truncated section " + name);
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = read_f32(bytes, at + 4 * i);
    at += 4 * n;
    if (auto it = slots.find(name); it != slots.end()) {
      if (it->second.shape != shape) throw CheckpointError("section " + name + " has the wrong shape");
      std::memcpy(it->second.data, values.data(), 4 * n);
      slots.erase(it);
    } else if (name.ends_with(".invconv.perm") || name.ends_with(".invconv.sign")) {
      buffers[name] = std::move(values);
    } else {
      ck.extra.push_back({name, shape, std::move(values)});
    }
  }
  if (at != bytes.size()) throw CheckpointError("trailing bytes after the last section");
  if (!slots.empty()) throw CheckpointError("missing section " + slots.begin()->first);

  for (std::size_t s = 0; s < ck.model.steps.size(); ++s)
    for (std::size_t k = 0; k < ck.model.steps[s].size(); ++k) {
      auto& ic = ck.model.steps[s][k].invconv;
      const auto p = buffers.find(buffer_name(s, k, "perm"));
      const auto g = buffers.find(buffer_name(s, k, "sign"));
      if (p == buffers.end() || g == buffers.end() ||
          p->second.size() != static_cast<std::size_t>(ic.channels()) ||
          g->second.size() != p->second.size())
        throw CheckpointError("missing or malformed invconv buffers for " + buffer_name(s, k, ""));
      std::vector<bool> seen(ic.channels(), false);
      for (int i = 0; i < ic.channels(); ++i) {
        const float v = p->second[i];
        const int j = static_cast<int>(v);
        if (static_cast<float>(j) != v || j < 0 || j >= ic.channels() || seen[j])
          throw CheckpointError("invalid permutation in " + p->first);
        seen[j] = true;
        ic.perm(i) = j;
        if (g->second[i] != 1.0f && g->second[i] != -1.0f) throw CheckpointError("invalid sign in " + g->first);
        ic.sign(i) = g->second[i];
      }
    }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_bytes(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

}  // namespace nf
