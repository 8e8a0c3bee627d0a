#pragma once

#include "noiseflow/checkpoint.hpp"
#include "noiseflow/flow.hpp"
#include "noiseflow/simulator.hpp"

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace nf {

/// Row-major run lengths alternating free/building, starting with free.
std::vector<int> encode_rle(const LayoutMask& mask);
Grid<std::uint8_t> decode_rle(const std::vector<int>& runs, int width, int height);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

struct ServiceOptions {
  int grid_size = 64;
  int threads = 4;
};

struct HttpResult {
  int status = 200;
  std::string body;
  std::vector<std::pair<std::string, std::string>> headers;
};

/// Immutable after startup; every handler is const and safe to call concurrently.
class ServiceState {
 public:
  explicit ServiceState(ServiceOptions opt);

  void load_model(const std::string& checkpoint_path, const std::string& eval_report_path = "");
  bool has_model() const { return model_.has_value(); }
  const ServiceOptions& options() const { return opt_; }

  HttpResult health() const;
  HttpResult model_card() const;
  HttpResult whatif(const std::string& body) const;

 private:
  ServiceOptions opt_;
  std::optional<FlowModel<float>> model_;
  json card_;
};

class HttpService {
 public:
  explicit HttpService(const ServiceState& state);
  ~HttpService();
  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  /// Blocks until the server stops.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Blocking server loop; returns a process exit code.
int serve(const ServiceState& state, const std::string& host, int port);

}  // namespace nf
