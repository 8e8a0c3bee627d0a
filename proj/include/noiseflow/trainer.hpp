#pragma once

#include "noiseflow/checkpoint.hpp"
#include "noiseflow/flow.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace nf {

struct TrainConfig {
  int total_iters = 50000;
  int batch_size = 4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr_init = 1e-4, lr_final = 5e-6;
  double decay_start_frac = 5.0 / 6.0;
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  int eval_every = 1000;
  int threads = 1;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  bool data_init = true;

  void validate() const;
};

json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const json& j);

double lr_at(int iter, const TrainConfig& cfg);

/// One training pair in flow space: 1 x n x n target and 3 x n x n condition.
struct TrainSample {
  Tensor<float> target;
  Tensor<float> cond;
};

TrainSample make_sample(const LayoutMask& mask, const NormMap& target);

/// Target plus U(0, 1/256) noise drawn from rng.
Tensor<float> dequantize(const Tensor<float>& x, std::mt19937_64& rng);

struct AdamState {
  FlowModel<float> m, v;
};

AdamState adam_init(const FlowModel<float>& model);
void adam_step(FlowModel<float>& model, const FlowModel<float>& grad, AdamState& state, int t,
               double lr, const TrainConfig& cfg);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Mean loss (nats/dim) over a batch and its gradient, summed in index order.
double batch_gradient(const FlowModel<float>& model, const std::vector<Tensor<float>>& xs,
                      const std::vector<const Tensor<float>*>& conds, FlowModel<float>& grad,
                      int threads);

/// Mean NLL in nats/dim with deterministic dequantization noise keyed by
/// (seed, sample index).
double mean_nll(const FlowModel<float>& model, const std::vector<TrainSample>& data,
                std::uint64_t seed, int threads);

struct HistoryRow {
  int iter;
  double lr, train_nll, val_nll, wallclock_ms;
};

struct TrainOptions {
  std::string out_dir;
  bool resume = false;
  /// Stop (as if interrupted) once this many iterations are done.
  std::optional<int> stop_after;
  std::function<void(const HistoryRow&)> on_eval;
};

struct TrainResult {
  int iterations = 0;
  double best_val_nll = 0;
  std::vector<HistoryRow> history;
};

/// Files in out_dir: last.ckpt (resumable, with Adam moments), best.ckpt,
/// history.csv.
TrainResult train(const std::vector<TrainSample>& train_set, const std::vector<TrainSample>& val_set,
                  FlowModel<float>& model, const TrainConfig& cfg, const TrainOptions& opt);

struct GradCheckBlock {
  std::string name;
  double max_rel_error;
  bool pass;
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double threshold = 1e-3;
  bool pass = true;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  bool identity = false;
  /// Negative test: scales one coupling block's analytic gradient.
  bool corrupt_coupling = false;
};

/// f64 central differences on a 1x8x8, 2-step model over every parameter.
GradCheckReport grad_check(const GradCheckOptions& opt);

}  // namespace nf
