#pragma once

#include "noiseflow/raster.hpp"
#include "noiseflow/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nf {

struct FlowConfig {
  int input_size = 64;
  int num_scales = 2;
  std::vector<int> steps_per_scale{4, 4};
  int cond_hidden_channels = 16;
  int coupling_hidden_channels = 48;
  double temperature = 0.7;

  void validate() const;
  /// Channels and side length of the flow tensor after the squeeze at `scale`.
  int channels_at(int scale) const;
  int size_at(int scale) const { return input_size >> (scale + 1); }
  int cond_input_channels(int scale) const;
  /// Total flow dimensionality (one target channel).
  int dims() const { return input_size * input_size; }
  bool operator==(const FlowConfig&) const = default;
};

class SingularityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  explicit NonFiniteError(const std::string& where)
      : std::runtime_error("non-finite values after " + where), where_(where) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

constexpr double kCouplingClamp = 5.0;
constexpr double kActNormMinScale = 1e-12;

/// Per-channel affine map whose scale and shift are shifted by a linear
/// projection of the pooled conditioning features.
template <typename S>
struct ActNorm {
  Vec<S> scale, shift;
  Mat<S> scale_proj, shift_proj;

  ActNorm() = default;
  ActNorm(int channels, int cond);
  Vec<S> effective_scale(const Vec<S>& pooled) const;
  Vec<S> effective_shift(const Vec<S>& pooled) const { return shift + shift_proj * pooled; }
  Tensor<S> forward(const Tensor<S>& x, const Vec<S>& pooled, S& logdet) const;
  Tensor<S> inverse(const Tensor<S>& y, const Vec<S>& pooled) const;
  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy, S dlogdet, const Vec<S>& pooled,
                     ActNorm& grad, Vec<S>& dpooled) const;
};

/// Invertible 1x1 convolution, W = P L (U + diag(sign * exp(log_diag + proj * pooled))).
/// Only the strictly lower part of `lower` and strictly upper part of `upper` are used.
template <typename S>
struct InvConv {
  Mat<S> lower, upper;
  Vec<S> log_diag;
  Mat<S> log_proj;
  Eigen::VectorXi perm;  // (P v)[i] = v[perm[i]]
  Vec<S> sign;

  InvConv() = default;
  InvConv(int channels, int cond);
  int channels() const { return static_cast<int>(log_diag.size()); }
  Vec<S> log_scale(const Vec<S>& pooled) const { return log_diag + log_proj * pooled; }
  Mat<S> weight(const Vec<S>& pooled) const;
  Mat<S> inverse_weight(const Vec<S>& pooled) const;
  Tensor<S> forward(const Tensor<S>& x, const Vec<S>& pooled, S& logdet) const;
  Tensor<S> inverse(const Tensor<S>& y, const Vec<S>& pooled) const;
  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy, S dlogdet, const Vec<S>& pooled,
                     InvConv& grad, Vec<S>& dpooled) const;
  /// LU factors of a random rotation (partial pivoting).
  void init_rotation(std::mt19937_64& rng);
};

/// Affine coupling: y1 = x1, y2 = exp(clamp(r)) * x2 + t with (r, t) = net([x1, c]).
template <typename S>
struct Coupling {
  Conv2d<S> in, mid, out;

  Coupling() = default;
  Coupling(int channels, int cond, int hidden);
  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& cond, S& logdet) const;
  Tensor<S> inverse(const Tensor<S>& y, const Tensor<S>& cond) const;
  /// Reconstructs the input from y (the net only sees y1 == x1) and
  /// backpropagates; returns {x, dx}.
  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& y, const Tensor<S>& dy, S dlogdet,
                                          const Tensor<S>& cond, Coupling& grad,
                                          Tensor<S>& dcond) const;
};

template <typename S>
struct CondNet {
  Conv2d<S> first, second;
  CondNet() = default;
  CondNet(int in, int hidden);
};

template <typename S>
struct FlowStep {
  ActNorm<S> actnorm;
  InvConv<S> invconv;
  Coupling<S> coupling;
};

template <typename T>
struct ParamRef {
  std::string name;
  T* data;
  Eigen::Index size;
  std::vector<int> shape;
};

template <typename S>
struct FlowModel {
  FlowConfig config;
  std::vector<CondNet<S>> cond;
  std::vector<std::vector<FlowStep<S>>> steps;

  /// Identity LU, unit ActNorm, zero coupling output layers and projections;
  /// cond nets and coupling hidden layers are zero too.
  static FlowModel identity(const FlowConfig& cfg);
  /// Training start: random rotations, He-initialized hidden layers, zero
  /// coupling output layers and zero projections.
  static FlowModel initial(const FlowConfig& cfg, std::uint64_t seed);
  /// Every trainable parameter random (verification only). `amp` scales the
  /// fan-in normalized weight spread.
  static FlowModel random(const FlowConfig& cfg, std::uint64_t seed, double amp = 0.5);

  FlowModel zeros_like() const;
  std::vector<ParamRef<S>> params();
  std::vector<ParamRef<const S>> params() const;
  std::size_t param_count() const;

  template <typename T>
  FlowModel<T> cast() const;
};

/// 3-channel conditioning image: occupancy, source visibility, log radial distance.
template <typename S>
Tensor<S> cond_image(const LayoutMask& mask);

template <typename S>
struct CondFeatures {
  std::vector<Tensor<S>> inputs;    // squeezed image per scale
  std::vector<Tensor<S>> hidden;    // first conv pre-activation
  std::vector<Tensor<S>> features;  // F x h x w per scale
  std::vector<Vec<S>> pooled;       // spatial mean of features
};

template <typename S>
CondFeatures<S> cond_net(const Tensor<S>& image, const FlowModel<S>& model);
template <typename S>
CondFeatures<S> cond_net(const LayoutMask& mask, const FlowModel<S>& model) {
  return cond_net(cond_image<S>(mask), model);
}

template <typename S>
struct LatentBundle {
  std::vector<Tensor<S>> z;  // factored-out latents by scale, final z last
  Eigen::Index size() const;
  S log_prior() const;
};

template <typename S>
struct ForwardResult {
  LatentBundle<S> latents;
  S logdet = 0;
};

template <typename S>
std::vector<Tensor<S>> latent_shapes(const FlowConfig& cfg);

/// Flow-space tensor of a map: NormMap - 0.5 as 1 x n x n.
template <typename S>
Tensor<S> to_flow_space(const NormMap& m);

template <typename S>
ForwardResult<S> flow_forward(const Tensor<S>& x, const CondFeatures<S>& cond,
                              const FlowModel<S>& model);
template <typename S>
Tensor<S> flow_inverse(const LatentBundle<S>& z, const CondFeatures<S>& cond,
                       const FlowModel<S>& model);

/// log p(x | mask) in nats.
template <typename S>
S log_likelihood(const Tensor<S>& x, const CondFeatures<S>& cond, const FlowModel<S>& model);

struct SampleResult {
  NormMap map;
  std::size_t clamp_count = 0;
};

template <typename S>
SampleResult sample(const CondFeatures<S>& cond, const FlowModel<S>& model, double tau,
                    std::uint64_t seed);
template <typename S>
SampleResult sample(const LayoutMask& mask, const FlowModel<S>& model, double tau,
                    std::uint64_t seed) {
  return sample(cond_net(mask, model), model, tau, seed);
}

enum class BackwardMode { Recompute, StoreAll };

/// Adds weight * d(-log p(x|c) / D) to `grad`; returns -log p(x|c) / D.
template <typename S>
S flow_backward(const Tensor<S>& x, const CondFeatures<S>& cond, const FlowModel<S>& model,
                FlowModel<S>& grad, S weight = 1,
                BackwardMode mode = BackwardMode::Recompute);

/// Data-dependent ActNorm init: after it, every ActNorm output has zero
/// mean and unit variance per channel over the batch.
template <typename S>
void actnorm_data_init(FlowModel<S>& model, const std::vector<Tensor<S>>& xs,
                       const std::vector<const CondFeatures<S>*>& conds);

}  // namespace nf
