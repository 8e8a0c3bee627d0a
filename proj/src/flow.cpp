#include "noiseflow/flow.hpp"

#include "noiseflow/simulator.hpp"

#include <cmath>
#include <numbers>

namespace nf {

void FlowConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("FlowConfig: " + what); };
  if (num_scales < 1) fail("num_scales must be >= 1");
  if (static_cast<int>(steps_per_scale.size()) != num_scales)
    fail("steps_per_scale needs one entry per scale");
  for (int k : steps_per_scale)
    if (k < 1) fail("every scale needs at least one step");
  if (cond_hidden_channels < 1 || coupling_hidden_channels < 1) fail("hidden channels must be >= 1");
  if (!(temperature > 0)) fail("temperature must be > 0");
  const int unit = 2 << num_scales;
  if (input_size < unit || input_size % unit)
    fail("input_size " + std::to_string(input_size) + " not divisible by " + std::to_string(unit));
}

int FlowConfig::channels_at(int scale) const { return 4 << scale; }

int FlowConfig::cond_input_channels(int scale) const { return 3 << (2 * (scale + 1)); }

namespace {

std::string step_name(int s, int k) { return "s" + std::to_string(s) + ".k" + std::to_string(k); }

template <typename S>
void check_finite(const Tensor<S>& t, const std::string& where) {
  if (!t.all_finite()) throw NonFiniteError(where);
}

template <typename S>
void fill_normal(Eigen::DenseBase<S>& m, std::mt19937_64& rng, double mean, double stddev) {
  std::normal_distribution<double> n(mean, stddev);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m(i, j) = static_cast<typename S::Scalar>(n(rng));
}

}  // namespace

// ---- ActNorm ---------------------------------------------------------------

template <typename S>
ActNorm<S>::ActNorm(int channels, int cond)
    : scale(Vec<S>::Ones(channels)),
      shift(Vec<S>::Zero(channels)),
      scale_proj(Mat<S>::Zero(channels, cond)),
      shift_proj(Mat<S>::Zero(channels, cond)) {}

template <typename S>
Vec<S> ActNorm<S>::effective_scale(const Vec<S>& pooled) const {
  Vec<S> s = scale + scale_proj * pooled;
  for (Eigen::Index c = 0; c < s.size(); ++c)
    if (!(std::abs(static_cast<double>(s(c))) >= kActNormMinScale))
      throw SingularityError("ActNorm scale " + std::to_string(static_cast<double>(s(c))) +
                             " in channel " + std::to_string(c));
  return s;
}

template <typename S>
Tensor<S> ActNorm<S>::forward(const Tensor<S>& x, const Vec<S>& pooled, S& logdet) const {
  const Vec<S> s = effective_scale(pooled);
  Tensor<S> y = x;
  y.data = s.asDiagonal() * x.data;
  y.data.colwise() += effective_shift(pooled);
  logdet += S(x.pixels()) * s.array().abs().log().sum();
  return y;
}

template <typename S>
Tensor<S> ActNorm<S>::inverse(const Tensor<S>& y, const Vec<S>& pooled) const {
  const Vec<S> s = effective_scale(pooled);
  Tensor<S> x = y;
  x.data.colwise() -= effective_shift(pooled);
  x.data = s.cwiseInverse().asDiagonal() * x.data;
  return x;
}

template <typename S>
Tensor<S> ActNorm<S>::backward(const Tensor<S>& x, const Tensor<S>& dy, S dlogdet,
                               const Vec<S>& pooled, ActNorm& grad, Vec<S>& dpooled) const {
  const Vec<S> s = effective_scale(pooled);
  const Vec<S> ds =
      dy.data.cwiseProduct(x.data).rowwise().sum() + dlogdet * S(x.pixels()) * s.cwiseInverse();
  const Vec<S> db = dy.data.rowwise().sum();
  grad.scale += ds;
  grad.shift += db;
  grad.scale_proj.noalias() += ds * pooled.transpose();
  grad.shift_proj.noalias() += db * pooled.transpose();
  dpooled.noalias() += scale_proj.transpose() * ds + shift_proj.transpose() * db;
  Tensor<S> dx = dy;
  dx.data = s.asDiagonal() * dy.data;
  return dx;
}

// ---- InvConv ---------------------------------------------------------------

template <typename S>
InvConv<S>::InvConv(int channels, int cond)
    : lower(Mat<S>::Zero(channels, channels)),
      upper(Mat<S>::Zero(channels, channels)),
      log_diag(Vec<S>::Zero(channels)),
      log_proj(Mat<S>::Zero(channels, cond)),
      perm(Eigen::VectorXi::LinSpaced(channels, 0, channels - 1)),
      sign(Vec<S>::Ones(channels)) {}

namespace {

template <typename S>
Mat<S> unit_lower(const Mat<S>& lower) {
  Mat<S> l = Mat<S>::Identity(lower.rows(), lower.cols());
  l.template triangularView<Eigen::StrictlyLower>() = lower;
  return l;
}

template <typename S>
Mat<S> upper_with_diag(const Mat<S>& upper, const Vec<S>& d) {
  Mat<S> m = Mat<S>::Zero(upper.rows(), upper.cols());
  m.template triangularView<Eigen::StrictlyUpper>() = upper;
  m.diagonal() = d;
  return m;
}

}  // namespace

template <typename S>
Mat<S> InvConv<S>::weight(const Vec<S>& pooled) const {
  const Vec<S> d = sign.cwiseProduct(log_scale(pooled).array().exp().matrix());
  const Mat<S> lm = unit_lower(lower) * upper_with_diag(upper, d);
  Mat<S> w(lm.rows(), lm.cols());
  for (int i = 0; i < channels(); ++i) w.row(i) = lm.row(perm(i));
  return w;
}

template <typename S>
Mat<S> InvConv<S>::inverse_weight(const Vec<S>& pooled) const {
  const int c = channels();
  const Vec<S> d = sign.cwiseProduct(log_scale(pooled).array().exp().matrix());
  Mat<S> pt = Mat<S>::Zero(c, c);
  for (int i = 0; i < c; ++i) pt(perm(i), i) = 1;
  const Mat<S> l = unit_lower(lower);
  const Mat<S> m = upper_with_diag(upper, d);
  const Mat<S> x = l.template triangularView<Eigen::UnitLower>().solve(pt);
  return m.template triangularView<Eigen::Upper>().solve(x);
}

template <typename S>
Tensor<S> InvConv<S>::forward(const Tensor<S>& x, const Vec<S>& pooled, S& logdet) const {
  Tensor<S> y = x;
  y.data.noalias() = weight(pooled) * x.data;
  logdet += S(x.pixels()) * log_scale(pooled).sum();
  return y;
}

template <typename S>
Tensor<S> InvConv<S>::inverse(const Tensor<S>& y, const Vec<S>& pooled) const {
  Tensor<S> x = y;
  x.data.noalias() = inverse_weight(pooled) * y.data;
  return x;
}

template <typename S>
Tensor<S> InvConv<S>::backward(const Tensor<S>& x, const Tensor<S>& dy, S dlogdet,
                               const Vec<S>& pooled, InvConv& grad, Vec<S>& dpooled) const {
  const int c = channels();
  const Vec<S> ls = log_scale(pooled);
  const Vec<S> d = sign.cwiseProduct(ls.array().exp().matrix());
  const Mat<S> l = unit_lower(lower);
  const Mat<S> m = upper_with_diag(upper, d);
  const Mat<S> dw = dy.data * x.data.transpose();
  Mat<S> pt_dw(c, c);
  for (int i = 0; i < c; ++i) pt_dw.row(perm(i)) = dw.row(i);
  const Mat<S> dl = pt_dw * m.transpose();
  const Mat<S> dm = l.transpose() * pt_dw;
  grad.lower.template triangularView<Eigen::StrictlyLower>() += dl;
  grad.upper.template triangularView<Eigen::StrictlyUpper>() += dm;
  const Vec<S> dls =
      dm.diagonal().cwiseProduct(d) + Vec<S>::Constant(c, dlogdet * S(x.pixels()));
  grad.log_diag += dls;
  grad.log_proj.noalias() += dls * pooled.transpose();
  dpooled.noalias() += log_proj.transpose() * dls;

  Mat<S> w(c, c);
  const Mat<S> lm = l * m;
  for (int i = 0; i < c; ++i) w.row(i) = lm.row(perm(i));
  Tensor<S> dx = dy;
  dx.data.noalias() = w.transpose() * dy.data;
  return dx;
}

template <typename S>
void InvConv<S>::init_rotation(std::mt19937_64& rng) {
  const int c = channels();
  Eigen::MatrixXd a(c, c);
  fill_normal(a, rng, 0.0, 1.0);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(q);
  const Eigen::MatrixXd p = lu.permutationP().transpose() * Eigen::MatrixXd::Identity(c, c);
  const Eigen::MatrixXd f = lu.matrixLU();
  for (int i = 0; i < c; ++i) {
    Eigen::Index j = 0;
    p.row(i).maxCoeff(&j);
    perm(i) = static_cast<int>(j);
  }
  lower.setZero();
  upper.setZero();
  lower.template triangularView<Eigen::StrictlyLower>() =
      f.template triangularView<Eigen::StrictlyLower>().toDenseMatrix().template cast<S>();
  upper.template triangularView<Eigen::StrictlyUpper>() =
      f.template triangularView<Eigen::StrictlyUpper>().toDenseMatrix().template cast<S>();
  for (int i = 0; i < c; ++i) {
    sign(i) = f(i, i) < 0 ? S(-1) : S(1);
    log_diag(i) = static_cast<S>(std::log(std::abs(f(i, i))));
  }
}

// ---- Coupling --------------------------------------------------------------

template <typename S>
Coupling<S>::Coupling(int channels, int cond, int hidden)
    : in(channels / 2 + cond, hidden, 3), mid(hidden, hidden, 1), out(hidden, channels, 3) {
  if (channels % 2) throw ShapeError("coupling needs an even channel count");
}

namespace {

template <typename S>
struct NetPass {
  Tensor<S> input, a1, r1, a2, r2;
  Mat<S> raw, shift;
};

template <typename S>
NetPass<S> run_net(const Coupling<S>& cp, const Tensor<S>& x1, const Tensor<S>& cond) {
  NetPass<S> p;
  p.input = channel_concat(x1, cond);
  p.a1 = cp.in.forward(p.input);
  p.r1 = relu(p.a1);
  p.a2 = cp.mid.forward(p.r1);
  p.r2 = relu(p.a2);
  const Tensor<S> o = cp.out.forward(p.r2);
  const int half = x1.channels;
  p.raw = o.data.topRows(half);
  p.shift = o.data.bottomRows(half);
  return p;
}

template <typename S>
Mat<S> clamp_log_scale(const Mat<S>& raw) {
  return raw.cwiseMax(S(-kCouplingClamp)).cwiseMin(S(kCouplingClamp));
}

template <typename S>
void require_even(const Tensor<S>& x) {
  if (x.channels % 2) throw ShapeError("coupling input has odd channel count " + std::to_string(x.channels));
}

}  // namespace

template <typename S>
Tensor<S> Coupling<S>::forward(const Tensor<S>& x, const Tensor<S>& cond, S& logdet) const {
  require_even(x);
  const int half = x.channels / 2;
  const auto net = run_net(*this, channel_slice(x, 0, half), cond);
  const Mat<S> ls = clamp_log_scale(net.raw);
  Tensor<S> y = x;
  y.data.bottomRows(half) = ls.array().exp() * x.data.bottomRows(half).array() + net.shift.array();
  logdet += ls.sum();
  return y;
}

template <typename S>
Tensor<S> Coupling<S>::inverse(const Tensor<S>& y, const Tensor<S>& cond) const {
  require_even(y);
  const int half = y.channels / 2;
  const auto net = run_net(*this, channel_slice(y, 0, half), cond);
  const Mat<S> ls = clamp_log_scale(net.raw);
  Tensor<S> x = y;
  x.data.bottomRows(half) = (y.data.bottomRows(half) - net.shift).array() * (-ls.array()).exp();
  return x;
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> Coupling<S>::backward(const Tensor<S>& y, const Tensor<S>& dy,
                                                     S dlogdet, const Tensor<S>& cond,
                                                     Coupling& grad, Tensor<S>& dcond) const {
  require_even(y);
  const int half = y.channels / 2;
  const auto net = run_net(*this, channel_slice(y, 0, half), cond);
  const Mat<S> ls = clamp_log_scale(net.raw);
  const Mat<S> es = ls.array().exp();
  Tensor<S> x = y;
  x.data.bottomRows(half) = (y.data.bottomRows(half) - net.shift).array() / es.array();

  Tensor<S> dout(2 * half, y.height, y.width);
  const auto dy2 = dy.data.bottomRows(half).array();
  const Mat<S> dls = dy2 * x.data.bottomRows(half).array() * es.array() + dlogdet;
  const auto inside =
      (net.raw.array() > S(-kCouplingClamp)) && (net.raw.array() < S(kCouplingClamp));
  dout.data.topRows(half) = inside.select(dls.array(), S(0));
  dout.data.bottomRows(half) = dy.data.bottomRows(half);

  const Tensor<S> dr2 = out.backward(net.r2, dout, grad.out);
  const Tensor<S> dr1 = mid.backward(net.r1, relu_backward(net.a2, dr2), grad.mid);
  const Tensor<S> din = in.backward(net.input, relu_backward(net.a1, dr1), grad.in);

  Tensor<S> dx = dy;
  dx.data.topRows(half) += din.data.topRows(half);
  dx.data.bottomRows(half) = es.array() * dy2;
  dcond.data += din.data.bottomRows(din.channels - half);
  return {std::move(x), std::move(dx)};
}

template <typename S>
CondNet<S>::CondNet(int in, int hidden) : first(in, hidden, 3), second(hidden, hidden, 3) {}

// ---- Model -----------------------------------------------------------------

namespace {

template <typename M, typename F>
void visit_params(M& model, F&& f) {
  for (std::size_t s = 0; s < model.cond.size(); ++s) {
    const std::string p = "cond" + std::to_string(s);
    f(p + ".first.weight", model.cond[s].first.weight);
    f(p + ".first.bias", model.cond[s].first.bias);
    f(p + ".second.weight", model.cond[s].second.weight);
    f(p + ".second.bias", model.cond[s].second.bias);
  }
  for (std::size_t s = 0; s < model.steps.size(); ++s) {
    for (std::size_t k = 0; k < model.steps[s].size(); ++k) {
      auto& st = model.steps[s][k];
      const std::string p = step_name(static_cast<int>(s), static_cast<int>(k));
      f(p + ".actnorm.scale", st.actnorm.scale);
      f(p + ".actnorm.shift", st.actnorm.shift);
      f(p + ".actnorm.scale_proj", st.actnorm.scale_proj);
      f(p + ".actnorm.shift_proj", st.actnorm.shift_proj);
      f(p + ".invconv.lower", st.invconv.lower);
      f(p + ".invconv.upper", st.invconv.upper);
      f(p + ".invconv.log_diag", st.invconv.log_diag);
      f(p + ".invconv.log_proj", st.invconv.log_proj);
      f(p + ".coupling.in.weight", st.coupling.in.weight);
      f(p + ".coupling.in.bias", st.coupling.in.bias);
      f(p + ".coupling.mid.weight", st.coupling.mid.weight);
      f(p + ".coupling.mid.bias", st.coupling.mid.bias);
      f(p + ".coupling.out.weight", st.coupling.out.weight);
      f(p + ".coupling.out.bias", st.coupling.out.bias);
    }
  }
}

template <typename T, typename M>
std::vector<ParamRef<T>> collect(M& model) {
  std::vector<ParamRef<T>> out;
  visit_params(model, [&](const std::string& name, auto& m) {
    std::vector<int> shape;
    if (m.ColsAtCompileTime == 1)
      shape = {static_cast<int>(m.size())};
    else
      shape = {static_cast<int>(m.rows()), static_cast<int>(m.cols())};
    out.push_back({name, m.data(), m.size(), shape});
  });
  return out;
}

template <typename S>
void he_init(Conv2d<S>& conv, std::mt19937_64& rng, double gain) {
  conv.init_normal(rng, gain / std::sqrt(static_cast<double>(conv.weight.cols())));
}

}  // namespace

template <typename S>
FlowModel<S> FlowModel<S>::identity(const FlowConfig& cfg) {
  cfg.validate();
  FlowModel m;
  m.config = cfg;
  const int f = cfg.cond_hidden_channels;
  for (int s = 0; s < cfg.num_scales; ++s) {
    m.cond.emplace_back(cfg.cond_input_channels(s), f);
    const int c = cfg.channels_at(s);
    std::vector<FlowStep<S>> scale;
    for (int k = 0; k < cfg.steps_per_scale[s]; ++k)
      scale.push_back({ActNorm<S>(c, f), InvConv<S>(c, f), Coupling<S>(c, f, cfg.coupling_hidden_channels)});
    m.steps.push_back(std::move(scale));
  }
  return m;
}

template <typename S>
FlowModel<S> FlowModel<S>::initial(const FlowConfig& cfg, std::uint64_t seed) {
  FlowModel m = identity(cfg);
  std::mt19937_64 rng(seed);
  for (auto& cn : m.cond) {
    he_init(cn.first, rng, std::sqrt(2.0));
    he_init(cn.second, rng, std::sqrt(2.0));
  }
  for (auto& scale : m.steps)
    for (auto& st : scale) {
      st.invconv.init_rotation(rng);
      he_init(st.coupling.in, rng, std::sqrt(2.0));
      he_init(st.coupling.mid, rng, std::sqrt(2.0));
    }
  return m;
}

template <typename S>
FlowModel<S> FlowModel<S>::random(const FlowConfig& cfg, std::uint64_t seed, double amp) {
  FlowModel m = identity(cfg);
  std::mt19937_64 rng(seed);
  auto conv = [&](Conv2d<S>& c) {
    he_init(c, rng, amp);
    fill_normal(c.bias, rng, 0.0, 0.1 * amp);
  };
  for (auto& cn : m.cond) {
    conv(cn.first);
    conv(cn.second);
  }
  for (auto& scale : m.steps)
    for (auto& st : scale) {
      fill_normal(st.actnorm.scale, rng, 1.0, 0.2 * amp);
      fill_normal(st.actnorm.shift, rng, 0.0, 0.2 * amp);
      fill_normal(st.actnorm.scale_proj, rng, 0.0, 0.1 * amp);
      fill_normal(st.actnorm.shift_proj, rng, 0.0, 0.1 * amp);
      st.invconv.init_rotation(rng);
      Vec<S> jitter(st.invconv.channels());
      fill_normal(jitter, rng, 0.0, 0.2 * amp);
      st.invconv.log_diag += jitter;
      fill_normal(st.invconv.log_proj, rng, 0.0, 0.1 * amp);
      conv(st.coupling.in);
      conv(st.coupling.mid);
      conv(st.coupling.out);
    }
  return m;
}

template <typename S>
FlowModel<S> FlowModel<S>::zeros_like() const {
  FlowModel z = *this;
  for (auto& p : z.params()) std::fill(p.data, p.data + p.size, S(0));
  return z;
}

template <typename S>
std::vector<ParamRef<S>> FlowModel<S>::params() {
  return collect<S>(*this);
}

template <typename S>
std::vector<ParamRef<const S>> FlowModel<S>::params() const {
  return collect<const S>(*this);
}

template <typename S>
std::size_t FlowModel<S>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += static_cast<std::size_t>(p.size);
  return n;
}

template <typename S>
template <typename T>
FlowModel<T> FlowModel<S>::cast() const {
  FlowModel<T> out = FlowModel<T>::identity(config);
  auto dst = out.params();
  const auto src = params();
  for (std::size_t i = 0; i < src.size(); ++i)
    for (Eigen::Index j = 0; j < src[i].size; ++j) dst[i].data[j] = static_cast<T>(src[i].data[j]);
  for (std::size_t s = 0; s < steps.size(); ++s)
    for (std::size_t k = 0; k < steps[s].size(); ++k) {
      out.steps[s][k].invconv.perm = steps[s][k].invconv.perm;
      out.steps[s][k].invconv.sign = steps[s][k].invconv.sign.template cast<T>();
    }
  return out;
}

// ---- Conditioning ----------------------------------------------------------

template <typename S>
Tensor<S> cond_image(const LayoutMask& mask) {
  const int n = mask.size();
  const auto regions = build_region_masks(mask);
  const Cell src = mask.source;
  auto dist = [&](int r, int c) { return std::hypot(r - src.row, c - src.col); };
  const double rmax = std::max({dist(0, 0), dist(0, n - 1), dist(n - 1, 0), dist(n - 1, n - 1)});
  const double norm = std::log1p(std::max(rmax, 1.0));
  Tensor<S> img(3, n, n);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      img.at(0, r, c) = mask.building(r, c) ? S(1) : S(0);
      img.at(1, r, c) = regions.is(r, c, Region::LoS) ? S(1) : S(0);
      img.at(2, r, c) = static_cast<S>(std::log1p(dist(r, c)) / norm);
    }
  return img;
}

template <typename S>
CondFeatures<S> cond_net(const Tensor<S>& image, const FlowModel<S>& model) {
  const auto& cfg = model.config;
  if (image.channels != 3 || image.height != cfg.input_size || image.width != cfg.input_size)
    throw ShapeError("conditioning image must be 3x" + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size));
  CondFeatures<S> out;
  Tensor<S> img = image;
  for (int s = 0; s < cfg.num_scales; ++s) {
    img = squeeze(img);
    const auto& net = model.cond[s];
    Tensor<S> hidden = net.first.forward(img);
    Tensor<S> feat = net.second.forward(relu(hidden));
    out.pooled.push_back(feat.data.rowwise().mean());
    out.inputs.push_back(img);
    out.hidden.push_back(std::move(hidden));
    out.features.push_back(std::move(feat));
  }
  return out;
}

// ---- Flow ------------------------------------------------------------------

template <typename S>
Eigen::Index LatentBundle<S>::size() const {
  Eigen::Index n = 0;
  for (const auto& t : z) n += t.size();
  return n;
}

template <typename S>
S LatentBundle<S>::log_prior() const {
  S sq = 0;
  for (const auto& t : z) sq += t.data.squaredNorm();
  return S(-0.5) * sq - S(0.5 * std::log(2.0 * std::numbers::pi)) * S(size());
}

template <typename S>
std::vector<Tensor<S>> latent_shapes(const FlowConfig& cfg) {
  std::vector<Tensor<S>> out;
  for (int s = 0; s < cfg.num_scales; ++s) {
    const int c = cfg.channels_at(s), n = cfg.size_at(s);
    out.emplace_back(s + 1 < cfg.num_scales ? c / 2 : c, n, n);
  }
  return out;
}

template <typename S>
Tensor<S> to_flow_space(const NormMap& m) {
  const int n = static_cast<int>(m.values.rows());
  Tensor<S> t(1, n, static_cast<int>(m.values.cols()));
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < t.width; ++c) t.at(0, r, c) = static_cast<S>(m.values(r, c) - 0.5);
  return t;
}

namespace {

template <typename S>
void check_input(const Tensor<S>& x, const FlowConfig& cfg) {
  if (x.channels != 1 || x.height != cfg.input_size || x.width != cfg.input_size)
    throw ShapeError("flow input must be 1x" + std::to_string(cfg.input_size) + "x" +
                     std::to_string(cfg.input_size) + ", got " + std::to_string(x.channels) + "x" +
                     std::to_string(x.height) + "x" + std::to_string(x.width));
}

template <typename S>
struct Tape {
  // Per step: actnorm input, invconv input, coupling output.
  std::vector<std::vector<std::array<Tensor<S>, 3>>> steps;
};

template <typename S>
ForwardResult<S> forward_impl(const Tensor<S>& x, const CondFeatures<S>& cond,
                              const FlowModel<S>& model, Tape<S>* tape) {
  const auto& cfg = model.config;
  check_input(x, cfg);
  if (static_cast<int>(cond.features.size()) != cfg.num_scales)
    throw ShapeError("conditioning features do not match the model");
  ForwardResult<S> out;
  Tensor<S> h = x;
  if (tape) tape->steps.assign(cfg.num_scales, {});
  for (int s = 0; s < cfg.num_scales; ++s) {
    h = squeeze(h);
    const auto& pooled = cond.pooled[s];
    for (int k = 0; k < cfg.steps_per_scale[s]; ++k) {
      const auto& st = model.steps[s][k];
      const std::string name = step_name(s, k);
      std::array<Tensor<S>, 3> rec;
      if (tape) rec[0] = h;
      h = st.actnorm.forward(h, pooled, out.logdet);
      check_finite(h, name + ".actnorm");
      if (tape) rec[1] = h;
      h = st.invconv.forward(h, pooled, out.logdet);
      check_finite(h, name + ".invconv");
      h = st.coupling.forward(h, cond.features[s], out.logdet);
      check_finite(h, name + ".coupling");
      if (tape) {
        rec[2] = h;
        tape->steps[s].push_back(std::move(rec));
      }
    }
    if (s + 1 < cfg.num_scales) {
      const int half = h.channels / 2;
      out.latents.z.push_back(channel_slice(h, half, half));
      h = channel_slice(h, 0, half);
    }
  }
  out.latents.z.push_back(std::move(h));
  return out;
}

}  // namespace

template <typename S>
ForwardResult<S> flow_forward(const Tensor<S>& x, const CondFeatures<S>& cond,
                              const FlowModel<S>& model) {
  return forward_impl<S>(x, cond, model, nullptr);
}

template <typename S>
Tensor<S> flow_inverse(const LatentBundle<S>& z, const CondFeatures<S>& cond,
                       const FlowModel<S>& model) {
  const auto& cfg = model.config;
  const auto shapes = latent_shapes<S>(cfg);
  if (z.z.size() != shapes.size()) throw ShapeError("latent bundle has wrong number of tensors");
  for (std::size_t i = 0; i < shapes.size(); ++i)
    if (!z.z[i].same_shape(shapes[i])) throw ShapeError("latent " + std::to_string(i) + " has wrong shape");
  Tensor<S> h = z.z.back();
  for (int s = cfg.num_scales - 1; s >= 0; --s) {
    if (s + 1 < cfg.num_scales) h = channel_concat(h, z.z[s]);
    const auto& pooled = cond.pooled[s];
    for (int k = cfg.steps_per_scale[s] - 1; k >= 0; --k) {
      const auto& st = model.steps[s][k];
      h = st.coupling.inverse(h, cond.features[s]);
      h = st.invconv.inverse(h, pooled);
      h = st.actnorm.inverse(h, pooled);
      check_finite(h, step_name(s, k) + " inverse");
    }
    h = unsqueeze(h);
  }
  return h;
}

template <typename S>
S log_likelihood(const Tensor<S>& x, const CondFeatures<S>& cond, const FlowModel<S>& model) {
  const auto fr = flow_forward(x, cond, model);
  const S ll = fr.latents.log_prior() + fr.logdet;
  if (!std::isfinite(static_cast<double>(ll))) throw NonFiniteError("log-likelihood");
  return ll;
}

template <typename S>
SampleResult sample(const CondFeatures<S>& cond, const FlowModel<S>& model, double tau,
                    std::uint64_t seed) {
  if (!(tau > 0)) throw std::invalid_argument("temperature must be > 0");
  LatentBundle<S> z{latent_shapes<S>(model.config)};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& t : z.z)
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data.data()[i] = static_cast<S>(tau * normal(rng));
  const Tensor<S> x = flow_inverse(z, cond, model);
  SampleResult out{NormMap{Grid<double>(x.height, x.width)}, 0};
  for (int r = 0; r < x.height; ++r)
    for (int c = 0; c < x.width; ++c) {
      const double v = static_cast<double>(x.at(0, r, c)) + 0.5;
      const double cl = std::clamp(v, 0.0, 1.0);
      out.clamp_count += cl != v;
      out.map.values(r, c) = cl;
    }
  return out;
}

template <typename S>
S flow_backward(const Tensor<S>& x, const CondFeatures<S>& cond, const FlowModel<S>& model,
                FlowModel<S>& grad, S weight, BackwardMode mode) {
  const auto& cfg = model.config;
  Tape<S> tape;
  const bool store = mode == BackwardMode::StoreAll;
  const auto fr = forward_impl<S>(x, cond, model, store ? &tape : nullptr);
  const S dims = S(x.size());
  const S loss = -(fr.latents.log_prior() + fr.logdet) / dims;
  if (!std::isfinite(static_cast<double>(loss))) throw NonFiniteError("loss");
  const S zscale = weight / dims;
  const S dlogdet = -weight / dims;

  const auto& z = fr.latents.z;
  Tensor<S> h = z.back();
  Tensor<S> dh = h;
  dh.data *= zscale;
  for (int s = cfg.num_scales - 1; s >= 0; --s) {
    if (s + 1 < cfg.num_scales) {
      Tensor<S> dz = z[s];
      dz.data *= zscale;
      h = channel_concat(h, z[s]);
      dh = channel_concat(dh, dz);
    }
    const auto& feat = cond.features[s];
    const auto& pooled = cond.pooled[s];
    Tensor<S> dfeat(feat.channels, feat.height, feat.width);
    Vec<S> dpooled = Vec<S>::Zero(feat.channels);
    for (int k = cfg.steps_per_scale[s] - 1; k >= 0; --k) {
      const auto& st = model.steps[s][k];
      auto& gs = grad.steps[s][k];
      if (store) h = tape.steps[s][k][2];
      auto [xc, dxc] = st.coupling.backward(h, dh, dlogdet, feat, gs.coupling, dfeat);
      Tensor<S> xi = store ? tape.steps[s][k][1] : st.invconv.inverse(xc, pooled);
      Tensor<S> dxi = st.invconv.backward(xi, dxc, dlogdet, pooled, gs.invconv, dpooled);
      Tensor<S> xa = store ? tape.steps[s][k][0] : st.actnorm.inverse(xi, pooled);
      dh = st.actnorm.backward(xa, dxi, dlogdet, pooled, gs.actnorm, dpooled);
      h = std::move(xa);
    }
    h = unsqueeze(h);
    dh = unsqueeze(dh);

    dfeat.data.colwise() += dpooled / S(feat.pixels());
    const auto& net = model.cond[s];
    auto& gnet = grad.cond[s];
    const Tensor<S> dr = net.second.backward(relu(cond.hidden[s]), dfeat, gnet.second);
    net.first.backward(cond.inputs[s], relu_backward(cond.hidden[s], dr), gnet.first);
  }
  return loss;
}

template <typename S>
void actnorm_data_init(FlowModel<S>& model, const std::vector<Tensor<S>>& xs,
                       const std::vector<const CondFeatures<S>*>& conds) {
  const auto& cfg = model.config;
  if (xs.empty() || xs.size() != conds.size()) throw std::invalid_argument("data init needs a non-empty batch");
  std::vector<Tensor<S>> hs = xs;
  for (int s = 0; s < cfg.num_scales; ++s) {
    for (auto& h : hs) h = squeeze(h);
    for (int k = 0; k < cfg.steps_per_scale[s]; ++k) {
      auto& st = model.steps[s][k];
      const int c = hs[0].channels;
      Eigen::VectorXd sum = Eigen::VectorXd::Zero(c), sq = Eigen::VectorXd::Zero(c);
      double count = 0;
      for (const auto& h : hs) {
        const Eigen::MatrixXd d = h.data.template cast<double>();
        sum += d.rowwise().sum();
        sq += d.array().square().matrix().rowwise().sum();
        count += h.pixels();
      }
      const Eigen::VectorXd mean = sum / count;
      const Eigen::VectorXd var = (sq / count - mean.array().square().matrix()).cwiseMax(0.0);
      const Eigen::VectorXd scale = (var.array().sqrt() + 1e-6).inverse();
      st.actnorm.scale = scale.template cast<S>();
      st.actnorm.shift = (-mean.array() * scale.array()).matrix().template cast<S>();
      for (std::size_t i = 0; i < hs.size(); ++i) {
        S ld = 0;
        const auto& cd = *conds[i];
        hs[i] = st.actnorm.forward(hs[i], cd.pooled[s], ld);
        hs[i] = st.invconv.forward(hs[i], cd.pooled[s], ld);
        hs[i] = st.coupling.forward(hs[i], cd.features[s], ld);
      }
    }
    if (s + 1 < cfg.num_scales)
      for (auto& h : hs) h = channel_slice(h, 0, h.channels / 2);
  }
}

#define NF_INSTANTIATE(S)                                                                     \
  template struct ActNorm<S>;                                                                 \
  template struct InvConv<S>;                                                                 \
  template struct Coupling<S>;                                                                \
  template struct CondNet<S>;                                                                 \
  template struct FlowModel<S>;                                                               \
  template struct LatentBundle<S>;                                                            \
  template Tensor<S> cond_image<S>(const LayoutMask&);                                        \
  template CondFeatures<S> cond_net(const Tensor<S>&, const FlowModel<S>&);                   \
  template std::vector<Tensor<S>> latent_shapes<S>(const FlowConfig&);                        \
  template Tensor<S> to_flow_space<S>(const NormMap&);                                        \
  template ForwardResult<S> flow_forward(const Tensor<S>&, const CondFeatures<S>&,            \
                                         const FlowModel<S>&);                                \
  template Tensor<S> flow_inverse(const LatentBundle<S>&, const CondFeatures<S>&,             \
                                  const FlowModel<S>&);                                       \
  template S log_likelihood(const Tensor<S>&, const CondFeatures<S>&, const FlowModel<S>&);   \
  template SampleResult sample(const CondFeatures<S>&, const FlowModel<S>&, double,           \
                               std::uint64_t);                                                \
  template S flow_backward(const Tensor<S>&, const CondFeatures<S>&, const FlowModel<S>&,     \
                           FlowModel<S>&, S, BackwardMode);                                   \
  template void actnorm_data_init(FlowModel<S>&, const std::vector<Tensor<S>>&,               \
                                  const std::vector<const CondFeatures<S>*>&);

NF_INSTANTIATE(float)
NF_INSTANTIATE(double)

template FlowModel<double> FlowModel<float>::cast<double>() const;
template FlowModel<float> FlowModel<double>::cast<float>() const;
template FlowModel<float> FlowModel<float>::cast<float>() const;
template FlowModel<double> FlowModel<double>::cast<double>() const;

}  // namespace nf
