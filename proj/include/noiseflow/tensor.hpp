#pragma once

#include <Eigen/Dense>

#include <random>
#include <stdexcept>
#include <string>

namespace nf {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (C, H, W) tensor stored as a C x (H*W) row-major matrix, so each channel
/// is one contiguous row and a 1x1 convolution is a plain matrix product.
template <typename S>
struct Tensor {
  int channels = 0, height = 0, width = 0;
  Mat<S> data;

  Tensor() = default;
  Tensor(int c, int h, int w) : channels(c), height(h), width(w), data(Mat<S>::Zero(c, h * w)) {}

  int pixels() const { return height * width; }
  Eigen::Index size() const { return data.size(); }
  S& at(int c, int r, int col) { return data(c, r * width + col); }
  S at(int c, int r, int col) const { return data(c, r * width + col); }
  bool same_shape(const Tensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool all_finite() const { return data.allFinite(); }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> t;
    t.channels = channels;
    t.height = height;
    t.width = width;
    t.data = data.template cast<T>();
    return t;
  }
};

/// 2x2 space-to-depth: out channel c*4 + dy*2 + dx holds in[c, 2i+dy, 2j+dx].
template <typename S>
Tensor<S> squeeze(const Tensor<S>& x);
template <typename S>
Tensor<S> unsqueeze(const Tensor<S>& y);

/// Channel slices [begin, begin+count) and concatenation along channels.
template <typename S>
Tensor<S> channel_slice(const Tensor<S>& x, int begin, int count);
template <typename S>
Tensor<S> channel_concat(const Tensor<S>& a, const Tensor<S>& b);

/// Square convolution with stride 1 and zero "same" padding (k = 1 or 3).
/// Weight rows are output channels, columns ordered (cin, ky, kx).
template <typename S>
struct Conv2d {
  int in_channels = 0, out_channels = 0, kernel = 1;
  Mat<S> weight;
  Vec<S> bias;

  Conv2d() = default;
  Conv2d(int in, int out, int k);

  Tensor<S> forward(const Tensor<S>& x) const;
  /// Accumulates dW, db into grad and returns dL/dx.
  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy, Conv2d& grad) const;
  void init_normal(std::mt19937_64& rng, double stddev);
  void set_zero();
};

template <typename S>
Mat<S> im2col(const Tensor<S>& x, int k);
template <typename S>
void col2im_add(const Mat<S>& cols, int k, Tensor<S>& dx);

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> y = x;
  y.data = y.data.cwiseMax(S(0));
  return y;
}

/// dy masked by x > 0.
template <typename S>
Tensor<S> relu_backward(const Tensor<S>& x, const Tensor<S>& dy) {
  Tensor<S> dx = dy;
  dx.data = (x.data.array() > S(0)).select(dy.data.array(), S(0));
  return dx;
}

}  // namespace nf
