#include "noiseflow/tensor.hpp"

namespace nf {

template <typename S>
Tensor<S> squeeze(const Tensor<S>& x) {
  if (x.height % 2 || x.width % 2)
    throw ShapeError("squeeze needs even spatial dims, got " + std::to_string(x.height) + "x" +
                     std::to_string(x.width));
  const int h = x.height / 2, w = x.width / 2;
  Tensor<S> y(x.channels * 4, h, w);
  for (int c = 0; c < x.channels; ++c)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int oc = c * 4 + dy * 2 + dx;
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) y.at(oc, i, j) = x.at(c, 2 * i + dy, 2 * j + dx);
      }
  return y;
}

template <typename S>
Tensor<S> unsqueeze(const Tensor<S>& y) {
  if (y.channels % 4) throw ShapeError("unsqueeze needs channels divisible by 4");
  Tensor<S> x(y.channels / 4, y.height * 2, y.width * 2);
  for (int c = 0; c < x.channels; ++c)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const int oc = c * 4 + dy * 2 + dx;
        for (int i = 0; i < y.height; ++i)
          for (int j = 0; j < y.width; ++j) x.at(c, 2 * i + dy, 2 * j + dx) = y.at(oc, i, j);
      }
  return x;
}

template <typename S>
Tensor<S> channel_slice(const Tensor<S>& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.channels) throw ShapeError("channel slice out of range");
  Tensor<S> y;
  y.channels = count;
  y.height = x.height;
  y.width = x.width;
  y.data = x.data.middleRows(begin, count);
  return y;
}

template <typename S>
Tensor<S> channel_concat(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.height != b.height || a.width != b.width) throw ShapeError("concat spatial mismatch");
  Tensor<S> y(a.channels + b.channels, a.height, a.width);
  y.data.topRows(a.channels) = a.data;
  y.data.bottomRows(b.channels) = b.data;
  return y;
}

template <typename S>
Mat<S> im2col(const Tensor<S>& x, int k) {
  const int pad = k / 2, h = x.height, w = x.width;
  Mat<S> cols = Mat<S>::Zero(static_cast<Eigen::Index>(x.channels) * k * k, h * w);
  for (int c = 0; c < x.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* row = cols.row((c * k + ky) * k + kx).data();
        const int oy = ky - pad, ox = kx - pad;
        const int j0 = std::max(0, -ox), j1 = std::min(w, w - ox);
        for (int i = std::max(0, -oy); i < std::min(h, h - oy); ++i) {
          const S* src = x.data.row(c).data() + (i + oy) * w + ox;
          S* dst = row + i * w;
          for (int j = j0; j < j1; ++j) dst[j] = src[j];
        }
      }
  return cols;
}

template <typename S>
void col2im_add(const Mat<S>& cols, int k, Tensor<S>& dx) {
  const int pad = k / 2, h = dx.height, w = dx.width;
  for (int c = 0; c < dx.channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const S* row = cols.row((c * k + ky) * k + kx).data();
        const int oy = ky - pad, ox = kx - pad;
        const int j0 = std::max(0, -ox), j1 = std::min(w, w - ox);
        for (int i = std::max(0, -oy); i < std::min(h, h - oy); ++i) {
          S* dst = dx.data.row(c).data() + (i + oy) * w + ox;
          const S* src = row + i * w;
          for (int j = j0; j < j1; ++j) dst[j] += src[j];
        }
      }
}

template <typename S>
Conv2d<S>::Conv2d(int in, int out, int k)
    : in_channels(in),
      out_channels(out),
      kernel(k),
      weight(Mat<S>::Zero(out, in * k * k)),
      bias(Vec<S>::Zero(out)) {
  if (k != 1 && k != 3) throw ShapeError("kernel must be 1 or 3");
}

template <typename S>
Tensor<S> Conv2d<S>::forward(const Tensor<S>& x) const {
  if (x.channels != in_channels)
    throw ShapeError("conv expects " + std::to_string(in_channels) + " channels, got " +
                     std::to_string(x.channels));
  Tensor<S> y;
  y.channels = out_channels;
  y.height = x.height;
  y.width = x.width;
  if (kernel == 1) {
    y.data.noalias() = weight * x.data;
  } else if (out_channels < in_channels) {
    const int k = kernel, pad = k / 2, h = x.height, w = x.width;
    y.data = Mat<S>::Zero(out_channels, static_cast<Eigen::Index>(h) * w);
    Mat<S> tap(out_channels, y.data.cols()), wk(out_channels, in_channels);
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        wk = weight(Eigen::all, Eigen::seqN(ky * k + kx, in_channels, k * k));
        tap.noalias() = wk * x.data;
        const int oy = ky - pad, ox = kx - pad;
        const int j0 = std::max(0, -ox), j1 = std::min(w, w - ox);
        for (int c = 0; c < out_channels; ++c)
          for (int i = std::max(0, -oy); i < std::min(h, h - oy); ++i) {
            S* dst = y.data.row(c).data() + i * w;
            const S* src = tap.row(c).data() + (i + oy) * w + ox;
            for (int j = j0; j < j1; ++j) dst[j] += src[j];
          }
      }
  } else {
    y.data.noalias() = weight * im2col(x, kernel);
  }
  y.data.colwise() += bias;
  return y;
}

template <typename S>
Tensor<S> Conv2d<S>::backward(const Tensor<S>& x, const Tensor<S>& dy, Conv2d& grad) const {
  grad.bias += dy.data.rowwise().sum();
  Tensor<S> dx(in_channels, x.height, x.width);
  if (kernel == 1) {
    grad.weight.noalias() += dy.data * x.data.transpose();
    dx.data.noalias() = weight.transpose() * dy.data;
  } else {
    grad.weight.noalias() += dy.data * im2col(x, kernel).transpose();
    const Mat<S> dcols = weight.transpose() * dy.data;
    col2im_add(dcols, kernel, dx);
  }
  return dx;
}

template <typename S>
void Conv2d<S>::init_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  for (Eigen::Index i = 0; i < weight.size(); ++i) weight.data()[i] = static_cast<S>(n(rng));
  bias.setZero();
}

template <typename S>
void Conv2d<S>::set_zero() {
  weight.setZero();
  bias.setZero();
}

#define NF_INSTANTIATE(S)                                                  \
  template Tensor<S> squeeze(const Tensor<S>&);                            \
  template Tensor<S> unsqueeze(const Tensor<S>&);                          \
  template Tensor<S> channel_slice(const Tensor<S>&, int, int);            \
  template Tensor<S> channel_concat(const Tensor<S>&, const Tensor<S>&);   \
  template Mat<S> im2col(const Tensor<S>&, int);                           \
  template void col2im_add(const Mat<S>&, int, Tensor<S>&);                \
  template struct Conv2d<S>;

NF_INSTANTIATE(float)
NF_INSTANTIATE(double)

}  // namespace nf
