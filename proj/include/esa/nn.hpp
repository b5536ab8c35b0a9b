#pragma once

// Layer primitives with hand-written backward passes. Image tensors are NCHW.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>

#include "esa/tensor.hpp"

namespace esa::nn {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;

  std::size_t out_extent(std::size_t in) const {
    if (in + 2 * pad < kernel) {
      throw std::invalid_argument("conv2d: input extent " + std::to_string(in) +
                                  " smaller than kernel");
    }
    return (in + 2 * pad - kernel) / stride + 1;
  }
};

namespace detail {

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t ho, std::size_t wo, T* cols) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* xc = x + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + wo, T{0});
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T{0}
                          : xr[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t h, std::size_t w,
            const ConvGeometry& g, std::size_t ho, std::size_t wo, T* dx) {
  const auto k = g.kernel;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dxc = dx + c * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dr = dxc + static_cast<std::size_t>(iy) * w;
          const T* in = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
              dr[static_cast<std::size_t>(ix)] += in[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// y = conv(x, weight) + bias. weight is [out, in, k, k], bias is [out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 const ConvGeometry& g) {
  if (x.rank() != 4 || weight.rank() != 4 || weight.dim(1) != x.dim(1) ||
      weight.dim(2) != g.kernel || weight.dim(3) != g.kernel) {
    throw std::invalid_argument("conv2d: input " + shape_string(x.shape()) +
                                " incompatible with weight " +
                                shape_string(weight.shape()));
  }
  const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto co = weight.dim(0);
  const auto ho = g.out_extent(h), wo = g.out_extent(w);
  const auto patch = ci * g.kernel * g.kernel;

  Tensor<T> y({n, co, ho, wo});
  RowMatrix<T> cols(patch, ho * wo);
  ConstMatrixMap<T> wm(weight.data(), co, patch);
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(x.slice(b), ci, h, w, g, ho, wo, cols.data());
    MatrixMap<T> ym(y.slice(b), co, ho * wo);
    ym.noalias() = wm * cols;
    for (std::size_t o = 0; o < co; ++o) ym.row(o).array() += bias[o];
  }
  return y;
}

/// Accumulates weight/bias gradients; writes the input gradient when dx != nullptr.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     const ConvGeometry& g, Tensor<T>& dweight, Tensor<T>& dbias,
                     Tensor<T>* dx) {
  const auto n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto co = weight.dim(0);
  const auto ho = dy.dim(2), wo = dy.dim(3);
  const auto patch = ci * g.kernel * g.kernel;

  RowMatrix<T> cols(patch, ho * wo);
  RowMatrix<T> dcols(patch, ho * wo);
  ConstMatrixMap<T> wm(weight.data(), co, patch);
  MatrixMap<T> dwm(dweight.data(), co, patch);
  if (dx) *dx = Tensor<T>(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    ConstMatrixMap<T> dym(dy.slice(b), co, ho * wo);
    detail::im2col(x.slice(b), ci, h, w, g, ho, wo, cols.data());
    dwm.noalias() += dym * cols.transpose();
    for (std::size_t o = 0; o < co; ++o) dbias[o] += dym.row(o).sum();
    if (dx) {
      dcols.noalias() = wm.transpose() * dym;
      detail::col2im(dcols.data(), ci, h, w, g, ho, wo, dx->slice(b));
    }
  }
}

template <typename T>
void relu_inplace(Tensor<T>& x) {
  for (auto& v : x) v = v > T{0} ? v : T{0};
}

/// Masks dy in place by the activation pattern of the ReLU output y.
template <typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!(y[i] > T{0})) dy[i] = T{0};
  }
}

template <typename T>
T sigmoid(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

/// [N, C, H, W] -> [N, C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> y({n, c});
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * hw;
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += src[i];
    y[p] = s / static_cast<T>(hw);
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& dy, const Shape& input_shape) {
  Tensor<T> dx(input_shape);
  const auto hw = input_shape[2] * input_shape[3];
  for (std::size_t p = 0; p < dy.size(); ++p) {
    const T g = dy[p] / static_cast<T>(hw);
    std::fill(dx.data() + p * hw, dx.data() + (p + 1) * hw, g);
  }
  return dx;
}

/// y = x W^T + b with x [N, in], weight [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw std::invalid_argument("linear: input " + shape_string(x.shape()) +
                                " incompatible with weight " +
                                shape_string(weight.shape()));
  }
  const auto n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor<T> y({n, out});
  ConstMatrixMap<T> xm(x.data(), n, in);
  ConstMatrixMap<T> wm(weight.data(), out, in);
  MatrixMap<T> ym(y.data(), n, out);
  ym.noalias() = xm * wm.transpose();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out; ++o) ym(b, o) += bias[o];
  }
  return y;
}

template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                          Tensor<T>& dweight, Tensor<T>& dbias) {
  const auto n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  ConstMatrixMap<T> xm(x.data(), n, in);
  ConstMatrixMap<T> wm(weight.data(), out, in);
  ConstMatrixMap<T> dym(dy.data(), n, out);
  MatrixMap<T> dwm(dweight.data(), out, in);
  dwm.noalias() += dym.transpose() * xm;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < out; ++o) dbias[o] += dym(b, o);
  }
  Tensor<T> dx({n, in});
  MatrixMap<T> dxm(dx.data(), n, in);
  dxm.noalias() = dym * wm;
  return dx;
}

namespace detail {

struct BilinearTap {
  std::size_t i0, i1;
  double w1;
};

// Half-pixel-centre sampling (align_corners = false).
inline BilinearTap bilinear_tap(std::size_t out_index, std::size_t in_extent,
                                std::size_t out_extent) {
  const double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  double src = (static_cast<double>(out_index) + 0.5) * scale - 0.5;
  if (src < 0.0) src = 0.0;
  auto i0 = static_cast<std::size_t>(src);
  if (i0 > in_extent - 1) i0 = in_extent - 1;
  const std::size_t i1 = std::min(i0 + 1, in_extent - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  Tensor<T> y({n, c, out_h, out_w});
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto ty = detail::bilinear_tap(oy, h, out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto tx = detail::bilinear_tap(ox, w, out_w);
      const T a = static_cast<T>((1 - ty.w1) * (1 - tx.w1));
      const T b = static_cast<T>((1 - ty.w1) * tx.w1);
      const T cc = static_cast<T>(ty.w1 * (1 - tx.w1));
      const T d = static_cast<T>(ty.w1 * tx.w1);
      for (std::size_t p = 0; p < n * c; ++p) {
        const T* s = x.data() + p * h * w;
        y.data()[(p * out_h + oy) * out_w + ox] =
            a * s[ty.i0 * w + tx.i0] + b * s[ty.i0 * w + tx.i1] +
            cc * s[ty.i1 * w + tx.i0] + d * s[ty.i1 * w + tx.i1];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dy, const Shape& input_shape) {
  const auto n = input_shape[0], c = input_shape[1], h = input_shape[2], w = input_shape[3];
  const auto out_h = dy.dim(2), out_w = dy.dim(3);
  if (h == out_h && w == out_w) return dy;
  Tensor<T> dx(input_shape);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const auto ty = detail::bilinear_tap(oy, h, out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const auto tx = detail::bilinear_tap(ox, w, out_w);
      const T a = static_cast<T>((1 - ty.w1) * (1 - tx.w1));
      const T b = static_cast<T>((1 - ty.w1) * tx.w1);
      const T cc = static_cast<T>(ty.w1 * (1 - tx.w1));
      const T d = static_cast<T>(ty.w1 * tx.w1);
      for (std::size_t p = 0; p < n * c; ++p) {
        const T g = dy.data()[(p * out_h + oy) * out_w + ox];
        T* s = dx.data() + p * h * w;
        s[ty.i0 * w + tx.i0] += a * g;
        s[ty.i0 * w + tx.i1] += b * g;
        s[ty.i1 * w + tx.i0] += cc * g;
        s[ty.i1 * w + tx.i1] += d * g;
      }
    }
  }
  return dx;
}

/// Nearest-neighbour resize of an integer or real plane stack (used for labels).
template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  const auto planes = x.size() / (x.dim(x.rank() - 2) * x.dim(x.rank() - 1));
  const auto h = x.dim(x.rank() - 2), w = x.dim(x.rank() - 1);
  Shape shape = x.shape();
  shape[shape.size() - 2] = out_h;
  shape[shape.size() - 1] = out_w;
  Tensor<T> y(shape);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t iy = std::min(h - 1, oy * h / out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t ix = std::min(w - 1, ox * w / out_w);
        y.data()[(p * out_h + oy) * out_w + ox] = x.data()[(p * h + iy) * w + ix];
      }
    }
  }
  return y;
}

/// Adjoint of resize_nearest: scatter-adds dy back onto an [.., in_h, in_w] grid.
template <typename T>
Tensor<T> resize_nearest_backward(const Tensor<T>& dy, std::size_t in_h, std::size_t in_w) {
  const auto out_h = dy.dim(dy.rank() - 2), out_w = dy.dim(dy.rank() - 1);
  const auto planes = dy.size() / (out_h * out_w);
  Shape shape = dy.shape();
  shape[shape.size() - 2] = in_h;
  shape[shape.size() - 1] = in_w;
  Tensor<T> dx(shape);
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t iy = std::min(in_h - 1, oy * in_h / out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t ix = std::min(in_w - 1, ox * in_w / out_w);
        dx.data()[(p * in_h + iy) * in_w + ix] += dy.data()[(p * out_h + oy) * out_w + ox];
      }
    }
  }
  return dx;
}

}  // namespace esa::nn
