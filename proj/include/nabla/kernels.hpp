#pragma once

// Forward/backward math for the heavier primitives. Everything here is a pure
// function of its arguments; autodiff bookkeeping lives in ops.hpp.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "nabla/tensor.hpp"

namespace nabla::kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// Geometry of a strided, zero-padded square-kernel window sweep.
struct ConvGeometry {
  std::size_t in_h, in_w;
  std::size_t k;
  std::size_t stride;
  std::size_t pad;
  std::size_t out_h, out_w;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + 2 * pad) - static_cast<std::ptrdiff_t>(k);
  if (span < 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

/// Unfolds a (channels, in_h, in_w) plane stack into a (channels*k*k, out_h*out_w) matrix.
template <typename T>
void im2col(const T* src, std::size_t channels, const ConvGeometry& g, T* col) {
  const std::size_t kk = g.k * g.k;
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = src + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = col + (c * kk + ki * g.k + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* srow = plane + static_cast<std::size_t>(iy) * g.in_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w))
                          ? T(0)
                          : srow[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters-and-adds columns back onto the plane stack.
template <typename T>
void col2im(const T* col, std::size_t channels, const ConvGeometry& g, T* dst) {
  const std::size_t kk = g.k * g.k;
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = dst + c * g.in_h * g.in_w;
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = col + (c * kk + ki * g.k + kj) * cols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          T* drow = plane + static_cast<std::size_t>(iy) * g.in_w;
          const T* srow = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            drow[static_cast<std::size_t>(ix)] += srow[ox];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// conv2d: weight (out, in, k, k), optional bias (1, out, 1, 1).

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: kernel must be square, got " + ws.str());
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: input " + xs.str() + " has " + std::to_string(xs.c) +
                     " channels but kernel " + ws.str() + " expects " + std::to_string(ws.c));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const ConvGeometry g{xs.h, xs.w, ws.h, stride, pad, conv_out_extent(xs.h, ws.h, stride, pad),
                       conv_out_extent(xs.w, ws.w, stride, pad)};
  if (g.out_h == 0 || g.out_w == 0) {
    throw ShapeError("conv2d: zero-sized output for input " + xs.str() + " and kernel " + ws.str());
  }
  Tensor<T> y({xs.n, ws.n, g.out_h, g.out_w});
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = g.out_h * g.out_w;
  std::vector<T> col(K * P);
  ConstMatMap<T> wm(weight.data().data(), static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < xs.n; ++n) {
    im2col(x.data().data() + n * xs.c * xs.plane(), xs.c, g, col.data());
    ConstMatMap<T> cm(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    MatMap<T> ym(y.data().data() + n * ws.n * P, static_cast<Eigen::Index>(ws.n),
                 static_cast<Eigen::Index>(P));
    ym.noalias() = wm * cm;
    if (bias) {
      for (std::size_t o = 0; o < ws.n; ++o) ym.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
    }
  }
  return y;
}

/// Accumulates input/weight/bias gradients of conv2d given dL/dy. Any output
/// pointer may be null to skip that gradient.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride,
                     std::size_t pad, const std::vector<T>& dy, T* dx, T* dw, T* db) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const ConvGeometry g{xs.h, xs.w, ws.h, stride, pad, conv_out_extent(xs.h, ws.h, stride, pad),
                       conv_out_extent(xs.w, ws.w, stride, pad)};
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = g.out_h * g.out_w;
  const auto Ke = static_cast<Eigen::Index>(K);
  const auto Pe = static_cast<Eigen::Index>(P);
  const auto Oe = static_cast<Eigen::Index>(ws.n);
  std::vector<T> col(K * P);
  ConstMatMap<T> wm(weight.data().data(), Oe, Ke);
  for (std::size_t n = 0; n < xs.n; ++n) {
    ConstMatMap<T> dym(dy.data() + n * ws.n * P, Oe, Pe);
    if (dw) {
      im2col(x.data().data() + n * xs.c * xs.plane(), xs.c, g, col.data());
      ConstMatMap<T> cm(col.data(), Ke, Pe);
      MatMap<T> dwm(dw, Oe, Ke);
      dwm.noalias() += dym * cm.transpose();
    }
    if (db) {
      for (std::size_t o = 0; o < ws.n; ++o) db[o] += dym.row(static_cast<Eigen::Index>(o)).sum();
    }
    if (dx) {
      MatMap<T> cm(col.data(), Ke, Pe);
      cm.noalias() = wm.transpose() * dym;
      col2im(col.data(), xs.c, g, dx + n * xs.c * xs.plane());
    }
  }
}

// ---------------------------------------------------------------------------
// conv_transpose2d: weight (in, out, k, k), optional bias (1, out, 1, 1).
// Output extent = stride*(H-1) + k - 2*pad; the adjoint of conv2d with the
// same weight buffer read as (conv_out=in, conv_in=out, k, k).

inline std::ptrdiff_t conv_transpose_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                                std::size_t pad) {
  return static_cast<std::ptrdiff_t>(stride * (in - 1) + k) - static_cast<std::ptrdiff_t>(2 * pad);
}

template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& weight,
                                   const Tensor<T>* bias, std::size_t stride, std::size_t pad) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv_transpose2d: kernel must be square, got " + ws.str());
  if (xs.c != ws.n) {
    throw ShapeError("conv_transpose2d: input " + xs.str() + " has " + std::to_string(xs.c) +
                     " channels but kernel " + ws.str() + " expects " + std::to_string(ws.n));
  }
  if (stride == 0 || xs.h == 0 || xs.w == 0) throw ShapeError("conv_transpose2d: degenerate input " + xs.str());
  const auto oh = conv_transpose_out_extent(xs.h, ws.h, stride, pad);
  const auto ow = conv_transpose_out_extent(xs.w, ws.w, stride, pad);
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: zero-sized output for " + xs.str());
  const ConvGeometry g{static_cast<std::size_t>(oh), static_cast<std::size_t>(ow), ws.h, stride, pad,
                       xs.h, xs.w};
  // The equivalent conv must sweep exactly the input grid.
  if (conv_out_extent(g.in_h, g.k, stride, pad) != xs.h ||
      conv_out_extent(g.in_w, g.k, stride, pad) != xs.w) {
    throw ShapeError("conv_transpose2d: inconsistent geometry for " + xs.str());
  }
  Tensor<T> y({xs.n, ws.c, g.in_h, g.in_w});
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = xs.plane();
  std::vector<T> col(K * P);
  ConstMatMap<T> wm(weight.data().data(), static_cast<Eigen::Index>(ws.n), static_cast<Eigen::Index>(K));
  for (std::size_t n = 0; n < xs.n; ++n) {
    ConstMatMap<T> xm(x.data().data() + n * xs.c * P, static_cast<Eigen::Index>(xs.c),
                      static_cast<Eigen::Index>(P));
    MatMap<T> cm(col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
    cm.noalias() = wm.transpose() * xm;
    col2im(col.data(), ws.c, g, y.data().data() + n * ws.c * y.shape().plane());
  }
  if (bias) {
    const std::size_t yp = y.shape().plane();
    for (std::size_t n = 0; n < xs.n; ++n)
      for (std::size_t o = 0; o < ws.c; ++o) {
        T* p = y.data().data() + (n * ws.c + o) * yp;
        for (std::size_t i = 0; i < yp; ++i) p[i] += (*bias)[o];
      }
  }
  return y;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride,
                               std::size_t pad, const Shape& ys, const std::vector<T>& dy, T* dx,
                               T* dw, T* db) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const ConvGeometry g{ys.h, ys.w, ws.h, stride, pad, xs.h, xs.w};
  const std::size_t K = ws.c * ws.h * ws.w;
  const std::size_t P = xs.plane();
  const auto Ke = static_cast<Eigen::Index>(K);
  const auto Pe = static_cast<Eigen::Index>(P);
  const auto Ce = static_cast<Eigen::Index>(xs.c);
  std::vector<T> col(K * P);
  ConstMatMap<T> wm(weight.data().data(), Ce, Ke);
  for (std::size_t n = 0; n < xs.n; ++n) {
    const T* dyn = dy.data() + n * ys.c * ys.plane();
    im2col(dyn, ys.c, g, col.data());
    ConstMatMap<T> cm(col.data(), Ke, Pe);
    if (dx) {
      MatMap<T> dxm(dx + n * xs.c * P, Ce, Pe);
      dxm.noalias() += wm * cm;
    }
    if (dw) {
      ConstMatMap<T> xm(x.data().data() + n * xs.c * P, Ce, Pe);
      MatMap<T> dwm(dw, Ce, Ke);
      dwm.noalias() += xm * cm.transpose();
    }
    if (db) {
      for (std::size_t o = 0; o < ys.c; ++o) {
        const T* p = dyn + o * ys.plane();
        T s = 0;
        for (std::size_t i = 0; i < ys.plane(); ++i) s += p[i];
        db[o] += s;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Max pooling with a square window. Out-of-bounds (padded) positions never win.
// Ties resolve to the first maximum in row-major window order.

template <typename T>
struct PoolResult {
  Tensor<T> y;
  std::vector<std::size_t> argmax;  // flat index into x for each output element
};

template <typename T>
PoolResult<T> maxpool_forward(const Tensor<T>& x, std::size_t k, std::size_t stride,
                              std::size_t pad) {
  const Shape& xs = x.shape();
  const std::size_t oh = conv_out_extent(xs.h, k, stride, pad);
  const std::size_t ow = conv_out_extent(xs.w, k, stride, pad);
  if (oh == 0 || ow == 0) throw ShapeError("maxpool: zero-sized output for " + xs.str());
  PoolResult<T> r{Tensor<T>({xs.n, xs.c, oh, ow}), {}};
  r.argmax.resize(r.y.numel());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < xs.n * xs.c; ++nc) {
    const std::size_t base = nc * xs.plane();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = std::numeric_limits<std::size_t>::max();
        for (std::size_t ki = 0; ki < k; ++ki) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xs.h)) continue;
          for (std::size_t kj = 0; kj < k; ++kj) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(xs.w)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * xs.w + static_cast<std::size_t>(ix);
            if (best_i == std::numeric_limits<std::size_t>::max() || x[idx] > best) {
              best = x[idx];
              best_i = idx;
            }
          }
        }
        r.y[o] = best;
        r.argmax[o] = best_i;
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
struct BatchNormSaved {
  std::vector<T> xhat;
  std::vector<T> inv_std;  // per channel
};

template <typename T>
Tensor<T> batchnorm_train_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                                  double eps, BatchNormSaved<T>& saved, std::vector<double>& mean,
                                  std::vector<double>& var) {
  const Shape& s = x.shape();
  const std::size_t hw = s.plane();
  const double count = static_cast<double>(s.n * hw);
  mean.assign(s.c, 0.0);
  var.assign(s.c, 0.0);
  for (std::size_t c = 0; c < s.c; ++c) {
    double acc = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.data().data() + (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    }
    mean[c] = acc / count;
    double sq = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const T* p = x.data().data() + (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - mean[c];
        sq += d * d;
      }
    }
    var[c] = sq / count;
  }
  Tensor<T> y(s);
  saved.xhat.resize(x.numel());
  saved.inv_std.resize(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + eps);
    saved.inv_std[c] = static_cast<T>(inv);
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = static_cast<T>((x[off + i] - mean[c]) * inv);
        saved.xhat[off + i] = xh;
        y[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  return y;
}

template <typename T>
void batchnorm_train_backward(const Shape& s, const Tensor<T>& gamma, const BatchNormSaved<T>& saved,
                              const std::vector<T>& dy, T* dx, T* dgamma, T* dbeta) {
  const std::size_t hw = s.plane();
  const double count = static_cast<double>(s.n * hw);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum_dy += dy[off + i];
        sum_dy_xhat += static_cast<double>(dy[off + i]) * saved.xhat[off + i];
      }
    }
    if (dgamma) dgamma[c] += static_cast<T>(sum_dy_xhat);
    if (dbeta) dbeta[c] += static_cast<T>(sum_dy);
    if (dx) {
      const double scale = static_cast<double>(gamma[c]) * saved.inv_std[c] / count;
      for (std::size_t n = 0; n < s.n; ++n) {
        const std::size_t off = (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          dx[off + i] += static_cast<T>(
              scale * (count * dy[off + i] - sum_dy - saved.xhat[off + i] * sum_dy_xhat));
        }
      }
    }
  }
}

}  // namespace nabla::kernels
