#pragma once

// Differentiable primitives. Each op computes its forward value eagerly and
// records a closure that maps dL/d(output) onto dL/d(inputs). Closures look
// values up through the tape by id; the node vector may grow while recording.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "nabla/kernels.hpp"
#include "nabla/tape.hpp"
#include "nabla/tensor.hpp"

namespace nabla {

enum class Mode { Train, Infer };
enum class Activation { Relu, Sigmoid };

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, std::size_t stride,
           std::size_t pad) {
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  const Tensor<T>* b = bias ? &tape.value(*bias) : nullptr;
  Tensor<T> y = kernels::conv2d_forward(tape.value(x), tape.value(weight), b, stride, pad);
  std::vector<Var> ins{x, weight};
  if (bias) ins.push_back(*bias);
  return tape.push(OpKind::Conv2d, ins, std::move(y),
                   [x, weight, bias, stride, pad](Tape<T>& t, const std::vector<T>& dy) {
                     T* dx = t.needs_grad(x) ? t.grad(x).data() : nullptr;
                     T* dw = t.needs_grad(weight) ? t.grad(weight).data() : nullptr;
                     T* db = (bias && t.needs_grad(*bias)) ? t.grad(*bias).data() : nullptr;
                     kernels::conv2d_backward(t.value(x), t.value(weight), stride, pad, dy, dx, dw, db);
                   });
}

/// Transposed convolution with explicit stride and padding (any geometry).
template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, std::size_t stride,
                     std::size_t pad) {
  const Tensor<T>* b = bias ? &tape.value(*bias) : nullptr;
  Tensor<T> y = kernels::conv_transpose2d_forward(tape.value(x), tape.value(weight), b, stride, pad);
  const Shape ys = y.shape();
  std::vector<Var> ins{x, weight};
  if (bias) ins.push_back(*bias);
  return tape.push(OpKind::ConvTranspose2d, ins, std::move(y),
                   [x, weight, bias, stride, pad, ys](Tape<T>& t, const std::vector<T>& dy) {
                     T* dx = t.needs_grad(x) ? t.grad(x).data() : nullptr;
                     T* dw = t.needs_grad(weight) ? t.grad(weight).data() : nullptr;
                     T* db = (bias && t.needs_grad(*bias)) ? t.grad(*bias).data() : nullptr;
                     kernels::conv_transpose2d_backward(t.value(x), t.value(weight), stride, pad, ys,
                                                        dy, dx, dw, db);
                   });
}

/// Padding that makes a transposed convolution exactly double its input, or
/// nullopt when the kernel/stride pair cannot.
inline std::optional<std::size_t> doubling_padding(std::size_t k, std::size_t stride) {
  if (stride != 2 || k < stride || (k - stride) % 2 != 0) return std::nullopt;
  return (k - stride) / 2;
}

/// Decoder upsampling: output extents are exactly 2H x 2W.
template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, std::optional<Var> bias, std::size_t stride) {
  const std::size_t k = tape.shape(weight).h;
  const auto pad = doubling_padding(k, stride);
  if (!pad) {
    throw ShapeError("conv_transpose2d: kernel " + tape.shape(weight).str() + " with stride " +
                     std::to_string(stride) + " cannot double the spatial size");
  }
  return conv_transpose2d(tape, x, weight, bias, stride, *pad);
}

template <typename T>
Var max_pool(Tape<T>& tape, Var x, std::size_t k, std::size_t stride, std::size_t pad) {
  auto r = kernels::maxpool_forward(tape.value(x), k, stride, pad);
  return tape.push(OpKind::MaxPool, {x}, std::move(r.y),
                   [x, argmax = std::move(r.argmax)](Tape<T>& t, const std::vector<T>& dy) {
                     auto& dx = t.grad(x);
                     for (std::size_t i = 0; i < dy.size(); ++i) dx[argmax[i]] += dy[i];
                   });
}

/// 2x2 window, stride 2.
template <typename T>
Var maxpool2d(Tape<T>& tape, Var x) {
  const Shape& s = tape.shape(x);
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial extents must be even, got " + s.str());
  }
  return max_pool(tape, x, 2, 2, 0);
}

/// Running statistics owned by a batchnorm layer. `tracked` counts the train
/// batches seen; a zero count means the stats are unpopulated.
template <typename T>
struct RunningStats {
  Tensor<T>& mean;
  Tensor<T>& var;
  Tensor<T>& tracked;

  bool populated() const { return tracked[0] > T(0); }
};

template <typename T>
Var batchnorm2d(Tape<T>& tape, Var x, Var gamma, Var beta, RunningStats<T> stats, Mode mode) {
  const Shape& s = tape.shape(x);
  if (tape.value(gamma).numel() != s.c || tape.value(beta).numel() != s.c) {
    throw ShapeError("batchnorm2d: gamma/beta length does not match channels of " + s.str());
  }
  if (mode == Mode::Train) {
    kernels::BatchNormSaved<T> saved;
    std::vector<double> mean, var;
    Tensor<T> y = kernels::batchnorm_train_forward(tape.value(x), tape.value(gamma), tape.value(beta),
                                                   kBatchNormEps, saved, mean, var);
    const bool first = !stats.populated();
    for (std::size_t c = 0; c < s.c; ++c) {
      if (first) {
        stats.mean[c] = static_cast<T>(mean[c]);
        stats.var[c] = static_cast<T>(var[c]);
      } else {
        stats.mean[c] = static_cast<T>(kBatchNormMomentum * stats.mean[c] + (1 - kBatchNormMomentum) * mean[c]);
        stats.var[c] = static_cast<T>(kBatchNormMomentum * stats.var[c] + (1 - kBatchNormMomentum) * var[c]);
      }
    }
    stats.tracked[0] += T(1);
    const Shape shape = s;
    return tape.push(OpKind::BatchNorm, {x, gamma, beta}, std::move(y),
                     [x, gamma, beta, shape, saved = std::move(saved)](Tape<T>& t, const std::vector<T>& dy) {
                       T* dx = t.needs_grad(x) ? t.grad(x).data() : nullptr;
                       T* dg = t.needs_grad(gamma) ? t.grad(gamma).data() : nullptr;
                       T* db = t.needs_grad(beta) ? t.grad(beta).data() : nullptr;
                       kernels::batchnorm_train_backward(shape, t.value(gamma), saved, dy, dx, dg, db);
                     });
  }
  if (!stats.populated()) throw std::logic_error("batchnorm2d: inference requested with unpopulated running stats");
  const Tensor<T>& xv = tape.value(x);
  const Tensor<T>& g = tape.value(gamma);
  const Tensor<T>& b = tape.value(beta);
  std::vector<T> scale(s.c), shift(s.c), inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(stats.var[c]) + kBatchNormEps);
    inv_std[c] = static_cast<T>(inv);
    scale[c] = static_cast<T>(g[c] * inv);
    shift[c] = static_cast<T>(b[c] - g[c] * stats.mean[c] * inv);
  }
  Tensor<T> y(s);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::size_t off = (n * s.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) y[off + i] = xv[off + i] * scale[c] + shift[c];
    }
  std::vector<T> mean(stats.mean.data().begin(), stats.mean.data().end());
  return tape.push(OpKind::BatchNorm, {x, gamma, beta}, std::move(y),
                   [x, gamma, beta, scale, inv_std, mean](Tape<T>& t, const std::vector<T>& dy) {
                     const Shape& s = t.shape(x);
                     const std::size_t hw = s.plane();
                     const Tensor<T>& xv = t.value(x);
                     for (std::size_t n = 0; n < s.n; ++n)
                       for (std::size_t c = 0; c < s.c; ++c) {
                         const std::size_t off = (n * s.c + c) * hw;
                         for (std::size_t i = 0; i < hw; ++i) {
                           if (t.needs_grad(x)) t.grad(x)[off + i] += dy[off + i] * scale[c];
                           if (t.needs_grad(gamma)) t.grad(gamma)[c] += dy[off + i] * (xv[off + i] - mean[c]) * inv_std[c];
                           if (t.needs_grad(beta)) t.grad(beta)[c] += dy[off + i];
                         }
                       }
                   });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  return tape.push(OpKind::Relu, {x}, std::move(y), [x](Tape<T>& t, const std::vector<T>& dy) {
    const Tensor<T>& xv = t.value(x);
    auto& dx = t.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (xv[i] > T(0)) dx[i] += dy[i];
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

/// Output is kept strictly inside (0, 1): in float, sigmoid(17) already
/// rounds to 1. The clamped extremes keep a tiny nonzero derivative.
template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
  Tensor<T> y = tape.value(x);
  const T lo = std::numeric_limits<T>::min();
  const T hi = std::nextafter(T(1), T(0));
  for (auto& v : y.data()) v = std::clamp(sigmoid_scalar(v), lo, hi);
  return tape.push(OpKind::Sigmoid, {x}, std::move(y), [x, id = tape.size()](Tape<T>& t, const std::vector<T>& dy) {
    const Tensor<T>& yv = t.value(Var{id});
    auto& dx = t.grad(x);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <typename T>
Var activation(Tape<T>& tape, Var x, Activation kind) {
  return kind == Activation::Relu ? relu(tape, x) : sigmoid(tape, x);
}

/// Softmax across the channel axis at every (n, h, w) position.
template <typename T>
Var softmax(Tape<T>& tape, Var x) {
  const Shape s = tape.shape(x);
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y(s);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, xv[(n * s.c + c) * hw + p]);
      T z = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const std::size_t i = (n * s.c + c) * hw + p;
        y[i] = std::exp(xv[i] - mx);
        z += y[i];
      }
      for (std::size_t c = 0; c < s.c; ++c) y[(n * s.c + c) * hw + p] /= z;
    }
  return tape.push(OpKind::Softmax, {x}, std::move(y), [x, s, id = tape.size()](Tape<T>& t, const std::vector<T>& dy) {
    const Tensor<T>& yv = t.value(Var{id});
    auto& dx = t.grad(x);
    const std::size_t hw = s.plane();
    for (std::size_t n = 0; n < s.n; ++n)
      for (std::size_t p = 0; p < hw; ++p) {
        T inner = 0;
        for (std::size_t c = 0; c < s.c; ++c) {
          const std::size_t i = (n * s.c + c) * hw + p;
          inner += dy[i] * yv[i];
        }
        for (std::size_t c = 0; c < s.c; ++c) {
          const std::size_t i = (n * s.c + c) * hw + p;
          dx[i] += yv[i] * (dy[i] - inner);
        }
      }
  });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const Shape sa = tape.shape(a);
  const Shape sb = tape.shape(b);
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels: cannot concatenate " + sa.str() + " with " + sb.str());
  }
  Tensor<T> y({sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t hw = sa.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy_n(tape.value(a).data().begin() + n * sa.c * hw, sa.c * hw, y.data().begin() + n * (sa.c + sb.c) * hw);
    std::copy_n(tape.value(b).data().begin() + n * sb.c * hw, sb.c * hw,
                y.data().begin() + (n * (sa.c + sb.c) + sa.c) * hw);
  }
  return tape.push(OpKind::Concat, {a, b}, std::move(y), [a, b, sa, sb](Tape<T>& t, const std::vector<T>& dy) {
    const std::size_t hw = sa.plane();
    for (std::size_t n = 0; n < sa.n; ++n) {
      const std::size_t base = n * (sa.c + sb.c) * hw;
      if (t.needs_grad(a)) {
        auto& da = t.grad(a);
        for (std::size_t i = 0; i < sa.c * hw; ++i) da[n * sa.c * hw + i] += dy[base + i];
      }
      if (t.needs_grad(b)) {
        auto& db = t.grad(b);
        for (std::size_t i = 0; i < sb.c * hw; ++i) db[n * sb.c * hw + i] += dy[base + sa.c * hw + i];
      }
    }
  });
}

/// Elementwise sum. `tag` labels the record for graph inspection.
template <typename T>
Var add(Tape<T>& tape, Var a, Var b, std::string tag = {}) {
  if (tape.shape(a) != tape.shape(b)) {
    throw ShapeError("add: shape mismatch " + tape.shape(a).str() + " vs " + tape.shape(b).str());
  }
  Tensor<T> y = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
  return tape.push(
      OpKind::Add, {a, b}, std::move(y),
      [a, b](Tape<T>& t, const std::vector<T>& dy) {
        if (t.needs_grad(a)) {
          auto& da = t.grad(a);
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (t.needs_grad(b)) {
          auto& db = t.grad(b);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
        }
      },
      std::move(tag));
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  if (tape.shape(a) != tape.shape(b)) {
    throw ShapeError("mul: shape mismatch " + tape.shape(a).str() + " vs " + tape.shape(b).str());
  }
  Tensor<T> y = tape.value(a);
  const Tensor<T>& bv = tape.value(b);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= bv[i];
  return tape.push(OpKind::Mul, {a, b}, std::move(y), [a, b](Tape<T>& t, const std::vector<T>& dy) {
    const Tensor<T>& av = t.value(a);
    const Tensor<T>& bv = t.value(b);
    if (t.needs_grad(a)) {
      auto& da = t.grad(a);
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& db = t.grad(b);
      for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var global_avg_pool(Tape<T>& tape, Var x) {
  const Shape s = tape.shape(x);
  if (s.h == 0 || s.w == 0) throw ShapeError("global_avg_pool: empty spatial extent " + s.str());
  const Tensor<T>& xv = tape.value(x);
  Tensor<T> y({s.n, s.c, 1, 1});
  const std::size_t hw = s.plane();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += xv[nc * hw + i];
    y[nc] = acc / static_cast<T>(hw);
  }
  return tape.push(OpKind::GlobalAvgPool, {x}, std::move(y), [x, s](Tape<T>& t, const std::vector<T>& dy) {
    auto& dx = t.grad(x);
    const std::size_t hw = s.plane();
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
      const T g = dy[nc] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) dx[nc * hw + i] += g;
    }
  });
}

/// Sum of all elements as a 1x1x1x1 scalar.
template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T acc = 0;
  for (T v : tape.value(x).data()) acc += v;
  return tape.push(OpKind::Sum, {x}, Tensor<T>({1, 1, 1, 1}, acc), [x](Tape<T>& t, const std::vector<T>& dy) {
    auto& dx = t.grad(x);
    for (auto& v : dx) v += dy[0];
  });
}

}  // namespace nabla
