#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "nabla/tape.hpp"
#include "nabla/tensor.hpp"

namespace nabla {

/// Probabilities are clamped this far inside (0, 1) before taking logs.
inline constexpr double kProbClamp = 1e-7;

template <typename T>
T clamp_prob(T p) {
  return std::clamp(p, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
}

/// Mean binary cross entropy over every element. Targets must be exactly 0 or 1.
template <typename T>
Var bce_loss(Tape<T>& tape, Var pred, const Tensor<T>& target) {
  const Tensor<T>& p = tape.value(pred);
  if (p.shape() != target.shape()) {
    throw ShapeError("bce_loss: prediction " + p.shape().str() + " vs target " + target.shape().str());
  }
  double acc = 0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    const T t = target[i];
    if (t != T(0) && t != T(1)) throw std::invalid_argument("bce_loss: target values must be 0 or 1");
    const double q = clamp_prob(p[i]);
    acc -= t == T(1) ? std::log(q) : std::log(1.0 - q);
  }
  const double count = static_cast<double>(p.numel());
  return tape.push(OpKind::BceLoss, {pred}, Tensor<T>({1, 1, 1, 1}, static_cast<T>(acc / count)),
                   [pred, target, count](Tape<T>& t, const std::vector<T>& dy) {
                     const Tensor<T>& p = t.value(pred);
                     auto& dp = t.grad(pred);
                     for (std::size_t i = 0; i < dp.size(); ++i) {
                       const double q = clamp_prob(p[i]);
                       dp[i] += static_cast<T>(dy[0] * (q - target[i]) / (q * (1.0 - q)) / count);
                     }
                   });
}

/// Mean categorical cross entropy of probability rows (N x K x 1 x 1) against
/// class indices.
template <typename T>
Var cce_loss(Tape<T>& tape, Var pred, const std::vector<int>& labels) {
  const Tensor<T>& p = tape.value(pred);
  const Shape s = p.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("cce_loss: expected N x K x 1 x 1 rows, got " + s.str());
  if (labels.size() != s.n) {
    throw ShapeError("cce_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(s.n) + " rows");
  }
  double acc = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    if (labels[n] < 0 || static_cast<std::size_t>(labels[n]) >= s.c) {
      throw std::out_of_range("cce_loss: label " + std::to_string(labels[n]) + " outside [0, " +
                              std::to_string(s.c) + ")");
    }
    acc -= std::log(clamp_prob(static_cast<double>(p[n * s.c + static_cast<std::size_t>(labels[n])])));
  }
  const double count = static_cast<double>(s.n);
  return tape.push(OpKind::CceLoss, {pred}, Tensor<T>({1, 1, 1, 1}, static_cast<T>(acc / count)),
                   [pred, labels, s, count](Tape<T>& t, const std::vector<T>& dy) {
                     const Tensor<T>& p = t.value(pred);
                     auto& dp = t.grad(pred);
                     for (std::size_t n = 0; n < s.n; ++n) {
                       const std::size_t i = n * s.c + static_cast<std::size_t>(labels[n]);
                       dp[i] -= static_cast<T>(dy[0] / clamp_prob(static_cast<double>(p[i])) / count);
                     }
                   });
}

}  // namespace nabla
