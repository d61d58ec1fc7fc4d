#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "nabla/tensor.hpp"

namespace nabla {

/// Bias-corrected Adam. One moment pair per parameter tensor, in the order
/// the tensors are passed to step().
template <typename T>
class Adam {
 public:
  struct Options {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(Options opt) : opt_(opt) {}

  const Options& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::uint64_t steps() const { return step_; }

  /// Updates every tensor in place from its grad() buffer.
  void step(std::span<Tensor<T>* const> params) {
    if (first_.empty()) {
      for (const Tensor<T>* p : params) {
        first_.emplace_back(p->numel(), 0.0);
        second_.emplace_back(p->numel(), 0.0);
      }
    }
    if (first_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
    ++step_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T>& p = *params[k];
      if (first_[k].size() != p.numel()) throw ShapeError("adam: state does not match parameter " + p.shape().str());
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double gi = g[i];
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] = static_cast<T>(p[i] - opt_.lr * mhat / (std::sqrt(vhat) + opt_.eps));
      }
    }
  }

  const std::vector<std::vector<double>>& first_moments() const { return first_; }
  const std::vector<std::vector<double>>& second_moments() const { return second_; }

 private:
  Options opt_{};
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// Classical (non-Nesterov) momentum SGD: v <- mu*v + g; p <- p - lr*v.
template <typename T>
class SgdMomentum {
 public:
  struct Options {
    double lr = 0.01;
    double momentum = 0.9;
  };

  SgdMomentum() = default;
  explicit SgdMomentum(Options opt) : opt_(opt) {}

  const Options& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::uint64_t steps() const { return step_; }

  void step(std::span<Tensor<T>* const> params) {
    if (velocity_.empty()) {
      for (const Tensor<T>* p : params) velocity_.emplace_back(p->numel(), 0.0);
    }
    if (velocity_.size() != params.size()) throw ShapeError("sgd: parameter list changed between steps");
    ++step_;
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor<T>& p = *params[k];
      if (velocity_[k].size() != p.numel()) throw ShapeError("sgd: state does not match parameter " + p.shape().str());
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        v[i] = opt_.momentum * v[i] + g[i];
        p[i] = static_cast<T>(p[i] - opt_.lr * v[i]);
      }
    }
  }

  const std::vector<std::vector<double>>& velocity() const { return velocity_; }

 private:
  Options opt_{};
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> velocity_;
};

/// Step decay: initial / 10^floor(epoch / 50).
inline double lr_schedule(int epoch, double initial, int period = 50, double factor = 10.0) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: epoch must be non-negative");
  return initial / std::pow(factor, epoch / period);
}

}  // namespace nabla
