#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nabla/tensor.hpp"

namespace nabla {

enum class TensorKind { Param, Buffer };

/// Ordered name -> tensor map. Trainable parameters and non-trainable buffers
/// (batchnorm running statistics) share one namespace; blocks refer to their
/// entries by index so a store can be copied or moved freely.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    TensorKind kind;
    Tensor<T> tensor;
  };

  std::size_t add(std::string name, TensorKind kind, Tensor<T> tensor) {
    if (index_.contains(name)) throw std::logic_error("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    if (kind == TensorKind::Param) tensor.set_requires_grad(true);
    entries_.push_back({std::move(name), kind, std::move(tensor)});
    return entries_.size() - 1;
  }

  Tensor<T>& at(std::size_t i) { return entries_.at(i).tensor; }
  const Tensor<T>& at(std::size_t i) const { return entries_.at(i).tensor; }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::span<Entry> entries() { return entries_; }
  std::span<const Entry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  /// Trainable tensors in registration order.
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& e : entries_)
      if (e.kind == TensorKind::Param) out.push_back(&e.tensor);
    return out;
  }

  std::size_t count_params() const {
    std::size_t total = 0;
    for (const auto& e : entries_)
      if (e.kind == TensorKind::Param) total += e.tensor.numel();
    return total;
  }

  std::size_t param_tensor_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.kind == TensorKind::Param;
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.kind == TensorKind::Param) e.tensor.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Registers freshly initialized tensors into a store: normal conv weights
/// with variance gain/fan_in, zero biases, unit gamma, zero beta,
/// unpopulated running stats.
template <typename T>
class Initializer {
 public:
  Initializer(ParameterStore<T>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  ParameterStore<T>& store() { return store_; }

  /// gain 2 (He) for kernels feeding a relu, 1 for kernels on a linear path
  /// (residual projections, up-convolutions, heads) so that stacked residual
  /// sums keep their variance instead of doubling per stage.
  std::size_t normal(const std::string& name, Shape shape, double fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    return store_.add(name, TensorKind::Param, std::move(t));
  }

  std::size_t he_normal(const std::string& name, Shape shape, double fan_in) {
    return normal(name, shape, fan_in, 2.0);
  }

  std::size_t constant(const std::string& name, Shape shape, T value,
                       TensorKind kind = TensorKind::Param) {
    return store_.add(name, kind, Tensor<T>(shape, value));
  }

 private:
  ParameterStore<T>& store_;
  std::mt19937_64 rng_;
};

}  // namespace nabla
