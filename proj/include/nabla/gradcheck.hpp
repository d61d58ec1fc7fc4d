#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nabla/tape.hpp"
#include "nabla/tensor.hpp"

namespace nabla {

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-4;
  /// Denominator floor for the relative error: gradients smaller than this
  /// (e.g. exactly zero for a bias feeding train-mode batchnorm) are compared
  /// absolutely, against tol * floor.
  double floor = 1e-4;
  /// An element that fails at `step` is re-measured at step/10, step/100, ...
  /// A relu or max-pool switch inside the +-step window corrupts one step
  /// size only; a wrong gradient fails at every step.
  int refinements = 2;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
  std::size_t refined = 0;  // elements that needed a smaller step
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool passed = true;
  std::string failure;  // set when a non-finite value was encountered

  std::string summary() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error;
    for (const auto& e : entries) {
      os << "\n  " << e.name << ": " << e.max_rel_error << " @" << e.worst_index << " (analytic " << e.analytic
         << ", numeric " << e.numeric << ")";
      if (e.refined) os << " refined=" << e.refined;
    }
    if (!failure.empty()) os << "\n  " << failure;
    return os.str();
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central-difference check of every element of every tensor in `wrt`.
/// `loss_fn` must build its computation on the given tape (registering the
/// checked tensors through Tape::param) and return a scalar.
using LossFn = std::function<Var(Tape<double>&)>;

inline GradCheckReport grad_check(const LossFn& loss_fn,
                                  const std::vector<std::pair<std::string, Tensor<double>*>>& wrt,
                                  GradCheckOptions opt = {}) {
  GradCheckReport report;
  for (auto& [name, t] : wrt) {
    t->grad();
    t->zero_grad();
  }
  {
    Tape<double> tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(tape.value(loss)[0])) {
      report.passed = false;
      report.failure = "non-finite loss at the unperturbed point";
      return report;
    }
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    return tape.value(loss_fn(tape))[0];
  };
  for (auto& [name, t] : wrt) {
    GradCheckEntry e;
    e.name = name;
    const std::vector<double> analytic = t->grad();
    for (std::size_t i = 0; i < t->numel(); ++i) {
      const double orig = (*t)[i];
      double numeric = 0, err = std::numeric_limits<double>::infinity();
      bool finite = std::isfinite(analytic[i]);
      double h = opt.step;
      for (int r = 0; finite && r <= opt.refinements && err > opt.tol; ++r, h /= 10) {
        (*t)[i] = orig + h;
        const double up = eval();
        (*t)[i] = orig - h;
        const double down = eval();
        (*t)[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down)) {
          finite = false;
          break;
        }
        const double n = (up - down) / (2 * h);
        const double eh = relative_error(analytic[i], n, opt.floor);
        if (r > 0 && eh < err) ++e.refined;
        if (eh < err) {
          err = eh;
          numeric = n;
        }
      }
      if (!finite) {
        report.passed = false;
        report.failure = "non-finite value at " + name + "[" + std::to_string(i) + "]";
        e.max_rel_error = std::numeric_limits<double>::infinity();
        e.worst_index = i;
        break;
      }
      if (i == 0 || err > e.max_rel_error) {
        e.max_rel_error = err;
        e.worst_index = i;
        e.analytic = analytic[i];
        e.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  if (report.max_rel_error > opt.tol) report.passed = false;
  return report;
}

}  // namespace nabla
