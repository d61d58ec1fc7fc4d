#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nabla/ops.hpp"
#include "nabla/parameters.hpp"

namespace nabla {

/// Which nonlinearity follows a kernel; selects the initialization gain.
enum class Feeds { Relu, Linear };

template <typename T>
struct Conv {
  std::size_t weight = 0;
  std::optional<std::size_t> bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out,
                   std::size_t k, Feeds feeds = Feeds::Relu) {
    Conv c;
    c.weight = init.normal(name + ".weight", {out, in, k, k}, static_cast<double>(in * k * k),
                           feeds == Feeds::Relu ? 2.0 : 1.0);
    c.bias = init.constant(name + ".bias", {1, out, 1, 1}, T(0));
    c.pad = k / 2;
    return c;
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x) const {
    std::optional<Var> b;
    if (bias) b = tape.param(store.at(*bias));
    return conv2d(tape, x, tape.param(store.at(weight)), b, stride, pad);
  }
};

/// 2x2 stride-2 transposed convolution that doubles spatial extents.
template <typename T>
struct UpConv {
  std::size_t weight = 0;
  std::size_t bias = 0;

  static UpConv make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out) {
    UpConv u;
    // Each output pixel sees one kernel tap per input channel.
    u.weight = init.normal(name + ".weight", {in, out, 2, 2}, static_cast<double>(in), 1.0);
    u.bias = init.constant(name + ".bias", {1, out, 1, 1}, T(0));
    return u;
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x) const {
    return conv_transpose2d(tape, x, tape.param(store.at(weight)), tape.param(store.at(bias)), 2);
  }
};

template <typename T>
struct BatchNorm {
  struct Stats {
    std::size_t running_mean = 0, running_var = 0, tracked = 0;
  };
  std::size_t gamma = 0, beta = 0;
  /// One set of running statistics per call site sharing gamma/beta.
  std::vector<Stats> stats;

  static BatchNorm make(Initializer<T>& init, const std::string& name, std::size_t channels,
                        std::size_t stat_sets = 1) {
    BatchNorm b;
    const Shape s{1, channels, 1, 1};
    b.gamma = init.constant(name + ".gamma", s, T(1));
    b.beta = init.constant(name + ".beta", s, T(0));
    for (std::size_t k = 0; k < stat_sets; ++k) {
      const std::string prefix = stat_sets == 1 ? name : name + ".step" + std::to_string(k);
      b.stats.push_back({init.constant(prefix + ".running_mean", s, T(0), TensorKind::Buffer),
                         init.constant(prefix + ".running_var", s, T(1), TensorKind::Buffer),
                         init.constant(prefix + ".num_batches_tracked", {1, 1, 1, 1}, T(0), TensorKind::Buffer)});
    }
    return b;
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode, std::size_t set = 0) const {
    const Stats& st = stats.at(set);
    RunningStats<T> rs{store.at(st.running_mean), store.at(st.running_var), store.at(st.tracked)};
    return batchnorm2d(tape, x, tape.param(store.at(gamma)), tape.param(store.at(beta)), rs, mode);
  }
};

/// conv -> batchnorm -> relu
template <typename T>
struct ConvBnRelu {
  Conv<T> conv;
  BatchNorm<T> bn;

  static ConvBnRelu make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out,
                         std::size_t k) {
    return {Conv<T>::make(init, name + ".conv", in, out, k), BatchNorm<T>::make(init, name + ".bn", out)};
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode) const {
    return relu(tape, bn.forward(tape, store, conv.forward(tape, store, x), mode));
  }
};

/// Recurrent convolutional layer unrolled over `steps` time steps:
///   s_0 = relu(bn(ff * x)),  s_k = relu(bn(ff * x + rec * s_{k-1})).
/// The recurrent kernel and the batchnorm gamma/beta are shared by every step;
/// running statistics are tracked per step, since each step normalizes a
/// differently distributed input (drive alone, then drive plus feedback).
template <typename T>
struct RecurrentConv {
  Conv<T> ff;
  Conv<T> rec;
  BatchNorm<T> bn;
  int steps = 2;

  static RecurrentConv make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out,
                            int steps) {
    if (steps < 0) throw std::invalid_argument("recurrent conv: steps must be >= 0");
    return {Conv<T>::make(init, name + ".ff", in, out, 3), Conv<T>::make(init, name + ".rec", out, out, 3),
            BatchNorm<T>::make(init, name + ".bn", out, static_cast<std::size_t>(steps) + 1), steps};
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode) const {
    const Var drive = ff.forward(tape, store, x);
    Var s = relu(tape, bn.forward(tape, store, drive, mode));
    for (int k = 1; k <= steps; ++k) {
      const Var fb = rec.forward(tape, store, s);
      s = relu(tape, bn.forward(tape, store, add(tape, drive, fb), mode, static_cast<std::size_t>(k)));
    }
    return s;
  }
};

/// Two stacked recurrent conv layers around a residual connection. The skip
/// is the identity when widths agree, a 1x1 projection otherwise.
template <typename T>
struct RRCU {
  std::optional<Conv<T>> projection;
  RecurrentConv<T> first;
  RecurrentConv<T> second;
  std::size_t out_channels = 0;

  static RRCU make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out, int steps) {
    RRCU u;
    if (in != out) u.projection = Conv<T>::make(init, name + ".proj", in, out, 1, Feeds::Linear);
    u.first = RecurrentConv<T>::make(init, name + ".rcl0", out, out, steps);
    u.second = RecurrentConv<T>::make(init, name + ".rcl1", out, out, steps);
    u.out_channels = out;
    return u;
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode) const {
    const Var h = projection ? projection->forward(tape, store, x) : x;
    const Var y = second.forward(tape, store, first.forward(tape, store, h, mode), mode);
    return add(tape, h, y, "residual");
  }
};

/// Inception recurrent residual unit: four equal-width branches
/// (1x1 conv | 3x3 RCL | two stacked 3x3 RCLs | 3x3 maxpool + 1x1 conv)
/// concatenated and added to a 1x1 projection of the input.
template <typename T>
struct IRRU {
  ConvBnRelu<T> branch_a;
  RecurrentConv<T> branch_b;
  RecurrentConv<T> branch_c0;
  RecurrentConv<T> branch_c1;
  ConvBnRelu<T> branch_d;
  Conv<T> projection;
  std::size_t out_channels = 0;

  static IRRU make(Initializer<T>& init, const std::string& name, std::size_t in, std::size_t out, int steps) {
    if (out == 0 || out % 4 != 0) {
      throw std::invalid_argument("irru: output width " + std::to_string(out) + " is not divisible by 4");
    }
    const std::size_t q = out / 4;
    IRRU u;
    u.branch_a = ConvBnRelu<T>::make(init, name + ".a", in, q, 1);
    u.branch_b = RecurrentConv<T>::make(init, name + ".b", in, q, steps);
    u.branch_c0 = RecurrentConv<T>::make(init, name + ".c0", in, q, steps);
    u.branch_c1 = RecurrentConv<T>::make(init, name + ".c1", q, q, steps);
    u.branch_d = ConvBnRelu<T>::make(init, name + ".d", in, q, 1);
    u.projection = Conv<T>::make(init, name + ".proj", in, out, 1, Feeds::Linear);
    u.out_channels = out;
    return u;
  }

  Var forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode) const {
    const Var a = branch_a.forward(tape, store, x, mode);
    const Var b = branch_b.forward(tape, store, x, mode);
    const Var c = branch_c1.forward(tape, store, branch_c0.forward(tape, store, x, mode), mode);
    const Var d = branch_d.forward(tape, store, max_pool(tape, x, 3, 1, 1), mode);
    const Var cat = concat_channels(tape, concat_channels(tape, a, b), concat_channels(tape, c, d));
    return add(tape, projection.forward(tape, store, x), cat, "residual");
  }
};

struct StageFeature {
  Var tensor;
  std::size_t stage_index;
  std::size_t resolution;
};

/// Encoder: stage 0 = rrcu(x); stage i = rrcu(maxpool(stage i-1)).
template <typename T>
struct Encoder {
  std::vector<RRCU<T>> stages;

  static Encoder make(Initializer<T>& init, const std::string& name, std::size_t in_channels,
                      const std::vector<std::size_t>& widths, int steps) {
    Encoder e;
    std::size_t in = in_channels;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      e.stages.push_back(RRCU<T>::make(init, name + "." + std::to_string(i), in, widths[i], steps));
      in = widths[i];
    }
    return e;
  }

  std::vector<StageFeature> forward(Tape<T>& tape, ParameterStore<T>& store, Var x, Mode mode) const {
    const Shape s = tape.shape(x);
    const std::size_t div = std::size_t{1} << (stages.size() - 1);
    if (s.h % div != 0 || s.w % div != 0) {
      throw ShapeError("encoder: input " + s.str() + " not divisible by " + std::to_string(div));
    }
    std::vector<StageFeature> out;
    Var cur = x;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (i > 0) cur = maxpool2d(tape, cur);
      cur = stages[i].forward(tape, store, cur, mode);
      out.push_back({cur, i, tape.shape(cur).h});
    }
    return out;
  }
};

/// One decoding path from encoder stage `start_stage` back to full
/// resolution. Each level: 2x up-convolution, optional additive fusion with a
/// donor decoder's same-resolution output, concat with the encoder skip, RRCU.
template <typename T>
struct Decoder {
  struct Level {
    std::size_t stage = 0;  // resolution index this level produces
    UpConv<T> up;
    std::optional<Conv<T>> donor_projection;
    RRCU<T> rrcu;
  };

  std::size_t start_stage = 0;
  std::vector<Level> levels;  // deepest first

  struct Output {
    Var tensor;
    std::map<std::size_t, Var> by_stage;  // post-RRCU feature per level
  };

  /// `donor_widths` (possibly empty) lists the widths of the donor feature the
  /// additive fusion will receive at each stage; a projection is added when
  /// they differ from the recipient width.
  static Decoder make(Initializer<T>& init, const std::string& name, std::size_t start_stage,
                      const std::vector<std::size_t>& widths, int steps,
                      const std::map<std::size_t, std::size_t>& donor_widths = {}) {
    Decoder d;
    d.start_stage = start_stage;
    for (std::size_t r = start_stage; r-- > 0;) {
      const std::string ln = name + ".level" + std::to_string(r);
      Level lv;
      lv.stage = r;
      lv.up = UpConv<T>::make(init, ln + ".up", widths[r + 1], widths[r]);
      if (auto it = donor_widths.find(r); it != donor_widths.end() && it->second != widths[r]) {
        lv.donor_projection = Conv<T>::make(init, ln + ".donor_proj", it->second, widths[r], 1, Feeds::Linear);
      }
      lv.rrcu = RRCU<T>::make(init, ln + ".rrcu", 2 * widths[r], widths[r], steps);
      d.levels.push_back(std::move(lv));
    }
    return d;
  }

  std::size_t upsample_steps() const { return levels.size(); }

  Output forward(Tape<T>& tape, ParameterStore<T>& store, const std::vector<StageFeature>& skips,
                 const std::map<std::size_t, Var>& donors, Mode mode) const {
    if (start_stage >= skips.size()) throw ShapeError("decoder: start stage beyond encoder depth");
    Output out;
    Var cur = skips[start_stage].tensor;
    for (const Level& lv : levels) {
      Var up = lv.up.forward(tape, store, cur);
      if (auto it = donors.find(lv.stage); it != donors.end()) {
        Var donor = lv.donor_projection ? lv.donor_projection->forward(tape, store, it->second) : it->second;
        up = add(tape, up, donor, "fusion");
      }
      const auto skip = std::find_if(skips.begin(), skips.end(),
                                     [&](const StageFeature& f) { return f.stage_index == lv.stage; });
      if (skip == skips.end() || tape.shape(skip->tensor).h != tape.shape(up).h) {
        throw ShapeError("decoder: no encoder skip at resolution " + std::to_string(tape.shape(up).h));
      }
      cur = lv.rrcu.forward(tape, store, concat_channels(tape, up, skip->tensor), mode);
      out.by_stage.emplace(lv.stage, cur);
    }
    out.tensor = cur;
    return out;
  }
};

}  // namespace nabla
