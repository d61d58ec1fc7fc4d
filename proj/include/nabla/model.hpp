#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nabla/blocks.hpp"
#include "nabla/ops.hpp"
#include "nabla/parameters.hpp"

namespace nabla {

enum class Family { Nabla, Irrcnn };
enum class Variant { A, B, AB };

inline std::string to_string(Family f) { return f == Family::Nabla ? "nabla" : "irrcnn"; }
inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::A: return "A";
    case Variant::B: return "B";
    case Variant::AB: return "AB";
  }
  return "?";
}
inline Family parse_family(const std::string& s) {
  if (s == "nabla") return Family::Nabla;
  if (s == "irrcnn") return Family::Irrcnn;
  throw std::invalid_argument("unknown model family '" + s + "' (expected nabla|irrcnn)");
}
inline Variant parse_variant(const std::string& s) {
  if (s == "A") return Variant::A;
  if (s == "B") return Variant::B;
  if (s == "AB") return Variant::AB;
  throw std::invalid_argument("unknown fusion variant '" + s + "' (expected A|B|AB)");
}

/// Declarative network description.
struct ModelSpec {
  Family family = Family::Nabla;
  Variant variant = Variant::AB;
  int n_decoders = 2;
  /// nabla: encoder stage widths. irrcnn: stem width then the three IRRU widths.
  std::vector<std::size_t> widths{16, 32, 64, 128, 256, 512};
  int t = 2;
  std::size_t input_size = 256;
  std::size_t in_channels = 3;
  std::size_t classes = 7;
  std::uint64_t seed = 0;

  static ModelSpec nabla(Variant v = Variant::AB, int n = 2) {
    ModelSpec s;
    s.variant = v;
    s.n_decoders = n;
    return s;
  }

  static ModelSpec irrcnn(std::size_t classes = 7) {
    ModelSpec s;
    s.family = Family::Irrcnn;
    s.widths = {64, 320, 640, 1280};
    s.input_size = 192;
    s.classes = classes;
    s.n_decoders = 0;
    return s;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid model spec: " + m); };
    if (widths.empty()) fail("widths must not be empty");
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] == 0) fail("widths must be positive");
      if (i > 0 && widths[i] <= widths[i - 1]) fail("widths must be strictly increasing");
    }
    if (t < 0) fail("recurrence steps t must be >= 0");
    if (in_channels == 0) fail("in_channels must be positive");
    if (family == Family::Nabla) {
      const std::size_t stages = widths.size();
      if (n_decoders < 1 || n_decoders > 4) {
        fail("variant " + to_string(variant) + " with N=" + std::to_string(n_decoders) + ": N must be in [1, 4]");
      }
      if (static_cast<std::size_t>(n_decoders) > stages) {
        fail("N=" + std::to_string(n_decoders) + " exceeds the " + std::to_string(stages) + " encoder stages");
      }
      const std::size_t min_size = std::size_t{1} << (stages - 1);
      if (input_size == 0 || (input_size & (input_size - 1)) != 0) fail("input size must be a power of two");
      if (input_size < min_size) fail("input size must be >= " + std::to_string(min_size));
    } else {
      if (widths.size() != 4) fail("irrcnn widths must be {stem, unit1, unit2, unit3}");
      for (std::size_t i = 1; i < 4; ++i)
        if (widths[i] % 4 != 0) fail("irrcnn unit widths must be divisible by 4");
      if (classes < 2) fail("classes must be >= 2");
      if (input_size == 0 || input_size % 8 != 0) fail("irrcnn input size must be divisible by 8");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"family", to_string(s.family)}, {"variant", to_string(s.variant)},
                     {"n_decoders", s.n_decoders},    {"widths", s.widths},
                     {"t", s.t},                      {"input_size", s.input_size},
                     {"in_channels", s.in_channels},  {"classes", s.classes},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  const Family family = parse_family(j.value("family", std::string("nabla")));
  s = family == Family::Nabla ? ModelSpec::nabla() : ModelSpec::irrcnn();
  if (j.contains("variant")) s.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("n_decoders")) s.n_decoders = j.at("n_decoders").get<int>();
  if (j.contains("widths")) s.widths = j.at("widths").get<std::vector<std::size_t>>();
  if (j.contains("t")) s.t = j.at("t").get<int>();
  if (j.contains("input_size")) s.input_size = j.at("input_size").get<std::size_t>();
  if (j.contains("in_channels")) s.in_channels = j.at("in_channels").get<std::size_t>();
  if (j.contains("classes")) s.classes = j.at("classes").get<std::size_t>();
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
}

/// Structural summary used for graph inspection.
struct Topology {
  enum class EdgeKind { EncoderConcat, DecoderAdd, OutputAdd };

  struct DecoderPath {
    int index;  // 1-based
    std::size_t start_stage;
    std::size_t upsample_steps;
  };

  struct Edge {
    EdgeKind kind;
    std::string from;
    std::string to;
    std::size_t stage;
  };

  std::vector<DecoderPath> decoders;
  std::vector<Edge> edges;

  std::size_t count(EdgeKind k) const {
    std::size_t n = 0;
    for (const auto& e : edges) n += e.kind == k;
    return n;
  }

  std::string describe() const {
    std::ostringstream os;
    for (const auto& d : decoders) {
      os << "decoder " << d.index << " start_stage=" << d.start_stage << " upsample_steps=" << d.upsample_steps << "\n";
    }
    for (const auto& e : edges) {
      const char* k = e.kind == EdgeKind::EncoderConcat ? "concat" : e.kind == EdgeKind::DecoderAdd ? "add" : "output_add";
      os << k << " " << e.from << " -> " << e.to << " @stage" << e.stage << "\n";
    }
    return os.str();
  }
};

template <typename T>
struct NablaGraph {
  Encoder<T> encoder;
  std::vector<Decoder<T>> decoders;  // decoders[k-1] is decoder k
  Conv<T> head;
  bool decoder_add = false;
  bool output_add = false;
};

template <typename T>
struct IrrcnnGraph {
  ConvBnRelu<T> stem;
  std::vector<IRRU<T>> units;
  Conv<T> head;
};

template <typename T>
class Model {
 public:
  Model(ModelSpec spec, ParameterStore<T> store, std::variant<NablaGraph<T>, IrrcnnGraph<T>> graph,
        Topology topology)
      : spec_(std::move(spec)), store_(std::move(store)), graph_(std::move(graph)), topology_(std::move(topology)) {}

  const ModelSpec& spec() const { return spec_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }
  const Topology& topology() const { return topology_; }
  const NablaGraph<T>* nabla() const { return std::get_if<NablaGraph<T>>(&graph_); }
  const IrrcnnGraph<T>* irrcnn() const { return std::get_if<IrrcnnGraph<T>>(&graph_); }

  std::vector<Tensor<T>*> parameters() { return store_.parameters(); }
  void zero_grad() { store_.zero_grad(); }

 private:
  ModelSpec spec_;
  ParameterStore<T> store_;
  std::variant<NablaGraph<T>, IrrcnnGraph<T>> graph_;
  Topology topology_;
};

/// Encoder with N decoders; decoder k starts from stage (deepest - k + 1).
/// Every variant carries encoder->decoder concat skips. B and AB add decoder
/// k+1's same-resolution output into decoder k after upsampling; AB also adds
/// neighbouring decoders' full-resolution outputs before the 1x1 head.
template <typename T>
Model<T> build_nabla_net(const ModelSpec& spec) {
  if (spec.family != Family::Nabla) throw std::invalid_argument("build_nabla_net: spec family is not nabla");
  spec.validate();
  ParameterStore<T> store;
  Initializer<T> init(store, spec.seed);
  NablaGraph<T> g;
  Topology topo;
  const std::size_t stages = spec.widths.size();
  const std::size_t n = static_cast<std::size_t>(spec.n_decoders);
  g.decoder_add = spec.variant != Variant::A && n > 1;
  g.output_add = spec.variant == Variant::AB && n > 1;
  g.encoder = Encoder<T>::make(init, "enc", spec.in_channels, spec.widths, spec.t);
  for (std::size_t k = 1; k <= n; ++k) {
    const std::size_t start = stages - k;
    std::map<std::size_t, std::size_t> donors;
    if (g.decoder_add && k < n) {
      // Decoder k+1 starts one stage shallower and produces stages start-2 .. 0.
      for (std::size_t r = 0; r + 1 < start; ++r) donors.emplace(r, spec.widths[r]);
    }
    const std::string name = "dec" + std::to_string(k);
    g.decoders.push_back(Decoder<T>::make(init, name, start, spec.widths, spec.t, donors));
    topo.decoders.push_back({static_cast<int>(k), start, start});
    for (std::size_t r = start; r-- > 0;) {
      topo.edges.push_back({Topology::EdgeKind::EncoderConcat, "enc" + std::to_string(r), name, r});
      if (donors.contains(r)) {
        topo.edges.push_back({Topology::EdgeKind::DecoderAdd, "dec" + std::to_string(k + 1), name, r});
      }
    }
  }
  if (g.output_add) {
    for (std::size_t k = 1; k < n; ++k) {
      topo.edges.push_back({Topology::EdgeKind::OutputAdd, "dec" + std::to_string(k + 1), "dec" + std::to_string(k), 0});
    }
  }
  g.head = Conv<T>::make(init, "head", n * spec.widths[0], 1, 1, Feeds::Linear);
  return Model<T>(spec, std::move(store), std::move(g), std::move(topo));
}

/// stem conv -> 3 x (IRRU -> 2x2 maxpool) -> global average pool -> 1x1 conv -> softmax.
template <typename T>
Model<T> build_irrcnn(const ModelSpec& spec) {
  if (spec.family != Family::Irrcnn) throw std::invalid_argument("build_irrcnn: spec family is not irrcnn");
  spec.validate();
  ParameterStore<T> store;
  Initializer<T> init(store, spec.seed);
  IrrcnnGraph<T> g;
  g.stem = ConvBnRelu<T>::make(init, "stem", spec.in_channels, spec.widths[0], 3);
  for (std::size_t i = 1; i < 4; ++i) {
    g.units.push_back(IRRU<T>::make(init, "irru" + std::to_string(i - 1), spec.widths[i - 1], spec.widths[i], spec.t));
  }
  g.head = Conv<T>::make(init, "head", spec.widths[3], spec.classes, 1, Feeds::Linear);
  return Model<T>(spec, std::move(store), std::move(g), Topology{});
}

template <typename T>
Model<T> build_model(const ModelSpec& spec) {
  return spec.family == Family::Nabla ? build_nabla_net<T>(spec) : build_irrcnn<T>(spec);
}

namespace detail {

inline void check_batch(const ModelSpec& spec, const Shape& s) {
  if (s.n == 0 || s.c != spec.in_channels || s.h != spec.input_size || s.w != spec.input_size) {
    throw ShapeError("batch " + s.str() + " does not match model input Nx" + std::to_string(spec.in_channels) + "x" +
                     std::to_string(spec.input_size) + "x" + std::to_string(spec.input_size));
  }
}

}  // namespace detail

/// Segmentation forward on a recorded tape; returns N x 1 x H x W probabilities.
template <typename T>
Var forward_segment(Tape<T>& tape, Model<T>& model, Var batch, Mode mode) {
  const NablaGraph<T>* g = model.nabla();
  if (!g) throw std::invalid_argument("forward_segment: model is not a segmentation network");
  detail::check_batch(model.spec(), tape.shape(batch));
  auto& store = model.store();
  const auto features = g->encoder.forward(tape, store, batch, mode);
  const std::size_t n = g->decoders.size();
  std::vector<Var> outputs(n);
  std::map<std::size_t, Var> donors;
  for (std::size_t k = n; k-- > 0;) {
    auto out = g->decoders[k].forward(tape, store, features, g->decoder_add ? donors : std::map<std::size_t, Var>{},
                                      mode);
    outputs[k] = out.tensor;
    donors = std::move(out.by_stage);
  }
  std::vector<Var> fused = outputs;
  if (g->output_add) {
    for (std::size_t k = 0; k + 1 < n; ++k) fused[k] = add(tape, outputs[k], outputs[k + 1], "output_fusion");
  }
  Var cat = fused[0];
  for (std::size_t k = 1; k < n; ++k) cat = concat_channels(tape, cat, fused[k]);
  return sigmoid(tape, g->head.forward(tape, store, cat));
}

/// Classification forward; returns N x K x 1 x 1 probability rows.
template <typename T>
Var forward_classify(Tape<T>& tape, Model<T>& model, Var batch, Mode mode) {
  const IrrcnnGraph<T>* g = model.irrcnn();
  if (!g) throw std::invalid_argument("forward_classify: model is not a classification network");
  detail::check_batch(model.spec(), tape.shape(batch));
  auto& store = model.store();
  Var x = g->stem.forward(tape, store, batch, mode);
  for (const auto& unit : g->units) x = maxpool2d(tape, unit.forward(tape, store, x, mode));
  return softmax(tape, g->head.forward(tape, store, global_avg_pool(tape, x)));
}

/// Convenience wrappers that run on a throwaway non-recording tape.
template <typename T>
Tensor<T> forward_segment(Model<T>& model, const Tensor<T>& batch, Mode mode) {
  Tape<T> tape(false);
  return tape.value(forward_segment(tape, model, tape.leaf(batch), mode));
}

template <typename T>
Tensor<T> forward_classify(Model<T>& model, const Tensor<T>& batch, Mode mode) {
  Tape<T> tape(false);
  return tape.value(forward_classify(tape, model, tape.leaf(batch), mode));
}

template <typename T>
std::size_t count_params(const Model<T>& model) {
  return model.store().count_params();
}

}  // namespace nabla
